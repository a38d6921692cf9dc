"""Parameter containers shared by the encoder, transformer and heads."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in, gain=2.0) -> Tensor:
    """N(0, gain / fan_in); gain 2 suits maps followed by ReLU, 1 preserves variance."""
    return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Attribute-walking container.

    Trainable tensors and submodules are discovered from instance attributes
    in assignment order; names in ``_buffers`` are numpy arrays that travel
    with checkpoints but are not trained.
    """

    _buffers: tuple = ()
    training = True

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self, prefix=""):
        """All parameters and buffers as ``name -> ndarray`` (copies)."""
        out = {n: p.data.copy() for n, p in self.named_parameters(prefix)}
        out.update({n: np.array(b, copy=True) for n, b in self.named_buffers(prefix)})
        return out

    def load_state_dict(self, state, prefix="", strict=True):
        params = dict(self.named_parameters(prefix))
        buffers = dict(self.named_buffers(prefix))
        missing = (set(params) | set(buffers)) - set(state)
        if strict and missing:
            raise KeyError(f"missing entries: {sorted(missing)}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
                p.data = arr.copy()
        for name, b in buffers.items():
            if name in state:
                b[...] = state[name]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, rng, fan_in, fan_out, gain=2.0):
        self.weight = he_normal(rng, (fan_in, fan_out), fan_in, gain)
        self.bias = zeros((fan_out,))

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, width):
        self.gamma = ones((width,))
        self.beta = zeros((width,))

    def __call__(self, x):
        return ops.layernorm(x, self.gamma, self.beta)
