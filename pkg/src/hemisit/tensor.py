"""Dense float64 tensors with a tape for reverse-mode differentiation."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NonFiniteError

_state = threading.local()


class Tensor:
    """A float64 array that may take part in differentiation.

    ``requires_grad`` marks leaves we want gradients for (parameters) and is
    inherited by every tensor computed from them while a :class:`Tape` is
    active.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _lift(other))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Append-only record of differentiable ops, in execution order.

    Use as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients append a :class:`Node`.  Nodes are appended
    after their inputs exist, so list order is a topological order.
    """

    nodes: list = field(default_factory=list)
    visits: int = 0

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None, accumulate=True, write=True):
        """Propagate d(loss) back through the recorded nodes.

        Every tensor with ``requires_grad`` reached by the sweep gets ``.grad``
        set (added to an existing buffer when ``accumulate``) unless ``write``
        is false.  Returns the gradients keyed by ``id(tensor)``.
        """
        grads = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)}
        keep = {id(loss): loss}
        self.visits = 0
        for node in reversed(self.nodes):
            self.visits += 1
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = t
        if not write:
            return grads
        for key, t in keep.items():
            g = grads[key]
            if accumulate and t.grad is not None:
                t.grad = t.grad + g
            else:
                t.grad = g
        return grads


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def emit(op: str, data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Wrap an op result, check finiteness and record it on the active tape."""
    if not np.all(np.isfinite(data)):
        names = [t.name for t in inputs if t.name]
        raise NonFiniteError(f"non-finite values produced by {op}" + (f" (inputs: {', '.join(names)})" if names else ""))
    needs = any(t.requires_grad for t in inputs)
    tape = active_tape() if needs else None
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.nodes.append(Node(op, inputs, out, vjp))
    return out
