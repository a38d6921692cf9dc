"""Symmetry Interactive Transformer.

Each unit lets the left and right token streams attend to each other.
Attention logits carry an extra per-key bias: the cosine similarity
between corresponding left/right tokens (the HemiSim matrix), weighted by
a learnable scalar ``beta`` next to the learnable scale ``alpha`` on the
dot-product term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor

MLP_HIDDEN = 256


@dataclass
class SITConfig:
    n_units: int = 5
    n_heads: int = 4
    d_model: int = 128
    # "cross": queries from one side, keys/values from the other; "self": same side
    mode: str = "cross"
    use_hsm: bool = True

    def __post_init__(self):
        if self.n_units < 0:
            raise ConfigurationError("n_units must be >= 0")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.mode not in ("cross", "self"):
            raise ConfigurationError(f"unknown attention mode {self.mode!r}")

    @property
    def d_head(self):
        return self.d_model // self.n_heads


def hemisim(left: Tensor, right: Tensor) -> Tensor:
    """Per-patch cosine similarity of ``[B, N, C]`` token sequences -> ``[B, N]``."""
    return ops.cosine_similarity(left, right)


def residual_gain(n_units):
    # branch outputs shrink with depth so the un-normalised residual stream stays O(1)
    return 1.0 / (2 * max(n_units, 1))


class AttentionParams(Module):
    def __init__(self, rng, d, out_gain=1.0):
        self.q = Linear(rng, d, d, gain=1.0)
        self.k = Linear(rng, d, d, gain=1.0)
        self.v = Linear(rng, d, d, gain=1.0)
        self.o = Linear(rng, d, d, gain=out_gain)


def _split_heads(x: Tensor, h):
    B, N, C = x.shape
    return ops.transpose(ops.reshape(x, (B, N, h, C // h)), (0, 2, 1, 3))


def hemifuse_attention(q_side: Tensor, kv_side: Tensor, hsm, params: AttentionParams,
                       alpha: Tensor, beta, n_heads: int, return_weights=False):
    """softmax((alpha * Q K^T + beta * HSM[key]) / sqrt(d_h)) V, heads merged and projected.

    ``hsm`` of shape ``[B, N]`` is added to logit column ``j`` for every query
    row and head.  Pass ``hsm=None`` to drop the bias term entirely.
    """
    B, N, C = q_side.shape
    if C % n_heads:
        raise ConfigurationError(f"d_model={C} is not divisible by n_heads={n_heads}")
    dh = C // n_heads
    Q = _split_heads(params.q(q_side), n_heads)
    K = _split_heads(params.k(kv_side), n_heads)
    V = _split_heads(params.v(kv_side), n_heads)
    logits = ops.mul(alpha, ops.matmul(Q, ops.transpose(K, (0, 1, 3, 2))))
    if hsm is not None:
        logits = ops.add(logits, ops.mul(beta, ops.reshape(hsm, (B, 1, 1, N))))
    weights = ops.softmax(ops.scale(logits, 1.0 / np.sqrt(dh)), axis=-1)
    ctx = ops.matmul(weights, V)
    merged = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, N, C))
    out = params.o(merged)
    return (out, weights) if return_weights else out


class SIUnit(Module):
    """One bidirectional unit: F = Attention + f; G = MLP(LN(F)) + F per stream."""

    def __init__(self, rng, cfg: SITConfig):
        d = cfg.d_model
        self.cfg = cfg
        out_gain = residual_gain(cfg.n_units)
        self.left = AttentionParams(rng, d, out_gain)
        self.right = AttentionParams(rng, d, out_gain)
        self.alpha = Tensor(np.array(1.0), requires_grad=True)
        self.beta = Tensor(np.array(0.0), requires_grad=cfg.use_hsm)
        self.ln = LayerNorm(d)
        self.mlp = MLP(rng, d, MLP_HIDDEN, out_gain)

    def _stream(self, x, attn):
        f = ops.add(attn, x)
        return ops.add(self.mlp(self.ln(f)), f)

    def __call__(self, left: Tensor, right: Tensor, return_weights=False):
        cfg = self.cfg
        if left.shape != right.shape:
            raise ConfigurationError(f"stream shapes differ: {left.shape} vs {right.shape}")
        if cfg.mode == "self":
            kv_l, kv_r, hsm = left, right, None
        else:
            kv_l, kv_r = right, left
            hsm = hemisim(left, right) if cfg.use_hsm else None
        a_l, w_l = hemifuse_attention(left, kv_l, hsm, self.left, self.alpha, self.beta, cfg.n_heads, True)
        a_r, w_r = hemifuse_attention(right, kv_r, hsm, self.right, self.alpha, self.beta, cfg.n_heads, True)
        out = self._stream(left, a_l), self._stream(right, a_r)
        if return_weights:
            return out, (w_l, w_r)
        return out

    def tie_directions(self):
        """Copy the left-query projections onto the right-query ones."""
        for name in ("q", "k", "v", "o"):
            src, dst = getattr(self.left, name), getattr(self.right, name)
            dst.weight.data = src.weight.data.copy()
            dst.bias.data = src.bias.data.copy()


class MLP(Module):
    def __init__(self, rng, d, hidden, out_gain=1.0):
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d, gain=out_gain)

    def __call__(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


class SIT(Module):
    def __init__(self, rng, cfg: SITConfig):
        self.cfg = cfg
        for i in range(cfg.n_units):
            setattr(self, f"unit{i}", SIUnit(rng, cfg))

    @property
    def units(self):
        return [getattr(self, f"unit{i}") for i in range(self.cfg.n_units)]

    def __call__(self, left: Tensor, right: Tensor):
        return sit_forward(left, right, self)


def sit_forward(left: Tensor, right: Tensor, sit: SIT):
    """Apply every unit in order; HSM is recomputed inside each unit."""
    for unit in sit.units:
        left, right = unit(left, right)
    return left, right
