"""Central finite-difference gradient checks for the tape."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor

H = 1e-5


def numerical_grad(fn, tensors, h=H):
    """d(fn())/d(t) by central differences for every ``t`` in ``tensors``.

    ``fn`` must return a scalar Tensor and read the tensors' current data.
    """
    out = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def max_relative_error(a, n):
    """``max|a - n| / max(max|a|, max|n|)`` over all entries of all tensors."""
    num = max(float(np.max(np.abs(x - y))) if x.size else 0.0 for x, y in zip(a, n))
    den = max(max(float(np.max(np.abs(x))) if x.size else 0.0 for x in a),
              max(float(np.max(np.abs(y))) if y.size else 0.0 for y in n))
    return num / den if den > 0 else num


def check(fn, tensors, h=H):
    """Relative error between tape gradients and finite differences."""
    return max_relative_error(analytic_grad(fn, tensors), numerical_grad(fn, tensors, h))


def projected(f, shape, rng):
    """Scalar probe ``sum(r * f())`` with a fixed random ``r`` of ``shape``."""
    from . import ops

    r = Tensor(rng.standard_normal(shape))
    return lambda: ops.sum(ops.mul(f(), r))
