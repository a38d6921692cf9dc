import numpy as np
import pytest

from hemisit import ops
from hemisit.tensor import Tape, Tensor


def fd_grad(fn, tensors, h=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(t.shape))
    return grads


def tape_grad(fn, tensors):
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [np.zeros(t.shape) if t.grad is None else t.grad for t in tensors]


def rel_err(a, b):
    num = max(np.max(np.abs(x - y)) for x, y in zip(a, b))
    den = max(max(np.max(np.abs(x)) for x in a), max(np.max(np.abs(y)) for y in b))
    return num / den


def grad_error(fn, tensors):
    return rel_err(tape_grad(fn, tensors), fd_grad(fn, tensors))


def probe(f, shape, rng):
    r = Tensor(rng.standard_normal(shape))
    return lambda: ops.sum(ops.mul(f(), r))


def param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sampled_grad_error(fn, tensors, rng, k=6, h=1e-5):
    """Like :func:`grad_error` but compares only ``k`` random entries per tensor."""
    analytic = tape_grad(fn, tensors)
    a_vals, n_vals = [], []
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(k, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            a_vals.append(g.reshape(-1)[i])
            n_vals.append((fp - fm) / (2 * h))
    return rel_err([np.array(a_vals)], [np.array(n_vals)])


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
