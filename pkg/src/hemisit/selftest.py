"""Small invariant and gradient suite runnable without pytest (``hemisit selftest``)."""
from __future__ import annotations

import numpy as np

from . import ops
from .gradcheck import check, projected
from .heads import auc_rank, compute_metrics
from .sit import AttentionParams, hemifuse_attention, hemisim
from .tensor import Tensor
from .volume import Volume, extract_patches, flip_sagittal, pad_to_grid, reassemble, crop

GRAD_TOL = 1e-4


def _p(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _grad_cases(rng):
    x5 = _p(rng, 1, 2, 5, 5, 5)
    w5 = Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
    b5 = _p(rng, 3)
    yield "conv3d", projected(lambda: ops.conv3d(x5, w5, b5, 2, 1), (1, 3, 3, 3, 3), rng), [x5, w5, b5]
    xb = _p(rng, 2, 3, 2, 2, 2)
    gb, bb = _p(rng, 3), _p(rng, 3)
    rm, rv = np.zeros(3), np.ones(3)
    yield "batchnorm3d", projected(lambda: ops.batchnorm3d(xb, gb, bb, rm, rv, True, update_stats=False),
                                   xb.shape, rng), [xb, gb, bb]
    xl, wl, bl = _p(rng, 3, 4), _p(rng, 4, 5), _p(rng, 5)
    yield "linear", projected(lambda: ops.linear(xl, wl, bl), (3, 5), rng), [xl, wl, bl]
    xn, gn, bn = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    yield "layernorm", projected(lambda: ops.layernorm(xn, gn, bn), (3, 6), rng), [xn, gn, bn]
    xs = _p(rng, 3, 5)
    yield "softmax", projected(lambda: ops.softmax(xs, -1), (3, 5), rng), [xs]
    logits = _p(rng, 4, 2)
    yield "cross_entropy", lambda: ops.cross_entropy(logits, [0, 1, 1, 0]), [logits]
    tl, tr = _p(rng, 1, 3, 8), _p(rng, 1, 3, 8)
    att = AttentionParams(rng, 8)
    alpha, beta = Tensor(np.array(0.9), requires_grad=True), Tensor(np.array(0.4), requires_grad=True)
    yield "hemifuse_attention", projected(
        lambda: hemifuse_attention(tl, tr, hemisim(tl, tr), att, alpha, beta, 2), (1, 3, 8), rng), \
        [tl, tr, alpha, beta, att.q.weight, att.v.weight]


def run(seeds=3, verbose=print):
    """Run the checks; returns True when every one passes."""
    results = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for name, fn, ts in _grad_cases(rng):
            err = check(fn, ts)
            results.append((f"grad {name} seed {seed}", err < GRAD_TOL, f"rel err {err:.2e}"))

    rng = np.random.default_rng(0)
    v = Volume(rng.standard_normal((9, 7, 5)))
    results.append(("flip involution", np.array_equal(flip_sagittal(flip_sagittal(v)).data, v.data), ""))
    padded = pad_to_grid(v, 4)
    rt = crop(reassemble(extract_patches(padded, 4)), v.extents)
    results.append(("patch round trip", np.array_equal(rt.data, v.data), ""))
    a = Tensor(rng.standard_normal((2, 5, 16)))
    results.append(("hsm identity", bool(np.all(hemisim(a, a).data == 1.0)), ""))
    results.append(("hsm antipodal", bool(np.all(hemisim(a, -a).data == -1.0)), ""))
    sm = ops.softmax(Tensor(rng.standard_normal((6, 9))), -1).data
    results.append(("softmax rows", bool(np.all(np.abs(sm.sum(-1) - 1) < 1e-9)), ""))
    scores, labels = rng.random(20), np.r_[np.ones(10), np.zeros(10)].astype(int)
    brute = np.mean([(p > q) + 0.5 * (p == q) for p in scores[labels == 1] for q in scores[labels == 0]])
    results.append(("auc rank == pair count", auc_rank(scores, labels) == brute, ""))
    rep = compute_metrics([0.9, 0.8, 0.7, 0.2, 0.1, 0.1, 0.3, 0.4], [1, 1, 1, 1, 0, 0, 0, 0])
    results.append(("confusion arithmetic", (rep.acc, rep.sen, rep.spe) == (0.875, 0.75, 1.0), ""))

    ok = True
    for name, passed, detail in results:
        ok &= bool(passed)
        if verbose:
            verbose(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}".rstrip())
    return ok
