"""Time the numba and numpy im2col/col2im paths, and a full conv3d step.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the encoder at patch size 8 with a batch of 4 samples x 2
hemispheres x 40 patches.
"""
import argparse
import timeit

import numpy as np

from hemisit import _kernels as K
from hemisit import ops
from hemisit.tensor import Tape, Tensor

# (batch, channels in, extent, kernel) for the four encoder blocks at p=8
LAYERS = [(320, 1, 8, 4), (320, 32, 4, 3), (320, 64, 2, 3), (320, 128, 1, 3)]
STRIDE, PAD = 2, 1


def _shapes(B, C, n, k):
    xp = np.random.default_rng(0).standard_normal((B, C, n + 2 * PAD, n + 2 * PAD, n + 2 * PAD))
    out = (ops.conv_out_extent(n, k, STRIDE, PAD),) * 3
    return xp, out


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    rows = []
    for B, C, n, k in LAYERS:
        xp, out = _shapes(B, C, n, k)
        cols_t = np.ascontiguousarray(K.im2col3d_numpy(xp, k, STRIDE, out).T)
        t = {
            "im2col numpy": _best(lambda: K.im2col3d_numpy(xp, k, STRIDE, out), repeat),
            "col2im numpy": _best(lambda: K.col2im3d_numpy(cols_t, xp.shape, k, STRIDE, out), repeat),
        }
        if K.HAVE_NUMBA:
            K._im2col3d_nb(xp, k, STRIDE, *out)  # compile outside the timing
            K._col2im3d_nb(cols_t, *xp.shape, k, STRIDE, *out)
            t["im2col numba"] = _best(lambda: K._im2col3d_nb(xp, k, STRIDE, *out), repeat)
            t["col2im numba"] = _best(lambda: K._col2im3d_nb(cols_t, *xp.shape, k, STRIDE, *out), repeat)
        rows.append(((B, C, n, k), t))
    return rows


def bench_conv_step(repeat):
    """Forward + backward of the second encoder block, per backend."""
    B, C, n, k = LAYERS[1]
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((B, C, n, n, n)), requires_grad=True)
    w = Tensor(rng.standard_normal((64, C, k, k, k)) * 0.05, requires_grad=True)
    b = Tensor(np.zeros(64), requires_grad=True)

    def step():
        with Tape() as tape:
            y = ops.sum(ops.conv3d(x, w, b, STRIDE, PAD))
        tape.backward(y)

    out = {}
    saved = K.USE_NUMBA
    try:
        for name, flag in (("numpy", False), ("numba", True)):
            if flag and not K.HAVE_NUMBA:
                continue
            K.USE_NUMBA = flag
            step()
            out[name] = _best(step, repeat)
    finally:
        K.USE_NUMBA = saved
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'layer (B,C,n,k)':<22}{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for shape, t in bench_kernels(args.repeat):
        for kind in ("im2col", "col2im"):
            a = t[f"{kind} numpy"] * 1e3
            b = t.get(f"{kind} numba")
            nb = f"{b * 1e3:10.2f}{a / (b * 1e3):8.1f}x" if b else f"{'-':>10}{'-':>9}"
            print(f"{str(shape):<22}{kind:<16}{a:10.2f}{nb}")
    step = bench_conv_step(args.repeat)
    print("conv3d forward+backward, block 2: " + ", ".join(f"{k} {v * 1e3:.1f} ms" for k, v in step.items()))


if __name__ == "__main__":
    main()
