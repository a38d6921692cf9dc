"""Hot loops of the 3D convolution: im2col / col2im.

Both routines exist twice: a numba ``@njit`` version and a pure-numpy
version.  The numba path is used when numba imports cleanly and the
environment variable ``HEMISIT_DISABLE_NUMBA`` is unset (or ``0``).
The two paths accumulate in the same order, so they agree bit-for-bit.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    numba = None


def _flag_disabled():
    return os.environ.get("HEMISIT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def im2col3d_numpy(xp, k, s, out_hwd):
    """Unfold padded input ``(B, C, Hp, Wp, Dp)`` into ``(B*Ho*Wo*Do, C*k^3)``."""
    B, C = xp.shape[:2]
    Ho, Wo, Do = out_hwd
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s, : (Do - 1) * s + 1 : s]
    # (B, Ho, Wo, Do, C, k, k, k)
    win = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    return np.ascontiguousarray(win).reshape(B * Ho * Wo * Do, C * k * k * k)


def col2im3d_numpy(cols_t, xp_shape, k, s, out_hwd):
    """Adjoint of :func:`im2col3d_numpy`.

    Takes the column gradient in transposed layout ``(C*k^3, B*Ho*Wo*Do)``
    and scatter-adds it back onto the padded input.
    """
    B, C, Hp, Wp, Dp = xp_shape
    Ho, Wo, Do = out_hwd
    c = cols_t.reshape(C, k, k, k, B, Ho, Wo, Do).transpose(4, 0, 5, 6, 7, 1, 2, 3)
    dxp = np.zeros(xp_shape, dtype=cols_t.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                dxp[:, :, a : a + (Ho - 1) * s + 1 : s, b : b + (Wo - 1) * s + 1 : s,
                    e : e + (Do - 1) * s + 1 : s] += c[..., a, b, e]
    return dxp


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _im2col3d_nb(xp, k, s, Ho, Wo, Do):
        B, C = xp.shape[0], xp.shape[1]
        kk = k * k * k
        cols = np.empty((B * Ho * Wo * Do, C * kk), dtype=xp.dtype)
        row = 0
        for n in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    for l in range(Do):
                        col = 0
                        for ch in range(C):
                            for a in range(k):
                                for b in range(k):
                                    for e in range(k):
                                        cols[row, col] = xp[n, ch, i * s + a, j * s + b, l * s + e]
                                        col += 1
                        row += 1
        return cols

    @numba.njit(cache=True)
    def _col2im3d_nb(cols_t, B, C, Hp, Wp, Dp, k, s, Ho, Wo, Do):
        # cols_t is (C*k^3, B*Ho*Wo*Do).  Each (a, b, e) touches a voxel at most
        # once per (n, ch), so per-voxel sums run in kernel-offset order, the
        # same order as the numpy path.
        dxp = np.zeros((B, C, Hp, Wp, Dp), dtype=cols_t.dtype)
        kk = k * k * k
        P = Ho * Wo * Do
        for n in range(B):
            for ch in range(C):
                for a in range(k):
                    for b in range(k):
                        for e in range(k):
                            src = cols_t[ch * kk + (a * k + b) * k + e]
                            row = n * P
                            for i in range(Ho):
                                for j in range(Wo):
                                    for l in range(Do):
                                        dxp[n, ch, i * s + a, j * s + b, l * s + e] += src[row]
                                        row += 1
        return dxp


def im2col3d(xp, k, s, out_hwd):
    if USE_NUMBA:
        return _im2col3d_nb(np.ascontiguousarray(xp), k, s, *out_hwd)
    return im2col3d_numpy(xp, k, s, out_hwd)


def col2im3d(cols_t, xp_shape, k, s, out_hwd):
    """Scatter-add ``(C*k^3, B*Ho*Wo*Do)`` column gradients onto the padded input."""
    if USE_NUMBA:
        return _col2im3d_nb(np.ascontiguousarray(cols_t), *xp_shape, k, s, *out_hwd)
    return col2im3d_numpy(cols_t, xp_shape, k, s, out_hwd)
