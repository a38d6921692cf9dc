"""Hemisphere split, sagittal flip, grid padding and patch tiling.

Axis 0 of every volume is the sagittal (left-right) axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InputError(f"volume must be 3D with positive extents, got {self.data.shape}")

    @property
    def extents(self):
        return self.data.shape


@dataclass
class PatchGrid:
    patch_size: int
    grid: tuple
    pad: tuple
    patches: np.ndarray = field(repr=False)  # (N, p, p, p), lexicographic (x, y, z) grid order

    @property
    def n_patches(self):
        return self.patches.shape[0]

    def footprint(self, i):
        """Voxel slices of patch ``i`` in the padded frame."""
        p = self.patch_size
        gx, gy, gz = self.grid
        ix, rem = divmod(i, gy * gz)
        iy, iz = divmod(rem, gz)
        return (slice(ix * p, ix * p + p), slice(iy * p, iy * p + p), slice(iz * p, iz * p + p))


def split_hemispheres(vol: Volume):
    """Return (left, right) halves of equal sagittal extent ``floor(X/2)``.

    For odd X the midline slice belongs to neither half.
    """
    X = vol.extents[0]
    if X < 3:
        raise InputError(f"sagittal extent must be >= 3, got {X}")
    m = X // 2
    return Volume(vol.data[:m].copy(), vol.spacing), Volume(vol.data[X - m:].copy(), vol.spacing)


def flip_sagittal(vol: Volume) -> Volume:
    return Volume(vol.data[::-1].copy(), vol.spacing)


def grid_extents(extents, p):
    return tuple(-(-n // p) * p for n in extents)


def pad_to_grid(vol: Volume, p: int) -> Volume:
    """Zero-pad every axis on its high-index side up to a multiple of ``p``."""
    if p < 2:
        raise InputError(f"patch size must be >= 2, got {p}")
    target = grid_extents(vol.extents, p)
    if target == vol.extents:
        return Volume(vol.data.copy(), vol.spacing)
    widths = [(0, t - n) for n, t in zip(vol.extents, target)]
    return Volume(np.pad(vol.data, widths), vol.spacing)


def crop(vol: Volume, extents) -> Volume:
    x, y, z = extents
    return Volume(vol.data[:x, :y, :z].copy(), vol.spacing)


def patchify(arr: np.ndarray, p: int) -> np.ndarray:
    """``(..., X, Y, Z)`` with extents divisible by ``p`` -> ``(..., N, p, p, p)``."""
    *lead, X, Y, Z = arr.shape
    if X % p or Y % p or Z % p:
        raise InputError(f"extents {(X, Y, Z)} not divisible by patch size {p}; pad first")
    gx, gy, gz = X // p, Y // p, Z // p
    k = len(lead)
    a = arr.reshape(*lead, gx, p, gy, p, gz, p)
    order = tuple(range(k)) + tuple(k + i for i in (0, 2, 4, 1, 3, 5))
    return a.transpose(order).reshape(*lead, gx * gy * gz, p, p, p)


def unpatchify(patches: np.ndarray, grid) -> np.ndarray:
    """Inverse of :func:`patchify` for a known grid ``(gx, gy, gz)``."""
    *lead, N, p, _, _ = patches.shape
    gx, gy, gz = grid
    k = len(lead)
    a = patches.reshape(*lead, gx, gy, gz, p, p, p)
    order = tuple(range(k)) + tuple(k + i for i in (0, 3, 1, 4, 2, 5))
    return a.transpose(order).reshape(*lead, gx * p, gy * p, gz * p)


def extract_patches(vol: Volume, p: int) -> PatchGrid:
    X, Y, Z = vol.extents
    patches = np.ascontiguousarray(patchify(vol.data, p))
    return PatchGrid(p, (X // p, Y // p, Z // p), (0, 0, 0), patches)


def reassemble(grid: PatchGrid) -> Volume:
    return Volume(unpatchify(grid.patches, grid.grid))


def hemisphere_grid(vol: Volume, p: int, flip_right=True):
    """Split, optionally flip the right half, pad and tile both halves.

    Returns ``(left_grid, right_grid)`` whose pad fields record the zero
    padding added to each hemisphere.
    """
    left, right = split_hemispheres(vol)
    if flip_right:
        right = flip_sagittal(right)
    out = []
    for half in (left, right):
        padded = pad_to_grid(half, p)
        g = extract_patches(padded, p)
        g.pad = tuple(t - n for n, t in zip(half.extents, padded.extents))
        out.append(g)
    return tuple(out)
