"""Token-level 3D Grad-CAM scattered back to voxel space."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import dilate, write_volume
from .errors import InputError
from .model import SITModel
from .tensor import Tape
from .volume import Volume


@dataclass
class Heatmap:
    volume: Volume
    target_class: int
    zero_map: bool
    raw_max: float


LAYERS = ("last", "encoder")


def token_scores(model: SITModel, volume: np.ndarray, target_class: int, logit_scale=1.0, layer="last"):
    """ReLU(sum_c dlogit/dtoken * token) for every token of one token layer.

    ``layer="last"`` uses the output tokens of the final transformer unit;
    ``layer="encoder"`` uses the encoder tokens that enter the transformer.
    Returns ``(scores_left, scores_right, grid, flipped)``; for the
    whole-brain variant ``scores_right`` is None.
    """
    if layer not in LAYERS:
        raise InputError(f"unknown layer {layer!r}; expected one of {LAYERS}")
    vol = np.asarray(volume, dtype=np.float64)
    was = model.training
    model.eval()
    try:
        with Tape() as tape:
            fwd = model(vol[None], update_stats=False)
        seed = np.zeros(fwd.logits_all.shape)
        seed[0, target_class] = logit_scale
        if fwd.logits_all.requires_grad:
            grads = tape.backward(fwd.logits_all, seed=seed, write=False)
        else:
            grads = {}
    finally:
        model.train(was)

    def score(tok):
        if tok is None:
            return None
        g = grads.get(id(tok))
        if g is None:
            return np.zeros(tok.shape[1])
        return np.maximum((g[0] * tok.data[0]).sum(axis=-1), 0.0)

    if layer == "encoder":
        return score(fwd.cnn_l), score(fwd.cnn_r), fwd.grid, fwd.flipped
    return score(fwd.tokens_l), score(fwd.tokens_r), fwd.grid, fwd.flipped


def _scatter(scores, grid, p, extents):
    """Spread each patch score uniformly over its footprint, then crop."""
    blocks = scores.reshape(grid)
    full = blocks.repeat(p, 0).repeat(p, 1).repeat(p, 2)
    x, y, z = extents
    return full[:x, :y, :z]


def gradcam(model: SITModel, volume, target_class=1, logit_scale=1.0, layer="last") -> Heatmap:
    """Heatmap in the whole-brain frame, normalised to max 1 (unless all zero)."""
    vol = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    X, Y, Z = vol.shape
    p = model.patch_size
    s_l, s_r, grid, flipped = token_scores(model, vol, target_class, logit_scale, layer)
    heat = np.zeros((X, Y, Z))
    if s_r is None:
        heat[:] = _scatter(s_l, grid, p, (X, Y, Z))
    else:
        m = X // 2
        heat[:m] = _scatter(s_l, grid, p, (m, Y, Z))
        right = _scatter(s_r, grid, p, (m, Y, Z))
        heat[X - m:] = right[::-1] if flipped else right
    raw_max = float(heat.max())
    zero = raw_max <= 0.0
    if not zero:
        heat = heat / raw_max
    return Heatmap(Volume(heat), int(target_class), zero, raw_max)


def top_decile_fraction(heat: np.ndarray, mask: np.ndarray, dilation=2, level=0.9):
    """Share of heatmap mass at or above ``level`` * max that lies inside the dilated mask.

    The top decile is taken over the value range of the normalised map, not
    over voxel counts.
    """
    peak = heat.max()
    if peak <= 0:
        return 0.0
    top = heat >= level * peak
    inside = dilate(mask, dilation) if dilation else mask.astype(bool)
    return float(heat[top & inside].sum() / heat[top].sum())


def export_heatmap(heatmap: Heatmap, path, source_path=None):
    """Write the heatmap volume plus a ``<path>.json`` sidecar."""
    path = Path(path)
    write_volume(path, heatmap.volume)
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps({
        "target_class": heatmap.target_class,
        "zero_map_flag": heatmap.zero_map,
        "source_path": None if source_path is None else str(source_path),
    }, sort_keys=True) + "\n")
    return path, side
