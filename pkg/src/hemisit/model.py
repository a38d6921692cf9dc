"""Wiring of the six ablation variants around one shared backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .encoder import D_MODEL, Encoder, check_patch_size, pool_tokens
from .errors import ConfigurationError
from .heads import Classifier
from .nn import Module
from .sit import SIT, SITConfig
from .tensor import Tensor
from .volume import grid_extents, patchify

VARIANTS = ("wcnn", "lrcnn", "lrcnn_t", "lrcnn_it", "lrcnn_sit", "lrcnn_sit_flip")

# variant -> (transformer mode or None, use HSM, flip right hemisphere)
WIRING = {
    "wcnn": (None, False, False),
    "lrcnn": (None, False, False),
    "lrcnn_t": ("self", False, False),
    "lrcnn_it": ("cross", False, False),
    "lrcnn_sit": ("cross", True, False),
    "lrcnn_sit_flip": ("cross", True, True),
}


def wiring(variant, flip=None):
    if variant not in WIRING:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    mode, use_hsm, default_flip = WIRING[variant]
    return mode, use_hsm, default_flip if flip is None else bool(flip)


@dataclass
class Forward:
    logits_all: Tensor
    logits_l: Tensor | None
    logits_r: Tensor | None
    tokens_l: Tensor | None  # last token layer, left stream (or whole-brain tokens for wcnn)
    tokens_r: Tensor | None
    grid: tuple              # patch grid of one hemisphere (or of the whole brain)
    flipped: bool
    cnn_l: Tensor | None = None  # encoder tokens before the transformer
    cnn_r: Tensor | None = None


class SITModel(Module):
    def __init__(self, variant="lrcnn_sit_flip", patch_size=8, n_units=5, n_heads=4, seed=0, flip=None):
        check_patch_size(patch_size)
        self.variant = variant
        self.patch_size = patch_size
        mode, use_hsm, self.flip = wiring(variant, flip)
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng)
        if mode is not None:
            self.sit = SIT(rng, SITConfig(n_units=n_units, n_heads=n_heads, d_model=D_MODEL,
                                          mode=mode, use_hsm=use_hsm))
        if variant != "wcnn":
            self.head_l = Classifier(rng, D_MODEL)
            self.head_r = Classifier(rng, D_MODEL)
        self.head_all = Classifier(rng, D_MODEL)

    @property
    def has_sit(self):
        return isinstance(getattr(self, "sit", None), SIT)

    def module_groups(self):
        groups = {"encoder": self.encoder}
        if self.has_sit:
            groups["sit"] = self.sit
        if self.variant != "wcnn":
            groups["head_l"] = self.head_l
            groups["head_r"] = self.head_r
        groups["head_all"] = self.head_all
        return groups

    def hemisphere_patches(self, volumes: np.ndarray):
        """``(B, X, Y, Z)`` -> left/right patch arrays ``(B, N, p, p, p)`` and the grid."""
        p = self.patch_size
        X = volumes.shape[1]
        if X < 3:
            raise ConfigurationError("sagittal extent must be >= 3")
        m = X // 2
        left = volumes[:, :m]
        right = volumes[:, X - m:]
        if self.flip:
            right = right[:, ::-1]
        return _tile(left, p), _tile(right, p)

    def whole_patches(self, volumes: np.ndarray):
        return _tile(volumes, self.patch_size)

    def forward(self, volumes, update_stats=True) -> Forward:
        volumes = np.asarray(volumes, dtype=np.float64)
        if volumes.ndim == 3:
            volumes = volumes[None]
        B = volumes.shape[0]
        p = self.patch_size
        if self.variant == "wcnn":
            patches, grid = self.whole_patches(volumes)
            N = patches.shape[1]
            feats = self.encoder(Tensor(patches.reshape(B * N, 1, p, p, p)), update_stats=update_stats)
            tokens = pool_tokens(feats, B, N)
            logits = self.head_all(ops.mean(tokens, axis=1))
            return Forward(logits, None, None, tokens, None, grid, False, tokens, None)

        (pl, grid), (pr, _) = self.hemisphere_patches(volumes)
        N = pl.shape[1]
        both = np.concatenate([pl, pr], axis=0).reshape(2 * B * N, 1, p, p, p)
        feats = self.encoder(Tensor(both), update_stats=update_stats)
        tokens = pool_tokens(feats, 2 * B, N)
        cnn_l = ops.reshape(ops.rows(tokens, 0, B), (B, N, D_MODEL))
        cnn_r = ops.reshape(ops.rows(tokens, B, 2 * B), (B, N, D_MODEL))
        logits_l = self.head_l(ops.mean(cnn_l, axis=1))
        logits_r = self.head_r(ops.mean(cnn_r, axis=1))
        out_l, out_r = (self.sit(cnn_l, cnn_r) if self.has_sit else (cnn_l, cnn_r))
        g = ops.mean(ops.concat([out_l, out_r], axis=1), axis=1)
        logits_all = self.head_all(g)
        return Forward(logits_all, logits_l, logits_r, out_l, out_r, grid, self.flip, cnn_l, cnn_r)

    __call__ = forward

    def predict_proba(self, volumes, batch_size=8):
        """Positive-class probabilities from the final head (no tape)."""
        out = []
        for i in range(0, len(volumes), batch_size):
            fwd = self.forward(volumes[i:i + batch_size], update_stats=False)
            out.append(ops.softmax(fwd.logits_all, axis=-1).data[:, 1])
        return np.concatenate(out)

    def param_counts(self):
        return {name: mod.num_parameters() for name, mod in self.module_groups().items()}


def _tile(arr, p):
    X, Y, Z = arr.shape[1:]
    target = grid_extents((X, Y, Z), p)
    if target != (X, Y, Z):
        arr = np.pad(arr, [(0, 0)] + [(0, t - n) for n, t in zip((X, Y, Z), target)])
    grid = tuple(t // p for t in target)
    return np.ascontiguousarray(patchify(arr, p)), grid

