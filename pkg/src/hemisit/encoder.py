"""Patch-level 3D CNN: four conv-BN-ReLU blocks and GAP+GMP pooling."""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigurationError
from .nn import Module, he_normal, ones, zeros
from .tensor import Tensor

CHANNELS = (1, 32, 64, 128, 128)
KERNELS = (4, 3, 3, 3)
STRIDE = 2
PAD = 1
MIN_PATCH = 8
D_MODEL = CHANNELS[-1]


def spatial_trace(p):
    """Per-axis extent after each block, starting from the patch size."""
    out = [p]
    for k in KERNELS:
        out.append(ops.conv_out_extent(out[-1], k, STRIDE, PAD))
    return out


class ConvBlock(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, rng, cin, cout, k):
        fan_in = cin * k ** 3
        self.weight = he_normal(rng, (cout, cin, k, k, k), fan_in)
        self.bias = zeros((cout,))
        self.gamma = ones((cout,))
        self.beta = zeros((cout,))
        self.running_mean = np.zeros(cout)
        self.running_var = np.ones(cout)

    def __call__(self, x, update_stats=True):
        y = ops.conv3d(x, self.weight, self.bias, stride=STRIDE, pad=PAD)
        y = ops.batchnorm3d(y, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, update_stats=update_stats)
        return ops.relu(y)


class Encoder(Module):
    def __init__(self, rng):
        for i, k in enumerate(KERNELS):
            setattr(self, f"block{i + 1}", ConvBlock(rng, CHANNELS[i], CHANNELS[i + 1], k))

    @property
    def blocks(self):
        return [getattr(self, f"block{i + 1}") for i in range(len(KERNELS))]

    def __call__(self, patches: Tensor, update_stats=True) -> Tensor:
        return encode_patches(patches, self, update_stats=update_stats)


def check_patch_size(p):
    if p < MIN_PATCH:
        raise ConfigurationError(f"patch size {p} too small for the encoder stride plan; minimum is {MIN_PATCH}")


def encode_patches(patches: Tensor, encoder: Encoder, update_stats=True) -> Tensor:
    """``[B*N, 1, p, p, p]`` -> ``[B*N, 128, h, w, d]``."""
    check_patch_size(min(patches.shape[2:]))
    x = patches
    for block in encoder.blocks:
        x = block(x, update_stats=update_stats)
    return x


def pool_tokens(features: Tensor, B: int, N: int) -> Tensor:
    """GAP + GMP per channel, reshaped to a ``[B, N, C]`` token sequence."""
    if features.shape[0] != B * N:
        raise ConfigurationError(f"pool_tokens: leading extent {features.shape[0]} != {B}*{N}")
    tok = ops.add(ops.gap(features), ops.gmp(features))
    return ops.reshape(tok, (B, N, features.shape[1]))
