"""Per-level decoding module: residual fusion, channel attention, field head.

The module fuses the fixed and (warped) moving feature maps, re-weights the
fused channels with a squeeze-excitation bottleneck, and estimates a
3-channel displacement increment.  The last convolution of the field head is
zero-initialised so an untrained network starts from the identity
deformation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoder import LEAKY_SLOPE, fan_in_uniform
from .optim import ParamStore


@dataclass
class DecoderOptions:
    """Ablation switches; both on reproduces the full module."""

    use_fusion: bool = True      # residual two-conv fusion vs a single conv
    use_attention: bool = True   # channel re-weighting vs identity weights
    reduction_ratio: int = 16

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")


def attention_hidden_width(channels: int, reduction_ratio: int) -> int:
    return max(channels // reduction_ratio, 1)


def init_decoder_params(store: ParamStore, level: int, channels: int,
                        options: DecoderOptions, rng: np.random.Generator):
    c = channels
    half = (c + 1) // 2
    hidden = attention_hidden_width(c, options.reduction_ratio)
    p = f"decoder/l{level}"
    store.add(f"{p}/fuse1/kernel", fan_in_uniform(rng, (c, 2 * c, 3, 3, 3)))
    store.add(f"{p}/fuse1/bias", np.zeros(c))
    # ablated blocks register no parameters so the optimizer stays strict
    if options.use_fusion:
        store.add(f"{p}/fuse2/kernel", fan_in_uniform(rng, (c, c, 3, 3, 3)))
        store.add(f"{p}/fuse2/bias", np.zeros(c))
    if options.use_attention:
        store.add(f"{p}/att/w1", fan_in_uniform(rng, (hidden, c)))
        store.add(f"{p}/att/b1", np.zeros(hidden))
        store.add(f"{p}/att/w2", fan_in_uniform(rng, (c, hidden)))
        store.add(f"{p}/att/b2", np.zeros(c))
    store.add(f"{p}/head1/kernel", fan_in_uniform(rng, (half, c, 3, 3, 3)))
    store.add(f"{p}/head1/bias", np.zeros(half))
    # zero init: the very first estimated field is exactly zero
    store.add(f"{p}/head2/kernel", np.zeros((3, half, 3, 3, 3)))
    store.add(f"{p}/head2/bias", np.zeros(3))


def fuse(moving_feat: Tensor, fixed_feat: Tensor, store: ParamStore,
         level: int, options: DecoderOptions) -> Tensor:
    """Residual fusion of concatenated features: g(C2(a) + a), a = g(C1(cat))."""
    if moving_feat.shape != fixed_feat.shape:
        raise ShapeError(
            f"fuse: feature shapes differ: {moving_feat.shape} vs "
            f"{fixed_feat.shape}")
    p = f"decoder/l{level}"
    cat = ad.concat_channels(moving_feat, fixed_feat)
    a = ad.leaky_relu(
        ad.conv3d(cat, store[f"{p}/fuse1/kernel"], store[f"{p}/fuse1/bias"],
                  padding=1), LEAKY_SLOPE)
    if not options.use_fusion:
        return a
    b = ad.conv3d(a, store[f"{p}/fuse2/kernel"], store[f"{p}/fuse2/bias"],
                  padding=1)
    return ad.leaky_relu(b + a, LEAKY_SLOPE)


def channel_attention(features: Tensor, store: ParamStore, level: int,
                      options: DecoderOptions):
    """Re-weight channels; returns (weighted features, weight vector)."""
    b, c = features.shape[:2]
    if not options.use_attention:
        return features, np.ones((b, c))
    p = f"decoder/l{level}"
    z = ad.global_avg_pool(features)
    hidden = ad.leaky_relu(
        ad.linear(z, store[f"{p}/att/w1"], store[f"{p}/att/b1"]), LEAKY_SLOPE)
    s = ad.sigmoid(ad.linear(hidden, store[f"{p}/att/w2"], store[f"{p}/att/b2"]))
    weighted = features * s.reshape(b, c, 1, 1, 1)
    return weighted, s.data.copy()


def estimate_field(features: Tensor, store: ParamStore, level: int) -> Tensor:
    """Two-conv head mapping C channels to a 3-channel displacement."""
    p = f"decoder/l{level}"
    x = ad.conv3d(features, store[f"{p}/head1/kernel"],
                  store[f"{p}/head1/bias"], padding=1)
    return ad.conv3d(x, store[f"{p}/head2/kernel"], store[f"{p}/head2/bias"],
                     padding=1)


def decode_step(moving_feat: Tensor, fixed_feat: Tensor, store: ParamStore,
                level: int, options: DecoderOptions):
    """Full per-iteration pass; returns (field increment, channel weights)."""
    fused = fuse(moving_feat, fixed_feat, store, level, options)
    weighted, s = channel_attention(fused, store, level, options)
    return estimate_field(weighted, store, level), s
