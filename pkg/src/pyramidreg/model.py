"""End-to-end registration network: encoder, iterative decoder, final warp."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .controller import TciConfig, run_layer
from .decoder import DecoderOptions, init_decoder_params
from .encoder import EncoderConfig, NUM_LEVELS, encode, init_encoder_params
from .fields import DeformationField
from .optim import ParamStore


@dataclass
class ModelConfig:
    encoder: EncoderConfig = dc_field(default_factory=EncoderConfig)
    decoder: DecoderOptions = dc_field(default_factory=DecoderOptions)
    tci: TciConfig = dc_field(default_factory=TciConfig)


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_encoder_params(store, config.encoder, rng)
    for level in range(1, NUM_LEVELS + 1):
        init_decoder_params(store, level,
                            config.encoder.channel_schedule[level - 1],
                            config.decoder, rng)
    return store


def pad_to_multiple(values: np.ndarray, multiple: int = 16):
    """Zero-pad a (D,H,W) array up to the next multiple; returns (padded, dims)."""
    dims = values.shape
    padded_dims = tuple(-(-d // multiple) * multiple for d in dims)
    if padded_dims == dims:
        return values, dims
    out = np.zeros(padded_dims)
    out[:dims[0], :dims[1], :dims[2]] = values
    return out, dims


def register_pair(store: ParamStore, fixed: np.ndarray, moving: np.ndarray,
                  config: ModelConfig, detach_iterations: bool = False):
    """Register moving onto fixed.

    Returns (field, warped, trace): the full-resolution deformation field,
    the warped moving image as a tape tensor, and the per-layer iteration
    trace.  Gradients flow from the warped image and field back to every
    parameter.
    """
    if fixed.shape != moving.shape:
        raise ad.ShapeError(
            f"register: image shapes differ: {fixed.shape} vs {moving.shape}")
    fixed_p, orig_dims = pad_to_multiple(fixed)
    moving_p, _ = pad_to_multiple(moving)
    fixed_t = Tensor(fixed_p[None, None])
    moving_t = Tensor(moving_p[None, None])
    fixed_pyr = encode(fixed_t, store)
    moving_pyr = encode(moving_t, store)
    trace: list = []
    phi: DeformationField | None = None
    for level in range(NUM_LEVELS, 0, -1):
        phi = run_layer(level, fixed_pyr[level], moving_pyr[level], phi,
                        store, config.tci, fixed_p, moving_p,
                        config.decoder, trace, detach_iterations)
    # run_layer(level=1) returns the field at full resolution
    warped = ad.warp(moving_t, phi.disp)
    if orig_dims != fixed_p.shape:
        d, h, w = orig_dims
        phi = DeformationField(phi.disp[:, :, :d, :h, :w], 0)
        warped = warped[:, :, :d, :h, :w]
    return phi, warped, trace
