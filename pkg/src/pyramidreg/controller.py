"""Dual-stage threshold-controlled iteration policy for the decoder.

Each decoding layer refines its deformation field in a loop.  After every
iteration the full-resolution similarity between the fixed image and the
re-warped moving image is scored; a sliding window of recent scores drives a
two-stage stopping rule: stability (population std of the window below a
threshold) and convergence (last score delta below a threshold).  The
ablation modes reorder or drop the two stages.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .decoder import DecoderOptions, decode_step
from .fields import DeformationField, compose, upsample_field
from .losses import local_ncc_map


class Mode(str, enum.Enum):
    CONV_ONLY = "conv_only"            # convergence check only
    STAB_ONLY = "stab_only"            # stability check only
    CONV_THEN_STAB = "conv_then_stab"  # convergence gate, then stability
    STAB_THEN_CONV = "stab_then_conv"  # stability gate, then convergence


STAGE_STABILITY = "stability"
STAGE_CONVERGENCE = "convergence"


@dataclass
class TciConfig:
    delta_s: float = 0.005
    delta_c: float = 0.005
    window_size: int = 3
    k_max: int = 10
    mode: Mode = Mode.STAB_THEN_CONV
    sim_metric: str = "ncc"  # ncc | mae | mse
    sim_patch: int = 9
    per_layer_enabled: tuple = (True, True, True, True)  # layers 1..4

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.delta_s < 0 or self.delta_c < 0:
            raise ValueError("thresholds must be >= 0")
        self.mode = Mode(self.mode)
        if self.sim_metric not in ("ncc", "mae", "mse"):
            raise ValueError(f"unknown similarity metric {self.sim_metric!r}")

    def layer_enabled(self, level: int) -> bool:
        return bool(self.per_layer_enabled[level - 1])


@dataclass
class TciWindow:
    """Insertion-ordered buffer of at most ``capacity`` similarity scores."""

    capacity: int
    scores: list = dc_field(default_factory=list)

    def push(self, score: float):
        self.scores.append(float(score))
        if len(self.scores) > self.capacity:
            self.scores.pop(0)

    def __len__(self):
        return len(self.scores)

    @property
    def last(self):
        return self.scores[-1] if self.scores else None


@dataclass
class Decision:
    stop: bool
    stage: str | None = None
    eps: float | None = None
    delta: float | None = None


def similarity(fixed: np.ndarray, warped: np.ndarray, metric: str = "ncc",
               patch: int = 9, variance_floor: float = 1e-5) -> float:
    """Scalar similarity oriented so that larger always means more similar.

    NCC is the per-voxel mean of local windowed correlations; MAE and MSE
    are negated means.
    """
    fixed = np.asarray(fixed, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    if fixed.shape != warped.shape:
        raise ShapeError(
            f"similarity: shapes differ: {fixed.shape} vs {warped.shape}")
    if metric == "mae":
        return float(-np.mean(np.abs(fixed - warped)))
    if metric == "mse":
        return float(-np.mean((fixed - warped) ** 2))
    with ad.no_grad():
        corr = local_ncc_map(Tensor(fixed[None, None]),
                             Tensor(warped[None, None]), patch, variance_floor)
    return float(corr.data.mean())


def should_stop(window: TciWindow, current_s: float, previous_s: float | None,
                config: TciConfig) -> Decision:
    """Consult the stopping rule; called before the current score is pushed."""
    if len(window) < config.window_size:
        return Decision(stop=False)
    eps = float(np.std(window.scores))  # population std
    delta = None if previous_s is None else float(current_s - previous_s)
    mode = config.mode
    if mode is Mode.STAB_ONLY:
        if eps <= config.delta_s:
            return Decision(True, STAGE_STABILITY, eps, delta)
        return Decision(False, None, eps, delta)
    if delta is None:
        return Decision(False, None, eps, delta)
    if mode is Mode.CONV_ONLY:
        stop = delta <= config.delta_c
        return Decision(stop, STAGE_CONVERGENCE if stop else None, eps, delta)
    if mode is Mode.STAB_THEN_CONV:
        stop = eps <= config.delta_s and delta <= config.delta_c
        return Decision(stop, STAGE_CONVERGENCE if stop else None, eps, delta)
    # CONV_THEN_STAB: convergence gates, stability fires
    stop = delta <= config.delta_c and eps <= config.delta_s
    return Decision(stop, STAGE_STABILITY if stop else None, eps, delta)


@dataclass
class TraceRow:
    layer: int
    iteration: int
    score: float | None
    eps: float | None
    delta: float | None
    decision: str  # "continue" | "stop:<stage>" | "cap" | "disabled"

    def as_dict(self):
        return {
            "layer": self.layer,
            "iteration": self.iteration,
            "score": self.score,
            "eps": self.eps,
            "delta": self.delta,
            "decision": self.decision,
        }


def run_layer(level: int, fixed_feat: Tensor, moving_feat: Tensor,
              incoming: DeformationField | None, store, config: TciConfig,
              fixed_image: np.ndarray, moving_image: np.ndarray,
              options: DecoderOptions, trace: list | None = None,
              detach_iterations: bool = False) -> DeformationField:
    """Iterate one decoding layer and return its field upsampled by 2.

    ``incoming`` is the previous (coarser) layer's output at this layer's
    resolution; it is None for the deepest layer.  Similarity is always
    scored on the full-resolution image pair.
    """
    if level == 4 and incoming is not None:
        raise ValueError("deepest layer takes no incoming field")
    if level < 4 and incoming is None:
        raise ValueError(f"layer {level} requires an incoming field")
    window = TciWindow(config.window_size)
    prev_score: float | None = None
    phi_prev = incoming
    phi = None
    enabled = config.layer_enabled(level)
    for k in range(1, config.k_max + 1):
        if phi_prev is None:
            warped_feat = moving_feat
        else:
            warped_feat = ad.warp(moving_feat, phi_prev.disp)
        increment, _ = decode_step(warped_feat, fixed_feat, store, level,
                                   options)
        inc_field = DeformationField(increment, scale_level=level)
        phi = inc_field if phi_prev is None else compose(phi_prev, inc_field)
        if not enabled or config.k_max == 1:
            if trace is not None:
                trace.append(TraceRow(level, k, None, None, None,
                                      "disabled" if not enabled else "cap"))
            break
        score = _full_res_score(phi, level, fixed_image, moving_image, config)
        decision = should_stop(window, score, prev_score, config)
        if trace is not None:
            label = f"stop:{decision.stage}" if decision.stop else (
                "cap" if k == config.k_max else "continue")
            trace.append(TraceRow(level, k, score, decision.eps,
                                  decision.delta, label))
        if decision.stop:
            break
        window.push(score)
        prev_score = score
        phi_prev = phi if not detach_iterations else DeformationField(
            phi.disp.detach(), phi.scale_level)
    return upsample_field(phi, 2)


def _full_res_score(phi: DeformationField, level: int,
                    fixed_image: np.ndarray, moving_image: np.ndarray,
                    config: TciConfig) -> float:
    full = upsample_field(
        DeformationField(Tensor(phi.disp.data), phi.scale_level), 2 ** level)
    warped = ad.warp_array(moving_image[None, None], full.disp.data)[0, 0]
    return similarity(fixed_image, warped, config.sim_metric,
                      config.sim_patch)
