"""Dataset handling, training loop, checkpointing, evaluation, ablations."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import (SynthSpec, load_labels, load_volume, make_pair, save_field,
                   save_labels, save_volume)
from .fields import jacobian_folding_fraction, warp_labels
from .losses import total_loss
from .metrics import LabelVolume, mean_dice, mse, surface_distances
from .model import init_params, register_pair
from .optim import ParamStore


class TrainingDiverged(RuntimeError):
    pass


# -- datasets ---------------------------------------------------------------


def write_dataset(out_dir: Path, spec: SynthSpec, num_pairs: int) -> dict:
    """Generate ``num_pairs`` synthetic pairs under ``out_dir``; returns manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(num_pairs):
        pair_spec = SynthSpec(spec.grid_size, spec.num_blobs,
                              spec.deform_amplitude, spec.deform_smoothness,
                              seed=spec.seed + i)
        fixed, moving, fixed_l, moving_l, gt = make_pair(pair_spec)
        pdir = out_dir / f"pair_{i:03d}"
        pdir.mkdir(exist_ok=True)
        save_volume(pdir / "fixed", fixed)
        save_volume(pdir / "moving", moving)
        save_labels(pdir / "fixed_labels", fixed_l)
        save_labels(pdir / "moving_labels", moving_l)
        save_field(pdir / "gt_field", gt)
        pairs.append({"id": f"pair_{i:03d}", "dir": pdir.name,
                      "seed": pair_spec.seed})
    manifest = {
        "format_version": 1,
        "spec": {
            "grid_size": spec.grid_size,
            "num_blobs": spec.num_blobs,
            "deform_amplitude": spec.deform_amplitude,
            "deform_smoothness": spec.deform_smoothness,
            "seed": spec.seed,
        },
        "pairs": pairs,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir: Path) -> list[dict]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    loaded = []
    for entry in manifest["pairs"]:
        pdir = data_dir / entry["dir"]
        loaded.append({
            "id": entry["id"],
            "fixed": load_volume(pdir / "fixed"),
            "moving": load_volume(pdir / "moving"),
            "fixed_labels": load_labels(pdir / "fixed_labels"),
            "moving_labels": load_labels(pdir / "moving_labels"),
        })
    return loaded


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, store: ParamStore, config: RunConfig):
    arrays = store.state_arrays()
    arrays["config_json"] = np.frombuffer(
        json.dumps(config.to_dict(), sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    config = RunConfig.from_dict(
        json.loads(arrays.pop("config_json").tobytes().decode()))
    return ParamStore.from_state_arrays(arrays), config


# -- training ---------------------------------------------------------------


def train(config: RunConfig, pairs: list[dict], store: ParamStore | None = None,
          log=None) -> tuple[ParamStore, list[float]]:
    """Adam training over the pair list; returns (params, loss curve)."""
    if store is None:
        store = init_params(config.model, seed=config.train.seed)
    curve = []
    for step in range(config.train.steps):
        pair = pairs[step % len(pairs)]
        fixed = pair["fixed"].values
        moving = pair["moving"].values
        phi, warped, _ = register_pair(
            store, fixed, moving, config.model,
            detach_iterations=config.train.detach_iterations)
        loss = total_loss(Tensor(fixed[None, None]), warped, phi, config.loss)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"non-finite loss {value} at step {step} on {pair['id']}")
        store.zero_grad()
        loss.backward()
        store.adam_step(config.train.lr)
        curve.append(value)
        if log is not None and (step % 25 == 0 or step == config.train.steps - 1):
            log(f"step {step}: loss {value:.3f}")
    return store, curve


# -- evaluation -------------------------------------------------------------


def evaluate_pair(store: ParamStore, config: RunConfig, pair: dict):
    """Register one pair and compute all metrics; returns (record, seconds)."""
    fixed = pair["fixed"].values
    moving = pair["moving"].values
    t0 = time.perf_counter()
    with ad.no_grad():
        phi, warped, trace = register_pair(store, fixed, moving, config.model)
    seconds = time.perf_counter() - t0
    fixed_l: LabelVolume = pair["fixed_labels"]
    moving_l: LabelVolume = pair["moving_labels"]
    warped_l = LabelVolume(warp_labels(moving_l.labels, phi.disp.data[0]),
                           moving_l.spacing)
    sdists = []
    for lab in fixed_l.foreground_labels():
        if (warped_l.labels == lab).any():
            sdists.append(surface_distances(fixed_l, warped_l, lab))
    iters = {}
    for row in trace:
        iters[row.layer] = max(iters.get(row.layer, 0), row.iteration)
    record = {
        "id": pair["id"],
        "dice_identity": mean_dice(fixed_l, moving_l),
        "dice": mean_dice(fixed_l, warped_l),
        "hd95": float(np.mean([s[0] for s in sdists])) if sdists else None,
        "assd": float(np.mean([s[1] for s in sdists])) if sdists else None,
        "mse": mse(fixed, warped.data[0, 0]),
        "mse_identity": mse(fixed, moving),
        "folding_fraction": jacobian_folding_fraction(phi),
        "iterations": {str(k): v for k, v in sorted(iters.items())},
        "trace": [row.as_dict() for row in trace],
    }
    return record, seconds


def evaluate(store: ParamStore, config: RunConfig, pairs: list[dict]):
    """Returns (report dict, timing dict); the report is fully deterministic."""
    records, timings = [], {}
    for pair in sorted(pairs, key=lambda p: p["id"]):
        record, seconds = evaluate_pair(store, config, pair)
        records.append(record)
        timings[pair["id"]] = seconds
    def agg(key):
        vals = [r[key] for r in records if r[key] is not None]
        if not vals:
            return None
        return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    report = {
        "config": config.to_dict(),
        "seed": config.train.seed,
        "pairs": records,
        "aggregate": {k: agg(k) for k in
                      ("dice", "dice_identity", "hd95", "assd", "mse",
                       "mse_identity", "folding_fraction")},
    }
    timing = {"per_pair_seconds": timings,
              "mean_seconds": float(np.mean(list(timings.values())))
              if timings else None}
    return report, timing


def report_table(report: dict) -> str:
    lines = [f"{'pair':<10} {'dice':>7} {'dice_id':>8} {'mse':>9} "
             f"{'hd95':>7} {'assd':>7} {'fold%':>7}"]
    for r in report["pairs"]:
        hd = f"{r['hd95']:.3f}" if r["hd95"] is not None else "-"
        asd = f"{r['assd']:.3f}" if r["assd"] is not None else "-"
        lines.append(
            f"{r['id']:<10} {r['dice']:>7.4f} {r['dice_identity']:>8.4f} "
            f"{r['mse']:>9.6f} {hd:>7} {asd:>7} "
            f"{100 * r['folding_fraction']:>6.3f}%")
    a = report["aggregate"]
    lines.append(
        f"{'mean':<10} {a['dice']['mean']:>7.4f} "
        f"{a['dice_identity']['mean']:>8.4f} {a['mse']['mean']:>9.6f}")
    return "\n".join(lines) + "\n"


# -- ablation grids ---------------------------------------------------------


def ablation_grid(name: str) -> list[tuple[str, dict]]:
    """Named preset -> list of (cell label, dotted config overrides)."""
    if name == "ferm":
        return [
            ("fusion:off attention:off", {"model.decoder.use_fusion": False,
                                          "model.decoder.use_attention": False}),
            ("fusion:off attention:on", {"model.decoder.use_fusion": False,
                                         "model.decoder.use_attention": True}),
            ("fusion:on attention:off", {"model.decoder.use_fusion": True,
                                         "model.decoder.use_attention": False}),
            ("fusion:on attention:on", {"model.decoder.use_fusion": True,
                                        "model.decoder.use_attention": True}),
        ]
    if name == "tci-mode":
        return [(mode, {"model.tci.mode": mode}) for mode in
                ("conv_only", "stab_only", "conv_then_stab", "stab_then_conv")]
    if name == "thresholds":
        cells = []
        for ds in (0.01, 0.005, 0.001):
            for dc in (0.01, 0.005):
                cells.append((f"delta_s={ds} delta_c={dc}",
                              {"model.tci.delta_s": ds,
                               "model.tci.delta_c": dc}))
        return cells
    if name == "sim-metric":
        return [(m, {"model.tci.sim_metric": m}) for m in ("ncc", "mae", "mse")]
    if name == "window":
        return [(f"t={t}", {"model.tci.window_size": t}) for t in (3, 4, 5)]
    if name == "layers":
        masks = [
            (False, False, False, False), (False, False, False, True),
            (False, False, True, False), (False, True, False, False),
            (True, False, False, False), (False, False, True, True),
            (False, True, True, True), (True, True, True, True),
        ]
        return [("layers:" + "".join("1" if b else "0" for b in mask),
                 {"model.tci.per_layer_enabled": list(mask)})
                for mask in masks]
    raise ValueError(f"unknown ablation grid {name!r}")


def run_ablation(name: str, base_config: RunConfig, pairs: list[dict],
                 steps: int, seeds: list[int], log=None) -> dict:
    """Train + evaluate each grid cell on the shared dataset and seeds."""
    cells = []
    for label, overrides in ablation_grid(name):
        per_seed = []
        for seed in seeds:
            cfg = base_config.apply_overrides(
                dict(overrides, **{"train.steps": steps, "train.seed": seed}))
            if log is not None:
                log(f"[{label}] seed {seed}: training {steps} steps")
            store, _ = train(cfg, pairs)
            report, _ = evaluate(store, cfg, pairs)
            per_seed.append({
                "seed": seed,
                "dice": report["aggregate"]["dice"]["mean"],
                "mse": report["aggregate"]["mse"]["mean"],
                "folding_fraction":
                    report["aggregate"]["folding_fraction"]["mean"],
            })
        cells.append({
            "label": label,
            "overrides": overrides,
            "per_seed": per_seed,
            "dice_mean": float(np.mean([r["dice"] for r in per_seed])),
            "mse_mean": float(np.mean([r["mse"] for r in per_seed])),
        })
    return {"grid": name, "steps": steps, "seeds": seeds, "cells": cells}


def ablation_table(result: dict) -> str:
    lines = [f"grid: {result['grid']}  (steps={result['steps']}, "
             f"seeds={result['seeds']})",
             f"{'cell':<32} {'dice':>8} {'mse':>10}"]
    for cell in result["cells"]:
        lines.append(f"{cell['label']:<32} {cell['dice_mean']:>8.4f} "
                     f"{cell['mse_mean']:>10.6f}")
    return "\n".join(lines) + "\n"
