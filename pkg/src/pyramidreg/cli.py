"""Command-line surface: synth, train, register, eval, ablate."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import RunConfig
from .data import SynthSpec, load_labels, load_volume, save_field, save_labels, save_volume
from .data import Volume
from .fields import warp_labels
from .metrics import LabelVolume
from .model import register_pair
from . import autodiff as ad
from . import train as tr

OUTPUT_ROOT_ENV = "PYRAMIDREG_OUT"


def _resolve(path: str) -> Path:
    import os
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_config(config_path, overrides: dict) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    return cfg.apply_overrides(overrides)


@click.group()
def main():
    """Coarse-to-fine deformable 3D registration with adaptive iteration."""


@main.command()
@click.option("--out", required=True, help="dataset output directory")
@click.option("--num-pairs", default=2, show_default=True)
@click.option("--config", "config_path", default=None, help="JSON run config")
@click.option("--grid-size", type=int, default=None)
@click.option("--num-blobs", type=int, default=None)
@click.option("--amplitude", type=float, default=None)
@click.option("--smoothness", type=float, default=None)
@click.option("--seed", type=int, default=None)
def synth(out, num_pairs, config_path, grid_size, num_blobs, amplitude,
          smoothness, seed):
    """Generate a synthetic dataset with ground-truth labels and fields."""
    cfg = _load_config(config_path, {
        "synth.grid_size": grid_size, "synth.num_blobs": num_blobs,
        "synth.deform_amplitude": amplitude,
        "synth.deform_smoothness": smoothness, "synth.seed": seed,
    })
    out_dir = _resolve(out)
    manifest = tr.write_dataset(out_dir, cfg.synth, num_pairs)
    click.echo(f"wrote {len(manifest['pairs'])} pairs to {out_dir}")


@main.command()
@click.option("--data", "data_dir", required=True, help="dataset directory")
@click.option("--out", required=True, help="run output directory")
@click.option("--config", "config_path", default=None)
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--patch-size", type=int, default=None, help="local NCC window")
@click.option("--smooth-weight", type=float, default=None)
@click.option("--detach-iterations", is_flag=True, default=None)
def train(data_dir, out, config_path, steps, lr, seed, patch_size,
          smooth_weight, detach_iterations):
    """Train on a dataset and write a checkpoint plus the loss curve."""
    cfg = _load_config(config_path, {
        "train.steps": steps, "train.lr": lr, "train.seed": seed,
        "loss.patch_size": patch_size, "loss.smooth_weight": smooth_weight,
        "train.detach_iterations": detach_iterations,
    })
    pairs = tr.load_dataset(_resolve(data_dir))
    if not pairs:
        raise click.ClickException("dataset is empty")
    out_dir = _resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        store, curve = tr.train(cfg, pairs, log=click.echo)
    except tr.TrainingDiverged as exc:
        raise click.ClickException(str(exc))
    tr.save_checkpoint(out_dir / "checkpoint.npz", store, cfg)
    (out_dir / "loss_curve.json").write_text(
        json.dumps(curve, indent=2) + "\n")
    click.echo(f"checkpoint written to {out_dir / 'checkpoint.npz'}")


@main.command()
@click.option("--checkpoint", required=True)
@click.option("--fixed", "fixed_path", required=True)
@click.option("--moving", "moving_path", required=True)
@click.option("--moving-labels", "labels_path", default=None)
@click.option("--out", required=True)
def register(checkpoint, fixed_path, moving_path, labels_path, out):
    """Register one pair; writes the field, warped image and the trace."""
    store, cfg = tr.load_checkpoint(_resolve(checkpoint))
    fixed = load_volume(_resolve(fixed_path))
    moving = load_volume(_resolve(moving_path))
    if fixed.shape != moving.shape:
        raise click.ClickException(
            f"image shapes differ: {fixed.shape} vs {moving.shape}")
    out_dir = _resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ad.no_grad():
        phi, warped, trace = register_pair(store, fixed.values, moving.values,
                                           cfg.model)
    save_field(out_dir / "field", phi)
    save_volume(out_dir / "warped", Volume(warped.data[0, 0], fixed.spacing))
    if labels_path:
        labels = load_labels(_resolve(labels_path))
        warped_l = warp_labels(labels.labels, phi.disp.data[0])
        save_labels(out_dir / "warped_labels",
                    LabelVolume(warped_l, labels.spacing))
    (out_dir / "trace.json").write_text(
        json.dumps([row.as_dict() for row in trace], indent=2) + "\n")
    click.echo(f"registration outputs written to {out_dir}")


@main.command("eval")
@click.option("--checkpoint", required=True)
@click.option("--data", "data_dir", required=True)
@click.option("--out", required=True)
def eval_cmd(checkpoint, data_dir, out):
    """Register every dataset pair and write metric reports."""
    store, cfg = tr.load_checkpoint(_resolve(checkpoint))
    pairs = tr.load_dataset(_resolve(data_dir))
    out_dir = _resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report, timing = tr.evaluate(store, cfg, pairs)
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "timing.json").write_text(
        json.dumps(timing, indent=2, sort_keys=True) + "\n")
    table = tr.report_table(report)
    (out_dir / "report.txt").write_text(table)
    click.echo(table, nl=False)


@main.command()
@click.option("--grid", required=True,
              type=click.Choice(["ferm", "tci-mode", "thresholds",
                                 "sim-metric", "window", "layers"]))
@click.option("--data", "data_dir", required=True)
@click.option("--out", required=True)
@click.option("--config", "config_path", default=None)
@click.option("--steps", type=int, default=120, show_default=True)
@click.option("--seeds", default="0", show_default=True,
              help="comma-separated training seeds")
def ablate(grid, data_dir, out, config_path, steps, seeds):
    """Train/evaluate every cell of a named ablation grid."""
    cfg = _load_config(config_path, {})
    pairs = tr.load_dataset(_resolve(data_dir))
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    result = tr.run_ablation(grid, cfg, pairs, steps, seed_list,
                             log=click.echo)
    out_dir = _resolve(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n")
    table = tr.ablation_table(result)
    (out_dir / "ablation.txt").write_text(table)
    click.echo(table, nl=False)


if __name__ == "__main__":
    sys.exit(main())
