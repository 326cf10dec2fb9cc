import json

import numpy as np
import pytest

from pyramidreg import train as tr
from pyramidreg.config import RunConfig
from pyramidreg.data import SynthSpec, make_pair
from pyramidreg.model import init_params


def tiny_config(steps=2):
    return RunConfig.from_dict({
        "loss": {"patch_size": 3},
        "train": {"steps": steps, "lr": 1e-4, "seed": 0},
        "synth": {"grid_size": 16, "seed": 0},
    })


def tiny_pairs(n=1, grid=16):
    pairs = []
    for i in range(n):
        fixed, moving, fl, ml, _ = make_pair(SynthSpec(grid_size=grid, seed=i))
        pairs.append({"id": f"p{i}", "fixed": fixed, "moving": moving,
                      "fixed_labels": fl, "moving_labels": ml})
    return pairs


class TestDataset:
    def test_write_creates_expected_layout(self, tmp_path):
        manifest = tr.write_dataset(tmp_path, SynthSpec(grid_size=16), 2)
        assert len(manifest["pairs"]) == 2
        for i in range(2):
            pdir = tmp_path / f"pair_{i:03d}"
            for stem in ("fixed", "moving", "fixed_labels", "moving_labels",
                         "gt_field"):
                assert (pdir / f"{stem}.json").exists()
                assert (pdir / f"{stem}.raw").exists()
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk == manifest
        assert on_disk["format_version"] == 1

    def test_per_pair_seeds_increment(self, tmp_path):
        manifest = tr.write_dataset(tmp_path, SynthSpec(grid_size=16, seed=7), 3)
        assert [p["seed"] for p in manifest["pairs"]] == [7, 8, 9]

    def test_roundtrip_matches_generator(self, tmp_path):
        tr.write_dataset(tmp_path, SynthSpec(grid_size=16, seed=3), 1)
        loaded = tr.load_dataset(tmp_path)
        fixed, moving, fl, ml, _ = make_pair(SynthSpec(grid_size=16, seed=3))
        # intensities survive the f32 round-trip
        np.testing.assert_array_equal(
            loaded[0]["fixed"].values, fixed.values.astype(np.float32))
        np.testing.assert_array_equal(loaded[0]["fixed_labels"].labels,
                                      fl.labels)
        np.testing.assert_array_equal(loaded[0]["moving_labels"].labels,
                                      ml.labels)

    def test_empty_dataset(self, tmp_path):
        tr.write_dataset(tmp_path, SynthSpec(grid_size=16), 0)
        assert tr.load_dataset(tmp_path) == []


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_config()
        store = init_params(cfg.model, seed=5)
        tr.save_checkpoint(tmp_path / "ck.npz", store, cfg)
        back, cfg_back = tr.load_checkpoint(tmp_path / "ck.npz")
        assert cfg_back.to_dict() == cfg.to_dict()
        assert sorted(back.paths()) == sorted(store.paths())
        for path in store.paths():
            np.testing.assert_array_equal(back[path].data, store[path].data)

    def test_adam_state_survives(self, tmp_path):
        cfg = tiny_config(steps=2)
        store, _ = tr.train(cfg, tiny_pairs())
        tr.save_checkpoint(tmp_path / "ck.npz", store, cfg)
        back, _ = tr.load_checkpoint(tmp_path / "ck.npz")
        a, b = store.state_arrays(), back.state_arrays()
        assert sorted(a) == sorted(b)
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])


class TestTrain:
    def test_zero_steps_returns_init(self):
        cfg = tiny_config(steps=0)
        store, curve = tr.train(cfg, tiny_pairs())
        assert curve == []
        ref = init_params(cfg.model, seed=cfg.train.seed)
        for path in ref.paths():
            np.testing.assert_array_equal(store[path].data, ref[path].data)

    def test_loss_decreases(self):
        cfg = tiny_config(steps=8)
        _, curve = tr.train(cfg, tiny_pairs())
        assert len(curve) == 8
        assert curve[-1] < curve[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_raises_with_step_and_pair(self):
        cfg = tiny_config(steps=1)
        store = init_params(cfg.model, seed=0)
        store["encoder/l1/kernel"].data[:] = np.nan
        with pytest.raises(tr.TrainingDiverged, match="step 0 on p0"):
            tr.train(cfg, tiny_pairs(), store=store)

    def test_pairs_cycle(self):
        # 3 steps over 2 pairs touches both and wraps around
        cfg = tiny_config(steps=3)
        _, curve = tr.train(cfg, tiny_pairs(n=2))
        assert len(curve) == 3


class TestEvaluate:
    def test_report_structure(self):
        cfg = tiny_config()
        store = init_params(cfg.model, seed=0)
        report, timing = tr.evaluate(store, cfg, tiny_pairs())
        rec = report["pairs"][0]
        for key in ("dice", "dice_identity", "hd95", "assd", "mse",
                    "mse_identity", "folding_fraction", "iterations", "trace"):
            assert key in rec
        assert report["aggregate"]["dice"]["mean"] == rec["dice"]
        assert "per_pair_seconds" in timing

    def test_report_deterministic_timing_not_in_it(self):
        cfg = tiny_config()
        store = init_params(cfg.model, seed=0)
        r1, _ = tr.evaluate(store, cfg, tiny_pairs())
        r2, _ = tr.evaluate(store, cfg, tiny_pairs())
        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)

    def test_identity_model_scores_identity(self):
        # zero-initialised head: warped == moving, so dice == dice_identity
        cfg = tiny_config()
        store = init_params(cfg.model, seed=0)
        report, _ = tr.evaluate(store, cfg, tiny_pairs())
        rec = report["pairs"][0]
        assert rec["dice"] == rec["dice_identity"]
        assert rec["mse"] == rec["mse_identity"]
        assert rec["folding_fraction"] == 0.0

    def test_report_table_smoke(self):
        cfg = tiny_config()
        store = init_params(cfg.model, seed=0)
        report, _ = tr.evaluate(store, cfg, tiny_pairs())
        table = tr.report_table(report)
        assert "dice" in table and "p0" in table and "mean" in table


class TestAblation:
    def test_grid_sizes(self):
        assert len(tr.ablation_grid("ferm")) == 4
        assert len(tr.ablation_grid("tci-mode")) == 4
        assert len(tr.ablation_grid("thresholds")) == 6
        assert len(tr.ablation_grid("sim-metric")) == 3
        assert len(tr.ablation_grid("window")) == 3
        assert len(tr.ablation_grid("layers")) == 8
        with pytest.raises(ValueError):
            tr.ablation_grid("nope")

    def test_run_ablation_smoke(self):
        result = tr.run_ablation("window", tiny_config(), tiny_pairs(),
                                 steps=1, seeds=[0])
        assert [c["label"] for c in result["cells"]] == ["t=3", "t=4", "t=5"]
        for cell in result["cells"]:
            assert np.isfinite(cell["dice_mean"])
        table = tr.ablation_table(result)
        assert "t=4" in table
