import numpy as np
import pytest

from pyramidreg import autodiff as ad
from pyramidreg.data import SynthSpec, make_pair
from pyramidreg.model import ModelConfig, init_params, pad_to_multiple, register_pair


@pytest.fixture(scope="module")
def pair():
    return make_pair(SynthSpec(seed=0))


def test_identity_start_zero_field(pair):
    # zero-initialised field head: warped == moving bitwise, field all zeros
    fixed, moving, *_ = pair
    store = init_params(ModelConfig(), seed=0)
    with ad.no_grad():
        phi, warped, _ = register_pair(store, fixed.values, moving.values,
                                       ModelConfig())
    np.testing.assert_array_equal(phi.disp.data, 0.0)
    np.testing.assert_array_equal(warped.data[0, 0], moving.values)


def test_field_is_full_resolution(pair):
    fixed, moving, *_ = pair
    store = init_params(ModelConfig(), seed=0)
    with ad.no_grad():
        phi, warped, _ = register_pair(store, fixed.values, moving.values,
                                       ModelConfig())
    assert phi.disp.shape == (1, 3) + fixed.values.shape
    assert phi.scale_level == 0


def test_trace_iterations_within_cap(pair):
    fixed, moving, *_ = pair
    cfg = ModelConfig()
    store = init_params(cfg, seed=1)
    # give the heads small random weights so iteration actually happens
    rng = np.random.default_rng(2)
    for level in range(1, 5):
        k = store[f"decoder/l{level}/head2/kernel"]
        k.data[:] = rng.standard_normal(k.shape) * 0.05
    with ad.no_grad():
        _, _, trace = register_pair(store, fixed.values, moving.values, cfg)
    per_layer = {}
    for row in trace:
        per_layer.setdefault(row.layer, []).append(row.iteration)
    assert set(per_layer) == {1, 2, 3, 4}
    for level, iters in per_layer.items():
        assert 1 <= max(iters) <= cfg.tci.k_max
    # a stop row, when present, ends its layer
    for level, rows in per_layer.items():
        stops = [r for r in trace
                 if r.layer == level and r.decision.startswith("stop")]
        assert len(stops) <= 1
        if stops:
            assert stops[0].iteration == max(rows)


def test_gradients_reach_every_parameter_group(pair):
    fixed, moving, *_ = pair
    cfg = ModelConfig()
    store = init_params(cfg, seed=3)
    rng = np.random.default_rng(4)
    for level in range(1, 5):
        k = store[f"decoder/l{level}/head2/kernel"]
        k.data[:] = rng.standard_normal(k.shape) * 0.05
    phi, warped, _ = register_pair(store, fixed.values, moving.values, cfg)
    loss = (warped ** 2).sum() + (phi.disp ** 2).sum()
    store.zero_grad()
    loss.backward()
    assert store.grad_norm("encoder/") > 0.0
    for level in range(1, 5):
        assert store.grad_norm(f"decoder/l{level}/") > 0.0, level


def test_pad_to_multiple_roundtrip():
    values = np.random.rand(20, 32, 17)
    padded, dims = pad_to_multiple(values)
    assert padded.shape == (32, 32, 32)
    assert dims == (20, 32, 17)
    np.testing.assert_array_equal(padded[:20, :32, :17], values)


def test_register_pads_and_crops_odd_shapes():
    rng = np.random.default_rng(5)
    fixed = rng.random((20, 32, 20))
    moving = rng.random((20, 32, 20))
    store = init_params(ModelConfig(), seed=0)
    with ad.no_grad():
        phi, warped, _ = register_pair(store, fixed, moving, ModelConfig())
    assert phi.disp.shape == (1, 3, 20, 32, 20)
    assert warped.shape == (1, 1, 20, 32, 20)


def test_shape_mismatch_raises():
    store = init_params(ModelConfig(), seed=0)
    with pytest.raises(ad.ShapeError):
        register_pair(store, np.zeros((32, 32, 32)), np.zeros((16, 16, 16)),
                      ModelConfig())
