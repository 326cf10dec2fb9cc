import itertools

import numpy as np
import pytest

from pyramidreg import autodiff as ad
from pyramidreg.autodiff import ShapeError, Tensor
from pyramidreg.fields import (DeformationField, compose,
                               jacobian_folding_fraction, upsample_field,
                               warp, warp_labels)

from _util import leaf, gradcheck


def field_from(u):
    return DeformationField(Tensor(u), scale_level=0)


def naive_trilinear_sample(img, disp):
    """Per-voxel trilinear sampling oracle with border clamping."""
    B, C, D, H, W = img.shape
    out = np.zeros_like(img)
    for b, c in itertools.product(range(B), range(C)):
        for z, y, x in itertools.product(range(D), range(H), range(W)):
            cz = np.clip(z + disp[b, 0, z, y, x], 0, D - 1)
            cy = np.clip(y + disp[b, 1, z, y, x], 0, H - 1)
            cx = np.clip(x + disp[b, 2, z, y, x], 0, W - 1)
            z0 = int(np.clip(np.floor(cz), 0, max(D - 2, 0)))
            y0 = int(np.clip(np.floor(cy), 0, max(H - 2, 0)))
            x0 = int(np.clip(np.floor(cx), 0, max(W - 2, 0)))
            fz, fy, fx = cz - z0, cy - y0, cx - x0
            acc = 0.0
            for bz, by, bx in itertools.product((0, 1), repeat=3):
                w = ((fz if bz else 1 - fz) * (fy if by else 1 - fy)
                     * (fx if bx else 1 - fx))
                acc += w * img[b, c, min(z0 + bz, D - 1), min(y0 + by, H - 1),
                               min(x0 + bx, W - 1)]
            out[b, c, z, y, x] = acc
    return out


class TestWarp:
    def test_zero_field_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((1, 2, 4, 4, 4))
        out = warp(Tensor(img), field_from(np.zeros((1, 3, 4, 4, 4))))
        np.testing.assert_array_equal(out.data, img)

    def test_unit_translation_of_ramp(self):
        n = 6
        ramp = np.broadcast_to(np.arange(n, dtype=float), (n, n, n)).copy()
        u = np.zeros((1, 3, n, n, n))
        u[0, 2] = 1.0  # shift by one voxel in x
        out = warp(Tensor(ramp[None, None]), field_from(u)).data[0, 0]
        np.testing.assert_allclose(out[:, :, :-1], ramp[:, :, 1:])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        img = rng.random((1, 2, 5, 5, 5))
        disp = rng.standard_normal((1, 3, 5, 5, 5)) * 1.5
        got = warp(Tensor(img), field_from(disp)).data
        np.testing.assert_allclose(got, naive_trilinear_sample(img, disp),
                                   rtol=1e-6, atol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            warp(Tensor(np.zeros((1, 1, 4, 4, 4))),
                 field_from(np.zeros((1, 3, 5, 5, 5))))

    def test_gradcheck_both_arguments(self):
        rng = np.random.default_rng(2)
        img = leaf(rng, 1, 1, 4, 4, 4)
        # offsets stay inside cells and away from borders: no kinks near them
        disp = Tensor(rng.uniform(0.15, 0.35, (1, 3, 4, 4, 4)),
                      requires_grad=True)
        gradcheck(lambda i, d: (ad.warp(i, d) ** 2).sum(), [img, disp],
                  eps=1e-4)


class TestCompose:
    def test_zero_identity_both_sides(self):
        rng = np.random.default_rng(3)
        u = rng.standard_normal((1, 3, 4, 4, 4)) * 0.5
        zero = field_from(np.zeros_like(u))
        f = field_from(u)
        np.testing.assert_allclose(compose(zero, f).disp.data, u)
        np.testing.assert_allclose(compose(f, zero).disp.data, u)

    def test_constant_translations_add(self):
        n = 8
        a = np.zeros((1, 3, n, n, n))
        b = np.zeros((1, 3, n, n, n))
        a[0, 2] = 1.0
        b[0, 1] = 1.0
        out = compose(field_from(a), field_from(b)).disp.data
        interior = out[:, :, 1:-2, 1:-2, 1:-2]
        np.testing.assert_allclose(interior[0, 1], 1.0)
        np.testing.assert_allclose(interior[0, 2], 1.0)
        np.testing.assert_allclose(interior[0, 0], 0.0)

    def test_inverse_shrinks_field(self):
        # smooth sinusoidal field and its numerically-constructed inverse
        n = 12
        gz, gy, gx = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
        u = np.zeros((1, 3, n, n, n))
        u[0, 2] = 0.8 * np.sin(2 * np.pi * gx / n)
        fwd = field_from(u)
        # fixed-point iteration for the inverse displacement
        inv = np.zeros_like(u)
        for _ in range(60):
            with ad.no_grad():
                sampled = ad.warp(Tensor(u), Tensor(inv)).data
            inv = -sampled
        comp = compose(field_from(inv), fwd).disp.data
        core = comp[:, :, 2:-2, 2:-2, 2:-2]
        assert np.abs(core).max() < 0.1 * np.abs(u).max()

    def test_scale_mismatch_raises(self):
        a = DeformationField(Tensor(np.zeros((1, 3, 4, 4, 4))), 1)
        b = DeformationField(Tensor(np.zeros((1, 3, 4, 4, 4))), 2)
        with pytest.raises(ShapeError):
            compose(a, b)


class TestUpsampleField:
    def test_factor_one_identity(self):
        f = field_from(np.random.rand(1, 3, 4, 4, 4))
        assert upsample_field(f, 1) is f

    def test_constant_field_scales(self):
        u = np.zeros((1, 3, 4, 4, 4))
        u[0, 2] = 1.0
        out = upsample_field(field_from(u), 2)
        assert out.disp.shape == (1, 3, 8, 8, 8)
        np.testing.assert_allclose(out.disp.data[0, 2], 2.0)
        np.testing.assert_allclose(out.disp.data[0, :2], 0.0)

    def test_scale_level_decrements(self):
        f = DeformationField(Tensor(np.zeros((1, 3, 4, 4, 4))), 3)
        assert upsample_field(f, 2).scale_level == 2
        assert upsample_field(f, 4).scale_level == 1

    def test_consistency_with_half_res_warp(self):
        # warping at full res with the upsampled field approximates
        # upsampling the half-res warped result
        rng = np.random.default_rng(4)
        n = 16
        from scipy.ndimage import gaussian_filter
        img_full = gaussian_filter(rng.random((n, n, n)), 2.0)
        img_half = ad.avg_pool3d(Tensor(img_full[None, None]), 2).data
        u_half = np.stack([gaussian_filter(rng.standard_normal((n // 2,) * 3),
                                           2.0) for _ in range(3)])
        u_half *= 1.0 / max(np.abs(u_half).max(), 1e-9)
        f_half = DeformationField(Tensor(u_half[None]), 1)
        warped_half = ad.warp(Tensor(img_half), f_half.disp).data
        up_of_warp = ad.upsample_trilinear(Tensor(warped_half), 2).data
        f_full = upsample_field(f_half, 2)
        warp_of_up = ad.warp(Tensor(img_full[None, None]), f_full.disp).data
        span = img_full.max() - img_full.min()
        dev = np.abs(up_of_warp - warp_of_up).mean()
        assert dev < 0.05 * span


class TestJacobianFolding:
    def test_zero_field(self):
        assert jacobian_folding_fraction(
            field_from(np.zeros((1, 3, 4, 4, 4)))) == 0.0

    def test_constant_translation(self):
        u = np.zeros((1, 3, 5, 5, 5))
        u[0, 0] = 2.0
        u[0, 2] = -3.0
        assert jacobian_folding_fraction(field_from(u)) == 0.0

    def test_strong_fold_everywhere(self):
        n = 6
        x = np.arange(n, dtype=float)
        u = np.zeros((1, 3, n, n, n))
        u[0, 2] = np.broadcast_to(-2.0 * x, (n, n, n))
        # det = 1 + du_x/dx = -1 at every interior voxel
        assert jacobian_folding_fraction(field_from(u)) == 1.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        u = rng.standard_normal((1, 3, 6, 6, 6)) * 0.1
        base = jacobian_folding_fraction(field_from(u))
        shifted = u.copy()
        shifted[0, 1] += 7.0
        assert jacobian_folding_fraction(field_from(shifted)) == base


class TestWarpLabels:
    def test_zero_field_identity(self):
        labels = np.random.default_rng(6).integers(0, 4, (5, 5, 5))
        out = warp_labels(labels, np.zeros((3, 5, 5, 5)))
        np.testing.assert_array_equal(out, labels)

    def test_integer_translation(self):
        labels = np.zeros((4, 4, 4), dtype=int)
        labels[1, 1, 1] = 3
        disp = np.zeros((3, 4, 4, 4))
        disp[2] = 1.0
        out = warp_labels(labels, disp)
        assert out[1, 1, 0] == 3
