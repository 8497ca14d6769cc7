import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from toonfield.numcore import NumericError, np_generator
from toonfield.scene import (InstanceCode, SceneField, StyleOracle, identity_oracle,
                             sample_instance_code, sdf_to_density)

F64 = torch.float64


def t64(*vals):
    return torch.tensor(vals, dtype=F64)


class TestSdf:
    def test_sphere_center_value(self, sphere_field):
        assert float(sphere_field.sdf(t64(0.0, 0.0, 0.0))) == pytest.approx(-0.5, abs=1e-5)

    def test_sphere_surface_value(self, sphere_field):
        assert float(sphere_field.sdf(t64(0.5, 0.0, 0.0))) == pytest.approx(0.0, abs=1e-6)

    def test_sign_pattern_matches_brute_force_membership(self):
        field = SceneField.from_seed(3, dtype=F64)
        axis = torch.linspace(-1, 1, 16, dtype=F64)
        grid = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"), dim=-1)
        pts = grid.reshape(-1, 3)
        d = field.sdf(pts)
        inside = field.inside_primitives(pts)
        # the smooth union deviates from the hard union by up to k*ln(2)
        # near weld seams; compare signs outside that slack band
        slack = field.smooth_k * math.log(2.0) + 1e-6
        clear = d.abs() > slack
        assert clear.sum() > 3000
        assert torch.equal(d[clear] < 0, inside[clear])

    def test_empirical_lipschitz_bound(self):
        field = SceneField.from_seed(7, dtype=F64)
        rng = np_generator(11)
        a = torch.from_numpy(rng.uniform(-1.2, 1.2, (4096, 3)))
        b = a + torch.from_numpy(rng.normal(0, 0.05, (4096, 3)))
        ratio = (field.sdf(a) - field.sdf(b)).abs() / (a - b).norm(dim=-1)
        assert float(ratio.max()) <= 1.05

    def test_differentiable_wrt_position(self):
        field = SceneField.from_seed(5, dtype=F64)
        x = torch.tensor([[0.3, -0.2, 0.4]], dtype=F64, requires_grad=True)
        field.sdf(x).sum().backward()
        assert torch.isfinite(x.grad).all()


class TestFeature:
    def test_constant_palette_returns_the_color(self, sphere_field):
        c0 = t64(0.25, 0.5, 0.75)
        field = sphere_field.with_constant_palette(c0)
        for p in (t64(0, 0, 0), t64(0.4, -0.3, 0.2), t64(-1, 1, -1)):
            assert torch.allclose(field.feature(p)[:3], c0, atol=1e-12)

    def test_positional_channels_vary_with_position(self):
        field = SceneField.from_seed(9, dtype=F64)
        f1 = field.feature(t64(0.1, 0.2, 0.3))
        f2 = field.feature(t64(0.2, 0.2, 0.3))
        assert (f1[3:] - f2[3:]).abs().max() > 0

    def test_rgb_channels_bounded(self):
        field = SceneField.from_seed(13, dtype=F64)
        rng = np_generator(5)
        pts = torch.from_numpy(rng.uniform(-2, 2, (2048, 3)))
        rgb = field.feature(pts)[:, :3]
        assert float(rgb.min()) >= 0.0 and float(rgb.max()) <= 1.0

    def test_sampled_feature_lipschitz_is_finite(self):
        field = SceneField.from_seed(17, dtype=F64)
        rng = np_generator(6)
        a = torch.from_numpy(rng.uniform(-1, 1, (2048, 3)))
        h = 1e-3
        b = a + h * torch.from_numpy(rng.normal(size=(2048, 3)))
        ratios = (field.feature(a) - field.feature(b)).norm(dim=-1) / (a - b).norm(dim=-1)
        assert torch.isfinite(ratios).all()
        assert float(ratios.max()) < 50.0


class TestDensityTransform:
    def test_reference_values(self):
        assert float(sdf_to_density(torch.tensor(0.0, dtype=F64), 1.0)) == pytest.approx(0.5)
        assert float(sdf_to_density(torch.tensor(0.0, dtype=F64), 0.5)) == pytest.approx(1.0)

    def test_limits(self):
        assert float(sdf_to_density(torch.tensor(60.0, dtype=F64), 1.0)) == pytest.approx(0.0, abs=1e-20)
        assert float(sdf_to_density(torch.tensor(-60.0, dtype=F64), 0.25)) == pytest.approx(4.0)

    def test_rejects_bad_alpha(self):
        with pytest.raises(NumericError):
            sdf_to_density(torch.tensor(0.0), 0.0)

    def test_monotone_decreasing_on_random_pairs(self):
        rng = np_generator(21)
        d = torch.from_numpy(rng.uniform(-2, 2, (10_000, 2)))
        lo, hi = d.min(dim=1).values, d.max(dim=1).values
        distinct = hi > lo
        # strict in the regime float64 can represent (|d|/alpha < 30);
        # beyond that sigmoid saturates to exactly 0/1, so only non-strict
        alpha = 0.4
        s_lo = sdf_to_density(lo[distinct], alpha)
        s_hi = sdf_to_density(hi[distinct], alpha)
        assert bool((s_lo > s_hi).all())
        s_lo5 = sdf_to_density(lo[distinct], 0.05)
        s_hi5 = sdf_to_density(hi[distinct], 0.05)
        assert bool((s_lo5 >= s_hi5).all())
        unsat = (lo[distinct].abs() < 1.2) & (hi[distinct].abs() < 1.2)
        assert bool((s_lo5[unsat] > s_hi5[unsat]).all())


class TestOracles:
    def test_anisotropic_scale_divides_componentwise(self):
        o = StyleOracle(0, "anisotropic-scale", (1.0, 1.3, 1.0))
        out = o.warp(t64(0.0, 0.65, 0.0))
        assert torch.allclose(out, t64(0.0, 0.5, 0.0))

    def test_identity_parameter_warps_are_identity(self):
        x = t64(0.3, -0.7, 0.2)
        assert torch.equal(StyleOracle(0, "anisotropic-scale", (1.0, 1.0, 1.0)).warp(x), x)
        assert torch.equal(StyleOracle(0, "twist", (0.0,)).warp(x), x)
        assert torch.equal(identity_oracle().warp(x), x)

    def test_twist_inverse_closed_form(self):
        o = StyleOracle(1, "twist", (0.5,))
        rng = np_generator(31)
        x = torch.from_numpy(rng.uniform(-1, 1, (1000, 3)))
        back = o.warp_inv(o.warp(x))
        assert float((back - x).abs().max()) < 1e-9

    def test_bulge_warp_is_bijective_on_cube(self):
        o = StyleOracle(2, "radial-bulge", (0.15, 0.7))
        rng = np_generator(32)
        x = torch.from_numpy(rng.uniform(-1, 1, (1000, 3)))
        back = o.warp_inv(o.warp(x))
        assert float((back - x).abs().max()) < 1e-7

    def test_recolor_identity_and_constant(self):
        x = t64(0.2, 0.4, 0.6)
        assert torch.equal(identity_oracle().recolor(x), x)
        o = StyleOracle(0, "identity", (),
                        recolor_matrix=torch.zeros(3, 3, dtype=F64),
                        recolor_bias=t64(1.0, 0.0, 0.0))
        assert torch.equal(o.recolor(x), t64(1.0, 0.0, 0.0))

    def test_grayscale_preserves_white(self):
        lum = torch.tensor([[0.299, 0.587, 0.114]] * 3, dtype=F64)
        o = StyleOracle(0, "identity", (), recolor_matrix=lum,
                        recolor_bias=torch.zeros(3, dtype=F64))
        out = o.recolor(t64(1.0, 1.0, 1.0))
        assert torch.allclose(out, t64(1.0, 1.0, 1.0), atol=1e-12)

    def test_recolor_clamps(self):
        o = StyleOracle(0, "identity", (),
                        recolor_matrix=2.0 * torch.eye(3, dtype=F64),
                        recolor_bias=t64(-0.5, 0.0, 0.5))
        out = o.recolor(t64(0.9, 0.1, 0.9))
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_instance_codes_are_reproducible(self, seed):
        a = sample_instance_code(seed, F64)
        b = sample_instance_code(seed, F64)
        assert torch.equal(a, b)
        assert a.shape == (64,)

    def test_unknown_kind_rejected(self):
        with pytest.raises(NumericError):
            StyleOracle(0, "shear", (1.0,))

    def test_param_count_validated(self):
        with pytest.raises(NumericError):
            StyleOracle(0, "twist", (0.5, 0.1))


def test_scene_field_exposes_no_trainable_state():
    field = SceneField.from_seed(23)
    prims = field.primitives
    for name in ("semi_axes", "blob_centers", "blob_radii", "palette_logits",
                 "palette_grad", "pe_dirs", "pe_phases", "pe_freqs"):
        assert not getattr(prims, name).requires_grad
