import math

import pytest
import torch

from toonfield.numcore import NumericError, np_generator
from toonfield.renderer import (CameraPose, RayBatch, generate_rays, integrate,
                                render_deformed, render_real, render_styled_oracle,
                                sample_depths)
from toonfield.scene import SceneField, StyleOracle, identity_oracle
from toonfield.stylefield import StyleFieldNet

F64 = torch.float64


def straight_rays(n, t_near, t_far, samples):
    return RayBatch(torch.zeros(n, 3, dtype=F64),
                    torch.tensor([[0.0, 0.0, 1.0]] * n, dtype=F64),
                    t_near, t_far, samples, n, 1)


class TestRays:
    def test_center_pixel_points_at_target(self):
        pose = CameraPose(0.35, -0.2)
        rays = generate_rays(pose, 9, 9, dtype=F64)
        center = rays.directions[4 * 9 + 4]
        cam = torch.tensor(pose.position(), dtype=F64)
        expected = -cam / cam.norm()
        assert torch.allclose(center, expected, atol=1e-12)

    def test_directions_unit_norm(self):
        rays = generate_rays(CameraPose(0.4, 0.1), 8, 12, dtype=F64)
        assert float((rays.directions.norm(dim=-1) - 1).abs().max()) < 1e-6

    def test_fov_zero_limit_collapses_directions(self):
        pose = CameraPose(0.0, 0.0, fov=1e-3)
        rays = generate_rays(pose, 5, 5, dtype=F64)
        corner, center = rays.directions[0], rays.directions[12]
        angle = torch.arccos((corner * center).sum().clamp(-1, 1))
        assert float(angle) < 1e-3

    def test_pose_validation(self):
        with pytest.raises(NumericError):
            CameraPose(0.0, 0.0, radius=-1.0)
        with pytest.raises(NumericError):
            CameraPose(0.0, 2.0)

    def test_raybatch_validation(self):
        with pytest.raises(NumericError):
            straight_rays(2, 1.0, 0.5, 8)
        with pytest.raises(NumericError):
            RayBatch(torch.zeros(2, 3), torch.ones(2, 3), 0.0, 1.0, 8, 2, 1)


class TestDepthSampling:
    def test_midpoints_without_seed(self):
        rays = straight_rays(3, 0.0, 1.0, 4)
        t = sample_depths(rays, None, F64)
        assert torch.allclose(t[0], torch.tensor([0.125, 0.375, 0.625, 0.875], dtype=F64))

    def test_jitter_stays_in_bins_and_is_seeded(self):
        rays = straight_rays(5, 0.0, 1.0, 8)
        t1 = sample_depths(rays, 77, F64)
        t2 = sample_depths(rays, 77, F64)
        t3 = sample_depths(rays, 78, F64)
        assert torch.equal(t1, t2)
        assert not torch.equal(t1, t3)
        edges = torch.arange(9, dtype=F64) / 8
        assert bool((t1 >= edges[:-1]).all() and (t1 < edges[1:]).all())


class TestIntegrate:
    @pytest.mark.parametrize("sigma0", [0.5, 2.0, 8.0])
    def test_homogeneous_medium(self, sigma0):
        rays = straight_rays(2, 0.0, 1.0, 128)
        img = integrate(rays,
                        lambda x: torch.full(x.shape[:1], sigma0, dtype=F64),
                        lambda x: torch.ones(x.shape[0], 1, dtype=F64))
        expected = 1.0 - math.exp(-sigma0)
        assert abs(float(img.values[0, 0, 0]) - expected) < 1e-3

    def test_zero_density_gives_black(self):
        rays = straight_rays(2, 0.0, 1.0, 16)
        img = integrate(rays, lambda x: torch.zeros(x.shape[:1], dtype=F64),
                        lambda x: torch.ones(x.shape[0], 3, dtype=F64))
        assert torch.equal(img.values, torch.zeros_like(img.values))
        assert torch.equal(img.opacity, torch.zeros_like(img.opacity))

    def test_quadrature_convergence_in_sample_count(self):
        def density(x):
            return 2.0 + torch.sin(3.0 * x[:, 2]) ** 2

        def emission(x):
            return torch.stack([0.5 + 0.5 * torch.cos(2.0 * x[:, 2])], dim=-1)

        vals = {}
        for m in (64, 128):
            img = integrate(straight_rays(1, 0.0, 1.0, m), density, emission)
            vals[m] = float(img.values[0, 0, 0])
        assert abs(vals[128] - vals[64]) < 1e-3

    def test_weights_sum_below_one(self):
        rays = straight_rays(4, 0.0, 2.0, 32)
        img = integrate(rays, lambda x: 5.0 * torch.ones(x.shape[:1], dtype=F64),
                        lambda x: torch.ones(x.shape[0], 1, dtype=F64))
        assert float(img.opacity.max()) <= 1.0 + 1e-6

    def test_linear_in_emission(self):
        rays = straight_rays(3, 0.0, 1.0, 24)
        density = lambda x: (1.0 + x[:, 2].abs())
        ea = lambda x: torch.stack([torch.sin(x[:, 2]) + 1], dim=-1)
        eb = lambda x: torch.stack([torch.cos(2 * x[:, 2]) + 1], dim=-1)
        esum = lambda x: ea(x) + eb(x)
        a = integrate(rays, density, ea).values
        b = integrate(rays, density, eb).values
        s = integrate(rays, density, esum).values
        assert float((a + b - s).abs().max()) < 1e-6

    def test_rejects_non_finite_density(self):
        rays = straight_rays(1, 0.0, 1.0, 4)
        with pytest.raises(NumericError):
            integrate(rays, lambda x: torch.full(x.shape[:1], float("nan"), dtype=F64),
                      lambda x: torch.ones(x.shape[0], 1, dtype=F64))


class TestRenderReal:
    def test_sphere_silhouette_is_centered_disc(self, sphere_field):
        img = render_real(sphere_field, CameraPose(0.0, 0.0), 33, samples=48)
        assert float(img.opacity[16, 16]) > 0.9
        assert float(img.opacity[0, 0]) < 0.1
        mask = img.opacity > 0.5
        ys, xs = torch.nonzero(mask, as_tuple=True)
        assert abs(float(ys.float().mean()) - 16) < 1.0
        assert abs(float(xs.float().mean()) - 16) < 1.0

    def test_empty_field_renders_black(self, sphere_field):
        class Empty:
            dtype = F64
            primitives = sphere_field.primitives

            def sdf(self, x):
                return torch.full(x.shape[:-1], 1e6, dtype=F64)

            def feature(self, x):
                return sphere_field.feature(x)

        img = render_real(Empty(), CameraPose(0.0, 0.0), 8, samples=8)
        assert torch.equal(img.values, torch.zeros_like(img.values))

    def test_deterministic_bitwise(self, sphere_field):
        a = render_real(sphere_field, CameraPose(0.2, 0.1), 16, samples=16)
        b = render_real(sphere_field, CameraPose(0.2, 0.1), 16, samples=16)
        assert torch.equal(a.values, b.values) and torch.equal(a.opacity, b.opacity)

    def test_fast_path_matches_reference_integrate(self, sphere_field):
        from toonfield.renderer import generate_rays
        from toonfield.scene import sdf_to_density
        pose = CameraPose(0.1, -0.05)
        fast = render_real(sphere_field, pose, 12, samples=24, cull=True)
        rays = generate_rays(pose, 12, 12, samples=24, dtype=F64)
        ref = integrate(rays, lambda x: sdf_to_density(sphere_field.sdf(x), 0.05),
                        sphere_field.feature)
        # culled samples keep exact density but emit nothing: feature error
        # is bounded by samples * weight threshold, opacity stays exact
        assert float((fast.opacity - ref.opacity).abs().max()) < 1e-9
        assert float((fast.values - ref.values).abs().max()) < 24 * 1e-4
        assert float((fast.values - ref.values).abs().mean()) < 2e-5


class TestRenderStyled:
    def test_identity_oracle_matches_real_bitwise(self, sphere_field):
        pose = CameraPose(0.3, -0.1)
        real = render_real(sphere_field, pose, 16, samples=16)
        styled = render_styled_oracle(sphere_field, identity_oracle(), pose, 16, samples=16)
        assert torch.equal(real.values, styled.values)
        assert torch.equal(real.opacity, styled.opacity)

    def test_vertical_stretch_changes_silhouette_area(self, sphere_field):
        pose = CameraPose(0.0, 0.0)
        oracle = StyleOracle(0, "anisotropic-scale", (1.0, 1.3, 1.0))
        real = render_real(sphere_field, pose, 64, samples=48)
        styled = render_styled_oracle(sphere_field, oracle, pose, 64, samples=48)
        area_ratio = float((styled.opacity > 0.5).sum()) / float((real.opacity > 0.5).sum())
        assert area_ratio == pytest.approx(1.3, rel=0.03)

    def test_recolor_only_keeps_silhouette(self, sphere_field):
        pose = CameraPose(0.1, 0.0)
        oracle = StyleOracle(0, "identity", (),
                             recolor_matrix=torch.eye(3, dtype=F64) * 0.5,
                             recolor_bias=torch.tensor([0.2, 0.0, 0.1], dtype=F64))
        real = render_real(sphere_field, pose, 24, samples=24)
        styled = render_styled_oracle(sphere_field, oracle, pose, 24, samples=24)
        assert torch.equal(real.opacity, styled.opacity)
        assert not torch.equal(real.rgb, styled.rgb)
        assert torch.equal(real.values[..., 3:], styled.values[..., 3:])


class TestRenderDeformed:
    def test_tau_zero_is_bitwise_real(self, sphere_field):
        net = StyleFieldNet(2, dtype=F64, seed=3)
        with torch.no_grad():  # non-trivial net, but tau=0 must still be exact
            net.head.weight.copy_(torch.randn(3, 128, generator=torch.Generator().manual_seed(1),
                                              dtype=F64) * 0.05)
        pose = CameraPose(0.25, 0.05)
        real = render_real(sphere_field, pose, 16, samples=16)
        deformed = render_deformed(sphere_field, net, sphere_field.code.values, 0, 0.0,
                                   pose, 16, samples=16)
        assert torch.equal(real.values, deformed.values)
        assert torch.equal(real.opacity, deformed.opacity)

    def test_zero_init_net_is_bitwise_real_at_tau_one(self, sphere_field):
        net = StyleFieldNet(2, dtype=F64, seed=4)
        pose = CameraPose(-0.2, 0.1)
        real = render_real(sphere_field, pose, 16, samples=16)
        deformed = render_deformed(sphere_field, net, sphere_field.code.values, 1, 1.0,
                                   pose, 16, samples=16)
        assert torch.equal(real.values, deformed.values)

    def test_tau_out_of_range_rejected(self, sphere_field):
        net = StyleFieldNet(1, dtype=F64)
        with pytest.raises(NumericError):
            render_deformed(sphere_field, net, sphere_field.code.values, 0, 1.6,
                            CameraPose(0, 0), 8)

    def test_collect_points_returns_styled_space_samples(self, sphere_field):
        net = StyleFieldNet(1, dtype=F64)
        img, pts = render_deformed(sphere_field, net, sphere_field.code.values, 0, 1.0,
                                   CameraPose(0, 0), 12, samples=16, collect_points=True)
        assert pts.shape[1] == 3 and pts.shape[0] > 0
        assert float(sphere_field.sdf(pts).min()) < 0.5  # near/inside the shape
