"""Projection, depth compositing, and rasterization-based refinement.

The rendering oracle re-implements the documented per-pixel compositing
formula directly (full-image evaluation per Gaussian, no tiles, no early
termination, its own projection math) and must agree with the tiled
renderer to 1e-6.
"""

import numpy as np
import pytest

from emsplat.registration import Submap
from emsplat.splatting import (
    DepthRender,
    merge_weights,
    project_gaussian,
    project_gaussians,
    refine,
    render_expected_depth,
)
from emsplat.types import CameraIntrinsics, Config, Gaussian, GaussianMap, Prediction, RigidPose

from conftest import small_intrinsics
from test_mapping import flat_gaussian, tiny_prediction, whole_submap


def square_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=100, height=100)


class TestProjectGaussian:
    def test_on_axis_pinhole(self):
        g = flat_gaussian([0.0, 0.0, 1.0])
        pg = project_gaussian(g, RigidPose.identity(), square_intrinsics())
        assert pg is not None
        np.testing.assert_allclose(pg.mean2d, [50.0, 50.0], atol=1e-12)
        assert pg.depth == pytest.approx(1.0)

    def test_isotropic_covariance_scales_with_focal_over_depth(self):
        sigma, z, f = 0.01, 2.0, 100.0
        g = flat_gaussian([0.0, 0.0, z])
        g.cov = sigma**2 * np.eye(3)
        pg = project_gaussian(g, RigidPose.identity(), square_intrinsics())
        np.testing.assert_allclose(pg.cov2d, (f * sigma / z) ** 2 * np.eye(2), atol=1e-12)

    def test_behind_camera_culled(self):
        g = flat_gaussian([0.0, 0.0, -1.0])
        assert project_gaussian(g, RigidPose.identity(), square_intrinsics()) is None

    def test_outside_expanded_rect_culled(self):
        g = flat_gaussian([10.0, 0.0, 1.0])  # projects far outside 20% margin
        assert project_gaussian(g, RigidPose.identity(), square_intrinsics()) is None

    def test_cov2d_floor(self):
        g = flat_gaussian([0.0, 0.0, 5.0])
        g.cov = 1e-12 * np.eye(3)
        pg = project_gaussian(g, RigidPose.identity(), square_intrinsics())
        assert np.linalg.eigvalsh(pg.cov2d)[0] >= 1e-8 * (1 - 1e-12)


def oracle_depth_render(means, covs, pose, intrinsics, opacity, config):
    """Independent per-pixel evaluation of the compositing contract."""
    h, w = intrinsics.height, intrinsics.width
    w2c = np.linalg.inv(pose.matrix())
    rot, trans = w2c[:3, :3], w2c[:3, 3]
    cams = means @ rot.T + trans
    projected = []
    for i in range(means.shape[0]):
        x, y, z = cams[i]
        if z <= config.near_plane:
            continue
        u = intrinsics.fx * x / z + intrinsics.cx
        v = intrinsics.fy * y / z + intrinsics.cy
        if not (-config.image_expand * w <= u < (1 + config.image_expand) * w):
            continue
        if not (-config.image_expand * h <= v < (1 + config.image_expand) * h):
            continue
        jac = np.array([
            [intrinsics.fx / z, 0.0, -intrinsics.fx * x / z**2],
            [0.0, intrinsics.fy / z, -intrinsics.fy * y / z**2],
        ])
        cov2d = jac @ rot @ covs[i] @ rot.T @ jac.T
        eigs, vecs = np.linalg.eigh(0.5 * (cov2d + cov2d.T))
        eigs = np.maximum(eigs, config.eps_cov2d)
        cov2d = (vecs * eigs) @ vecs.T
        projected.append((z, i, np.array([u, v]), np.linalg.inv(cov2d)))
    projected.sort(key=lambda t: (t[0], t[1]))

    us, vs = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float), indexing="xy")
    depth_sum = np.zeros((h, w))
    alpha_sum = np.zeros((h, w))
    transmit = np.ones((h, w))
    for z, _, mean2d, conic in projected:
        du = us - mean2d[0]
        dv = vs - mean2d[1]
        q = conic[0, 0] * du**2 + 2 * conic[0, 1] * du * dv + conic[1, 1] * dv**2
        alpha = np.where(q <= config.extent_sigma**2, opacity * np.exp(-0.5 * q), 0.0)
        contrib = alpha * transmit
        depth_sum += contrib * z
        alpha_sum += contrib
        transmit = transmit * (1.0 - alpha)
    with np.errstate(invalid="ignore", divide="ignore"):
        expected = depth_sum / alpha_sum
    expected[alpha_sum < config.alpha_valid] = np.nan
    return expected, alpha_sum


class TestRenderExpectedDepth:
    def test_single_large_gaussian(self):
        config = Config()
        g = flat_gaussian([0.0, 0.0, 2.0], sigma_t=2.0, sigma_n=1e-4)
        render = render_expected_depth(
            g.mean[None], g.cov[None], RigidPose.identity(), square_intrinsics(), 0.8, config
        )
        valid = render.valid
        assert valid.sum() > 1000
        np.testing.assert_allclose(render.expected_depth[valid], 2.0, atol=1e-9)

    def test_front_occludes_back(self):
        config = Config()
        near = flat_gaussian([0.0, 0.0, 1.0], sigma_t=1.0, sigma_n=1e-4)
        far = flat_gaussian([0.0, 0.0, 3.0], sigma_t=3.0, sigma_n=1e-4)
        means = np.stack([far.mean, near.mean])
        covs = np.stack([far.cov, near.cov])
        render = render_expected_depth(
            means, covs, RigidPose.identity(), square_intrinsics(), 0.99, config
        )
        center = render.expected_depth[50, 50]
        # weights: 0.99 on the near layer, 0.99 * 0.01 on the far one
        expected = (0.99 * 1.0 + 0.99 * 0.01 * 3.0) / (0.99 + 0.99 * 0.01)
        assert center == pytest.approx(expected, abs=1e-6)
        assert center < 1.05

    def test_empty_input_all_invalid(self):
        render = render_expected_depth(
            np.zeros((0, 3)), np.zeros((0, 3, 3)), RigidPose.identity(),
            square_intrinsics(), 0.8, Config(),
        )
        assert not render.valid.any()
        assert np.all(np.isnan(render.expected_depth))

    def test_matches_bruteforce_oracle_quick(self, rng):
        config = Config()
        intr = small_intrinsics()
        pose = RigidPose.identity()
        for _ in range(10):
            n = 3
            means = np.column_stack([
                rng.uniform(-0.5, 0.5, n), rng.uniform(-0.4, 0.4, n), rng.uniform(1.0, 3.0, n)
            ])
            covs = []
            for _ in range(n):
                a = rng.normal(size=(3, 3)) * 0.1
                covs.append(a @ a.T + 1e-4 * np.eye(3))
            covs = np.stack(covs)
            render = render_expected_depth(means, covs, pose, intr, 0.8, config)
            want_depth, want_alpha = oracle_depth_render(means, covs, pose, intr, 0.8, config)
            np.testing.assert_allclose(render.accumulated_alpha, want_alpha, atol=1e-6)
            both = render.valid & np.isfinite(want_depth)
            np.testing.assert_array_equal(render.valid, np.isfinite(want_depth))
            np.testing.assert_allclose(render.expected_depth[both], want_depth[both], atol=1e-6)


class TestMergeWeights:
    def test_softmax_factor_sums_to_one(self, rng):
        d = rng.uniform(0, 5, size=7)
        cos = rng.uniform(-1, 1, size=7)
        omega, soft = merge_weights(d, cos)
        assert soft.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(soft >= 0)
        assert np.all(omega[cos >= 0] >= 0)


def _wall_map(z=2.0, half_u=0.7, half_v=0.55, spacing=0.15, feature_dim=4):
    """Map Gaussians tiling the plane at depth z facing the camera."""
    gmap = GaussianMap(voxel_size=0.2)
    for x in np.arange(-half_u, half_u + 1e-9, spacing):
        for y in np.arange(-half_v, half_v + 1e-9, spacing):
            g = flat_gaussian([x, y, z], normal=(0, 0, -1.0), feature_dim=feature_dim)
            gmap.add(g)
    return gmap


def _leftover_prediction(z, half=0.4, n=20, feature_dim=4):
    ax = np.linspace(-half, half, n)
    xs, ys = np.meshgrid(ax, ax, indexing="xy")
    pts = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)], axis=1)
    normals = np.tile([0.0, 0.0, -1.0], (pts.shape[0], 1))
    return tiny_prediction(pts, normals=normals, feature_dim=feature_dim)


class TestRefine:
    def setup_method(self, method):
        self.config = Config(lam=128.0, m_neighbors=16)
        self.pose = RigidPose.identity()

    def _run(self, gmap, pred):
        submap = whole_submap(gmap)
        positions = np.arange(pred.valid.sum())
        return refine(gmap, submap, positions, pred, self.pose, self.config, seed=3)

    def test_occluded_duplicates_merge(self):
        gmap = _wall_map(z=2.0)
        before = len(gmap)
        pred = _leftover_prediction(z=2.05)  # behind the mapped surface
        result = self._run(gmap, pred)
        assert result.total > 0
        assert result.merged == result.total
        assert result.appended == 0
        assert len(gmap) == before

    def test_unseen_region_appends(self):
        gmap = _wall_map(z=2.0, half_u=0.7, half_v=0.55)
        # statistics land in the image's left half only
        for g in gmap.gaussians:
            if g.mean[0] > -0.1:
                g.mean[0] -= 2.0  # push right-side Gaussians out of view
        gmap2 = GaussianMap(voxel_size=0.2)
        for g in gmap.gaussians:
            if g.mean[0] < -0.1:
                gmap2.add(g)
        before = len(gmap2)
        pred = _leftover_prediction(z=2.0)
        pred.points[..., 0] += 0.45  # right side: no valid map depth there
        result = refine(
            gmap2, whole_submap(gmap2), np.arange(pred.valid.sum()), pred,
            self.pose, self.config, seed=3,
        )
        assert result.appended == result.total > 0
        assert len(gmap2) == before + result.total

    def test_front_observations_append(self):
        gmap = _wall_map(z=2.0)
        before = len(gmap)
        pred = _leftover_prediction(z=1.5)  # clearly in front of the map
        result = self._run(gmap, pred)
        assert result.appended == result.total > 0
        assert len(gmap) == before + result.total
        assert result.new_region == 0  # depth was valid, these are front points

    def test_conservation(self, rng):
        gmap = _wall_map(z=2.0)
        pts = np.column_stack([
            rng.uniform(-0.5, 0.5, 300), rng.uniform(-0.4, 0.4, 300),
            rng.uniform(1.6, 2.2, 300),
        ])
        normals = np.tile([0.0, 0.0, -1.0], (300, 1))
        pred = tiny_prediction(pts, normals=normals)
        result = self._run(gmap, pred)
        assert result.total == result.merged + result.appended

    def test_no_leftovers_is_noop(self):
        gmap = _wall_map(z=2.0)
        before = len(gmap)
        pred = _leftover_prediction(z=2.0)
        result = refine(
            gmap, whole_submap(gmap), np.zeros(0, dtype=np.intp), pred,
            self.pose, self.config, seed=3,
        )
        assert result.total == result.merged == result.appended == 0
        assert len(gmap) == before

    def test_merge_blend_is_convex_on_mean(self):
        gmap = _wall_map(z=2.0)
        old_means = gmap.means().copy()
        pred = _leftover_prediction(z=2.05)
        self._run(gmap, pred)
        new_means = gmap.means()
        moved = np.flatnonzero(np.linalg.norm(new_means - old_means, axis=1) > 1e-12)
        assert moved.size > 0
        # merged means move toward the measurement plane, never past it
        assert np.all(new_means[moved, 2] >= old_means[moved, 2] - 1e-12)
        assert np.all(new_means[moved, 2] <= 2.05 + 1e-12)
