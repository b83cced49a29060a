"""Synthetic observation source: exactness, alignment, noise structure."""

import numpy as np
import pytest

from emsplat.sources import (
    Box,
    NoiseModel,
    PlanePatch,
    SyntheticScene,
    SyntheticSource,
    look_at_pose,
    orbit_trajectory,
)
from emsplat.types import RigidPose

from conftest import room_source, small_intrinsics


def plane_scene(feature_dim=8):
    plane = PlanePatch(
        origin=[-3.0, -3.0, 2.0], edge_u=[6.0, 0.0, 0.0], edge_v=[0.0, 6.0, 0.0],
        class_name="the_plane", albedo=[0.5, 0.5, 0.5],
    )
    return SyntheticScene([plane], feature_dim=feature_dim, seed=1)


def plane_source(noise=None, seed=0):
    # identity pose: camera at the origin, optical axis along world +z
    pose = RigidPose.identity()
    return SyntheticSource(
        plane_scene(), [pose, pose], small_intrinsics(width=40, height=30),
        noise or NoiseModel(), seed=seed,
    )


class TestExactRayCast:
    def test_zero_noise_matches_analytic_backprojection(self):
        src = plane_source()
        (pred,) = src.infer([0], {0: src.anchor_pose()})
        assert pred.valid.all()
        pts = pred.points
        np.testing.assert_allclose(pts[..., 2], 2.0, atol=1e-9)
        intr = src.intrinsics
        us, vs = np.meshgrid(np.arange(40, dtype=float), np.arange(30, dtype=float), indexing="xy")
        np.testing.assert_allclose(pts[..., 0], (us - intr.cx) / intr.fx * 2.0, atol=1e-9)
        np.testing.assert_allclose(pts[..., 1], (vs - intr.cy) / intr.fy * 2.0, atol=1e-9)
        # normals face the camera
        np.testing.assert_allclose(pred.normals[pred.valid] @ np.array([0, 0, 1.0]), -1.0, atol=1e-12)

    def test_anchor_hint_respected_exactly(self):
        src = room_source(n_frames=4)
        hint = src.anchor_pose()
        preds = src.infer([0, 1, 2], {0: hint})
        np.testing.assert_allclose(preds[0].pose.rotation, hint.rotation, atol=1e-9)
        np.testing.assert_allclose(preds[0].pose.translation, hint.translation, atol=1e-9)


class TestNoiseStructure:
    def test_reinference_jitter_pixel_aligned(self):
        src = plane_source(NoiseModel(sigma_jitter=0.02))
        (a,) = src.infer([0], {0: src.anchor_pose()})
        (b,) = src.infer([0], {0: src.anchor_pose()})
        np.testing.assert_array_equal(a.valid, b.valid)
        diff = np.linalg.norm(a.points[a.valid] - b.points[b.valid], axis=1)
        assert diff.max() > 1e-4  # the two inferences really disagree

    def test_scale_drift_is_uniform_over_pairs(self, rng):
        clean = plane_source()
        drifted = plane_source(NoiseModel(sigma_scale=0.05), seed=3)
        (p0,) = clean.infer([0], {0: clean.anchor_pose()})
        (p1,) = drifted.infer([0], {0: drifted.anchor_pose()})
        pts0 = p0.points[p0.valid]
        pts1 = p1.points[p1.valid]
        idx = rng.choice(pts0.shape[0], size=(200, 2))
        idx = idx[idx[:, 0] != idx[:, 1]]
        d0 = np.linalg.norm(pts0[idx[:, 0]] - pts0[idx[:, 1]], axis=1)
        d1 = np.linalg.norm(pts1[idx[:, 0]] - pts1[idx[:, 1]], axis=1)
        ratios = d1 / d0
        s = np.median(ratios)
        np.testing.assert_allclose(ratios, s, rtol=1e-6)  # one global factor
        assert abs(s - 1.0) > 1e-3  # and it is a real drift

    def test_depth_noise_along_rays(self):
        src = plane_source(NoiseModel(sigma_depth=0.05), seed=5)
        (pred,) = src.infer([0], {0: src.anchor_pose()})
        clean = plane_source()
        (ref,) = clean.infer([0], {0: clean.anchor_pose()})
        offset = pred.points[pred.valid] - ref.points[ref.valid]
        rays = ref.points[ref.valid] / np.linalg.norm(ref.points[ref.valid], axis=1, keepdims=True)
        cross = np.linalg.norm(np.cross(offset, rays), axis=1)
        assert cross.max() < 1e-9  # noise is purely radial
        assert np.std(np.linalg.norm(offset, axis=1)) > 0.01

    def test_determinism_bit_exact(self):
        a = room_source(NoiseModel(sigma_depth=0.02, sigma_jitter=0.01), seed=9)
        b = room_source(NoiseModel(sigma_depth=0.02, sigma_jitter=0.01), seed=9)
        for frames in ([0, 1], [1, 2], [0, 1]):
            pa = a.infer(frames, {0: a.anchor_pose()} if 0 in frames else None)
            pb = b.infer(frames, {0: b.anchor_pose()} if 0 in frames else None)
            for x, y in zip(pa, pb):
                np.testing.assert_array_equal(x.points, y.points)
                np.testing.assert_array_equal(x.features, y.features)


class TestGroundTruth:
    def test_single_plane_grid_count(self):
        plane = PlanePatch(
            origin=[0.0, 0.0, 0.0], edge_u=[1.0, 0.0, 0.0], edge_v=[0.0, 1.0, 0.0],
        )
        scene = SyntheticScene([plane], feature_dim=4, seed=0)
        pts, nrm, lbl = scene.ground_truth(spacing=0.01)
        assert pts.shape[0] == 101 * 101 == 10201
        assert np.all(nrm == nrm[0])
        assert np.all(lbl == 0)

    def test_empty_scene(self):
        scene = SyntheticScene([], feature_dim=4, seed=0)
        pts, nrm, lbl = scene.ground_truth()
        assert pts.shape == (0, 3)

    def test_box_has_six_normal_directions(self):
        scene = SyntheticScene([Box([0, 0, 0], [1, 1, 1])], feature_dim=4, seed=0)
        _, nrm, _ = scene.ground_truth(spacing=0.1)
        distinct = np.unique(np.round(nrm, 6), axis=0)
        assert distinct.shape[0] == 6

    def test_class_features_distinct(self):
        scene = room_source(n_frames=1).scene
        feats = scene.class_features
        cos = feats @ feats.T
        off = cos[~np.eye(cos.shape[0], dtype=bool)]
        assert np.all(off < 0.99)


class TestTrajectories:
    def test_orbit_looks_at_target(self):
        poses = orbit_trajectory([0, 0, 0], radius=2.0, height=1.0, n_frames=8, look_at=[0, 0, 0.5])
        for pose in poses:
            assert pose.is_valid(tol=1e-9)
            fwd = pose.rotation[:, 2]
            to_target = np.array([0, 0, 0.5]) - pose.translation
            cos = fwd @ to_target / np.linalg.norm(to_target)
            np.testing.assert_allclose(cos, 1.0, atol=1e-9)

    def test_degenerate_noise_rejected(self):
        with pytest.raises(ValueError):
            NoiseModel(sigma_depth=-1.0)
