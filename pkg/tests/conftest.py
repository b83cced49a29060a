"""Shared synthetic scenes and small builders used across the suite."""

from __future__ import annotations

import numpy as np
import pytest

from emsplat.sources import Box, NoiseModel, PlanePatch, SyntheticScene, SyntheticSource, orbit_trajectory
from emsplat.types import CameraIntrinsics, Config


def small_intrinsics(width=160, height=120) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=120.0, fy=120.0, cx=width / 2.0 - 0.5, cy=height / 2.0 - 0.5,
        width=width, height=height,
    )


def room_scene(feature_dim=16, seed=0, gap=0.03, scale=0.6) -> SyntheticScene:
    """A furnished desk-scale room: floor, four walls, several boxes.

    Panels are separated by ``gap`` so class boundaries stay unambiguous;
    the boxes give every viewpoint multi-orientation geometry, which keeps
    registration well conditioned everywhere on the orbit.  The default
    scale gives ~1 m viewing distances, the regime the quantitative
    synthetic checks target.
    """
    s = scale
    size = 4.0 * s
    h = 2.4 * s
    g = gap
    surfaces = [
        PlanePatch([-size / 2, -size / 2, 0.0], [size, 0, 0], [0, size, 0],
                   class_name="floor", albedo=[0.55, 0.52, 0.48],
                   checker=[0.35, 0.33, 0.31], checker_size=0.4 * s),
        PlanePatch([-size / 2, -size / 2, g], [0, size, 0], [0, 0, h],
                   class_name="wall", albedo=[0.7, 0.68, 0.6],
                   checker=[0.5, 0.49, 0.45], checker_size=0.45 * s),
        PlanePatch([-size / 2, -size / 2, g], [size, 0, 0], [0, 0, h],
                   class_name="wall_b", albedo=[0.62, 0.66, 0.7],
                   checker=[0.45, 0.48, 0.52], checker_size=0.45 * s),
        PlanePatch([size / 2, -size / 2, g], [0, size, 0], [0, 0, h],
                   class_name="wall_c", albedo=[0.66, 0.6, 0.66],
                   checker=[0.48, 0.43, 0.48], checker_size=0.45 * s),
        PlanePatch([-size / 2, size / 2, g], [size, 0, 0], [0, 0, h],
                   class_name="wall_d", albedo=[0.6, 0.64, 0.58],
                   checker=[0.43, 0.47, 0.42], checker_size=0.45 * s),
        Box(np.array([-0.5, 0.3, 0.0]) * s + [0, 0, g],
            np.array([0.4, 1.1, 0.8]) * s + [0, 0, g], class_name="crate",
            albedo=[0.65, 0.4, 0.25]),
        Box(np.array([0.9, -1.2, 0.0]) * s + [0, 0, g],
            np.array([1.5, -0.5, 0.5]) * s + [0, 0, g], class_name="bench",
            albedo=[0.3, 0.45, 0.6]),
        Box(np.array([-1.4, -1.1, 0.0]) * s + [0, 0, g],
            np.array([-0.8, -0.5, 1.1]) * s + [0, 0, g], class_name="shelf",
            albedo=[0.42, 0.55, 0.35]),
        Box(np.array([0.2, 1.2, 0.0]) * s + [0, 0, g],
            np.array([0.9, 1.7, 0.6]) * s + [0, 0, g], class_name="chest",
            albedo=[0.58, 0.5, 0.3]),
    ]
    return SyntheticScene(surfaces, feature_dim=feature_dim, seed=seed)


def room_source(
    noise: NoiseModel | None = None,
    n_frames: int = 12,
    seed: int = 0,
    feature_dim: int = 16,
    intrinsics: CameraIntrinsics | None = None,
    span_deg: float = 300.0,
) -> SyntheticSource:
    scene = room_scene(feature_dim=feature_dim, seed=seed)
    poses = orbit_trajectory(
        center=[0.0, 0.0, 0.0], radius=0.85, height=0.8,
        n_frames=n_frames, span_deg=span_deg, look_at=[0.18, 0.18, 0.3],
    )
    return SyntheticSource(
        scene, poses, intrinsics or small_intrinsics(), noise or NoiseModel(), seed=seed
    )


def room_cloud(n_points=5000, seed=0):
    """Oriented point cloud of the room for registration tests."""
    scene = room_scene(seed=seed)
    pts, nrm, _ = scene.ground_truth(spacing=0.02)
    rng = np.random.default_rng(seed)
    idx = rng.choice(pts.shape[0], size=n_points, replace=False)
    return pts[idx], nrm[idx]


@pytest.fixture
def config():
    return Config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
