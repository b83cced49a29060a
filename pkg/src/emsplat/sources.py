"""Producers of pixel-aligned point-map predictions.

The synthetic source emulates a noisy, view-inconsistent, scale-drifting
feed-forward geometry model over a known ground-truth scene: it ray-casts
exact depth, back-projects to pixel-aligned point maps, and corrupts them
with per-point depth noise, a fixed low-frequency warp, per-call
re-inference jitter, per-call global scale drift, and pose perturbation.
The file-backed source replays precomputed prediction bundles from disk.
Both are queried serially by the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.spatial.transform import Rotation

from . import mapio
from .types import CameraIntrinsics, Prediction, RigidPose

__all__ = [
    "PlanePatch",
    "Box",
    "SyntheticScene",
    "NoiseModel",
    "SyntheticSource",
    "FileSource",
    "ObservationSource",
    "orbit_trajectory",
    "look_at_pose",
    "load_scene",
]


class ObservationSource(Protocol):
    """What the pipeline needs from a prediction producer."""

    def frame_ids(self) -> list[int]: ...

    def anchor_pose(self) -> RigidPose: ...

    def infer(
        self, frames: list[int], pose_hints: dict[int, RigidPose] | None = None
    ) -> list[Prediction]: ...


@dataclass
class PlanePatch:
    """Finite textured parallelogram: origin plus two edge vectors."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    class_name: str = "surface"
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))
    checker: np.ndarray | None = None  # second color; enables a checkerboard
    checker_size: float = 0.25  # meters

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.float64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.checker is not None:
            self.checker = np.asarray(self.checker, dtype=np.float64)
        n = np.cross(self.edge_u, self.edge_v)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origin, dirs):
        """Per-ray hit distance (inf on miss) and local (a, b) coords."""
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - origin) @ self.normal) / denom
        basis = np.stack([self.edge_u, self.edge_v], axis=1)  # (3, 2)
        dual = np.linalg.pinv(basis)  # (2, 3)
        hits = origin + t[:, None] * dirs
        ab = (hits - self.origin) @ dual.T
        ok = (
            np.isfinite(t)
            & (np.abs(denom) > 1e-12)
            & (t > 1e-6)
            & (ab[:, 0] >= 0.0)
            & (ab[:, 0] <= 1.0)
            & (ab[:, 1] >= 0.0)
            & (ab[:, 1] <= 1.0)
        )
        return np.where(ok, t, np.inf), ab

    def color_at(self, ab):
        if self.checker is None:
            return np.broadcast_to(self.albedo, (ab.shape[0], 3)).copy()
        su = np.linalg.norm(self.edge_u) / self.checker_size
        sv = np.linalg.norm(self.edge_v) / self.checker_size
        parity = (np.floor(ab[:, 0] * su) + np.floor(ab[:, 1] * sv)).astype(int) % 2
        return np.where(parity[:, None] == 0, self.albedo, self.checker)

    def sample(self, spacing):
        nu = max(int(round(np.linalg.norm(self.edge_u) / spacing)) + 1, 2)
        nv = max(int(round(np.linalg.norm(self.edge_v) / spacing)) + 1, 2)
        a, b = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
        ab = np.stack([a.ravel(), b.ravel()], axis=1)
        pts = self.origin + ab[:, :1] * self.edge_u + ab[:, 1:] * self.edge_v
        nrm = np.broadcast_to(self.normal, pts.shape).copy()
        return pts, nrm

    def corners(self):
        o, u, v = self.origin, self.edge_u, self.edge_v
        return np.stack([o, o + u, o + v, o + u + v])


@dataclass
class Box:
    """Axis-aligned box with flat albedo."""

    lo: np.ndarray
    hi: np.ndarray
    class_name: str = "box"
    albedo: np.ndarray = field(default_factory=lambda: np.array([0.6, 0.4, 0.3]))

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t1 = (self.lo - origin) * inv
        t2 = (self.hi - origin) * inv
        t_near_ax = np.minimum(t1, t2)
        t_far_ax = np.maximum(t1, t2)
        t_near = np.nanmax(np.where(np.isfinite(t_near_ax), t_near_ax, -np.inf), axis=1)
        t_far = np.nanmin(np.where(np.isfinite(t_far_ax), t_far_ax, np.inf), axis=1)
        ok = (t_near <= t_far) & (t_near > 1e-6)
        axis = np.argmax(np.where(np.isfinite(t_near_ax), t_near_ax, -np.inf), axis=1)
        return np.where(ok, t_near, np.inf), axis

    def normals_for(self, dirs, axis):
        nrm = np.zeros_like(dirs)
        rows = np.arange(dirs.shape[0])
        nrm[rows, axis] = -np.sign(dirs[rows, axis])
        return nrm

    def faces(self):
        lo, hi = self.lo, self.hi
        ext = hi - lo
        out = []
        for ax in range(3):
            u_ax, v_ax = (ax + 1) % 3, (ax + 2) % 3
            for side, base in ((0, lo.copy()), (1, None)):
                origin = lo.copy()
                if side == 1:
                    origin[ax] = hi[ax]
                eu = np.zeros(3)
                ev = np.zeros(3)
                eu[u_ax] = ext[u_ax]
                ev[v_ax] = ext[v_ax]
                if side == 0:  # flip so the normal points outward (-axis)
                    eu, ev = ev, eu
                out.append(
                    PlanePatch(origin, eu, ev, class_name=self.class_name, albedo=self.albedo)
                )
        return out


@dataclass
class SyntheticScene:
    """Textured surfaces with class labels and per-class unit features."""

    surfaces: list
    feature_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        names = []
        for s in self.surfaces:
            if s.class_name not in names:
                names.append(s.class_name)
        self.class_names = names
        self.class_features = _make_class_features(len(names), self.feature_dim, self.seed)
        self._class_index = {n: i for i, n in enumerate(names)}

    def class_of(self, surface) -> int:
        return self._class_index[surface.class_name]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = []
        for s in self.surfaces:
            if isinstance(s, Box):
                pts.append(s.lo)
                pts.append(s.hi)
            else:
                pts.extend(s.corners())
        if not pts:
            z = np.zeros(3)
            return z, z
        arr = np.stack(pts)
        return arr.min(axis=0), arr.max(axis=0)

    def ground_truth(self, spacing: float = 0.01):
        """Dense uniformly-sampled oriented labeled cloud of all surfaces."""
        pts, nrm, lbl = [], [], []
        for s in self.surfaces:
            patches = s.faces() if isinstance(s, Box) else [s]
            for p in patches:
                sp, sn = p.sample(spacing)
                pts.append(sp)
                nrm.append(sn)
                lbl.append(np.full(sp.shape[0], self.class_of(s), dtype=np.intp))
        if not pts:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.intp)
        return np.concatenate(pts), np.concatenate(nrm), np.concatenate(lbl)


def _make_class_features(n: int, dim: int, seed: int) -> np.ndarray:
    """Unit class vectors with pairwise cosine < 0.99."""
    rng = np.random.default_rng((seed, 11))
    feats = np.zeros((n, dim))
    for i in range(n):
        for _ in range(100):
            v = rng.normal(size=dim)
            v /= np.linalg.norm(v)
            if i == 0 or np.max(feats[:i] @ v) < 0.99:
                feats[i] = v
                break
        else:
            raise RuntimeError("could not draw sufficiently distinct class features")
    return feats


@dataclass
class NoiseModel:
    """Failure modes of a feed-forward geometry model; all off by default."""

    sigma_depth: float = 0.0  # per-point depth noise (m)
    sigma_scale: float = 0.0  # per-call log-normal global scale drift
    warp_amplitude: float = 0.0  # fixed low-frequency deformation (m)
    sigma_rot_deg: float = 0.0  # predicted-pose rotation noise (deg)
    sigma_trans: float = 0.0  # predicted-pose translation noise (m)
    sigma_feature: float = 0.0  # per-point feature noise
    sigma_jitter: float = 0.0  # per-call re-inference jitter (m)
    sigma_normal: float = 0.0  # per-point normal perturbation

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"{name} must be >= 0")


class _SmoothField:
    """Low-frequency random 3D displacement field (sum of sinusoids)."""

    def __init__(self, rng: np.random.Generator, amplitude: float, length_scale: float = 1.5):
        n_waves = 4
        dirs = rng.normal(size=(n_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self.k = dirs * (2.0 * np.pi / length_scale * rng.uniform(0.5, 1.5, size=(n_waves, 1)))
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
        amp = rng.normal(size=(n_waves, 3))
        amp /= np.sqrt((amp**2).sum(axis=0, keepdims=True) / 2.0)
        self.amp = amplitude * amp

    def __call__(self, points: np.ndarray) -> np.ndarray:
        phases = points @ self.k.T + self.phase  # (N, n_waves)
        return np.sin(phases) @ self.amp


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose with +z forward, +x right, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return RigidPose(rot, eye)


def orbit_trajectory(
    center, radius: float, height: float, n_frames: int, span_deg: float = 360.0,
    look_at=None,
) -> list[RigidPose]:
    """Poses on a circular arc around ``center``, looking inward."""
    center = np.asarray(center, dtype=np.float64)
    target = center if look_at is None else np.asarray(look_at, dtype=np.float64)
    poses = []
    angles = np.deg2rad(span_deg) * np.arange(n_frames) / max(n_frames, 1)
    for ang in angles:
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        poses.append(look_at_pose(eye, target))
    return poses


def _pixel_rays(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unit camera-frame ray per pixel, (H*W, 3), row-major."""
    us, vs = np.meshgrid(
        np.arange(intrinsics.width, dtype=np.float64),
        np.arange(intrinsics.height, dtype=np.float64),
        indexing="xy",
    )
    x = (us - intrinsics.cx) / intrinsics.fx
    y = (vs - intrinsics.cy) / intrinsics.fy
    rays = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


_LIGHT = np.array([0.29, 0.41, 0.87])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


class SyntheticSource:
    """Ray-casting stand-in for a feed-forward geometry model.

    Repeated queries of the same frame share the exact valid mask and
    pixel correspondence (the mask is a pure function of scene and pose)
    but differ by the re-inference noise, which is what the localization
    front-end has to cope with.  A fixed seed makes the entire emission
    sequence bit-reproducible.
    """

    def __init__(
        self,
        scene: SyntheticScene,
        trajectory: list[RigidPose],
        intrinsics: CameraIntrinsics,
        noise: NoiseModel | None = None,
        seed: int = 0,
    ):
        self.scene = scene
        self.gt_poses = list(trajectory)
        self.intrinsics = intrinsics
        self.noise = noise or NoiseModel()
        self.seed = seed
        self._rays = _pixel_rays(intrinsics)
        self._cache: dict[int, dict] = {}
        self._call = 0
        warp_rng = np.random.default_rng((seed, 23))
        self._warp = (
            _SmoothField(warp_rng, self.noise.warp_amplitude)
            if self.noise.warp_amplitude > 0
            else None
        )

    def frame_ids(self) -> list[int]:
        return list(range(len(self.gt_poses)))

    def anchor_pose(self) -> RigidPose:
        return self.gt_poses[0]

    def _clean_render(self, frame: int) -> dict:
        if frame in self._cache:
            return self._cache[frame]
        pose = self.gt_poses[frame]
        origin = pose.translation
        dirs = self._rays @ pose.rotation.T
        n_px = dirs.shape[0]
        best_t = np.full(n_px, np.inf)
        normals = np.zeros((n_px, 3))
        colors = np.zeros((n_px, 3))
        labels = np.zeros(n_px, dtype=np.intp)
        for s in self.scene.surfaces:
            if isinstance(s, Box):
                t, axis = s.intersect(origin, dirs)
                closer = t < best_t
                if closer.any():
                    nrm = s.normals_for(dirs[closer], axis[closer])
                    normals[closer] = nrm
                    colors[closer] = s.albedo
                    labels[closer] = self.scene.class_of(s)
                    best_t[closer] = t[closer]
            else:
                t, ab = s.intersect(origin, dirs)
                closer = t < best_t
                if closer.any():
                    sign = np.where(dirs[closer] @ s.normal < 0.0, 1.0, -1.0)
                    normals[closer] = s.normal * sign[:, None]
                    colors[closer] = s.color_at(ab[closer])
                    labels[closer] = self.scene.class_of(s)
                    best_t[closer] = t[closer]
        valid = np.isfinite(best_t)
        shade = 0.55 + 0.45 * np.abs(normals @ _LIGHT)
        colors = np.clip(colors * shade[:, None], 0.0, 1.0)
        out = {
            "origin": origin,
            "dirs": dirs,
            "t": np.where(valid, best_t, 0.0),
            "valid": valid,
            "normals": normals,
            "colors": colors,
            "labels": labels,
        }
        self._cache[frame] = out
        return out

    def infer(
        self, frames: list[int], pose_hints: dict[int, RigidPose] | None = None
    ) -> list[Prediction]:
        """One Prediction per frame, in a common frame anchored to the hint."""
        noise = self.noise
        rng = np.random.default_rng((self.seed, 104729, self._call))
        self._call += 1
        jitter = _SmoothField(rng, noise.sigma_jitter) if noise.sigma_jitter > 0 else None
        scale = float(np.exp(rng.normal(0.0, noise.sigma_scale))) if noise.sigma_scale > 0 else 1.0

        h, w = self.intrinsics.height, self.intrinsics.width
        d = self.scene.feature_dim
        raw = []
        for frame in frames:
            clean = self._clean_render(frame)
            t = clean["t"].copy()
            valid = clean["valid"]
            if noise.sigma_depth > 0:
                t = t + rng.normal(0.0, noise.sigma_depth, size=t.shape) * valid
            pts = clean["origin"] + t[:, None] * clean["dirs"]
            if self._warp is not None:
                pts = pts + self._warp(pts)
            if jitter is not None:
                pts = pts + jitter(pts)
            nrm = clean["normals"].copy()
            if noise.sigma_normal > 0:
                nrm = nrm + rng.normal(0.0, noise.sigma_normal, size=nrm.shape)
                lens = np.linalg.norm(nrm, axis=1, keepdims=True)
                nrm = np.divide(nrm, lens, out=np.zeros_like(nrm), where=lens > 0)
            feats = self.scene.class_features[clean["labels"]].copy()
            if noise.sigma_feature > 0:
                feats = feats + rng.normal(0.0, noise.sigma_feature, size=feats.shape)
                lens = np.linalg.norm(feats, axis=1, keepdims=True)
                feats = np.divide(feats, lens, out=np.zeros_like(feats), where=lens > 0)
            pose = self.gt_poses[frame]
            if noise.sigma_rot_deg > 0 or noise.sigma_trans > 0:
                rotvec = np.deg2rad(noise.sigma_rot_deg) * rng.normal(size=3)
                dt = noise.sigma_trans * rng.normal(size=3)
                perturb = RigidPose(Rotation.from_rotvec(rotvec).as_matrix(), dt)
                pose = perturb.compose(pose)
            raw.append(
                {
                    "frame": frame,
                    "points": pts,
                    "valid": valid,
                    "normals": nrm,
                    "colors": clean["colors"],
                    "features": feats,
                    "pose": pose,
                }
            )

        anchor = None
        if pose_hints:
            for f in frames:
                if f in pose_hints:
                    anchor = f
                    break
        if anchor is not None:
            hinted = pose_hints[anchor]
            current = next(r["pose"] for r in raw if r["frame"] == anchor)
            fix = hinted.compose(current.inverse())
            for r in raw:
                r["points"] = fix.apply(r["points"])
                r["normals"] = fix.rotate(r["normals"])
                r["pose"] = fix.compose(r["pose"])
        if scale != 1.0:
            # The model dilates its reconstruction about its own center
            # (the session camera centroid), *after* anchoring: scale drift
            # leaves each session globally misaligned with the map, which
            # is exactly what the localization front-end must absorb.
            center = np.mean([r["pose"].translation for r in raw], axis=0)
            for r in raw:
                r["points"] = center + scale * (r["points"] - center)
                p = r["pose"]
                r["pose"] = RigidPose(p.rotation, center + scale * (p.translation - center))

        preds = []
        for r in raw:
            preds.append(
                Prediction(
                    frame_id=r["frame"],
                    points=r["points"].reshape(h, w, 3),
                    valid=r["valid"].reshape(h, w),
                    colors=r["colors"].reshape(h, w, 3),
                    normals=r["normals"].reshape(h, w, 3),
                    features=r["features"].reshape(h, w, d),
                    pose=r["pose"].orthonormalized(),
                    intrinsics=self.intrinsics,
                )
            )
        return preds

    def ground_truth(self, spacing: float = 0.02):
        """Visible-surface GT cloud plus the exact poses.

        Scene samples are kept iff at least one trajectory view actually
        sees them (depth-map visibility test against the clean renders),
        mirroring GT built by fusing depth images from the exact poses.
        """
        pts, nrm, lbl = self.scene.ground_truth(spacing)
        if pts.shape[0] == 0:
            return pts, nrm, lbl, list(self.gt_poses)
        intr = self.intrinsics
        visible = np.zeros(pts.shape[0], dtype=bool)
        for frame in range(len(self.gt_poses)):
            clean = self._clean_render(frame)
            depth_map = np.where(clean["valid"], clean["t"], -1.0).reshape(
                intr.height, intr.width
            )
            w2c = self.gt_poses[frame].inverse()
            cams = w2c.apply(pts[~visible])
            rng_dist = np.linalg.norm(cams, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.round(intr.fx * cams[:, 0] / cams[:, 2] + intr.cx).astype(int)
                v = np.round(intr.fy * cams[:, 1] / cams[:, 2] + intr.cy).astype(int)
            ok = (
                (cams[:, 2] > 0)
                & (u >= 0) & (u < intr.width)
                & (v >= 0) & (v < intr.height)
            )
            seen = np.zeros(ok.shape[0], dtype=bool)
            uu, vv = u[ok], v[ok]
            seen[ok] = np.abs(depth_map[vv, uu] - rng_dist[ok]) < 2.0 * spacing + 1e-3
            pending = np.flatnonzero(~visible)
            visible[pending[seen]] = True
        return pts[visible], nrm[visible], lbl[visible], list(self.gt_poses)


class FileSource:
    """Replays prediction bundles written by ``emsplat synth`` or a model.

    The root directory holds one subdirectory per frame (``frame_000012``)
    with ``points.ply`` and ``meta.json``.  Bundles are static: querying a
    frame twice returns identical predictions.
    """

    def __init__(self, root):
        self.root = Path(root)
        self._dirs: dict[int, Path] = {}
        for sub in sorted(self.root.iterdir()):
            if (sub / "meta.json").exists():
                with open(sub / "meta.json") as fh:
                    meta = json.load(fh)
                self._dirs[int(meta["frame_id"])] = sub
        if not self._dirs:
            raise mapio.ArchiveError(f"no prediction bundles under {self.root}")
        self._cache: dict[int, Prediction] = {}

    def frame_ids(self) -> list[int]:
        return sorted(self._dirs)

    def anchor_pose(self) -> RigidPose:
        return self._load(self.frame_ids()[0]).pose

    def _load(self, frame: int) -> Prediction:
        if frame not in self._cache:
            if frame not in self._dirs:
                raise mapio.ArchiveError(f"no bundle on disk for frame {frame}")
            self._cache[frame] = mapio.read_prediction_bundle(self._dirs[frame])
        return self._cache[frame]

    def infer(
        self, frames: list[int], pose_hints: dict[int, RigidPose] | None = None
    ) -> list[Prediction]:
        return [self._load(f) for f in frames]


def load_scene(path) -> tuple[SyntheticScene, list[RigidPose], CameraIntrinsics, NoiseModel]:
    """Parse a scene JSON: surfaces, trajectory, intrinsics, noise.

    The schema is documented in the README; unknown surface types fail.
    """
    with open(path) as fh:
        spec = json.load(fh)
    surfaces = []
    for s in spec["surfaces"]:
        kind = s.get("type", "plane")
        if kind == "plane":
            patch = PlanePatch(
                origin=s["origin"],
                edge_u=s["edge_u"],
                edge_v=s["edge_v"],
                class_name=s.get("class", "surface"),
                albedo=s.get("albedo", [0.7, 0.7, 0.7]),
                checker=s.get("checker"),
                checker_size=s.get("checker_size", 0.25),
            )
            surfaces.append(patch)
        elif kind == "box":
            surfaces.append(
                Box(
                    lo=s["min"],
                    hi=s["max"],
                    class_name=s.get("class", "box"),
                    albedo=s.get("albedo", [0.6, 0.4, 0.3]),
                )
            )
        else:
            raise ValueError(f"unknown surface type {kind!r}")
    scene = SyntheticScene(
        surfaces,
        feature_dim=spec.get("feature_dim", 16),
        seed=spec.get("seed", 0),
    )
    traj = spec["trajectory"]
    if traj.get("type", "orbit") != "orbit":
        raise ValueError(f"unknown trajectory type {traj.get('type')!r}")
    poses = orbit_trajectory(
        center=traj["center"],
        radius=traj["radius"],
        height=traj.get("height", 0.0),
        n_frames=traj["frames"],
        span_deg=traj.get("span_deg", 360.0),
        look_at=traj.get("look_at"),
    )
    intr = spec["intrinsics"]
    intrinsics = CameraIntrinsics(
        fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"],
        width=intr["width"], height=intr["height"],
    )
    noise = NoiseModel(**spec.get("noise", {}))
    return scene, poses, intrinsics, noise
