"""Core geometric and map data types.

Everything here is plain data plus constructors/validators; the algorithms
live in the sibling modules.  All arrays are float64 numpy unless noted.
Conventions: poses are rigid transforms x' = R x + t (camera poses are
camera-to-world), covariances are 3x3 SPD in m^2, normals and features are
unit vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from typing import Iterable

import numpy as np

__all__ = [
    "RigidPose",
    "CameraIntrinsics",
    "Gaussian",
    "Prediction",
    "GaussianMap",
    "Config",
    "floor_covariance",
    "validate",
]


def _as_array(x, shape, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    return a


@dataclass
class RigidPose:
    """Rigid transform x' = R x + t (rotation 3x3, translation 3-vector)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = _as_array(self.rotation, (3, 3), "rotation")
        self.translation = _as_array(self.translation, (3,), "translation")

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "RigidPose":
        mat = _as_array(mat, (4, 4), "mat")
        return RigidPose(mat[:3, :3].copy(), mat[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return self o other, i.e. (self o other)(x) = self(other(x))."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        return err <= tol and abs(np.linalg.det(self.rotation) - 1.0) <= tol

    def orthonormalized(self) -> "RigidPose":
        """Project the rotation back onto SO(3) (nearest via SVD)."""
        u, _, vt = np.linalg.svd(self.rotation)
        rot = u @ vt
        if np.linalg.det(rot) < 0:
            u = u.copy()
            u[:, -1] *= -1.0
            rot = u @ vt
        return RigidPose(rot, self.translation.copy())


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def floor_covariance(cov: np.ndarray, eps: float) -> np.ndarray:
    """Raise eigenvalues of a symmetric 3x3 below ``eps`` up to ``eps``.

    Also symmetrizes, so the result is exactly symmetric SPD.
    """
    sym = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(sym)
    if w[0] >= eps:
        return sym
    w = np.maximum(w, eps)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


@dataclass
class Gaussian:
    """One map primitive: position, shape, appearance, and blend state.

    ``alpha`` is the running-average blend state; new Gaussians start at 1
    and each fused observation updates it via alpha <- delta/(alpha+delta).
    """

    mean: np.ndarray
    cov: np.ndarray
    color: np.ndarray
    normal: np.ndarray
    feature: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.mean = _as_array(self.mean, (3,), "mean")
        self.cov = _as_array(self.cov, (3, 3), "cov")
        self.color = _as_array(self.color, (3,), "color")
        self.normal = _as_array(self.normal, (3,), "normal")
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        self.alpha = float(self.alpha)


@dataclass
class Prediction:
    """One frame's pixel-aligned point map with per-point attributes.

    All per-pixel arrays share the leading (H, W) shape; attributes at
    pixels where ``valid`` is False are meaningless.  Two predictions of
    the same frame_id are pixel-aligned: pixel (u, v) in both refers to
    the same image ray, so their valid masks coincide.
    """

    frame_id: int
    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool
    colors: np.ndarray  # (H, W, 3) in [0, 1]
    normals: np.ndarray  # (H, W, 3) unit
    features: np.ndarray  # (H, W, D) unit
    pose: RigidPose  # camera-to-world
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.valid.shape
        for name in ("points", "colors", "normals"):
            arr = getattr(self, name)
            if arr.shape != (h, w, 3):
                raise ValueError(f"{name} shape {arr.shape} != {(h, w, 3)}")
        if self.features.shape[:2] != (h, w):
            raise ValueError("features grid does not match valid mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def valid_colors(self) -> np.ndarray:
        return self.colors[self.valid]

    def valid_normals(self) -> np.ndarray:
        return self.normals[self.valid]

    def valid_features(self) -> np.ndarray:
        return self.features[self.valid]

    def transformed(self, transform: RigidPose) -> "Prediction":
        """Return a copy with points/normals/pose mapped through a rigid transform."""
        return replace(
            self,
            points=self.points @ transform.rotation.T + transform.translation,
            normals=self.normals @ transform.rotation.T,
            pose=transform.compose(self.pose),
        )


class GaussianMap:
    """The global mixture plus a voxel index over Gaussian centers.

    The index maps quantized cells (voxel size ``voxel_size``) to Gaussian
    indices; every Gaussian lives in exactly the cell of its mean, and the
    index is re-bucketed whenever a mean moves.  Reads may be concurrent;
    mutation requires exclusive access (single-writer contract).
    """

    def __init__(self, voxel_size: float = 0.2):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.gaussians: list[Gaussian] = []
        self._index: dict[tuple[int, int, int], list[int]] = {}

    def __len__(self) -> int:
        return len(self.gaussians)

    def voxel_key(self, point: np.ndarray) -> tuple[int, int, int]:
        cell = np.floor(np.asarray(point, dtype=np.float64) / self.voxel_size)
        return (int(cell[0]), int(cell[1]), int(cell[2]))

    def add(self, gaussian: Gaussian) -> int:
        idx = len(self.gaussians)
        self.gaussians.append(gaussian)
        self._index.setdefault(self.voxel_key(gaussian.mean), []).append(idx)
        return idx

    def extend(self, gaussians: Iterable[Gaussian]) -> None:
        for g in gaussians:
            self.add(g)

    def rebucket(self, idx: int, old_mean: np.ndarray) -> None:
        """Move Gaussian ``idx`` between cells after its mean changed."""
        old_key = self.voxel_key(old_mean)
        new_key = self.voxel_key(self.gaussians[idx].mean)
        if old_key == new_key:
            return
        bucket = self._index[old_key]
        bucket.remove(idx)
        if not bucket:
            del self._index[old_key]
        self._index.setdefault(new_key, []).append(idx)

    def lookup_cell(self, point: np.ndarray) -> list[int]:
        return list(self._index.get(self.voxel_key(point), ()))

    def query_box(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        """Indices of all Gaussians in voxel cells intersecting [lo, hi]."""
        lo_cell = np.floor(np.asarray(lo) / self.voxel_size).astype(int)
        hi_cell = np.floor(np.asarray(hi) / self.voxel_size).astype(int)
        out: list[int] = []
        for key, bucket in self._index.items():
            if all(lo_cell[a] <= key[a] <= hi_cell[a] for a in range(3)):
                out.extend(bucket)
        return np.array(sorted(out), dtype=np.intp)

    # Stacked views for vectorized math.  Rebuilt on demand; maps stay in
    # the thousands for the scenes we target, so this is cheap.

    def means(self) -> np.ndarray:
        if not self.gaussians:
            return np.zeros((0, 3))
        return np.stack([g.mean for g in self.gaussians])

    def covariances(self) -> np.ndarray:
        if not self.gaussians:
            return np.zeros((0, 3, 3))
        return np.stack([g.cov for g in self.gaussians])

    def colors(self) -> np.ndarray:
        if not self.gaussians:
            return np.zeros((0, 3))
        return np.stack([g.color for g in self.gaussians])

    def normals(self) -> np.ndarray:
        if not self.gaussians:
            return np.zeros((0, 3))
        return np.stack([g.normal for g in self.gaussians])

    def features(self) -> np.ndarray:
        if not self.gaussians:
            return np.zeros((0, 0))
        return np.stack([g.feature for g in self.gaussians])

    def alphas(self) -> np.ndarray:
        return np.array([g.alpha for g in self.gaussians], dtype=np.float64)


@dataclass
class Config:
    """Runtime parameters.

    The first block is the core parameter set of the method; the rest are
    implementation knobs (tolerances, caps, synthetic defaults).
    """

    buffer_size: int = 10
    lam: float = 128.0  # points per Gaussian used to pick cluster counts
    tau_n: float = 0.5  # normal-agreement gate
    tau_sigma: float = 4.6  # Mahalanobis gate (3D)
    k_neighbors: int = 16  # Gaussians considered per point
    kappa1: float = 5.0  # normal-consistency weight in log-likelihood
    kappa2: float = 5.0  # feature-cosine weight in log-likelihood
    tau_pi: float = 8.0  # log-space explanation-quality gate
    k_2d: int = 3  # image-plane association candidates
    tau_sigma_2d: float = 4.6  # Mahalanobis gate (2D)

    # map / initialization
    m_neighbors: int = 32  # points used to parameterize one Gaussian
    eps_cov: float = 1e-8  # covariance eigenvalue floor (m^2)
    voxel_size: float = 0.2  # spatial index cell size (m)
    bbox_margin: float = 0.1  # submap box expansion fraction per axis
    frame_stride: int = 10  # process every n-th source image
    feature_dim: int = 16  # synthetic feature dimension
    squared_kernel: bool = False  # exp(-d^2/2) instead of exp(-d/2) weights

    # clustering
    kmeans_max_iter: int = 25
    kmeans_tol: float = 1e-6

    # registration
    icp_max_iterations: int = 50
    icp_tol: float = 1e-6
    icp_gate_factor: float = 3.0  # reject pairs beyond gate * median distance
    # Lower bound on the gate: a pure median gate collapses near convergence
    # and can silence the minority of pairs that disambiguate tangential
    # sliding on regularly sampled surfaces.
    icp_gate_floor: float = 0.1
    icp_min_pairs: int = 6
    icp_max_points: int = 4096  # source subsample cap
    # Robustness against cross-surface matches on sparse targets: Tukey
    # biweight at icp_tukey * MAD of the residuals (0 disables), plus a
    # source/target normal-compatibility cut when source normals are given.
    icp_tukey: float = 3.0
    icp_normal_gate: float = 0.5
    # Optional prior pulling the solution toward the init pose, relative
    # to the largest data eigenvalue (0 disables).
    icp_prior_weight: float = 0.0
    # The robust polish phase is geometric-only and anchored to the pose
    # the plain phase converged to; this prior pins the directions its
    # reweighted data no longer constrains.
    icp_polish_prior: float = 1e-3
    # A refinement is a local polish of the coarse registration; larger
    # corrections indicate a wrong basin and fall back to the init pose.
    icp_max_correction: float = 0.25
    color_weight: float = 0.968  # geometric share of the colored-ICP objective
    color_gradient_neighbors: int = 30
    # Inverse-range pair weighting (w ~ 1/range^p): near-field pairs carry
    # the camera pose, so residual scale drift levers the fit less.  The
    # coarse fit is dense-to-dense and takes it safely; the refinement
    # target is sparse, where concentrating on the near field costs more.
    coarse_range_power: float = 2.0
    refine_range_power: float = 0.0

    # EM update
    delta_min: float = 0.01  # isotropy floor, keeps the blend recursion alive
    resp_min: float = 1e-3  # minimum total responsibility for an M-step

    # rasterization
    opacity: float = 0.8
    alpha_valid: float = 0.5
    tile_size: int = 16
    extent_sigma: float = 3.0  # screen-space support radius in sigmas
    near_plane: float = 0.01
    image_expand: float = 0.2
    eps_cov2d: float = 1e-8

    # evaluation
    densify: bool = False  # render extra points before completion metrics

    def __post_init__(self):
        for name in ("buffer_size", "k_neighbors", "k_2d", "m_neighbors"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lam", "tau_n", "tau_sigma", "tau_pi", "tau_sigma_2d"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "Config":
        with open(path) as fh:
            data = json.load(fh)
        known = {f for f in Config.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return Config(**data)


def validate(gmap: GaussianMap, eps_cov: float = 1e-8) -> list[str]:
    """Check every type invariant; returns a list of violation messages.

    Empty list means the map is sound.  Diagnostic only, never raises.
    """
    problems: list[str] = []
    seen: dict[int, tuple[int, int, int]] = {}
    for key, bucket in gmap._index.items():
        for idx in bucket:
            if idx in seen:
                problems.append(f"gaussian {idx} indexed in two cells")
            seen[idx] = key
    for idx, g in enumerate(gmap.gaussians):
        if not np.all(np.isfinite(g.mean)):
            problems.append(f"gaussian {idx}: non-finite mean")
        asym = np.abs(g.cov - g.cov.T).max()
        if asym > 1e-12:
            problems.append(f"gaussian {idx}: covariance asymmetry {asym:.2e}")
        eigs = np.linalg.eigvalsh(0.5 * (g.cov + g.cov.T))
        if eigs[0] < eps_cov * (1.0 - 1e-9):
            problems.append(f"gaussian {idx}: eigenvalue {eigs[0]:.2e} below floor")
        if abs(np.linalg.norm(g.normal) - 1.0) > 1e-9:
            problems.append(f"gaussian {idx}: normal not unit")
        if abs(np.linalg.norm(g.feature) - 1.0) > 1e-9:
            problems.append(f"gaussian {idx}: feature not unit")
        if not (0.0 < g.alpha <= 1.0):
            problems.append(f"gaussian {idx}: blend state {g.alpha} outside (0, 1]")
        if np.any(g.color < -1e-12) or np.any(g.color > 1.0 + 1e-12):
            problems.append(f"gaussian {idx}: color outside [0, 1]")
        if idx not in seen:
            problems.append(f"gaussian {idx}: missing from voxel index")
        elif seen[idx] != gmap.voxel_key(g.mean):
            problems.append(f"gaussian {idx}: indexed in wrong cell")
    return problems
