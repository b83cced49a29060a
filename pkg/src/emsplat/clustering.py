"""Build parameterized Gaussians from raw point sets.

Lloyd's k-means picks cluster centers, and each center is turned into a
full Gaussian (covariance, color, normal, feature) from its M nearest
neighbors with Mahalanobis-kernel weights.  The same parameterization is
reused by the rasterization-based refinement stage on leftover points.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .types import Config, Gaussian, GaussianMap, Prediction, floor_covariance

__all__ = [
    "ClusterResult",
    "choose_k",
    "kmeans",
    "gaussian_from_neighborhood",
    "initialize_map",
]

log = logging.getLogger(__name__)

_ASSIGN_CHUNK = 65536


@dataclass
class ClusterResult:
    centroids: np.ndarray  # (K, 3)
    assignment: np.ndarray  # (N,) cluster index per point


def choose_k(total_points: int, frames: int, lam: float) -> int:
    """Cluster count: total points over (lam * frames), at least 1."""
    if total_points < 1 or frames < 1 or lam <= 0:
        raise ValueError("need total_points >= 1, frames >= 1, lam > 0")
    return max(1, int(total_points / (lam * frames)))


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (exact); KD-tree beyond a few centroids."""
    if centroids.shape[0] >= 32:
        dist, labels = cKDTree(centroids).query(points)
        return labels.astype(np.intp), dist**2
    n = points.shape[0]
    labels = np.empty(n, dtype=np.intp)
    dist2 = np.empty(n)
    c2 = np.einsum("kd,kd->k", centroids, centroids)
    for start in range(0, n, _ASSIGN_CHUNK):
        chunk = points[start : start + _ASSIGN_CHUNK]
        d2 = c2[None, :] - 2.0 * chunk @ centroids.T
        lbl = np.argmin(d2, axis=1)
        labels[start : start + _ASSIGN_CHUNK] = lbl
        d_min = d2[np.arange(chunk.shape[0]), lbl] + np.einsum("nd,nd->n", chunk, chunk)
        dist2[start : start + _ASSIGN_CHUNK] = np.maximum(d_min, 0.0)
    return labels, dist2


def _kmeanspp_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: sample centers proportional to squared distance.

    Seeding runs on an even subsample; Lloyd iterations refine on the full
    set afterwards, so seed quality is all that matters here.
    """
    if points.shape[0] > 8 * k and points.shape[0] > 32768:
        step = max(points.shape[0] // 32768, 1)
        points = points[::step]
    n = points.shape[0]
    centroids = np.empty((k, 3))
    centroids[0] = points[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", points - centroids[0], points - centroids[0])
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i:] = centroids[0]
            break
        probs = d2 / total
        centroids[i] = points[rng.choice(n, p=probs)]
        cand = np.einsum("nd,nd->n", points - centroids[i], points - centroids[i])
        np.minimum(d2, cand, out=d2)
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 25, tol: float = 1e-6) -> ClusterResult:
    """Lloyd's k-means with k-means++ seeding.

    Deterministic for a fixed seed.  Empty clusters are re-seeded from the
    point farthest from its assigned centroid, so the final assignment has
    no empty clusters.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k or k < 1:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_seeds(points, k, rng)
    labels = np.zeros(n, dtype=np.intp)
    for _ in range(max_iter):
        labels, dist2 = _assign(points, centroids)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, 3))
        np.add.at(sums, labels, points)
        new_centroids = centroids.copy()
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty_idx in np.flatnonzero(~nonempty):
            far = int(np.argmax(dist2))
            new_centroids[empty_idx] = points[far]
            dist2[far] = 0.0
        motion = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if motion < tol:
            break
    labels, _ = _assign(points, centroids)
    # Final means so non-empty centroids equal the mean of their members.
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, 3))
    np.add.at(sums, labels, points)
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    return ClusterResult(centroids=centroids, assignment=labels)


def gaussian_from_neighborhood(
    center: np.ndarray,
    positions: np.ndarray,
    normals: np.ndarray,
    colors: np.ndarray,
    features: np.ndarray,
    eps_cov: float = 1e-8,
    squared_kernel: bool = False,
) -> Gaussian:
    """Parameterize one Gaussian from its M neighbor points.

    The covariance is the sample covariance of the neighbors (about their
    mean), eigenvalue-floored.  Attribute estimates use kernel weights
    w_m = exp(-d/2) on the Mahalanobis distance d from ``center`` to each
    neighbor under that covariance (``squared_kernel`` switches to d^2).
    The normal is the weighted, sign-coherent average; the color is the
    weighted mean; the feature is copied verbatim from the neighbor best
    aligned with the weighted feature mean.
    """
    positions = np.asarray(positions, dtype=np.float64)
    m = positions.shape[0]
    if m < 4:
        raise ValueError(f"need at least 4 neighbors, got {m}")
    center = np.asarray(center, dtype=np.float64)

    centered = positions - positions.mean(axis=0)
    cov = centered.T @ centered / m
    rank = np.linalg.matrix_rank(cov, tol=eps_cov)
    if rank < 3:
        log.debug("degenerate neighborhood (rank %d) around %s; flooring", rank, center)
    cov = floor_covariance(cov, eps_cov)

    # Kernel weights from the cluster's own covariance.
    diff = positions - center
    sol = np.linalg.solve(cov, diff.T).T
    d2 = np.einsum("md,md->m", diff, sol)
    d = d2 if squared_kernel else np.sqrt(np.maximum(d2, 0.0))
    w = np.exp(-0.5 * d)
    w_sum = w.sum()
    if w_sum < 1e-300:
        w = np.full(m, 1.0 / m)
    else:
        w = w / w_sum

    # Sign coherence: orient every neighbor normal like the one nearest
    # to the center before averaging.
    nearest = int(np.argmin(np.einsum("md,md->m", diff, diff)))
    ref = normals[nearest]
    signs = np.where(normals @ ref < 0.0, -1.0, 1.0)
    oriented = normals * signs[:, None]
    n_sum = oriented.T @ w
    norm = np.linalg.norm(n_sum)
    normal = ref / np.linalg.norm(ref) if norm < 1e-12 else n_sum / norm

    color = colors.T @ w

    f_mean = features.T @ w
    f_norm = np.linalg.norm(f_mean)
    if f_norm < 1e-12:
        best = nearest
    else:
        best = int(np.argmax(features @ (f_mean / f_norm)))
    feature = features[best].copy()

    return Gaussian(
        mean=center.copy(),
        cov=cov,
        color=np.clip(color, 0.0, 1.0),
        normal=normal,
        feature=feature,
        alpha=1.0,
    )


def build_gaussians(
    points: np.ndarray,
    normals: np.ndarray,
    colors: np.ndarray,
    features: np.ndarray,
    n_frames: int,
    config: Config,
    seed: int,
) -> list[Gaussian]:
    """Cluster a point set and parameterize one Gaussian per cluster."""
    n = points.shape[0]
    k = min(choose_k(n, n_frames, config.lam), n)
    result = kmeans(points, k, seed, config.kmeans_max_iter, config.kmeans_tol)
    tree = cKDTree(points)
    m = min(config.m_neighbors, n)
    _, neighbor_idx = tree.query(result.centroids, k=m)
    neighbor_idx = np.atleast_2d(neighbor_idx)
    gaussians = []
    for ci in range(k):
        idx = neighbor_idx[ci]
        if idx.size < 4:
            continue
        gaussians.append(
            gaussian_from_neighborhood(
                result.centroids[ci],
                points[idx],
                normals[idx],
                colors[idx],
                features[idx],
                eps_cov=config.eps_cov,
                squared_kernel=config.squared_kernel,
            )
        )
    return gaussians


def initialize_map(predictions: list[Prediction], config: Config, seed: int = 0) -> GaussianMap:
    """Build the initial map from merged, already-aligned predictions.

    Features are fixed here and never updated by later stages.
    """
    if not predictions:
        raise ValueError("need at least one prediction")
    points = np.concatenate([p.valid_points() for p in predictions])
    if points.shape[0] == 0:
        raise ValueError("no valid points in any prediction")
    normals = np.concatenate([p.valid_normals() for p in predictions])
    colors = np.concatenate([p.valid_colors() for p in predictions])
    features = np.concatenate([p.valid_features() for p in predictions])
    gaussians = build_gaussians(
        points, normals, colors, features, len(predictions), config, seed
    )
    gmap = GaussianMap(voxel_size=config.voxel_size)
    gmap.extend(gaussians)
    return gmap
