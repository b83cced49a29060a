"""Rasterization-based data association and refinement.

Map Gaussians are splatted to the image plane with constant opacity to
produce an expected-depth render; measurement Gaussians built from points
the EM step did not fuse are then either merged into nearby map Gaussians
(association in 2D with pooled screen-space covariance) or appended as new
map entries when they land on pixels the map has never explained or sit in
front of the mapped surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .clustering import build_gaussians
from .registration import Submap
from .types import Config, CameraIntrinsics, Gaussian, GaussianMap, Prediction, RigidPose, floor_covariance

__all__ = [
    "ProjectedGaussian",
    "DepthRender",
    "RefineResult",
    "project_gaussian",
    "project_gaussians",
    "render_expected_depth",
    "refine",
]

log = logging.getLogger(__name__)


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray  # (2,) pixels (u, v)
    cov2d: np.ndarray  # (2, 2) SPD, pixels^2
    depth: float  # camera-frame z, meters
    source_index: int


@dataclass
class DepthRender:
    """Alpha-composited depth; pixels below ``alpha_valid`` are invalid.

    ``expected_depth`` is finite exactly where ``accumulated_alpha`` meets
    the validity threshold (NaN elsewhere).
    """

    expected_depth: np.ndarray  # (H, W) meters, NaN where invalid
    accumulated_alpha: np.ndarray  # (H, W) in [0, 1]
    alpha_valid: float

    @property
    def valid(self) -> np.ndarray:
        return self.accumulated_alpha >= self.alpha_valid


@dataclass
class RefineResult:
    total: int  # |G_t|
    merged: int
    appended: int
    new_region: int  # appended because the map had no valid depth there


def merge_weights(d: np.ndarray, d_cos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(omega, softmax factor) over one member's association candidates.

    The softmax of -d/2 over the candidates sums to one; omega scales it
    by the feature cosine and is non-negative whenever the cosine is.
    """
    soft = np.exp(-0.5 * (d - d.min()))
    soft = soft / soft.sum()
    return soft * d_cos, soft


def _floor_cov2d(cov: np.ndarray, eps: float) -> np.ndarray:
    sym = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(sym)
    if w[0] >= eps:
        return sym
    w = np.maximum(w, eps)
    return (v * w) @ v.T


def project_gaussians(
    means: np.ndarray,
    covs: np.ndarray,
    pose: RigidPose,
    intrinsics: CameraIntrinsics,
    config: Config,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole-project Gaussians; returns (mean2d, cov2d, depth, kept).

    ``pose`` is the camera-to-world pose.  The 2D covariance is
    J R Sigma R^T J^T with J the perspective Jacobian at the camera-frame
    mean and R the world-to-camera rotation.  Gaussians behind the near
    plane or whose projected mean falls outside the expanded image
    rectangle are culled; ``kept`` holds the surviving input indices.
    """
    n = means.shape[0]
    if n == 0:
        empty = np.zeros((0,))
        return np.zeros((0, 2)), np.zeros((0, 2, 2)), empty, np.zeros(0, dtype=np.intp)
    w2c = pose.inverse()
    cams = w2c.apply(means)
    z = cams[:, 2]
    mask = z > config.near_plane
    fx, fy = intrinsics.fx, intrinsics.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cams[:, 0] / z + intrinsics.cx
        v = fy * cams[:, 1] / z + intrinsics.cy
    ex, ey = config.image_expand * intrinsics.width, config.image_expand * intrinsics.height
    mask &= (u >= -ex) & (u < intrinsics.width + ex)
    mask &= (v >= -ey) & (v < intrinsics.height + ey)
    kept = np.flatnonzero(mask)
    if kept.size == 0:
        return np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), kept

    cams = cams[kept]
    z = cams[:, 2]
    jac = np.zeros((kept.size, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * cams[:, 0] / z**2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * cams[:, 1] / z**2
    cov_cam = np.einsum("ij,njk,lk->nil", w2c.rotation, covs[kept], w2c.rotation)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
    for i in range(cov2d.shape[0]):
        cov2d[i] = _floor_cov2d(cov2d[i], config.eps_cov2d)
    mean2d = np.stack([u[kept], v[kept]], axis=1)
    return mean2d, cov2d, z.copy(), kept


def project_gaussian(
    g: Gaussian, pose: RigidPose, intrinsics: CameraIntrinsics, config: Config | None = None
) -> ProjectedGaussian | None:
    """Project a single Gaussian; None means it was culled."""
    config = config or Config()
    mean2d, cov2d, depth, kept = project_gaussians(
        g.mean[None], g.cov[None], pose, intrinsics, config
    )
    if kept.size == 0:
        return None
    return ProjectedGaussian(mean2d[0], cov2d[0], float(depth[0]), 0)


def render_expected_depth(
    means: np.ndarray,
    covs: np.ndarray,
    pose: RigidPose,
    intrinsics: CameraIntrinsics,
    opacity: float,
    config: Config | None = None,
) -> DepthRender:
    """Front-to-back alpha compositing of expected depth, 16x16 tiles.

    Per-pixel formula (and the contract any oracle must reproduce): for
    Gaussians sorted by camera depth (ties by index), each contributes

        alpha = opacity * exp(-q / 2)   where q = d^T cov2d^-1 d,

    with alpha = 0 outside the ``extent_sigma`` support (q > extent^2).
    Composited weights are w_i = alpha_i * prod_{j<i} (1 - alpha_j);
    expected depth is the w-weighted mean of Gaussian depths, and a pixel
    is valid once the accumulated weight reaches ``alpha_valid``.
    """
    config = config or Config()
    if not (0.0 < opacity <= 1.0):
        raise ValueError("opacity must be in (0, 1]")
    h, w = intrinsics.height, intrinsics.width
    depth_sum = np.zeros((h, w))
    alpha_sum = np.zeros((h, w))
    transmit = np.ones((h, w))

    mean2d, cov2d, depth, kept = project_gaussians(means, covs, pose, intrinsics, config)
    if kept.size:
        order = np.lexsort((np.arange(kept.size), depth))
        mean2d, cov2d, depth = mean2d[order], cov2d[order], depth[order]

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        conic = np.stack([c / det, -b / det, a / det], axis=1)  # inverse entries
        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = config.extent_sigma * np.sqrt(lam_max)
        q_max = config.extent_sigma**2

        ts = config.tile_size
        tiles_x = (w + ts - 1) // ts
        tiles_y = (h + ts - 1) // ts
        tile_lists: dict[tuple[int, int], list[int]] = {}
        for gi in range(kept.size):
            u0, v0 = mean2d[gi]
            r = radius[gi]
            tx0 = max(int((u0 - r) // ts), 0)
            tx1 = min(int((u0 + r) // ts), tiles_x - 1)
            ty0 = max(int((v0 - r) // ts), 0)
            ty1 = min(int((v0 + r) // ts), tiles_y - 1)
            for ty in range(ty0, ty1 + 1):
                for tx in range(tx0, tx1 + 1):
                    tile_lists.setdefault((ty, tx), []).append(gi)

        for (ty, tx), members in tile_lists.items():
            r0, r1 = ty * ts, min((ty + 1) * ts, h)
            c0, c1 = tx * ts, min((tx + 1) * ts, w)
            vs, us = np.mgrid[r0:r1, c0:c1]
            t_block = transmit[r0:r1, c0:c1]
            d_block = depth_sum[r0:r1, c0:c1]
            a_block = alpha_sum[r0:r1, c0:c1]
            for gi in members:  # already in front-to-back order
                du = us - mean2d[gi, 0]
                dv = vs - mean2d[gi, 1]
                q = conic[gi, 0] * du * du + 2.0 * conic[gi, 1] * du * dv + conic[gi, 2] * dv * dv
                alpha = np.where(q <= q_max, opacity * np.exp(-0.5 * q), 0.0)
                contrib = alpha * t_block
                d_block += contrib * depth[gi]
                a_block += contrib
                t_block *= 1.0 - alpha
                if t_block.max() < 1e-12:
                    break
            transmit[r0:r1, c0:c1] = t_block
            depth_sum[r0:r1, c0:c1] = d_block
            alpha_sum[r0:r1, c0:c1] = a_block

    with np.errstate(invalid="ignore", divide="ignore"):
        expected = depth_sum / alpha_sum
    expected[alpha_sum < config.alpha_valid] = np.nan
    return DepthRender(
        expected_depth=expected,
        accumulated_alpha=alpha_sum,
        alpha_valid=config.alpha_valid,
    )


def refine(
    gmap: GaussianMap,
    submap: Submap,
    leftover_positions: np.ndarray,
    aligned: Prediction,
    pose: RigidPose,
    config: Config,
    seed: int = 0,
) -> RefineResult:
    """Fuse or append measurement Gaussians built from unexplained points.

    Leftover points are clustered into measurement Gaussians G_t.  The
    submap is rendered to expected depth from the refined camera pose;
    members landing on invalid pixels are new-region observations.  The
    rest are associated with their ``k_2d`` nearest projected map Gaussians
    and merged (weights: softmax of -d/2 over the candidates times the
    feature cosine) if they pass the 2D Mahalanobis gate *behind* the map
    surface; members in front or failing the gate are appended as new.
    Every G_t member is counted exactly once: total == merged + appended.
    """
    positions = np.asarray(leftover_positions, dtype=np.intp)
    if positions.size < 4:
        return RefineResult(total=0, merged=0, appended=0, new_region=0)
    pts = aligned.valid_points()[positions]
    nrm = aligned.valid_normals()[positions]
    col = aligned.valid_colors()[positions]
    feat = aligned.valid_features()[positions]
    members = build_gaussians(pts, nrm, col, feat, 1, config, seed)
    total = len(members)
    if total == 0:
        return RefineResult(total=0, merged=0, appended=0, new_region=0)

    sub_means = np.stack([gmap.gaussians[i].mean for i in submap.indices]) if len(submap) else np.zeros((0, 3))
    sub_covs = np.stack([gmap.gaussians[i].cov for i in submap.indices]) if len(submap) else np.zeros((0, 3, 3))
    render = render_expected_depth(
        sub_means, sub_covs, pose, aligned.intrinsics, config.opacity, config
    )
    m2d_map, c2d_map, _, kept_map = project_gaussians(
        sub_means, sub_covs, pose, aligned.intrinsics, config
    )

    g_means = np.stack([g.mean for g in members])
    g_covs = np.stack([g.cov for g in members])
    m2d_g, c2d_g, depth_g, kept_g = project_gaussians(
        g_means, g_covs, pose, aligned.intrinsics, config
    )

    h, w = aligned.intrinsics.height, aligned.intrinsics.width
    new_flags = np.ones(total, dtype=bool)  # culled members default to new
    new_region = int(total - kept_g.size)
    merge_pairs: list[tuple[int, int, float]] = []  # (member, map index, omega)

    if kept_g.size and kept_map.size:
        cols_px = np.clip(np.round(m2d_g[:, 0]).astype(int), -1, w)
        rows_px = np.clip(np.round(m2d_g[:, 1]).astype(int), -1, h)
        inside = (cols_px >= 0) & (cols_px < w) & (rows_px >= 0) & (rows_px < h)
        map_depth = np.full(kept_g.size, np.nan)
        map_depth[inside] = render.expected_depth[rows_px[inside], cols_px[inside]]

        k2d = min(config.k_2d, kept_map.size)
        tree = cKDTree(m2d_map)
        _, cand = tree.query(m2d_g, k=k2d)
        cand = np.atleast_2d(cand.reshape(kept_g.size, k2d))

        gmap_feats = np.stack([gmap.gaussians[i].feature for i in submap.indices])
        for row, gi in enumerate(kept_g):
            if not np.isfinite(map_depth[row]):
                new_region += 1
                continue
            pooled = c2d_map[cand[row]] + c2d_g[row]
            diff = m2d_map[cand[row]] - m2d_g[row]
            d2 = np.einsum("ki,kij,kj->k", diff, np.linalg.inv(pooled), diff)
            d = np.sqrt(np.maximum(d2, 0.0))
            map_idx_local = kept_map[cand[row]]
            d_cos = gmap_feats[map_idx_local] @ members[gi].feature
            omega, _ = merge_weights(d, d_cos)
            ok = (d < config.tau_sigma_2d) & (depth_g[row] > map_depth[row]) & (d_cos >= 0.0)
            if ok.any():
                new_flags[gi] = False
                for k_i in np.flatnonzero(ok):
                    merge_pairs.append(
                        (gi, int(submap.indices[map_idx_local[k_i]]), float(omega[k_i]))
                    )
    elif kept_g.size:
        new_region += kept_g.size

    # Blend merged members into their map Gaussians.
    by_target: dict[int, list[tuple[int, float]]] = {}
    for member, target, omega in merge_pairs:
        by_target.setdefault(target, []).append((member, omega))
    for target, assoc in sorted(by_target.items()):
        weights = np.array([w_ for _, w_ in assoc])
        if weights.max() <= 0.0:
            continue
        norm_w = np.clip(weights, 0.0, None)
        norm_w = norm_w / norm_w.sum()
        g = gmap.gaussians[target]
        mu_bar = np.zeros(3)
        cov_bar = np.zeros((3, 3))
        col_bar = np.zeros(3)
        n_bar = np.zeros(3)
        for (member, _), w_i in zip(assoc, norm_w):
            mg = members[member]
            mu_bar += w_i * mg.mean
            cov_bar += w_i * mg.cov
            col_bar += w_i * mg.color
            n_i = mg.normal if mg.normal @ g.normal >= 0.0 else -mg.normal
            n_bar += w_i * n_i
        n_len = np.linalg.norm(n_bar)
        n_bar = g.normal if n_len < 1e-12 else n_bar / n_len
        gamma = weights.max() / (g.alpha + weights.max())
        old_mean = g.mean.copy()
        g.mean = (1.0 - gamma) * g.mean + gamma * mu_bar
        g.cov = floor_covariance((1.0 - gamma) * g.cov + gamma * cov_bar, config.eps_cov)
        g.color = np.clip((1.0 - gamma) * g.color + gamma * col_bar, 0.0, 1.0)
        blended = (1.0 - gamma) * g.normal + gamma * n_bar
        b_len = np.linalg.norm(blended)
        g.normal = g.normal if b_len < 1e-12 else blended / b_len
        # The raster blend does not advance the running-average state.
        gmap.rebucket(target, old_mean)

    appended = 0
    for gi in np.flatnonzero(new_flags):
        gmap.add(members[gi])
        appended += 1
    merged = total - appended
    return RefineResult(total=total, merged=merged, appended=appended, new_region=new_region)
