"""Incremental EM map update.

Aligned measurement points are gated against their nearest Gaussians
(normal agreement + Mahalanobis distance), soft-assigned through
log-likelihood responsibilities, and fused by a per-Gaussian running
average whose step size is driven by an isotropy score: Gaussians whose
support straddles both sides of their tangential axes update aggressively,
one-sided support nearly freezes them.  One M-step per frame; there is no
batch EM and no pruning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .registration import Submap
from .types import Config, Gaussian, GaussianMap, Prediction, floor_covariance

__all__ = [
    "GatedAssignment",
    "gate_points",
    "responsibilities",
    "isotropy_score",
    "em_update",
    "blend_step",
]

log = logging.getLogger(__name__)


@dataclass
class GatedAssignment:
    """Per-point soft assignment to K nearby map Gaussians.

    ``positions`` index into the prediction's valid-point arrays; Gaussian
    indices are global map indices.  Responsibility rows are non-negative
    and sum to one.
    """

    positions: np.ndarray  # (P,)
    points: np.ndarray  # (P, 3)
    colors: np.ndarray  # (P, 3)
    normals: np.ndarray  # (P, 3)
    gaussian_indices: np.ndarray  # (P, K)
    d_sigma: np.ndarray  # (P, K) Mahalanobis distances
    d_n: np.ndarray  # (P, K) normal agreements
    d_cos: np.ndarray  # (P, K) feature cosines
    resp: np.ndarray  # (P, K) responsibilities
    pi: np.ndarray  # (P,) explanation-quality scores
    integrate: np.ndarray  # (P,) bool


def _submap_stats(gmap: GaussianMap, indices: np.ndarray):
    covs = np.stack([gmap.gaussians[i].cov for i in indices])
    inv = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    return inv, logdet


def _neighbors(points: np.ndarray, submap: Submap, k: int) -> np.ndarray:
    """(P, K') nearest submap members per point by Euclidean mean distance."""
    k_eff = min(k, len(submap))
    tree = cKDTree(submap.points)
    _, idx = tree.query(points, k=k_eff)
    if k_eff == 1:
        idx = idx[:, None]
    return idx


def _pair_terms(points, normals, features, local_idx, submap, gmap):
    """Mahalanobis distance, normal agreement, feature cosine per pair."""
    inv, logdet = _submap_stats(gmap, submap.indices)
    g_means = submap.points[local_idx]  # (P, K, 3)
    diff = points[:, None, :] - g_means
    d2 = np.einsum("pki,pkij,pkj->pk", diff, inv[local_idx], diff)
    d_sigma = np.sqrt(np.maximum(d2, 0.0))
    d_n = np.einsum("pkd,pd->pk", submap.normals[local_idx], normals)
    g_feat = np.stack([gmap.gaussians[i].feature for i in submap.indices])
    d_cos = np.einsum("pkd,pd->pk", g_feat[local_idx], features)
    p_det = -logdet[local_idx]
    return d_sigma, d_n, d_cos, p_det


def gate_points(
    aligned: Prediction, submap: Submap, gmap: GaussianMap, config: Config
) -> tuple[np.ndarray, np.ndarray]:
    """Split valid points into (passing, rejected) by the two gates.

    A point passes iff the mean normal agreement over its K nearest
    Gaussians reaches tau_n and its smallest Mahalanobis distance stays
    under tau_sigma.  Rejected points feed the rasterization refinement.
    """
    points = aligned.valid_points()
    n = points.shape[0]
    if len(submap) == 0:
        return np.empty(0, dtype=np.intp), np.arange(n, dtype=np.intp)
    normals = aligned.valid_normals()
    features = aligned.valid_features()
    local_idx = _neighbors(points, submap, config.k_neighbors)
    d_sigma, d_n, _, _ = _pair_terms(points, normals, features, local_idx, submap, gmap)
    ok = (d_n.mean(axis=1) >= config.tau_n) & (d_sigma.min(axis=1) <= config.tau_sigma)
    return np.flatnonzero(ok), np.flatnonzero(~ok)


def responsibilities(
    aligned: Prediction,
    passing: np.ndarray,
    submap: Submap,
    gmap: GaussianMap,
    config: Config,
) -> GatedAssignment:
    """Softmax responsibilities over each gated point's K neighbors.

    Log-likelihood per pair:

        p = -d_sigma^2 / 2 - log|Sigma| + kappa1 (d_n - 1) + kappa2 (d_cos - 1)

    pi is the gap between the best p and the best density peak -log|Sigma|
    among the neighbors; a point is flagged for EM integration iff
    |pi| <= tau_pi, i.e. its best explanation sits close to the best
    Gaussian's peak.  Points with non-finite p are dropped with a log line.
    """
    points = aligned.valid_points()[passing]
    normals = aligned.valid_normals()[passing]
    colors = aligned.valid_colors()[passing]
    features = aligned.valid_features()[passing]
    local_idx = _neighbors(points, submap, config.k_neighbors)
    d_sigma, d_n, d_cos, p_det = _pair_terms(
        points, normals, features, local_idx, submap, gmap
    )
    p = (
        -0.5 * d_sigma**2
        + p_det
        + config.kappa1 * (d_n - 1.0)
        + config.kappa2 * (d_cos - 1.0)
    )
    finite = np.all(np.isfinite(p), axis=1)
    if not finite.all():
        log.warning("dropping %d points with non-finite likelihood", (~finite).sum())
        passing = passing[finite]
        points, normals, colors, features = (
            points[finite],
            normals[finite],
            colors[finite],
            features[finite],
        )
        p, p_det, d_sigma, d_n, d_cos, local_idx = (
            p[finite],
            p_det[finite],
            d_sigma[finite],
            d_n[finite],
            d_cos[finite],
            local_idx[finite],
        )
    shifted = p - p.max(axis=1, keepdims=True)
    expp = np.exp(shifted)
    resp = expp / expp.sum(axis=1, keepdims=True)
    pi = p.max(axis=1) - p_det.max(axis=1)
    integrate = np.abs(pi) <= config.tau_pi
    return GatedAssignment(
        positions=passing,
        points=points,
        colors=colors,
        normals=normals,
        gaussian_indices=submap.indices[local_idx],
        d_sigma=d_sigma,
        d_n=d_n,
        d_cos=d_cos,
        resp=resp,
        pi=pi,
        integrate=integrate,
    )


def _tangential_axes(cov: np.ndarray, normal: np.ndarray) -> np.ndarray:
    """The two covariance eigenvectors least aligned with the normal, (2, 3)."""
    _, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    alignment = np.abs(vecs.T @ normal)
    order = np.argsort(alignment)
    return vecs.T[order[:2]]


def isotropy_score(
    gaussian: Gaussian,
    points: np.ndarray,
    resp: np.ndarray,
    delta_min: float = 0.01,
) -> float:
    """How symmetrically the assigned points straddle the tangential axes.

    Responsibilities are normalized to sum to one over the Gaussian's
    assigned points; per axis the score is twice the smaller of the
    positive-side and negative-side responsibility masses, and the final
    value is the minimum over the two axes, clamped to [delta_min, 1].
    """
    resp = np.asarray(resp, dtype=np.float64)
    total = resp.sum()
    if total <= 0.0:
        return delta_min
    r_hat = resp / total
    axes = _tangential_axes(gaussian.cov, gaussian.normal)
    rel = np.asarray(points, dtype=np.float64) - gaussian.mean
    delta = 1.0
    for axis in axes:
        proj = rel @ axis
        # mass exactly on the axis supports both sides
        pos = r_hat[proj >= 0.0].sum()
        neg = r_hat[proj <= 0.0].sum()
        delta = min(delta, 2.0 * min(pos, neg))
    return float(np.clip(delta, delta_min, 1.0))


def blend_step(alpha_prev: float, delta: float) -> float:
    """One step of the running-average recursion alpha <- delta/(alpha+delta)."""
    return delta / (alpha_prev + delta)


def em_update(
    gmap: GaussianMap, assignment: GatedAssignment, config: Config
) -> np.ndarray:
    """Single M-step: blend responsibility-weighted estimates into the map.

    Every Gaussian collecting at least ``resp_min`` total responsibility
    receives new mean/covariance/color/normal estimates and is blended with
    weight alpha_t = delta/(alpha + delta); features stay fixed.  Returns
    the positions of points whose integration flag was false (leftovers
    for the rasterization refinement).  Reductions use fixed index order,
    so identical inputs give bit-identical maps.
    """
    leftovers = assignment.positions[~assignment.integrate]
    use = assignment.integrate
    if not use.any() or len(gmap) == 0:
        return leftovers

    n_g = len(gmap)
    k = assignment.resp.shape[1]
    g_flat = assignment.gaussian_indices[use].ravel()
    r_flat = assignment.resp[use].ravel()
    pts = np.repeat(assignment.points[use], k, axis=0)
    cols = np.repeat(assignment.colors[use], k, axis=0)
    nrms = np.repeat(assignment.normals[use], k, axis=0)

    total = np.bincount(g_flat, weights=r_flat, minlength=n_g)
    update = np.flatnonzero(total >= config.resp_min)
    if update.size == 0:
        return leftovers

    old_means = gmap.means()
    old_covs = gmap.covariances()
    old_normals = gmap.normals()

    # Orient measurement normals like the target Gaussian's stored normal.
    flip = np.einsum("nd,nd->n", nrms, old_normals[g_flat]) < 0.0
    nrms = np.where(flip[:, None], -nrms, nrms)

    s_x = np.zeros((n_g, 3))
    s_c = np.zeros((n_g, 3))
    s_n = np.zeros((n_g, 3))
    s_xx = np.zeros((n_g, 3, 3))
    np.add.at(s_x, g_flat, r_flat[:, None] * pts)
    np.add.at(s_c, g_flat, r_flat[:, None] * cols)
    np.add.at(s_n, g_flat, r_flat[:, None] * nrms)
    np.add.at(s_xx, g_flat, r_flat[:, None, None] * np.einsum("ni,nj->nij", pts, pts))

    # Isotropy: responsibility mass on each side of the two tangential axes.
    axes = np.zeros((n_g, 2, 3))
    for gi in update:
        axes[gi] = _tangential_axes(old_covs[gi], old_normals[gi])
    rel = pts - old_means[g_flat]
    pos_mass = np.zeros((n_g, 2))
    neg_mass = np.zeros((n_g, 2))
    for a in range(2):
        proj = np.einsum("nd,nd->n", rel, axes[g_flat, a])
        positive = proj >= 0.0
        negative = proj <= 0.0  # exactly-on-axis mass supports both sides
        np.add.at(pos_mass[:, a], g_flat[positive], r_flat[positive])
        np.add.at(neg_mass[:, a], g_flat[negative], r_flat[negative])

    for gi in update:
        g = gmap.gaussians[gi]
        t = total[gi]
        mu_new = s_x[gi] / t
        cov_new = floor_covariance(
            s_xx[gi] / t - np.outer(mu_new, mu_new), config.eps_cov
        )
        c_new = np.clip(s_c[gi] / t, 0.0, 1.0)
        n_raw = s_n[gi]
        n_len = np.linalg.norm(n_raw)
        n_new = g.normal if n_len < 1e-12 else n_raw / n_len
        if n_new @ g.normal < 0.0:
            n_new = -n_new

        side = np.minimum(pos_mass[gi], neg_mass[gi]) / t
        delta = float(np.clip(2.0 * side.min(), config.delta_min, 1.0))
        alpha = blend_step(g.alpha, delta)

        old_mean = g.mean.copy()
        g.mean = (1.0 - alpha) * g.mean + alpha * mu_new
        g.cov = floor_covariance((1.0 - alpha) * g.cov + alpha * cov_new, config.eps_cov)
        g.color = np.clip((1.0 - alpha) * g.color + alpha * c_new, 0.0, 1.0)
        blended_n = (1.0 - alpha) * g.normal + alpha * n_new
        n_len = np.linalg.norm(blended_n)
        g.normal = g.normal if n_len < 1e-12 else blended_n / n_len
        g.alpha = alpha
        gmap.rebucket(gi, old_mean)

    return leftovers
