"""Pose estimation against the map.

Point-to-plane ICP provides closest-point correspondences, the colored
variant adds a photometric term on the local color-gradient plane (no
scale is ever estimated), and the correspondence-transfer step turns two
pixel-aligned predictions of the same image into a coarse map registration
for a brand-new prediction.  Submap selection keeps large maps cheap by
only retrieving Gaussians near the currently observable region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .types import Config, GaussianMap, Prediction, RigidPose

__all__ = [
    "RegistrationError",
    "CorrespondenceSet",
    "Submap",
    "ICPDiagnostics",
    "CoarseRegistration",
    "icp_point_to_plane",
    "icp_colored",
    "transfer_coarse_registration",
    "select_submap",
    "localize",
    "fit_rigid",
]

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    """Raised when an alignment cannot be produced (too few pairs, etc.)."""


@dataclass
class CorrespondenceSet:
    pairs: np.ndarray  # (N, 2) [source index, target index]
    weights: np.ndarray  # (N,) >= 0


@dataclass
class Submap:
    """A subset of map Gaussians viewed as oriented colored points.

    ``weights`` grade how disc-like each Gaussian is: means of Gaussians
    that straddle surface junctions sit off-surface and make poor
    point-to-plane targets, so registration trusts them less.
    """

    indices: np.ndarray  # (S,) into GaussianMap
    points: np.ndarray  # (S, 3) Gaussian means
    colors: np.ndarray  # (S, 3)
    normals: np.ndarray  # (S, 3)
    weights: np.ndarray | None = None  # (S,) planarity in [0, 1]

    def __len__(self) -> int:
        return len(self.indices)


def planarity_weights(covs: np.ndarray) -> np.ndarray:
    """Disc-likeness per covariance: (e2 - e1) / e3 for eigenvalues e1<=e2<=e3."""
    eigs = np.linalg.eigvalsh(covs)
    return np.clip((eigs[:, 1] - eigs[:, 0]) / np.maximum(eigs[:, 2], 1e-30), 0.0, 1.0)


@dataclass
class ICPDiagnostics:
    residual_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


@dataclass
class CoarseRegistration:
    pose: RigidPose
    rms_residual: float
    n_pairs: int


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def _exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula, series fallback near zero angle."""
    theta = np.linalg.norm(omega)
    k = _skew(omega)
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * k @ k
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def _apply_twist(xi: np.ndarray, pose: RigidPose) -> RigidPose:
    """Left-multiply pose by the small rigid motion exp(omega), v."""
    rot = _exp_so3(xi[:3])
    return RigidPose(rot @ pose.rotation, rot @ pose.translation + xi[3:])


def _subsample(n: int, cap: int) -> np.ndarray:
    """Deterministic even subsample of range(n) down to at most cap."""
    if n <= cap:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).astype(np.intp))


def _color_gradients(
    points: np.ndarray, normals: np.ndarray, intensity: np.ndarray, k: int
) -> np.ndarray:
    """Per-point 3D intensity gradient constrained to the tangent plane.

    Least-squares fit of i(x) ~ i_q + d . (x' - q) over the k nearest
    neighbors, with x' the neighbor projected onto q's tangent plane and a
    strong d . n = 0 constraint row.
    """
    n_pts = points.shape[0]
    k = min(k, n_pts)
    tree = cKDTree(points)
    _, nn = tree.query(points, k=k)
    nn = np.atleast_2d(nn)
    diffs = points[nn] - points[:, None, :]  # (N, k, 3)
    offsets = np.einsum("nkd,nd->nk", diffs, normals)
    proj = diffs - offsets[..., None] * normals[:, None, :]
    di = intensity[nn] - intensity[:, None]
    rows = np.concatenate([proj, k * normals[:, None, :]], axis=1)  # constraint row
    rhs = np.concatenate([di, np.zeros((n_pts, 1))], axis=1)
    ata = np.einsum("nki,nkj->nij", rows, rows) + 1e-9 * np.eye(3)
    atb = np.einsum("nki,nk->ni", rows, rhs)
    return np.linalg.solve(ata, atb[..., None])[..., 0]


def _tukey_weights(residuals: np.ndarray, k: float, floor: float) -> np.ndarray:
    """Tukey biweight around the residual median, scale k * MAD."""
    if k <= 0:
        return np.ones_like(residuals)
    dev = residuals - np.median(residuals)
    scale = 1.4826 * np.median(np.abs(dev))
    c = k * max(scale, floor)
    u = np.minimum(np.abs(dev) / c, 1.0)
    return (1.0 - u**2) ** 2


def _icp_core(
    source: np.ndarray,
    target: np.ndarray,
    target_normals: np.ndarray,
    init: RigidPose,
    config: Config,
    source_colors: np.ndarray | None = None,
    target_colors: np.ndarray | None = None,
    source_normals: np.ndarray | None = None,
    target_weights: np.ndarray | None = None,
) -> tuple[RigidPose, CorrespondenceSet, ICPDiagnostics]:
    """Shared ICP loop; the photometric term is active iff colors are given.

    Each iteration re-estimates nearest-neighbor correspondences, gates
    them at ``icp_gate_factor`` times the median pair distance (with an
    absolute floor), drops normal-incompatible pairs when source normals
    are available, reweights the geometric residuals with a Tukey biweight
    (cross-surface matches on sparse targets are exactly the far tail),
    solves the weighted 6-dof system, and backtracks the step until the
    objective on the current pair set does not increase.  The recorded
    residual history is non-increasing by construction: if re-association
    ever raises the objective, the previous pose is kept and the loop
    stops.
    """
    photometric = source_colors is not None and target_colors is not None
    keep = _subsample(source.shape[0], config.icp_max_points)
    src = source[keep]
    src_n = source_normals[keep] if source_normals is not None else None
    src_int = source_colors[keep].mean(axis=1) if photometric else None
    if photometric:
        tgt_int = target_colors.mean(axis=1)
        tgt_grad = _color_gradients(
            target, target_normals, tgt_int, config.color_gradient_neighbors
        )
    lam = config.color_weight if photometric else 1.0
    tree = cKDTree(target)
    pose = init
    diag = ICPDiagnostics()
    last_pairs: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    prev_residual = np.inf
    # Phase 1 ("solve") optimizes the full objective with plain weights.
    # Phase 2 ("polish") is geometric-only with Tukey weights, anchored to
    # the phase-1 pose: reweighting can silence the minority of pairs that
    # resist tangential sliding, so the polish is confined to directions
    # its own data still constrains.
    robust = False
    anchor: RigidPose | None = None

    def objective(moved, s_idx, t_idx, w_g, use_color) -> float:
        q = target[t_idx]
        n = target_normals[t_idx]
        r_g = np.einsum("nd,nd->n", moved[s_idx] - q, n)
        lam_eff = lam if use_color else 1.0
        num = lam_eff * (w_g * r_g) @ r_g
        den = lam_eff * w_g.sum()
        if use_color:
            p = moved[s_idx]
            proj = p - np.einsum("nd,nd->n", p - q, n)[:, None] * n
            r_c = (
                tgt_int[t_idx]
                + np.einsum("nd,nd->n", tgt_grad[t_idx], proj - q)
                - src_int[s_idx]
            )
            num += (1.0 - lam_eff) * r_c @ r_c
            den += (1.0 - lam_eff) * len(s_idx)
        return float(np.sqrt(num / max(den, 1e-12)))

    for it in range(config.icp_max_iterations):
        use_color = photometric and not robust
        moved = pose.apply(src)
        dist, t_idx = tree.query(moved)
        gate = max(config.icp_gate_factor * float(np.median(dist)), config.icp_gate_floor)
        mask = dist <= gate
        if src_n is not None and config.icp_normal_gate > -1.0:
            agree = np.einsum(
                "nd,nd->n", src_n @ pose.rotation.T, target_normals[t_idx]
            )
            mask &= agree >= config.icp_normal_gate
        if mask.sum() < config.icp_min_pairs:
            raise RegistrationError(
                f"only {int(mask.sum())} correspondences survive the "
                f"{gate:.4f} m gate (need {config.icp_min_pairs})"
            )
        s_idx = np.flatnonzero(mask)
        t_sel = t_idx[mask]
        p = moved[s_idx]
        q = target[t_sel]
        n = target_normals[t_sel]
        r_g = np.einsum("nd,nd->n", p - q, n)
        w_g = _tukey_weights(r_g, config.icp_tukey, 1e-4) if robust else np.ones_like(r_g)
        if target_weights is not None:
            w_g = w_g * target_weights[t_sel]
        res = objective(moved, s_idx, t_sel, w_g, use_color)
        if last_pairs is None:
            diag.residual_history.append(res)
            prev_residual = res
        last_pairs = (s_idx, t_sel, w_g)

        lam_eff = lam if use_color else 1.0
        j_g = np.hstack([np.cross(p, n), n])
        scaled_w = lam_eff * w_g
        h = (j_g * scaled_w[:, None]).T @ j_g
        b = -(j_g * scaled_w[:, None]).T @ r_g
        if use_color:
            proj = p - r_g[:, None] * n
            d = tgt_grad[t_sel]
            r_c = tgt_int[t_sel] + np.einsum("nd,nd->n", d, proj - q) - src_int[s_idx]
            j_c = np.hstack([np.cross(p, d), d])
            h += (1.0 - lam_eff) * j_c.T @ j_c
            b -= (1.0 - lam_eff) * j_c.T @ r_c
        prior_anchor = anchor if robust else (init if config.icp_prior_weight > 0 else None)
        prior_weight = config.icp_polish_prior if robust else config.icp_prior_weight
        if prior_anchor is not None and prior_weight > 0:
            # deviation twist from the anchor, left-composition convention;
            # scaled by the largest data eigenvalue so it only pins the
            # directions the (re)weighted data no longer constrains
            t_dev = pose.compose(prior_anchor.inverse())
            dev = np.concatenate(
                [Rotation.from_matrix(t_dev.rotation).as_rotvec(), t_dev.translation]
            )
            mu = prior_weight * float(np.linalg.eigvalsh(h)[-1])
            h = h + mu * np.eye(6)
            b = b - mu * dev
        diag.iterations = it + 1
        try:
            xi = np.linalg.solve(h + 1e-12 * np.eye(6), b)
        except np.linalg.LinAlgError:
            break

        # Backtrack on the fixed pair set with fixed weights.  Acceptance
        # is local (improve the current pair set's objective); the history
        # records only values that also improve on everything recorded, so
        # it stays non-increasing while pair churn cannot stall descent.
        step = 1.0
        accepted = False
        for _ in range(16):
            cand = _apply_twist(step * xi, pose)
            cand_res = objective(cand.apply(src), s_idx, t_sel, w_g, use_color)
            if cand_res <= res * (1.0 + 1e-12) + 1e-15:
                pose = cand
                accepted = True
                if cand_res <= prev_residual:
                    diag.residual_history.append(cand_res)
                    prev_residual = cand_res
                break
            step *= 0.5
        converged = not accepted or np.linalg.norm(step * xi) < config.icp_tol
        if converged:
            if not robust and config.icp_tukey > 0:
                robust = True
                anchor = pose
                continue
            diag.converged = True
            break

    if last_pairs is None:
        raise RegistrationError("ICP made no iterations")
    s_idx, t_sel, w = last_pairs
    pairs = np.stack([keep[s_idx], t_sel], axis=1)
    pose = pose.orthonormalized()
    return pose, CorrespondenceSet(pairs=pairs, weights=w), diag


def icp_point_to_plane(
    source: np.ndarray,
    target: np.ndarray,
    target_normals: np.ndarray,
    init: RigidPose | None = None,
    config: Config | None = None,
    source_normals: np.ndarray | None = None,
    target_weights: np.ndarray | None = None,
    full_output: bool = False,
):
    """Align source points to an oriented target cloud.

    Minimizes sum(((R s + t - q) . n_q)^2) over nearest-neighbor pairs.
    Source normals, when given, enable the compatibility cut.  Returns
    (pose, correspondences); with ``full_output`` the per-iteration
    diagnostics are appended.
    """
    config = config or Config()
    init = init or RigidPose.identity()
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise RegistrationError("empty cloud")
    pose, corr, diag = _icp_core(
        source, target, target_normals, init, config,
        source_normals=source_normals, target_weights=target_weights,
    )
    return (pose, corr, diag) if full_output else (pose, corr)


def icp_colored(
    source: np.ndarray,
    source_colors: np.ndarray,
    target: np.ndarray,
    target_colors: np.ndarray,
    target_normals: np.ndarray,
    init: RigidPose | None = None,
    config: Config | None = None,
    source_normals: np.ndarray | None = None,
    target_weights: np.ndarray | None = None,
    full_output: bool = False,
):
    """Joint geometric + photometric alignment, no scale estimation.

    The photometric residual compares the source point's intensity with
    the target's local color plane (value + in-plane gradient); the split
    between the two terms is ``config.color_weight`` geometric.
    """
    config = config or Config()
    init = init or RigidPose.identity()
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise RegistrationError("empty cloud")
    pose, corr, diag = _icp_core(
        source,
        target,
        target_normals,
        init,
        config,
        source_colors=source_colors,
        target_colors=target_colors,
        source_normals=source_normals,
        target_weights=target_weights,
    )
    return (pose, diag) if full_output else pose


def fit_rigid(
    source: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None
) -> tuple[RigidPose, float]:
    """Closed-form weighted rigid fit (Kabsch, no scale).

    Returns the pose and the weighted RMS residual after alignment.
    """
    if source.shape[0] < 3:
        raise RegistrationError("rigid fit needs at least 3 pairs")
    w = np.ones(source.shape[0]) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    s_bar = w @ source
    t_bar = w @ target
    s0 = source - s_bar
    t0 = target - t_bar
    h = (s0 * w[:, None]).T @ t0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = t_bar - rot @ s_bar
    pose = RigidPose(rot, trans)
    resid = pose.apply(source) - target
    rms = float(np.sqrt(w @ np.einsum("nd,nd->n", resid, resid)))
    return pose, rms


def transfer_coarse_registration(
    o_new: Prediction,
    o_shared_new: Prediction,
    o_shared_old: Prediction,
    config: Config | None = None,
) -> CoarseRegistration:
    """Coarse map registration of a new prediction via a shared frame.

    The shared frame exists in two versions: a fresh one from the current
    inference and an older, already map-aligned one.  ICP between the new
    prediction and the fresh version yields pairs (i -> j); pixel alignment
    carries j over to the aligned version, and a weighted rigid fit of the
    composed pairs gives the map-frame pose of ``o_new``.
    """
    config = config or Config()
    if o_shared_new.frame_id != o_shared_old.frame_id:
        raise ValueError("shared predictions must come from the same frame")
    if not np.array_equal(o_shared_new.valid, o_shared_old.valid):
        raise ValueError("shared predictions are not pixel-aligned")
    _, corr = icp_point_to_plane(
        o_new.valid_points(),
        o_shared_new.valid_points(),
        o_shared_new.valid_normals(),
        init=RigidPose.identity(),
        config=config,
        source_normals=o_new.valid_normals(),
    )
    if corr.pairs.shape[0] < config.icp_min_pairs:
        raise RegistrationError("too few composed correspondences")
    src = o_new.valid_points()[corr.pairs[:, 0]]
    dst = o_shared_old.valid_points()[corr.pairs[:, 1]]
    # Near-field pairs carry the camera pose: weighting by inverse square
    # range keeps residual scale drift from levering the fit.
    rng = np.linalg.norm(src - o_new.pose.translation, axis=1)
    weights = corr.weights / np.maximum(rng, 0.2) ** config.coarse_range_power
    pose, rms = fit_rigid(src, dst, weights)
    # Two trimming rounds: composed pairs crossing depth discontinuities
    # are grossly wrong and poison the closed-form fit.
    for _ in range(2):
        resid = np.linalg.norm(pose.apply(src) - dst, axis=1)
        keep = resid <= config.icp_gate_factor * max(np.median(resid), 1e-12)
        if keep.sum() < config.icp_min_pairs or keep.all():
            break
        src, dst, weights = src[keep], dst[keep], weights[keep]
        pose, rms = fit_rigid(src, dst, weights)
    return CoarseRegistration(pose=pose, rms_residual=rms, n_pairs=len(src))


def select_submap(
    gmap: GaussianMap, reference_points: np.ndarray, margin: float = 0.1
) -> Submap:
    """Gaussians inside the expanded bounding box of the reference cloud.

    All voxel cells intersecting the box contribute; on an empty result
    the whole map is returned with a warning.
    """
    if reference_points.shape[0] == 0:
        raise ValueError("reference cloud is empty")
    lo = reference_points.min(axis=0)
    hi = reference_points.max(axis=0)
    pad = margin * (hi - lo)
    indices = gmap.query_box(lo - pad, hi + pad)
    if indices.size == 0:
        log.warning("observable box matched no Gaussians; using whole map")
        indices = np.arange(len(gmap), dtype=np.intp)
    means = gmap.means()
    colors = gmap.colors()
    normals = gmap.normals()
    covs = gmap.covariances()
    return Submap(
        indices=indices,
        points=means[indices],
        colors=colors[indices],
        normals=normals[indices],
        weights=planarity_weights(covs[indices]),
    )


def localize(
    o_new: Prediction,
    shared_new: Prediction,
    shared_old: Prediction,
    gmap: GaussianMap,
    config: Config,
) -> tuple[RigidPose, Prediction, Submap]:
    """Full localization: coarse transfer, submap retrieval, colored ICP.

    Returns the camera pose of the frame (refined world transform composed
    with the predicted camera pose), the prediction moved into the map
    frame, and the submap used, for reuse by the mapping stage.
    Registration failures propagate as :class:`RegistrationError`.
    """
    coarse = transfer_coarse_registration(o_new, shared_new, shared_old, config)
    submap = select_submap(gmap, shared_old.valid_points(), config.bbox_margin)
    cam = coarse.pose.compose(o_new.pose).translation
    rng = np.linalg.norm(submap.points - cam, axis=1)
    range_w = 1.0 / np.maximum(rng, 0.2) ** config.refine_range_power
    refined = icp_colored(
        o_new.valid_points(),
        o_new.valid_colors(),
        submap.points,
        submap.colors,
        submap.normals,
        init=coarse.pose,
        config=config,
        source_normals=o_new.valid_normals(),
        target_weights=submap.weights * range_w,
    )
    correction = refined.compose(coarse.pose.inverse())
    angle = np.arccos(np.clip((np.trace(correction.rotation) - 1.0) / 2.0, -1.0, 1.0))
    if (
        np.linalg.norm(correction.translation) > config.icp_max_correction
        or angle > np.deg2rad(10.0)
    ):
        log.warning(
            "refinement correction %.3f m / %.1f deg out of bounds; keeping coarse pose",
            np.linalg.norm(correction.translation), np.rad2deg(angle),
        )
        refined = coarse.pose
    aligned = o_new.transformed(refined)
    return aligned.pose, aligned, submap
