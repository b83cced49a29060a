"""Trajectory, reconstruction, and open-set segmentation metrics.

Trajectory error uses a closed-form similarity alignment (with scale) of
estimated to ground-truth positions; reconstruction quality is nearest-
neighbor accuracy/completion with an F1 at a distance threshold plus a
sign-invariant normal-consistency score; segmentation assigns each
Gaussian the class embedding with the highest feature cosine and scores
it against the label of the nearest ground-truth point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .splatting import render_expected_depth
from .types import CameraIntrinsics, Config, GaussianMap, RigidPose

__all__ = [
    "MetricsReport",
    "umeyama_alignment",
    "ate_rmse",
    "scale_score",
    "reconstruction_metrics",
    "segment_map",
    "segmentation_metrics",
    "densify_map",
]


@dataclass
class MetricsReport:
    ate_rmse: float | None = None  # meters
    scale_score: float | None = None  # percent
    accuracy: float | None = None  # meters
    completion: float | None = None  # meters
    f1_at_0_2: float | None = None  # percent
    normal_consistency: float | None = None  # percent
    miou: float | None = None  # percent
    f_miou: float | None = None  # percent
    seg_acc: float | None = None  # percent

    def __post_init__(self):
        for name in ("scale_score", "f1_at_0_2", "normal_consistency", "miou", "f_miou", "seg_acc"):
            v = getattr(self, name)
            if v is not None and not (-1e-9 <= v <= 100.0 + 1e-9):
                raise ValueError(f"{name}={v} outside [0, 100]")
        for name in ("ate_rmse", "accuracy", "completion"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def table(self) -> str:
        rows = [
            ("ATE RMSE [m]", self.ate_rmse, "{:.4f}"),
            ("Scale [%]", self.scale_score, "{:.1f}"),
            ("Accuracy [m]", self.accuracy, "{:.4f}"),
            ("Completion [m]", self.completion, "{:.4f}"),
            ("F1@0.2m [%]", self.f1_at_0_2, "{:.1f}"),
            ("Normals [%]", self.normal_consistency, "{:.1f}"),
            ("mIoU [%]", self.miou, "{:.1f}"),
            ("f-mIoU [%]", self.f_miou, "{:.1f}"),
            ("Acc [%]", self.seg_acc, "{:.1f}"),
        ]
        width = max(len(r[0]) for r in rows)
        lines = []
        for label, value, fmt in rows:
            text = "n/a" if value is None else fmt.format(value)
            lines.append(f"{label:<{width}}  {text}")
        return "\n".join(lines)


def umeyama_alignment(source: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity (s, R, t) minimizing ||s R src + t - tgt||^2."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    s0 = source - mu_s
    t0 = target - mu_t
    n = source.shape[0]
    cov = t0.T @ s0 / n
    var_s = (s0**2).sum() / n
    u, d, vt = np.linalg.svd(cov)
    sgn = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    e = np.array([1.0, 1.0, sgn])
    rot = u @ np.diag(e) @ vt
    scale = float((d * e).sum() / var_s)
    trans = mu_t - scale * rot @ mu_s
    return scale, rot, trans


def ate_rmse(
    estimated: dict[int, np.ndarray], ground_truth: dict[int, np.ndarray]
) -> tuple[float, float]:
    """Absolute trajectory error after similarity alignment.

    Positions are matched by frame id; returns (rmse meters, alignment
    scale).  The result is invariant under any similarity transform of the
    estimated trajectory.
    """
    common = sorted(set(estimated) & set(ground_truth))
    if len(common) < 3:
        raise ValueError(f"need at least 3 matched poses, got {len(common)}")
    est = np.stack([np.asarray(estimated[i], dtype=np.float64) for i in common])
    gt = np.stack([np.asarray(ground_truth[i], dtype=np.float64) for i in common])
    scale, rot, trans = umeyama_alignment(est, gt)
    resid = est @ (scale * rot).T + trans - gt
    rmse = float(np.sqrt(np.einsum("nd,nd->n", resid, resid).mean()))
    return rmse, scale


def scale_score(s: float) -> float:
    """Symmetric metric-scale quality: 100 * min(s, 1/s)."""
    if s <= 0:
        raise ValueError("alignment scale must be positive")
    return 100.0 * min(s, 1.0 / s)


def reconstruction_metrics(
    reconstructed: np.ndarray,
    gt: np.ndarray,
    threshold: float = 0.2,
    reconstructed_normals: np.ndarray | None = None,
    gt_normals: np.ndarray | None = None,
) -> tuple[float, float, float, float | None]:
    """(accuracy, completion, F1 percent, normal consistency percent).

    Accuracy is the mean nearest-neighbor distance reconstruction -> GT,
    completion the reverse; precision/recall are the fractions under the
    threshold in each direction.  Normal consistency is the mean absolute
    normal cosine over mutual nearest-neighbor pairs (sign-invariant,
    since predicted normals are orientation-ambiguous); None when either
    side lacks normals.
    """
    if reconstructed.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("both clouds must be non-empty")
    tree_gt = cKDTree(gt)
    tree_rec = cKDTree(reconstructed)
    d_rg, idx_rg = tree_gt.query(reconstructed)
    d_gr, idx_gr = tree_rec.query(gt)
    accuracy = float(d_rg.mean())
    completion = float(d_gr.mean())
    precision = float((d_rg < threshold).mean())
    recall = float((d_gr < threshold).mean())
    f1 = 0.0 if precision + recall == 0 else 200.0 * precision * recall / (precision + recall)
    consistency = None
    if reconstructed_normals is not None and gt_normals is not None:
        mutual = idx_gr[idx_rg] == np.arange(reconstructed.shape[0])
        if mutual.any():
            cos = np.einsum(
                "nd,nd->n", reconstructed_normals[mutual], gt_normals[idx_rg[mutual]]
            )
            consistency = float(100.0 * np.abs(cos).mean())
    return accuracy, completion, f1, consistency


def segment_map(
    features: np.ndarray | GaussianMap, class_embeddings: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-Gaussian class by highest feature cosine; ties -> lowest index.

    Returns (labels, best cosine per Gaussian); a low best cosine marks a
    low-confidence assignment.
    """
    if isinstance(features, GaussianMap):
        features = features.features()
    emb = np.asarray(class_embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise ValueError("need a non-empty (C, D) embedding matrix")
    sims = features @ emb.T
    labels = np.argmax(sims, axis=1)  # argmax takes the lowest index on ties
    return labels.astype(np.intp), sims[np.arange(sims.shape[0]), labels]


def segmentation_metrics(
    pred_labels: np.ndarray,
    centers: np.ndarray,
    gt_points: np.ndarray,
    gt_labels: np.ndarray,
) -> tuple[float, float, float]:
    """(mIoU, frequency-weighted mIoU, accuracy), all percent.

    Each center is matched to its nearest GT point's label.  Per-class IoU
    is averaged over the classes present in the matched GT (unweighted for
    mIoU, GT-frequency-weighted for f-mIoU).
    """
    if pred_labels.shape[0] == 0 or gt_points.shape[0] == 0:
        raise ValueError("need non-empty predictions and ground truth")
    tree = cKDTree(gt_points)
    _, nn = tree.query(centers)
    truth = np.asarray(gt_labels, dtype=np.intp)[nn]
    pred = np.asarray(pred_labels, dtype=np.intp)
    n_classes = int(max(truth.max(), pred.max())) + 1
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    present = np.flatnonzero(confusion.sum(axis=1) > 0)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.divide(tp, denom, out=np.zeros(n_classes), where=denom > 0)
    miou = float(100.0 * iou[present].mean())
    freq = confusion.sum(axis=1)[present] / confusion.sum()
    f_miou = float(100.0 * (freq * iou[present]).sum())
    acc = float(100.0 * (truth == pred).mean())
    return miou, f_miou, acc


def densify_map(
    gmap: GaussianMap,
    poses: list[RigidPose],
    intrinsics: CameraIntrinsics,
    config: Config | None = None,
) -> np.ndarray:
    """Back-project one point per valid rendered-depth pixel, all poses.

    Used to give the sparse Gaussian map a fair completion score; the
    returned points carry no normals.
    """
    config = config or Config()
    means = gmap.means()
    covs = gmap.covariances()
    us, vs = np.meshgrid(
        np.arange(intrinsics.width, dtype=np.float64),
        np.arange(intrinsics.height, dtype=np.float64),
        indexing="xy",
    )
    x = (us - intrinsics.cx) / intrinsics.fx
    y = (vs - intrinsics.cy) / intrinsics.fy
    rays = np.stack([x, y, np.ones_like(x)], axis=-1)
    out = []
    for pose in poses:
        render = render_expected_depth(means, covs, pose, intrinsics, config.opacity, config)
        depth = render.expected_depth
        good = np.isfinite(depth)
        if not good.any():
            continue
        cam_pts = rays[good] * depth[good][:, None]
        out.append(pose.apply(cam_pts))
    if not out:
        return np.zeros((0, 3))
    return np.concatenate(out)
