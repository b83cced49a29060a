"""Per-frame orchestration: buffer management, localize -> EM -> refine.

The source is queried with the buffered frames, the newest capture, and
the anchor (the only frame whose pose is ever hinted).  The frame that
gets integrated each step is the *previous* capture: its prediction
improves once the newer image joins the input set, so time is re-indexed
to the integrated frame.  The newest capture enters the buffer with a
provisionally aligned prediction (chained through the session transform)
and is finalized when it is integrated itself one step later.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .clustering import initialize_map
from .mapping import em_update, gate_points, responsibilities
from .registration import RegistrationError, localize
from .splatting import RefineResult, refine
from .types import Config, GaussianMap, Prediction, RigidPose

__all__ = [
    "BufferEntry",
    "FrameBuffer",
    "Trajectory",
    "RunResult",
    "build_input_set",
    "run",
]

log = logging.getLogger(__name__)


@dataclass
class BufferEntry:
    frame_id: int
    aligned: Prediction  # latest map-aligned prediction of this frame


class FrameBuffer:
    """FIFO of recent frames with their map-aligned predictions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: list[BufferEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]

    def push(self, frame_id: int, aligned: Prediction) -> None:
        if self.entries and frame_id <= self.entries[-1].frame_id:
            raise ValueError("buffer frame ids must be strictly increasing")
        self.entries.append(BufferEntry(frame_id, aligned))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    @property
    def newest(self) -> BufferEntry:
        return self.entries[-1]

    @property
    def second_newest(self) -> BufferEntry:
        return self.entries[-2]


@dataclass
class TrajectoryEntry:
    frame_id: int
    pose: RigidPose
    timestamp: float


class Trajectory:
    """Ordered camera poses, one per integrated frame."""

    def __init__(self):
        self.entries: list[TrajectoryEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, frame_id: int, pose: RigidPose, timestamp: float | None = None) -> None:
        """Append a pose; re-recording the newest frame finalizes it."""
        ts = float(frame_id) if timestamp is None else timestamp
        if self.entries and frame_id == self.entries[-1].frame_id:
            self.entries[-1] = TrajectoryEntry(frame_id, pose, ts)
            return
        if self.entries and frame_id < self.entries[-1].frame_id:
            raise ValueError("trajectory frame ids must be increasing")
        self.entries.append(TrajectoryEntry(frame_id, pose, ts))

    def positions(self) -> dict[int, np.ndarray]:
        return {e.frame_id: e.pose.translation for e in self.entries}

    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]


@dataclass
class RunResult:
    gmap: GaussianMap
    trajectory: Trajectory
    metrics: evaluation.MetricsReport | None
    refine_log: list[RefineResult] = field(default_factory=list)
    skipped_frames: list[int] = field(default_factory=list)


def build_input_set(
    buffer: FrameBuffer, current: int, anchor: int, anchor_pose: RigidPose
) -> tuple[list[int], dict[int, RigidPose]]:
    """Frames to query (buffer + current + anchor, deduplicated, in that
    order) and the pose hints, which contain exactly the anchor pose."""
    frames: list[int] = []
    for fid in buffer.frame_ids() + [current, anchor]:
        if fid not in frames:
            frames.append(fid)
    return frames, {anchor: anchor_pose}


def _refine_seed(seed: int, frame_id: int) -> int:
    return (seed * 1000003 + frame_id * 7919 + 17) % (2**31)


def run(source, config: Config, seed: int = 0, evaluate: bool = True) -> RunResult:
    """Process an observation source end to end.

    Initialization fills the buffer at the configured stride and builds
    the map from the merged predictions.  Each later step localizes the
    previous capture against the map (correspondence transfer + colored
    ICP on the submap), fuses it with the EM update, runs the splatting
    refinement on whatever the EM step left over, and records the pose.
    Localization failures skip the frame and leave the buffer unchanged;
    source exhaustion ends the run cleanly.  Metrics are computed when the
    source carries ground truth (synthetic mode).
    """
    ids = source.frame_ids()[:: config.frame_stride]
    if len(ids) < config.buffer_size + 1:
        raise ValueError(
            f"source yields {len(ids)} frames at stride {config.frame_stride}; "
            f"need at least {config.buffer_size + 1}"
        )
    anchor = ids[0]
    anchor_pose = source.anchor_pose()

    init_ids = ids[: config.buffer_size]
    log.info("initializing from %d buffered frames", len(init_ids))
    init_preds = source.infer(init_ids, {anchor: anchor_pose})
    gmap = initialize_map(init_preds, config, seed=seed)
    buffer = FrameBuffer(config.buffer_size)
    trajectory = Trajectory()
    for pred in init_preds:
        buffer.push(pred.frame_id, aligned=pred)
        trajectory.record(pred.frame_id, pred.pose)

    refine_log: list[RefineResult] = []
    skipped: list[int] = []
    for current in ids[config.buffer_size :]:
        frames, hints = build_input_set(buffer, current, anchor, anchor_pose)
        preds = {p.frame_id: p for p in source.infer(frames, hints)}
        target = buffer.newest
        shared = buffer.second_newest if len(buffer) > 1 else buffer.newest
        o_new = preds[target.frame_id]
        o_shared_new = o_new if shared.frame_id == target.frame_id else preds[shared.frame_id]
        try:
            pose, aligned, submap = localize(
                o_new, o_shared_new, shared.aligned, gmap, config
            )
        except RegistrationError as exc:
            log.warning(
                "localization of frame %d failed (%s); skipping capture %d",
                target.frame_id, exc, current,
            )
            skipped.append(current)
            continue

        target.aligned = aligned
        trajectory.record(target.frame_id, pose)

        passing, rejected = gate_points(aligned, submap, gmap, config)
        assignment = responsibilities(aligned, passing, submap, gmap, config)
        em_leftover = em_update(gmap, assignment, config)
        leftovers = np.concatenate([rejected, em_leftover])
        leftovers.sort()
        refine_log.append(
            refine(
                gmap, submap, leftovers, aligned, pose, config,
                seed=_refine_seed(seed, target.frame_id),
            )
        )

        # Provisional alignment for the newest capture: chain it through
        # this session's refined transform; finalized when integrated.
        session = pose.compose(o_new.pose.inverse())
        buffer.push(current, aligned=preds[current].transformed(session))

    metrics = None
    if evaluate and hasattr(source, "ground_truth"):
        metrics = _evaluate(gmap, trajectory, source, config)
    return RunResult(
        gmap=gmap,
        trajectory=trajectory,
        metrics=metrics,
        refine_log=refine_log,
        skipped_frames=skipped,
    )


def _evaluate(gmap, trajectory: Trajectory, source, config: Config) -> evaluation.MetricsReport:
    gt_points, gt_normals, gt_labels, gt_poses = source.ground_truth()
    est = trajectory.positions()
    gt = {i: p.translation for i, p in enumerate(gt_poses)}
    rmse, scale = evaluation.ate_rmse(est, gt)
    rec_points = gmap.means()
    rec_normals = gmap.normals()
    if config.densify:
        poses = [e.pose for e in trajectory.entries]
        extra = evaluation.densify_map(gmap, poses, source.intrinsics, config)
        acc_points = np.concatenate([rec_points, extra]) if extra.size else rec_points
    else:
        acc_points = rec_points
    accuracy, completion, f1, _ = evaluation.reconstruction_metrics(
        acc_points, gt_points
    )
    _, _, _, consistency = evaluation.reconstruction_metrics(
        rec_points, gt_points,
        reconstructed_normals=rec_normals, gt_normals=gt_normals,
    )
    labels, _ = evaluation.segment_map(gmap, source.scene.class_features)
    miou, f_miou, seg_acc = evaluation.segmentation_metrics(
        labels, rec_points, gt_points, gt_labels
    )
    return evaluation.MetricsReport(
        ate_rmse=rmse,
        scale_score=evaluation.scale_score(scale),
        accuracy=accuracy,
        completion=completion,
        f1_at_0_2=f1,
        normal_consistency=consistency,
        miou=miou,
        f_miou=f_miou,
        seg_acc=seg_acc,
    )
