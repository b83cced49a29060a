"""Command-line surface: run, synth, eval, segment.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  ``--seed``
fixes all randomness, making every file output bit-reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, mapio, pipeline
from .sources import FileSource, SyntheticSource, load_scene
from .splatting import render_expected_depth
from .types import Config

log = logging.getLogger(__name__)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="emsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="map an observation stream")
    src = p_run.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", metavar="SCENE.json", help="synthetic scene description")
    src.add_argument("--source", metavar="DIR", help="directory of prediction bundles")
    p_run.add_argument("--config", metavar="CONFIG.json", help="runtime parameters")
    p_run.add_argument("-o", "--output", required=True, metavar="DIR")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument(
        "--dump-renders", action="store_true",
        help="write expected-depth (PFM) and alpha (PGM) debug images",
    )

    p_synth = sub.add_parser("synth", help="write prediction bundles to disk")
    p_synth.add_argument("--scene", required=True, metavar="SCENE.json")
    p_synth.add_argument("-o", "--output", required=True, metavar="DIR")
    p_synth.add_argument("--seed", type=int, default=0)

    p_eval = sub.add_parser("eval", help="score a trajectory and/or map")
    p_eval.add_argument("--traj", required=True, metavar="EST.tum")
    p_eval.add_argument("--gt-traj", required=True, metavar="GT.tum")
    p_eval.add_argument("--map", metavar="MAP.bin")
    p_eval.add_argument("--gt-cloud", metavar="GT.ply")
    p_eval.add_argument("-o", "--output", metavar="METRICS.json")

    p_seg = sub.add_parser("segment", help="classify map Gaussians by feature")
    p_seg.add_argument("--map", required=True, metavar="MAP.bin")
    p_seg.add_argument("--embeddings", required=True, metavar="EMB.json|.npy")
    p_seg.add_argument("-o", "--output", required=True, metavar="DIR")
    p_seg.add_argument("--gt-cloud", metavar="GT.ply", help="labeled cloud for metrics")
    return parser


def _load_embeddings(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npy":
        emb = np.load(p)
    else:
        with open(p) as fh:
            data = json.load(fh)
        emb = np.asarray(data["embeddings"], dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"{path}: zero-length embedding")
    return emb / norms


def _cmd_run(args) -> int:
    config = Config.from_json(args.config) if args.config else Config()
    if args.synthetic:
        scene, poses, intrinsics, noise = load_scene(args.synthetic)
        source = SyntheticSource(scene, poses, intrinsics, noise, seed=args.seed)
    else:
        source = FileSource(args.source)
    result = pipeline.run(source, config, seed=args.seed)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    mapio.export_map(result.gmap, out / "map.bin")
    mapio.write_map_ply(result.gmap, out / "map.ply")
    mapio.write_trajectory_tum(
        out / "traj.tum",
        [e.timestamp for e in result.trajectory.entries],
        [e.pose for e in result.trajectory.entries],
    )
    if result.metrics is not None:
        result.metrics.to_json(out / "metrics.json")
        print(result.metrics.table())
    else:
        log.info("source carries no ground truth; metrics skipped")
    if args.dump_renders and result.trajectory.entries:
        pose = result.trajectory.entries[-1].pose
        intr = source.intrinsics if hasattr(source, "intrinsics") else None
        if intr is not None:
            render = render_expected_depth(
                result.gmap.means(), result.gmap.covariances(),
                pose, intr, config.opacity, config,
            )
            mapio.write_pfm(out / "expected_depth.pfm", render.expected_depth)
            mapio.write_pgm(out / "alpha.pgm", render.accumulated_alpha)
    print(
        f"map: {len(result.gmap)} Gaussians, trajectory: {len(result.trajectory)} poses, "
        f"skipped: {len(result.skipped_frames)}"
    )
    return 0


def _cmd_synth(args) -> int:
    scene, poses, intrinsics, noise = load_scene(args.scene)
    source = SyntheticSource(scene, poses, intrinsics, noise, seed=args.seed)
    frames = source.frame_ids()
    preds = source.infer(frames, {frames[0]: source.anchor_pose()})
    out = Path(args.output)
    for pred in preds:
        mapio.write_prediction_bundle(out / f"frame_{pred.frame_id:06d}", pred)
    print(f"wrote {len(preds)} prediction bundles to {out}")
    return 0


def _cmd_eval(args) -> int:
    ts_est, poses_est = mapio.read_trajectory_tum(args.traj)
    ts_gt, poses_gt = mapio.read_trajectory_tum(args.gt_traj)
    est = {int(round(t)): p.translation for t, p in zip(ts_est, poses_est)}
    gt = {int(round(t)): p.translation for t, p in zip(ts_gt, poses_gt)}
    missing = sorted(set(est) - set(gt))
    if missing:
        raise RuntimeError(
            f"estimated frame {missing[0]} has no ground-truth pose "
            f"({len(missing)} mismatched frame ids)"
        )
    rmse, scale = evaluation.ate_rmse(est, gt)
    report = evaluation.MetricsReport(
        ate_rmse=rmse, scale_score=evaluation.scale_score(scale)
    )
    if args.map and args.gt_cloud:
        gmap = mapio.import_map(args.map)
        cloud = mapio.read_ply_cloud(args.gt_cloud)
        gt_points = np.stack([cloud["x"], cloud["y"], cloud["z"]], axis=1).astype(np.float64)
        gt_normals = None
        if "nx" in cloud:
            gt_normals = np.stack([cloud["nx"], cloud["ny"], cloud["nz"]], axis=1).astype(np.float64)
        accuracy, completion, f1, consistency = evaluation.reconstruction_metrics(
            gmap.means(), gt_points,
            reconstructed_normals=gmap.normals() if gt_normals is not None else None,
            gt_normals=gt_normals,
        )
        report.accuracy = accuracy
        report.completion = completion
        report.f1_at_0_2 = f1
        report.normal_consistency = consistency
    print(report.table())
    if args.output:
        report.to_json(args.output)
    return 0


def _cmd_segment(args) -> int:
    gmap = mapio.import_map(args.map)
    emb = _load_embeddings(args.embeddings)
    labels, confidence = evaluation.segment_map(gmap, emb)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    mapio.write_ply_cloud(
        out / "segmented.ply",
        points=gmap.means(),
        normals=gmap.normals(),
        colors=gmap.colors(),
        labels=labels,
    )
    print(f"labeled {len(labels)} Gaussians; mean confidence {confidence.mean():.3f}")
    if args.gt_cloud:
        cloud = mapio.read_ply_cloud(args.gt_cloud)
        if "class_id" not in cloud:
            raise RuntimeError(f"{args.gt_cloud} carries no class_id property")
        gt_points = np.stack([cloud["x"], cloud["y"], cloud["z"]], axis=1).astype(np.float64)
        miou, f_miou, acc = evaluation.segmentation_metrics(
            labels, gmap.means(), gt_points, cloud["class_id"].astype(np.intp)
        )
        report = evaluation.MetricsReport(miou=miou, f_miou=f_miou, seg_acc=acc)
        report.to_json(out / "metrics.json")
        print(report.table())
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
    "segment": _cmd_segment,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
