"""Serialization: map archives, PLY clouds, prediction bundles, TUM files.

The map archive is a little-endian binary format with an explicit version
byte; Gaussian covariances and features do not fit standard PLY semantics
cleanly, so PLY is reserved for interchange (oriented colored points).
All records are float32, making round trips lossless at that precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .types import CameraIntrinsics, Gaussian, GaussianMap, Prediction, RigidPose, validate

__all__ = [
    "ArchiveError",
    "export_map",
    "import_map",
    "write_map_ply",
    "write_ply_cloud",
    "read_ply_cloud",
    "write_prediction_bundle",
    "read_prediction_bundle",
    "write_trajectory_tum",
    "read_trajectory_tum",
    "write_pgm",
    "write_pfm",
]

_MAGIC = b"EMSP"
_VERSION = 1


class ArchiveError(RuntimeError):
    pass


_TRIU = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def export_map(gmap: GaussianMap, path) -> None:
    """Write the map archive: header + one float32 record per Gaussian."""
    path = Path(path)
    feat_dim = gmap.gaussians[0].feature.shape[0] if len(gmap) else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BIIQf", _VERSION, feat_dim, 0, len(gmap), gmap.voxel_size))
        for g in gmap.gaussians:
            rec = np.empty(16 + feat_dim, dtype="<f4")
            rec[0:3] = g.mean
            rec[3:9] = [g.cov[i, j] for i, j in _TRIU]
            rec[9:12] = g.color
            rec[12:15] = g.normal
            rec[15] = g.alpha
            rec[16:] = g.feature
            fh.write(rec.tobytes())


def import_map(path, check: bool = True) -> GaussianMap:
    """Read a map archive back; errors name the offending byte position."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:4]!r}")
    version, feat_dim, _, count, voxel_size = struct.unpack_from("<BIIQf", raw, 4)
    if version != _VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    header = 4 + struct.calcsize("<BIIQf")
    rec_bytes = (16 + feat_dim) * 4
    expected = header + count * rec_bytes
    if len(raw) != expected:
        raise ArchiveError(
            f"{path}: truncated at byte {len(raw)} (expected {expected}, "
            f"record size {rec_bytes})"
        )
    gmap = GaussianMap(voxel_size=float(voxel_size))
    data = np.frombuffer(raw, dtype="<f4", offset=header).reshape(count, 16 + feat_dim)
    for rec in data.astype(np.float64):
        cov = np.empty((3, 3))
        for val, (i, j) in zip(rec[3:9], _TRIU):
            cov[i, j] = cov[j, i] = val
        gmap.add(
            Gaussian(
                mean=rec[0:3],
                cov=cov,
                color=rec[9:12],
                normal=rec[12:15],
                feature=rec[16:],
                alpha=float(rec[15]),
            )
        )
    if check:
        problems = validate(gmap, eps_cov=0.0)
        # Serialization rounds at float32; re-check unit norms at that grain.
        hard = [p for p in problems if "not unit" not in p]
        if hard:
            raise ArchiveError(f"{path}: invariant violations on import: {hard[:3]}")
        for g in gmap.gaussians:
            g.normal /= np.linalg.norm(g.normal)
            n = np.linalg.norm(g.feature)
            if n > 0:
                g.feature /= n
    return gmap


def write_map_ply(gmap: GaussianMap, path) -> None:
    """Export Gaussians as oriented colored points for external mesh tools."""
    write_ply_cloud(
        path,
        points=gmap.means(),
        normals=gmap.normals(),
        colors=gmap.colors(),
    )


def write_ply_cloud(path, points, normals=None, colors=None, labels=None) -> None:
    """Binary little-endian PLY with optional normals/colors/class labels."""
    points = np.asarray(points, dtype="<f4")
    n = points.shape[0]
    fields: list[tuple[str, str]] = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = ["property float x", "property float y", "property float z"]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
        header += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if labels is not None:
        fields += [("class_id", "<i4")]
        header += ["property int class_id"]
    data = np.empty(n, dtype=fields)
    data["x"], data["y"], data["z"] = points[:, 0], points[:, 1], points[:, 2]
    if normals is not None:
        nrm = np.asarray(normals, dtype="<f4")
        data["nx"], data["ny"], data["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
    if colors is not None:
        rgb = np.clip(np.asarray(colors, dtype=np.float64) * 255.0, 0, 255).astype("u1")
        data["red"], data["green"], data["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    if labels is not None:
        data["class_id"] = np.asarray(labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(b"ply\nformat binary_little_endian 1.0\n")
        fh.write(f"element vertex {n}\n".encode())
        fh.write(("\n".join(header) + "\nend_header\n").encode())
        fh.write(data.tobytes())


_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


def read_ply_cloud(path) -> dict[str, np.ndarray]:
    """Read a binary little-endian PLY vertex element into named arrays."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ArchiveError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if b"binary_little_endian" not in fmt:
            raise ArchiveError(f"{path}: only binary little-endian PLY is supported")
        count = 0
        fields: list[tuple[str, str]] = []
        while True:
            line = fh.readline()
            if not line:
                raise ArchiveError(f"{path}: header ended prematurely")
            parts = line.strip().decode().split()
            if not parts:
                continue
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise ArchiveError(f"{path}: unsupported element {parts[1]}")
                count = int(parts[2])
            elif parts[0] == "property":
                if parts[1] == "list":
                    raise ArchiveError(f"{path}: list properties not supported")
                fields.append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        data = np.fromfile(fh, dtype=np.dtype(fields), count=count)
    if data.shape[0] != count:
        raise ArchiveError(f"{path}: expected {count} vertices, read {data.shape[0]}")
    return {name: np.ascontiguousarray(data[name]) for name, _ in fields}


def write_prediction_bundle(dirpath, pred: Prediction) -> None:
    """One directory per frame: points.ply (row-major pixels) + meta.json."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    h, w = pred.shape
    d = pred.feature_dim
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
              ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1"),
              ("valid", "u1")] + [(f"f_{i}", "<f4") for i in range(d)]
    data = np.zeros(h * w, dtype=fields)
    pts = pred.points.reshape(-1, 3)
    nrm = pred.normals.reshape(-1, 3)
    rgb = np.clip(pred.colors.reshape(-1, 3) * 255.0, 0, 255).astype("u1")
    data["x"], data["y"], data["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    data["nx"], data["ny"], data["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
    data["red"], data["green"], data["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    data["valid"] = pred.valid.reshape(-1).astype("u1")
    feats = pred.features.reshape(-1, d)
    for i in range(d):
        data[f"f_{i}"] = feats[:, i]
    header = [
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uchar valid",
    ] + [f"property float f_{i}" for i in range(d)]
    with open(dirpath / "points.ply", "wb") as fh:
        fh.write(b"ply\nformat binary_little_endian 1.0\n")
        fh.write(f"element vertex {h * w}\n".encode())
        fh.write(("\n".join(header) + "\nend_header\n").encode())
        fh.write(data.tobytes())
    meta = {
        "frame_id": pred.frame_id,
        "height": h,
        "width": w,
        "feature_dim": d,
        "intrinsics": {
            "fx": pred.intrinsics.fx,
            "fy": pred.intrinsics.fy,
            "cx": pred.intrinsics.cx,
            "cy": pred.intrinsics.cy,
        },
        "pose": pred.pose.matrix().reshape(-1).tolist(),
    }
    with open(dirpath / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def read_prediction_bundle(dirpath) -> Prediction:
    dirpath = Path(dirpath)
    meta_path = dirpath / "meta.json"
    ply_path = dirpath / "points.ply"
    if not meta_path.exists() or not ply_path.exists():
        raise ArchiveError(f"frame bundle {dirpath} is missing points.ply or meta.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    h, w, d = meta["height"], meta["width"], meta["feature_dim"]
    cloud = read_ply_cloud(ply_path)
    if cloud["x"].shape[0] != h * w:
        raise ArchiveError(
            f"{ply_path}: vertex count {cloud['x'].shape[0]} does not match {h}x{w}"
        )
    points = np.stack([cloud["x"], cloud["y"], cloud["z"]], axis=1).astype(np.float64)
    normals = np.stack([cloud["nx"], cloud["ny"], cloud["nz"]], axis=1).astype(np.float64)
    colors = np.stack([cloud["red"], cloud["green"], cloud["blue"]], axis=1) / 255.0
    feats = np.stack([cloud[f"f_{i}"] for i in range(d)], axis=1).astype(np.float64)
    intr = meta["intrinsics"]
    pose = RigidPose.from_matrix(np.array(meta["pose"], dtype=np.float64).reshape(4, 4))
    return Prediction(
        frame_id=int(meta["frame_id"]),
        points=points.reshape(h, w, 3),
        valid=cloud["valid"].reshape(h, w).astype(bool),
        colors=colors.reshape(h, w, 3),
        normals=normals.reshape(h, w, 3),
        features=feats.reshape(h, w, d),
        pose=pose.orthonormalized(),
        intrinsics=CameraIntrinsics(
            fx=intr["fx"], fy=intr["fy"], cx=intr["cx"], cy=intr["cy"], width=w, height=h
        ),
    )


def write_trajectory_tum(path, timestamps, poses) -> None:
    """TUM format: per line ``timestamp tx ty tz qx qy qz qw`` (w last)."""
    with open(path, "w") as fh:
        for ts, pose in zip(timestamps, poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
            t = pose.translation
            fh.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_trajectory_tum(path) -> tuple[np.ndarray, list[RigidPose]]:
    timestamps = []
    poses = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise ArchiveError(f"{path}: malformed TUM line: {line!r}")
            ts, tx, ty, tz, qx, qy, qz, qw = vals
            rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
            timestamps.append(ts)
            poses.append(RigidPose(rot, np.array([tx, ty, tz])))
    return np.array(timestamps), poses


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit grayscale PGM from a [0, 1] float image (NaN -> 0)."""
    img = np.nan_to_num(np.asarray(image, dtype=np.float64), nan=0.0)
    img = np.clip(img, 0.0, 1.0)
    data = (img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1); NaN kept as-is."""
    data = np.asarray(image, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{data.shape[1]} {data.shape[0]}\n-1.0\n".encode())
        fh.write(data[::-1].tobytes())  # PFM stores rows bottom-up
