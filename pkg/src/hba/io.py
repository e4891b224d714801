"""Scan / trajectory readers and writers, and the input point filter."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyScan, FormatError, InputError, NonRigidRotation
from .geometry import Pose, orthonormalize

SCAN_FORMATS = ("bin-xyzi", "ply-ascii", "pcd-ascii", "ply", "pcd")
POSE_FORMATS = ("kitti", "tum")
_EXT_FORMAT = {".bin": "bin-xyzi", ".ply": "ply", ".pcd": "pcd"}


@dataclass(frozen=True, eq=False)
class Frame:
    """One scan (layer 1) or keyframe (layer > 1).

    ``points`` are in the frame's local coordinates; ``pose`` maps them to the
    global frame.
    """

    index: int
    points: np.ndarray
    pose: Pose
    layer: int = 1
    meta: dict = field(default_factory=dict, repr=False)

    def with_pose(self, pose: Pose) -> "Frame":
        return replace(self, pose=pose)

    def global_points(self) -> np.ndarray:
        return self.pose.apply(self.points)


def _check_points(points, path):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyScan(f"{path}: no points")
    if not np.all(np.isfinite(points)):
        raise FormatError(f"{path}: non-finite coordinates")
    return points


def _scan_format(path, fmt):
    if fmt is None or fmt == "auto":
        ext = os.path.splitext(str(path))[1].lower()
        if ext not in _EXT_FORMAT:
            raise FormatError(f"{path}: cannot infer scan format from extension")
        return _EXT_FORMAT[ext]
    if fmt not in SCAN_FORMATS:
        raise FormatError(f"unknown scan format {fmt!r}")
    return fmt


def load_scan(path, format=None) -> np.ndarray:
    """Read one scan and return its ``(n, 3)`` xyz coordinates (intensity dropped)."""
    fmt = _scan_format(path, format)
    if not os.path.exists(path):
        raise InputError(f"{path}: not found")
    if fmt == "bin-xyzi":
        size = os.path.getsize(path)
        if size == 0:
            raise EmptyScan(f"{path}: empty file")
        if size % 16:
            raise FormatError(f"{path}: {size} bytes is not a multiple of 16")
        data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
        return _check_points(data[:, :3].astype(float), path)
    if fmt.startswith("ply"):
        return _check_points(read_ply(path), path)
    return _check_points(read_pcd(path), path)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> np.ndarray:
    """Vertex xyz from an ascii or binary little-endian PLY file."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise FormatError(f"{path}: missing 'ply' magic")
        fmt, elements = None, []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: unterminated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                try:
                    elements.append([tok[1], int(tok[2]), []])
                except (IndexError, ValueError):
                    raise FormatError(f"{path}: bad element line") from None
            elif tok[0] == "property":
                if not elements:
                    raise FormatError(f"{path}: property before element")
                if tok[1] == "list":
                    elements[-1][2].append((tok[-1], None))
                else:
                    if tok[1] not in _PLY_TYPES:
                        raise FormatError(f"{path}: unknown property type {tok[1]}")
                    elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        if not elements or elements[0][0] != "vertex":
            raise FormatError(f"{path}: vertex must be the first element")
        _, count, props = elements[0]
        names = [p[0] for p in props]
        if any(p[1] is None for p in props) or not {"x", "y", "z"} <= set(names):
            raise FormatError(f"{path}: vertex element needs scalar x, y, z")
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                line = fh.readline()
                if not line:
                    raise FormatError(f"{path}: truncated vertex data")
                rows.append(line.split())
            try:
                table = np.array(rows, dtype=float).reshape(count, -1)
            except ValueError:
                raise FormatError(f"{path}: malformed vertex rows") from None
            if count and table.shape[1] < len(names):
                raise FormatError(f"{path}: short vertex rows")
            cols = [names.index(c) for c in "xyz"]
            return table[:, cols] if count else np.zeros((0, 3))
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise FormatError(f"{path}: truncated binary vertex data")
            arr = np.frombuffer(raw, dtype=dtype, count=count)
            return np.stack([arr[c].astype(float) for c in "xyz"], axis=1)
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")


def read_pcd(path) -> np.ndarray:
    """xyz from an ascii (or uncompressed binary) PCD file."""
    header = {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: missing DATA line")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0].startswith("#"):
                continue
            header[tok[0].upper()] = tok[1:]
            if tok[0].upper() == "DATA":
                break
        try:
            fields = header["FIELDS"]
            n = int(header.get("POINTS", [0])[0])
            sizes = [int(s) for s in header.get("SIZE", ["4"] * len(fields))]
            types = header.get("TYPE", ["F"] * len(fields))
            counts = [int(c) for c in header.get("COUNT", ["1"] * len(fields))]
        except (KeyError, ValueError):
            raise FormatError(f"{path}: malformed PCD header") from None
        if not {"x", "y", "z"} <= set(fields):
            raise FormatError(f"{path}: PCD needs x, y, z fields")
        data_kind = header["DATA"][0].lower()
        if data_kind == "ascii":
            rows = [fh.readline().split() for _ in range(n)]
            try:
                table = np.array(rows, dtype=float).reshape(n, -1)
            except ValueError:
                raise FormatError(f"{path}: malformed PCD rows") from None
            offsets = np.cumsum([0] + counts)
            return table[:, [offsets[fields.index(c)] for c in "xyz"]] if n else np.zeros((0, 3))
        if data_kind == "binary":
            kinds = {"F": "f", "I": "i", "U": "u"}
            dtype = np.dtype([(f, "<" + kinds[t] + str(s), (c,) if c > 1 else ())
                              for f, s, t, c in zip(fields, sizes, types, counts)])
            raw = fh.read(dtype.itemsize * n)
            if len(raw) < dtype.itemsize * n:
                raise FormatError(f"{path}: truncated PCD data")
            arr = np.frombuffer(raw, dtype=dtype, count=n)
            return np.stack([arr[c].astype(float) for c in "xyz"], axis=1)
        raise FormatError(f"{path}: unsupported PCD DATA {data_kind!r}")


def _parse_kitti_line(vals, where):
    if len(vals) != 12:
        raise FormatError(f"{where}: expected 12 numbers, got {len(vals)}")
    M = np.array(vals, dtype=float).reshape(3, 4)
    det = np.linalg.det(M[:, :3])
    if abs(det - 1.0) > 1e-3:
        raise NonRigidRotation(f"{where}: det(R) = {det:.6f}")
    return Pose(orthonormalize(M[:, :3]), M[:, 3])


def load_trajectory(path, format="kitti"):
    """Read a trajectory file; returns a list of :class:`Pose`."""
    if format not in POSE_FORMATS:
        raise FormatError(f"unknown trajectory format {format!r}")
    if not os.path.exists(path):
        raise InputError(f"poses: not found ({path})")
    poses, stamps = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            where = f"{path}:{lineno}"
            try:
                vals = [float(v) for v in line.split()]
            except ValueError:
                raise FormatError(f"{where}: non-numeric field") from None
            if not np.all(np.isfinite(vals)):
                raise FormatError(f"{where}: non-finite value")
            if format == "kitti":
                poses.append(_parse_kitti_line(vals, where))
            else:
                if len(vals) != 8:
                    raise FormatError(f"{where}: expected 8 fields, got {len(vals)}")
                q = np.array(vals[4:8])
                norm = np.linalg.norm(q)
                if norm < 1e-12:
                    raise FormatError(f"{where}: zero quaternion")
                stamps.append(vals[0])
                poses.append(Pose(Rotation.from_quat(q / norm).as_matrix(), vals[1:4]))
    if not poses:
        raise FormatError(f"{path}: no poses")
    return poses


def write_trajectory(poses, path, format="kitti", timestamps=None):
    if format not in POSE_FORMATS:
        raise FormatError(f"unknown trajectory format {format!r}")
    with open(path, "w") as fh:
        for i, p in enumerate(poses):
            if format == "kitti":
                M = p.matrix()[:3]
                fh.write(" ".join(f"{v:.12e}" for v in M.ravel()) + "\n")
            else:
                ts = float(i if timestamps is None else timestamps[i])
                q = Rotation.from_matrix(p.rotation).as_quat()
                vals = [ts, *p.translation, *q]
                fh.write(" ".join(f"{v:.12e}" for v in vals) + "\n")


def write_map(frames, poses, path):
    """Binary little-endian PLY of all frame points in the global frame."""
    if len(frames) != len(poses):
        raise InputError(f"write_map: {len(frames)} frames but {len(poses)} poses")
    chunks = [pose.apply(f.points if isinstance(f, Frame) else f) for f, pose in zip(frames, poses)]
    pts = np.concatenate(chunks).astype("<f4") if chunks else np.zeros((0, 3), "<f4")
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(pts).tobytes())


def write_scan_bin(points, path, intensity=0.0):
    pts = np.asarray(points, dtype=float)
    data = np.empty((len(pts), 4), dtype="<f4")
    data[:, :3] = pts
    data[:, 3] = intensity
    data.tofile(path)


def filter_points(points, voxel_downsample_size=0.25, enabled=True) -> np.ndarray:
    """Voxel-centroid downsampling: one centroid per occupied cube.

    Output rows are ordered by cell key so the result is deterministic.
    """
    points = np.asarray(points, dtype=float)
    if not enabled or len(points) == 0:
        return points
    if voxel_downsample_size <= 0:
        raise InputError("voxel_downsample_size must be > 0")
    keys = np.floor(points / voxel_downsample_size).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def list_scans(directory):
    if not os.path.isdir(directory):
        raise InputError(f"scans: not found ({directory})")
    names = sorted(n for n in os.listdir(directory)
                   if os.path.splitext(n)[1].lower() in _EXT_FORMAT)
    if not names:
        raise InputError(f"scans: no scan files in {directory}")
    return [os.path.join(directory, n) for n in names]


def load_sequence(scans_dir, poses_path, scan_format=None, pose_format="kitti",
                  filter_size=0.25, filter_enabled=False, workers=1):
    """Load a scan directory plus its trajectory as layer-1 frames."""
    paths = list_scans(scans_dir)
    poses = load_trajectory(poses_path, pose_format)
    if len(paths) != len(poses):
        raise InputError(f"{len(paths)} scans but {len(poses)} poses")

    def _load(path):
        pts = load_scan(path, scan_format)
        return filter_points(pts, filter_size, filter_enabled)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        clouds = list(pool.map(_load, paths))
    return [Frame(i, pts, pose) for i, (pts, pose) in enumerate(zip(clouds, poses))]
