"""File formats: TUM trajectories, framed binary scan container, ASCII PLY."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .se3 import Pose

# frame header: index (u64), timestamp (f64), point count (u32); little-endian
_HEADER = struct.Struct("<QdI")
_MAGIC = b"GCSCAN01"


def write_tum(path, timestamps, poses) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, p in zip(timestamps, poses):
            vals = [ts, *p.translation, *p.quaternion()]
            fh.write(" ".join(format(float(v), ".9f") for v in vals) + "\n")


def read_tum(path):
    """Returns (timestamps array, list of Pose); quaternions are normalised."""
    ts, poses = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            v = [float(x) for x in line.split()]
            if len(v) != 8:
                raise ValueError(f"malformed TUM line: {line!r}")
            ts.append(v[0])
            poses.append(Pose.from_quaternion(v[4:8], v[1:4]))
    return np.array(ts), poses


def write_scans(path, scans, first_index: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        for k, scan in enumerate(scans):
            pts = np.ascontiguousarray(scan.points, dtype="<f4")
            fh.write(_HEADER.pack(first_index + k, float(scan.timestamp), len(pts)))
            fh.write(pts.tobytes())


def iter_scans(path):
    """Yields (frame index, timestamp, (N, 3) float64 points)."""
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a scan container")
        while True:
            head = fh.read(_HEADER.size)
            if not head:
                return
            if len(head) != _HEADER.size:
                raise ValueError("truncated frame header")
            idx, ts, n = _HEADER.unpack(head)
            buf = fh.read(12 * n)
            if len(buf) != 12 * n:
                raise ValueError(f"truncated frame {idx}")
            yield idx, ts, np.frombuffer(buf, dtype="<f4").reshape(n, 3).astype(float)


def write_ply(path, points, covariances=None) -> None:
    """ASCII PLY with x y z, plus the covariance upper triangle when given."""
    points = np.asarray(points, dtype=float)
    cols = ["x", "y", "z"]
    data = points
    if covariances is not None:
        iu = np.triu_indices(3)
        names = ["cxx", "cxy", "cxz", "cyy", "cyz", "czz"]
        cols += names
        data = np.hstack([points, np.asarray(covariances)[:, iu[0], iu[1]]])
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property double {c}" for c in cols]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        np.savetxt(fh, data, fmt="%.9g")


def read_ply(path) -> np.ndarray:
    """Vertex table of an ASCII PLY written by write_ply."""
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    n = int(next(line.split()[2] for line in lines if line.startswith("element vertex")))
    if n == 0:
        return np.zeros((0, 3))
    return np.loadtxt(lines[end + 1 : end + 1 + n], ndmin=2)
