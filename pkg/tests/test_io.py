import numpy as np
import pytest

from conftest import random_pose
from gcslam import io
from gcslam.registration import Scan, beam_covariance


def test_tum_round_trip(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(20)]
    ts = np.arange(20) * 0.1 + 1000.0
    io.write_tum(tmp_path / "t.tum", ts, poses)
    ts2, back = io.read_tum(tmp_path / "t.tum")
    assert np.allclose(ts2, ts, atol=1e-9)
    for a, b in zip(poses, back):
        assert np.abs(a.matrix() - b.matrix()).max() < 1e-8


def test_tum_rejects_malformed(tmp_path):
    (tmp_path / "bad.tum").write_text("0 1 2 3\n")
    with pytest.raises(ValueError):
        io.read_tum(tmp_path / "bad.tum")


def test_tum_skips_comments(tmp_path):
    (tmp_path / "c.tum").write_text("# header\n\n0 0 0 0 0 0 0 2\n")
    ts, poses = io.read_tum(tmp_path / "c.tum")
    assert len(poses) == 1 and np.allclose(poses[0].matrix(), np.eye(4))


def test_scan_container_round_trip(tmp_path, rng):
    scans = []
    for k in range(4):
        pts = rng.uniform(-50, 50, (100 + k, 3))
        scans.append(Scan(pts, beam_covariance(pts, 0.02), 0.1 * k))
    io.write_scans(tmp_path / "s.gcs", scans, first_index=7)
    frames = list(io.iter_scans(tmp_path / "s.gcs"))
    assert [f[0] for f in frames] == [7, 8, 9, 10]
    for (idx, ts, pts), scan in zip(frames, scans):
        assert ts == scan.timestamp
        assert np.allclose(pts, scan.points, atol=1e-5)


def test_scan_container_errors(tmp_path, rng):
    (tmp_path / "x.gcs").write_bytes(b"NOTASCAN")
    with pytest.raises(ValueError):
        list(io.iter_scans(tmp_path / "x.gcs"))
    pts = rng.uniform(-1, 1, (10, 3))
    io.write_scans(tmp_path / "t.gcs", [Scan(pts, beam_covariance(pts, 0.02))])
    data = (tmp_path / "t.gcs").read_bytes()
    (tmp_path / "t.gcs").write_bytes(data[:-5])
    with pytest.raises(ValueError):
        list(io.iter_scans(tmp_path / "t.gcs"))


def test_ply_round_trip(tmp_path, rng):
    pts = rng.uniform(-10, 10, (30, 3))
    io.write_ply(tmp_path / "m.ply", pts)
    assert np.allclose(io.read_ply(tmp_path / "m.ply"), pts, atol=1e-7)
    cov = beam_covariance(pts, 0.1)
    io.write_ply(tmp_path / "c.ply", pts, cov)
    table = io.read_ply(tmp_path / "c.ply")
    assert table.shape == (30, 9)
    assert np.allclose(table[:, 3], cov[:, 0, 0], rtol=1e-8)
    io.write_ply(tmp_path / "e.ply", np.zeros((0, 3)))
    assert io.read_ply(tmp_path / "e.ply").shape == (0, 3)
