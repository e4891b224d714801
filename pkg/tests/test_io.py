import numpy as np
import pytest

from hba.errors import EmptyScan, FormatError, InputError, NonRigidRotation
from hba.geometry import Pose, rot_z
from hba.io import (Frame, filter_points, load_scan, load_sequence, load_trajectory, read_ply,
                    write_map, write_scan_bin, write_trajectory)


def test_bin_two_points(tmp_path):
    p = tmp_path / "a.bin"
    np.array([[1, 2, 3, 0.5], [4, 5, 6, 0.9]], dtype="<f4").tofile(p)
    assert p.stat().st_size == 32
    assert np.array_equal(load_scan(str(p)), [[1, 2, 3], [4, 5, 6]])


def test_bin_empty_and_truncated(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    with pytest.raises(EmptyScan):
        load_scan(str(p))
    p.write_bytes(b"\0" * 20)
    with pytest.raises(FormatError):
        load_scan(str(p))


def test_bin_rejects_nan(tmp_path):
    p = tmp_path / "n.bin"
    np.array([[1, np.nan, 3, 0]], dtype="<f4").tofile(p)
    with pytest.raises(FormatError):
        load_scan(str(p))


def test_ply_ascii_fixture(tmp_path):
    p = tmp_path / "t.ply"
    p.write_text("ply\nformat ascii 1.0\ncomment hand made\nelement vertex 3\n"
                 "property float x\nproperty float y\nproperty float z\nproperty float intensity\n"
                 "end_header\n0 0 0 1\n1 0 0 1\n0 2.5 -1 1\n")
    assert np.allclose(load_scan(str(p)), [[0, 0, 0], [1, 0, 0], [0, 2.5, -1]])


def test_ply_bad_header(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n")
    with pytest.raises(FormatError):
        load_scan(str(p))


def test_pcd_ascii(tmp_path):
    p = tmp_path / "t.pcd"
    p.write_text("# .PCD v0.7\nVERSION 0.7\nFIELDS x y z intensity\nSIZE 4 4 4 4\nTYPE F F F F\n"
                 "COUNT 1 1 1 1\nWIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA ascii\n1 2 3 0\n-1 0.5 2 7\n")
    assert np.allclose(load_scan(str(p)), [[1, 2, 3], [-1, 0.5, 2]])


def test_kitti_lines(tmp_path):
    p = tmp_path / "k.txt"
    R = rot_z(np.pi / 2)
    row = np.hstack([R, [[1], [2], [3]]]).ravel()
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n" + " ".join(map(str, row)) + "\n")
    a, b = load_trajectory(str(p))
    assert a.allclose(Pose.identity(), 0)
    assert np.allclose(b.rotation, R, atol=1e-15)
    assert np.allclose(b.translation, [1, 2, 3])


def test_kitti_non_rigid(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("2 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(NonRigidRotation):
        load_trajectory(str(p))


def test_kitti_wrong_count(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(FormatError):
        load_trajectory(str(p))


def test_tum_translation_only(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0.0 1 2 3 0 0 0 1\n1.0 0 0 0 0 0 0 2\n")
    a, b = load_trajectory(str(p), "tum")
    assert np.allclose(a.rotation, np.eye(3)) and np.allclose(a.translation, [1, 2, 3])
    assert np.allclose(b.rotation, np.eye(3))   # unnormalized quaternion accepted


def test_missing_trajectory(tmp_path):
    with pytest.raises(InputError, match="poses: not found"):
        load_trajectory(str(tmp_path / "nope.txt"))


@pytest.mark.parametrize("fmt", ["kitti", "tum"])
def test_trajectory_round_trip(tmp_path, fmt):
    rng = np.random.default_rng(0)
    poses = [Pose.exp(np.concatenate([rng.normal(size=3), 50 * rng.normal(size=3)]))
             for _ in range(100)]
    p = tmp_path / "traj.txt"
    write_trajectory(poses, str(p), fmt)
    back = load_trajectory(str(p), fmt)
    err = max(np.abs(a.matrix() - b.matrix()).max() for a, b in zip(poses, back))
    assert err < 1e-6


def test_filter_points():
    pts = np.random.default_rng(0).uniform(0, 0.1, size=(8, 3)) + 0.2
    assert np.array_equal(filter_points(pts, 0.1, enabled=False), pts)
    out = filter_points(pts, 0.3)
    assert out.shape == (1, 3) and np.allclose(out[0], pts.mean(axis=0))
    g = np.stack(np.meshgrid(*[np.arange(10.0)] * 3, indexing="ij"), -1).reshape(-1, 3) + 0.1
    assert len(filter_points(g, 0.5)) == 1000


def test_write_map(tmp_path):
    p = tmp_path / "m.ply"
    write_map([Frame(0, np.zeros((1, 3)), Pose.identity())], [Pose.identity()], str(p))
    assert np.allclose(read_ply(str(p)), [[0, 0, 0]])
    t = Pose(np.eye(3), [1, 0, 0])
    write_map([Frame(0, np.array([[1.0, 0, 0]]), t)], [t], str(p))
    assert np.allclose(read_ply(str(p)), [[2, 0, 0]])
    assert b"binary_little_endian" in p.read_bytes()[:60]


def test_load_sequence_mismatch(tmp_path):
    scans = tmp_path / "scans"
    scans.mkdir()
    for i in range(3):
        write_scan_bin(np.ones((4, 3)) * i, str(scans / f"{i:06d}.bin"))
    write_trajectory([Pose.identity()] * 2, str(tmp_path / "p.txt"))
    with pytest.raises(InputError):
        load_sequence(str(scans), str(tmp_path / "p.txt"))
    write_trajectory([Pose.identity()] * 3, str(tmp_path / "p.txt"))
    frames = load_sequence(str(scans), str(tmp_path / "p.txt"))
    assert [f.index for f in frames] == [0, 1, 2]
    assert np.allclose(frames[2].points, 2.0)
