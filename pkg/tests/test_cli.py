import numpy as np
import pytest

from hba.cli import main
from hba.geometry import Pose
from hba.io import load_trajectory, write_trajectory

SPEC = """
frames = 30
sigma_rot_deg = 0.3
sigma_t = 0.01
noise = 0.005
seed = 2
"""


@pytest.fixture
def fixture_dir(tmp_path):
    spec = tmp_path / "scene.txt"
    spec.write_text(SPEC)
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def test_synth_then_run_round_trip(fixture_dir, tmp_path, capsys):
    est = tmp_path / "est.txt"
    report = tmp_path / "report.csv"
    code = main(["run", "--scans", str(fixture_dir / "scans"), "--poses",
                 str(fixture_dir / "poses.txt"), "--n", "1", "--out-poses", str(est),
                 "--report", str(report), "--gt", str(fixture_dir / "ground_truth.txt")])
    assert code == 0
    assert len(load_trajectory(str(est))) == 30
    rows = report.read_text().splitlines()
    assert len(rows) >= 2
    out = capsys.readouterr().out
    assert "trans_rmse_m=" in out


def test_run_labels_mode(fixture_dir, tmp_path):
    report = tmp_path / "report.csv"
    code = main(["run", "--scans", str(fixture_dir / "scans"), "--poses",
                 str(fixture_dir / "poses.txt"), "--mode", "original_ba", "--n", "1",
                 "--report", str(report)])
    assert code == 0
    header, first = report.read_text().splitlines()[:2]
    assert first.split(",")[header.split(",").index("mode")] == "original_ba"


def test_missing_poses(fixture_dir, tmp_path, capsys):
    code = main(["run", "--scans", str(fixture_dir / "scans"), "--poses",
                 str(tmp_path / "nope.txt")])
    assert code == 2
    assert "poses: not found" in capsys.readouterr().err


def test_unknown_config_key(fixture_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus = 3\n")
    code = main(["run", "--scans", str(fixture_dir / "scans"), "--poses",
                 str(fixture_dir / "poses.txt"), "--config", str(cfg)])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_eval_ate_identical_and_offset(tmp_path, capsys):
    gt = [Pose(np.eye(3), [float(k), 0.0, 0.0]) for k in range(5)]
    a = tmp_path / "a.txt"
    write_trajectory(gt, str(a))
    assert main(["eval", "ate", "--gt", str(a), "--est", str(a)]) == 0
    assert capsys.readouterr().out.strip() == "rot_rmse_deg=0.000000 trans_rmse_m=0.000000"
    # alternating lateral offsets of +-0.3 m cannot be aligned away
    shifted = [Pose(np.eye(3), p.translation + [0, 0.3 * (-1) ** k, 0]) for k, p in enumerate(gt)]
    b = tmp_path / "b.txt"
    write_trajectory(shifted, str(b))
    assert main(["eval", "ate", "--gt", str(a), "--est", str(b)]) == 0
    out = capsys.readouterr().out
    trans = float(out.split("trans_rmse_m=")[1])
    # best rigid fit shifts by the mean offset 0.06 m: errors 0.24 / 0.36 m
    assert trans == pytest.approx(np.sqrt((3 * 0.24**2 + 2 * 0.36**2) / 5), abs=2e-6)


def test_eval_mme_one_point_map(tmp_path, capsys):
    p = tmp_path / "one.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
                 "property float y\nproperty float z\nend_header\n0 0 0\n")
    assert main(["eval", "mme", "--map", str(p)]) == 2
    assert "error stage=eval map has 1 points" in capsys.readouterr().err


def test_plan_tables(capsys):
    assert main(["plan", "--frames", "2000"]) == 0
    out = capsys.readouterr().out
    assert "3,572000,1" in out
    assert main(["plan", "--frames", "9"]) == 0
    assert "chosen_l=1" in capsys.readouterr().out
