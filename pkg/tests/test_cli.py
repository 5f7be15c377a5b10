import json
import subprocess
import sys

import numpy as np
import pytest

from handocc.cli import main
from handocc.kinematics import forward_kinematics, random_pose, rest_pose
from handocc.refine import make_pairs


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def pair_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("pairs")
    p = make_pairs(1, seed=5)[0]
    return write(d / "pair.json", p.to_dict())


def test_version_and_help(capsys):
    assert main(["--version"]) == 0
    assert "handocc" in capsys.readouterr().out
    assert main([]) == 2
    assert main(["refine"]) == 2
    assert main(["mesh", "--pose", "x.json", "--out", "y.obj", "--variant", "huge"]) == 2


def test_fit_round_trip(tmp_path, capsys):
    s = forward_kinematics(random_pose(np.random.default_rng(0), "left"))
    out = tmp_path / "pose.json"
    assert main(["fit", "--input", write(tmp_path / "s.json", s.to_dict()), "--out", str(out)]) == 0
    pose = json.loads(out.read_text())
    assert pose["side"] == "left" and pose["residual_mm"] < 0.5
    manifest = json.loads((tmp_path / "pose.json.manifest.json").read_text())
    assert manifest["command"] == "fit" and manifest["seed"] == 42 and str(out) in manifest["outputs"]
    assert "residual_mm=" in capsys.readouterr().out


def test_fit_input_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"side": "right",\n "joints": [1, 2,, 3]}')
    assert main(["fit", "--input", str(bad), "--out", str(tmp_path / "o.json")]) == 2
    assert "line 2" in capsys.readouterr().err
    short = write(tmp_path / "short.json", {"side": "right", "joints": [[0, 0, 0]] * 20})
    assert main(["fit", "--input", short, "--out", str(tmp_path / "o.json")]) == 2
    assert "expected 21 joints, got 20" in capsys.readouterr().err
    assert main(["fit", "--input", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o.json")]) == 2


def test_fit_unreachable_skeleton_is_a_contract_violation(tmp_path):
    s = forward_kinematics(rest_pose()).to_dict()
    # fold the index tip sideways, which no flexion/abduction chain can reach
    s["joints"][8][0] += 30.0
    assert main(["fit", "--input", write(tmp_path / "s.json", s), "--out", str(tmp_path / "o.json")]) == 3


@pytest.mark.parametrize("variant,count", [("plain", 307), ("refined", 699)])
def test_mesh_command(tmp_path, capsys, variant, count):
    pose = write(tmp_path / "p.json", random_pose(np.random.default_rng(1)).to_dict())
    out = tmp_path / "hand.obj"
    assert main(["mesh", "--pose", pose, "--variant", variant, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert f"V={count}" in text and "watertight: true" in text
    assert sum(line.startswith("v ") for line in out.read_text().splitlines()) == count


def test_mesh_rejects_zero_length_bone(tmp_path, capsys):
    pose = random_pose(np.random.default_rng(1)).to_dict()
    pose["bone_lengths"][3] = 0.0
    assert main(["mesh", "--pose", write(tmp_path / "p.json", pose), "--out", str(tmp_path / "h.obj")]) == 2
    assert "bone" in capsys.readouterr().err


def test_refine_and_metrics(tmp_path, pair_file, capsys):
    out = tmp_path / "refined.json"
    report = tmp_path / "report.csv"
    assert main(["refine", "--pair", pair_file, "--weight", "1e-5", "--max-iters", "40", "--grid", "30",
                 "--out", str(out), "--report", str(report)]) == 0
    assert "points_per_hand=121" in capsys.readouterr().out
    refined = json.loads(out.read_text())
    assert set(refined) == {"pose_R", "pose_L", "relative_offset"}
    assert report.read_text().startswith("pair_id,")
    m_out = tmp_path / "metrics.json"
    assert main(["metrics", "--pair", str(out), "--reference", pair_file, "--grid", "20", "--out", str(m_out)]) == 0
    metrics = json.loads(m_out.read_text())
    assert metrics["samples"] == 8000
    assert set(metrics["iou_per_hand"]) == {"right", "left"}
    assert metrics["mpjpe"]["right"] >= 0
    assert {"raycast_count", "occupancy_count"} <= set(metrics)


def test_refine_with_zero_weight_copies_input(tmp_path, pair_file):
    out = tmp_path / "same.json"
    assert main(["refine", "--pair", pair_file, "--weight", "0", "--grid", "10", "--out", str(out)]) == 0
    assert out.read_bytes() == open(pair_file, "rb").read()


def test_refine_skeleton_pairs_keep_their_form(tmp_path, pair_file):
    from handocc.refine import PairPose

    SR, SL = PairPose.from_dict(json.load(open(pair_file))).skeletons()
    src = write(tmp_path / "sk.json", {"right": {"joints": SR.joints.tolist()}, "left": {"joints": SL.joints.tolist()}})
    out = tmp_path / "out.json"
    assert main(["refine", "--pair", src, "--points", "sparse", "--max-iters", "5", "--grid", "10", "--out", str(out)]) == 0
    assert set(json.loads(out.read_text())) == {"right", "left"}


def test_refine_input_errors(tmp_path, pair_file):
    out = str(tmp_path / "o.json")
    assert main(["refine", "--pair", write(tmp_path / "x.json", {"a": 1}), "--out", out]) == 2
    assert main(["refine", "--pair", pair_file, "--weight", "-1", "--out", out]) == 2
    assert main(["refine", "--pair", pair_file, "--field", "magic", "--out", out]) == 2
    assert main(["refine", "--pair", pair_file, "--field", "occnet:/nonexistent.bin", "--out", out]) == 2


def test_make_commands_and_noise_study(tmp_path, capsys):
    pairs = tmp_path / "pairs.json"
    assert main(["--seed", "3", "make-pairs", "--n", "2", "--kind", "contact", "--out", str(pairs)]) == 0
    assert len(json.loads(pairs.read_text())) == 2
    curves = tmp_path / "curves.csv"
    assert main(["study-noise", "--pairs", str(pairs), "--probs", "0,1", "--max-iters", "10", "--grid", "12",
                 "--out", str(curves)]) == 0
    lines = curves.read_text().splitlines()
    assert lines[0].startswith("noise_prob,") and len(lines) == 3
    assert main(["study-noise", "--pairs", str(pairs), "--probs", "0,2", "--out", str(curves)]) == 2
    poses = tmp_path / "poses.json"
    assert main(["make-poses", "--n", "3", "--out", str(poses)]) == 0
    assert [p["side"] for p in json.loads(poses.read_text())] == ["right", "left", "right"]
    assert main(["make-poses", "--n", "0", "--out", str(poses)]) == 2


def test_train_occ_command(tmp_path, capsys):
    poses = tmp_path / "poses.json"
    assert main(["make-poses", "--n", "3", "--out", str(poses)]) == 0
    cfg = write(tmp_path / "cfg.json", {"epochs": 1, "samples_per_hand": 256, "points_per_pose": 128, "val_grid": 8,
                                        "dims": {"enc_hidden": 8, "enc_blocks": 1, "feat": 4, "dec_hidden": 8,
                                                 "dec_blocks": 1}})
    net = tmp_path / "net.bin"
    hist = tmp_path / "hist.csv"
    assert main(["train-occ", "--poses", str(poses), "--config", cfg, "--out", str(net), "--history", str(hist)]) == 0
    assert net.read_bytes()[:4] == b"OCN1" and len(hist.read_text().splitlines()) == 2
    bad = write(tmp_path / "bad.json", {"epochz": 1})
    assert main(["train-occ", "--poses", str(poses), "--config", bad, "--out", str(net)]) == 2
    one = write(tmp_path / "one.json", json.loads(poses.read_text())[:1])
    assert main(["train-occ", "--poses", one, "--out", str(net)]) == 2


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "handocc.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "refine" in res.stdout
