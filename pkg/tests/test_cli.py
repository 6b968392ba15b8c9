import json
import os
import subprocess
import sys

import numpy as np
import pytest

from replift import cli
from replift.dataio import read_records, write_records

TINY_TRAIN = {"hidden": 16, "critic_hidden": 8, "critic_iters": 2, "batch_size": 32, "epochs": 2,
              "checkpoint_every": 1}


def run(tmp_path, *argv):
    return cli.main(["--workdir", str(tmp_path), *argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.json").write_text(json.dumps({"count": 96, "test_count": 24, "seed": 5}))
    (root / "train.json").write_text(json.dumps(TINY_TRAIN))
    assert run(root, "gen", "--config", "gen.json", "--out", "data") == 0
    assert run(root, "train", "--data", "data/train", "--eval-data", "data/test", "--config", "train.json",
               "--out", "run") == 0
    return root


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "replift.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen", "train", "eval", "sweep", "lift", "plot"):
        assert sub in proc.stdout


def test_usage_error_exit_code(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "train")
    assert exc.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        run(tmp_path, "sweep", "--checkpoint", "x", "--data", "y", "--out", "z", "--sigmas", "-1")
    assert exc.value.code == cli.EXIT_USAGE


def test_gen_is_deterministic_and_manifested(workspace, tmp_path):
    assert run(tmp_path, "gen", "--config", str(workspace / "gen.json"), "--out", "again") == 0
    for split in ("train", "test"):
        for f in (workspace / "data" / split).iterdir():
            assert f.read_bytes() == (tmp_path / "again" / split / f.name).read_bytes(), f
    m = json.loads((workspace / "data" / cli.MANIFEST_NAME).read_text())
    assert m["command"] == "gen" and m["seed"] == 5
    assert m["output_digests"] and all(len(d) == 64 for d in m["output_digests"].values())
    assert m["config_digest"] == cli.config_digest(m["config"])


def test_gen_seed_flag_changes_data(workspace, tmp_path):
    run(tmp_path, "gen", "--config", str(workspace / "gen.json"), "--seed", "6", "--out", "other")
    a = (workspace / "data" / "train" / "poses3d.txt")
    b = (tmp_path / "other" / "train" / "poses3d.txt")
    if a.exists():
        assert a.read_bytes() != b.read_bytes()


def test_train_outputs(workspace):
    out = workspace / "run"
    for name in ("ckpt_epoch0000.rlck", "ckpt_epoch0001.rlck", "ckpt_epoch0002.rlck", "final.rlck", "metrics.csv"):
        assert (out / name).exists(), name
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3 and all(r.split(",")[-1] for r in rows[1:])
    m = json.loads((out / cli.MANIFEST_NAME).read_text())
    assert m["config"]["kcs_enabled"] is True
    assert m["dataset_digests"] and m["output_digests"]


def test_train_zero_epochs(workspace, tmp_path):
    assert run(tmp_path, "train", "--data", str(workspace / "data/train"), "--config",
               str(workspace / "train.json"), "--epochs", "0", "--out", "zero") == 0
    assert (tmp_path / "zero" / "ckpt_epoch0000.rlck").exists()
    assert (tmp_path / "zero" / "metrics.csv").read_text().count("\n") == 1


def test_no_kcs_recorded(workspace, tmp_path):
    assert run(tmp_path, "train", "--data", str(workspace / "data/train"), "--config",
               str(workspace / "train.json"), "--epochs", "1", "--no-kcs", "--out", "nokcs") == 0
    m = json.loads((tmp_path / "nokcs" / cli.MANIFEST_NAME).read_text())
    assert m["config"]["kcs_enabled"] is False


def test_resume_reproduces_uninterrupted_run(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "data/train"), "--eval-data", str(workspace / "data/test"),
            "--config", str(workspace / "train.json"), "--out", "part"]
    assert run(tmp_path, *args, "--stop-after-epoch", "1") == 0
    assert not (tmp_path / "part" / "final.rlck").exists()
    assert run(tmp_path, *args, "--resume", "part/ckpt_epoch0001.rlck") == 0
    for name in ("final.rlck", "ckpt_epoch0002.rlck", "metrics.csv"):
        assert (tmp_path / "part" / name).read_bytes() == (workspace / "run" / name).read_bytes(), name


def test_stop_after_zero_writes_initial_checkpoint_only(workspace, tmp_path):
    assert run(tmp_path, "train", "--data", str(workspace / "data/train"), "--config",
               str(workspace / "train.json"), "--out", "s0", "--stop-after-epoch", "0") == 0
    assert sorted(p.name for p in (tmp_path / "s0").glob("*.rlck")) == ["ckpt_epoch0000.rlck"]


def test_eval_writes_report(workspace, tmp_path, capsys):
    assert run(tmp_path, "eval", "--checkpoint", str(workspace / "run/final.rlck"), "--data",
               str(workspace / "data/test"), "--out", "ev") == 0
    csv = (tmp_path / "ev" / "report.csv").read_text().splitlines()
    assert csv[0].startswith("action,") and csv[-1].startswith("Avg.")
    assert "Protocol-II" in capsys.readouterr().out
    m = json.loads((tmp_path / "ev" / cli.MANIFEST_NAME).read_text())
    assert list(m["checkpoint_digests"]) == [os.path.relpath(workspace / "run/final.rlck", tmp_path / "ev")]


def test_sweep_has_one_row_per_sigma(workspace, tmp_path):
    assert run(tmp_path, "sweep", "--checkpoint", str(workspace / "run/final.rlck"), "--data",
               str(workspace / "data/test"), "--out", "sw") == 0
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("sigma,")
    assert [float(r.split(",")[0]) for r in lines[1:]] == [0, 5, 10, 15, 20]


def test_lift_roundtrip_and_bench(workspace, tmp_path, capsys):
    from replift.dataio import load_dataset

    ds = load_dataset(workspace / "data/test")
    write_records(tmp_path / "kp.txt", "2d", ds.poses2d[:5], masks=ds.masks[:5])
    assert run(tmp_path, "lift", "--checkpoint", str(workspace / "run/final.rlck"), "--keypoints", "kp.txt",
               "--out", "out/poses.txt", "--bench", "--frames", "200") == 0
    _, X, _, _ = read_records(tmp_path / "out/poses.txt", "3d")
    _, K, _, _ = read_records(tmp_path / "out/poses_cameras.txt", "cam")
    assert X.shape == (5, 3, ds.skeleton.n_joints) and K.shape == (5, 2, 3)
    assert np.all(np.isfinite(X))
    out = capsys.readouterr().out
    assert "forward latency over 200 frames at batch 1: mean " in out and "p99 " in out
    assert (tmp_path / "out" / ("poses_" + cli.MANIFEST_NAME)).exists()


def test_lift_empty_input(workspace, tmp_path):
    (tmp_path / "empty.txt").write_text("")
    assert run(tmp_path, "lift", "--checkpoint", str(workspace / "run/final.rlck"), "--keypoints", "empty.txt",
               "--out", "e.txt") == 0
    _, X, _, _ = read_records(tmp_path / "e.txt", "3d")
    assert len(X) == 0


def test_plot_detects_inputs(workspace, tmp_path):
    rng = np.random.default_rng(0)
    write_records(tmp_path / "p.txt", "3d", rng.normal(size=(2, 3, 17)) * 300)
    assert run(tmp_path, "sweep", "--checkpoint", str(workspace / "run/final.rlck"), "--data",
               str(workspace / "data/test"), "--out", "sw", "--sigmas", "0,10") == 0
    assert run(tmp_path, "plot", "p.txt", "sw/sweep.csv", str(workspace / "run/metrics.csv"), "--out", "figs") == 0
    names = sorted(p.name for p in (tmp_path / "figs").glob("*.png"))
    assert names == ["metrics_losses.png", "p_00000.png", "p_00001.png", "sweep_sweep.png"]
    for n in names:
        assert (tmp_path / "figs" / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


@pytest.mark.parametrize("argv", [
    ["eval", "--checkpoint", "missing.rlck", "--data", "nowhere", "--out", "x"],
    ["train", "--data", "nowhere", "--out", "x"],
    ["lift", "--checkpoint", "missing.rlck", "--keypoints", "k.txt", "--out", "x.txt"],
    ["plot", "nothing.csv", "--out", "x"],
    ["gen", "--config", "absent.json", "--out", "x"],
])
def test_missing_inputs_exit_with_data_error(tmp_path, capsys, argv):
    assert run(tmp_path, *argv) == cli.EXIT_DATA
    err = capsys.readouterr().err
    missing = next(a for a in argv[1:] if "." in a or a == "nowhere")
    assert err.startswith("replift: ") and missing in err


def test_bad_plot_input(tmp_path, capsys):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    assert run(tmp_path, "plot", "x.csv", "--out", "f") == cli.EXIT_DATA


def test_numerical_failure_exit_code(workspace, tmp_path, monkeypatch):
    from replift import train

    def boom(*a, **k):
        raise train.NumericalFailure("non-finite loss")

    monkeypatch.setattr(train, "train", boom)
    assert run(tmp_path, "train", "--data", str(workspace / "data/train"), "--config",
               str(workspace / "train.json"), "--out", "nan") == cli.EXIT_NUMERIC


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("replift 0.1.0")
