from __future__ import annotations

import json

import numpy as np
import pytest

from costeps import cli
from costeps.config import MODES
from costeps.heatmap import read_ppm
from costeps.io import tensorfile_read
from costeps.report import read_report

TINY = {
    "model": {"layers": 3, "dim": 16, "heads": 2, "grid": [4, 5, 5]},
    "schedule": {"n_steps": 3},
    "task": {"count": 4, "frames": 4},
    "train": {"steps": 3, "batch": 2, "warmup": 1, "log_every": 1},
    "intervention": {"frames": [1, 3]},
    "ensemble": {"layer_window": [1, 1], "seeds": [1, 2, 3]},
    "ablation": {"windows": {"early": [0, 0], "mid": [1, 1], "full": [0, 2]}, "frames": [1, 2, 4], "min_path": 3},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    return d


@pytest.fixture(scope="module")
def checkpoint(workdir):
    out = workdir / "train"
    assert cli.main(["train", "--config", str(workdir / "tiny.json"), "--out", str(out)]) == 0
    return out / "model.cosk"


def run(workdir, mode, checkpoint, capsys):
    out = workdir / mode
    code = cli.main([mode, "--config", str(workdir / "tiny.json"), "--out", str(out), "--checkpoint", str(checkpoint)])
    captured = capsys.readouterr()
    assert code == 0, captured.err
    return out, read_report(out / "report.json")


def test_train_writes_checkpoint_and_report(checkpoint):
    rep = read_report(checkpoint.parent / "report.json")
    assert rep["payload"]["steps_completed"] == 3 and rep["aggregate"]["count"] == 4
    assert checkpoint.exists()


@pytest.mark.parametrize("mode", [m for m in MODES if m != "train"])
def test_every_mode_runs(workdir, checkpoint, capsys, mode):
    out, rep = run(workdir, mode, checkpoint, capsys)
    assert rep["mode"] == mode
    assert rep["aggregate"]["count"] == len(rep["instances"]) > 0


def test_mode_artifacts(workdir, checkpoint, capsys):
    out, rep = run(workdir, "cka", checkpoint, capsys)
    mat = tensorfile_read(out / "cka.cost").data
    assert mat.shape == (3, 3) and read_ppm(out / "cka.ppm").shape == (24, 24, 3)
    assert all(np.all(mat[i, :i] == 0) for i in range(3))
    out, rep = run(workdir, "perturb", checkpoint, capsys)
    assert set(rep["payload"]) >= {"step_drop", "frame_drop", "ratio", "test_step_gt_2x_frame"}
    out, rep = run(workdir, "swap", checkpoint, capsys)
    assert len(rep["payload"]["flip_rate"]["0"]) == 3 and (out / "flip_rate.ppm").exists()
    out, rep = run(workdir, "ablate-window", checkpoint, capsys)
    assert "mid_ge_early" in rep["payload"]
    assert rep["payload"]["mid_ge_early"] or rep["payload"]["deviation"]
    out, rep = run(workdir, "ablate-frames", checkpoint, capsys)
    assert rep["payload"]["frames"] == [1, 2, 4]


def test_same_config_same_report(workdir, checkpoint, capsys):
    _, a = run(workdir, "eval", checkpoint, capsys)
    _, b = run(workdir, "eval", checkpoint, capsys)
    assert a["instances"] == b["instances"] and a["config_hash"] == b["config_hash"]


def test_config_error_is_machine_readable(workdir, capsys):
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({"model": {"layerz": 2}}))
    assert cli.main(["eval", "--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and err["key"] == "model.layerz"


def test_runtime_error_is_machine_readable(workdir, capsys):
    code = cli.main(["eval", "--config", str(workdir / "tiny.json"), "--checkpoint", str(workdir / "missing.cosk"), "--out", str(workdir / "x")])
    assert code == 1
    assert json.loads(capsys.readouterr().err)["error"] == "FileNotFoundError"


def test_unknown_verb_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code != 0
