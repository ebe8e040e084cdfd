import json
import subprocess
import sys

import pytest

from hstsar.cli import main

TINY = ["--set", "task.length=16", "--set", "task.block_width=4", "--set", "task.train_size=32",
        "--set", "task.dev_size=16", "--set", "task.test_size=16", "--set", "model.w=4", "--set", "model.d=8",
        "--set", "model.layers=1", "--set", "train.steps=2", "--set", "train.batch_size=8"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_inspect_topology_and_flow(tmp_path, capsys):
    path = tmp_path / "seven.json"
    code, out, _ = run(capsys, "inspect-topology", "--n-base", "7", "--g", "1", "--w", "2", "--reps",
                       "--show", "--out", str(path))
    assert code == 0
    summary = json.loads(out)
    assert summary["n"] == 10 and summary["rep_positions"] == [1, 4, 7]
    assert summary["mask"][0] == "#" * 10
    code, out, _ = run(capsys, "flow", str(path), "--layers", "2", "--hierarchical")
    assert code == 0 and json.loads(out)["bottleneck_width"] == 4


def test_bad_layout_reports_json_error(capsys):
    code, _, err = run(capsys, "inspect-topology", "--n-base", "8", "--g", "1", "--w", "2")
    assert code == 2
    doc = json.loads(err)
    assert doc["error"] == "configuration_error" and "pad by 1" in doc["message"]


def test_malformed_topology_file(tmp_path, capsys):
    path = tmp_path / "t.json"
    path.write_text('{"n": 2, "g": 0,\n"w": 1, "m": 2, "rep_positions": [], "mask_runs": [[0, 2], [0]]}')
    code, _, err = run(capsys, "flow", str(path))
    assert code == 2
    assert json.loads(err)["location"] == "mask_runs[1]"


def test_gen_data_train_eval(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HSTSAR_OUTPUT_ROOT", str(tmp_path))
    code, out, _ = run(capsys, "gen-data", *TINY)
    assert code == 0
    files = json.loads(out)
    assert (tmp_path / "data" / "test.bin.json").exists()
    code, out, _ = run(capsys, "train", *TINY, "--set", "sar.enabled=true", "--set", "sar.roll_tokens=1",
                       "--set", "sar.alpha=1")
    assert code == 0
    res = json.loads(out)
    assert res["final"]["step"] == 4
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "train" / "checkpoint"),
                       "--data", files["test"], "--roll", "1")
    assert code == 0
    ev = json.loads(out)
    assert ev["count"] == 16 and ev["accuracy"] == pytest.approx(res["test_accuracy"])
    assert ev["divergence"] == pytest.approx(res["test_divergence"])


def test_sweep_then_plotdata(tmp_path, capsys):
    csv_path = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "sweep", *TINY, "--set", "sweep.g_values=[0]", "--set", "sweep.repeats=1",
                     "--out", str(csv_path))
    assert code == 0
    assert csv_path.read_text().splitlines()[0] == "model,g,mean_acc,std_acc"
    code, out, _ = run(capsys, "plotdata", str(csv_path), str(csv_path))
    assert code == 0 and out.splitlines()[1].startswith("HST,0,")


def test_flops(capsys):
    code, out, _ = run(capsys, "flops", "--n", "161", "--g", "1", "--w", "8", "--d", "64")
    assert code == 0
    header, row = out.splitlines()
    assert dict(zip(header.split(","), row.split(",")))["hst_minus_st"] == "25600"


def test_unknown_config_key(capsys):
    code, _, err = run(capsys, "train", "--set", "train.nope=1")
    assert code == 2 and json.loads(err)["error"] == "configuration_error"


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hstsar.cli", "flops", "--n", "256"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout.startswith("n_base,")
