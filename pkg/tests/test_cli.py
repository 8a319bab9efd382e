import json
import subprocess
import sys

import pytest

from itdm.cli import main, read_comparison_csv
from itdm.nn import load_model
from itdm.trainer import TrainConfig, read_metrics_csv

SMALL = ["--dataset", "blobs", "--blob-per-class", "40", "--batch-size", "40", "--feature-dim", "8"]


def test_run_happy_path(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", *SMALL, "--match", "class", "--lambda", "0.6", "--epochs", "5", "--seed", "7", "--out", str(out)])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["lam"] == 0.6 and summary["config"]["seed"] == 7
    assert summary["epochs_completed"] == 5
    records = read_metrics_csv(out / "metrics.csv")
    assert len(records) == summary["steps"]
    load_model(out / "model.npz")
    assert "test_acc=" in capsys.readouterr().out


def test_run_rejects_negative_lambda(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--lambda", "-1", "--out", str(tmp_path)])
    assert info.value.code != 0
    assert "lambda" in capsys.readouterr().err


@pytest.mark.parametrize("flags", [["--lr", "0"], ["--use-sqrt", "maybe"], ["--lr-decay", "3"],
                                   ["--match", "both"], ["--epochs", "-2"]])
def test_run_rejects_bad_flags(tmp_path, flags):
    with pytest.raises(SystemExit) as info:
        main(["run", *flags, "--out", str(tmp_path)])
    assert info.value.code == 2


def test_run_missing_files(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("ITDM_DATA_DIR", raising=False)
    assert main(["run", "--dataset", "fmnist", "--out", str(tmp_path)]) == 1
    assert "IDX" in capsys.readouterr().err
    code = main(["run", "--dataset", "kmnist", "--train-images", str(tmp_path / "nope"), "--train-labels", "x",
                 "--test-images", "y", "--test-labels", "z", "--out", str(tmp_path)])
    assert code == 1


def test_run_divergence_exit_code(tmp_path):
    code = main(["run", *SMALL, "--lr", "50", "--momentum", "0.9", "--blob-separation", "20",
                 "--epochs", "5", "--out", str(tmp_path)])
    assert code == 3
    assert json.loads((tmp_path / "summary.json").read_text())["diverged"] is True


def test_run_twice_byte_identical(tmp_path):
    args = ["run", *SMALL, "--match", "joint", "--lambda", "0.5", "--epochs", "3", "--seed", "2"]
    main([*args, "--out", str(tmp_path / "a")])
    main([*args, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_config_echo_replays_run(tmp_path):
    main(["run", *SMALL, "--match", "class", "--lambda", "0.3", "--kernels", "3", "--lr-decay", "2:0.5",
          "--use-sqrt", "false", "--epochs", "3", "--out", str(tmp_path / "a")])
    main(["run", "--config", str(tmp_path / "a" / "summary.json"), "--out", str(tmp_path / "b")])
    a = json.loads((tmp_path / "a" / "summary.json").read_text())
    b = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert a == b
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    cfg = TrainConfig.from_dict(a["config"])
    assert cfg.lr_schedule == ((2, 0.5),) and cfg.use_sqrt is False and cfg.kernels == 3


def test_flags_override_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"lam": 0.9, "epochs": 1, "blob_per_class": 30, "batch_size": 30}))
    main(["run", "--config", str(path), "--lambda", "0.1", "--out", str(tmp_path / "o")])
    cfg = json.loads((tmp_path / "o" / "summary.json").read_text())["config"]
    assert cfg["lam"] == 0.1 and cfg["epochs"] == 1


def test_grid_minimal(tmp_path, capsys):
    out = tmp_path / "grid"
    assert main(["grid", *SMALL, "--lambdas", "0.4", "--epochs", "2", "--out", str(out)]) == 0
    rows = read_comparison_csv(out / "comparison.csv")
    assert [r["lambda"] for r in rows] == [0.0, 0.4]
    assert (out / "lambda_0" / "seed_0" / "metrics.csv").exists()
    assert (out / "lambda_0.4" / "summary.json").exists()
    assert "lambda" in capsys.readouterr().out


def test_grid_default_and_deltas(tmp_path):
    out = tmp_path / "grid"
    assert main(["grid", *SMALL, "--epochs", "1", "--seeds", "2", "--out", str(out)]) == 0
    rows = read_comparison_csv(out / "comparison.csv")
    assert [r["lambda"] for r in rows] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    base = rows[0]
    for r in rows:
        per = json.loads((out / f"lambda_{r['lambda']:g}" / "summary.json").read_text())
        assert per["seeds"] == [0, 1] and r["runs"] == 2
        assert r["test_acc"] == per["test_acc"]
        assert r["d_acc"] == r["test_acc"] - base["test_acc"]
        assert r["d_ce"] == r["test_ce"] - base["test_ce"]
    tags = " ".join(r["tag"] for r in rows)
    for t in ("B-acc", "W-acc", "B-ce", "W-ce"):
        assert tags.count(t) == 1
    assert rows[0]["tag"] == ""
    doc = json.loads((out / "comparison.json").read_text())
    assert doc["lambdas"] == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "itdm", "run", *SMALL, "--epochs", "1", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "metrics.csv").exists()
