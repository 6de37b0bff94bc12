"""Command-line interface: config validation, artifacts, determinism."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from factr import cli
from factr.model import ModelConfig, count_params, load_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synthetic dataset plus ready-made config files."""
    root = tmp_path_factory.mktemp("cli")
    csv = root / "retail.csv"
    assert cli.main(["synth", "--days", "400", "--seed", "3",
                     "--out", str(csv)]) == 0

    def config(name, **kw):
        body = {
            "data": {"path": str(csv), "frequency": "d",
                     "split": {"mode": "ratio", "train": 7, "val": 1, "test": 2},
                     "covariates": "calendar"},
            "model": {"lookback": 32, "horizon": 8, "patch_len": 8, "stride": 8,
                      "d_model": 8, "fm_rank": 4, "spatial_rank": 4, "dropout": 0.0},
            "train": {"lr": 3e-3, "max_epochs": 2, "batch_size": 16,
                      "patience": None, "seed": 5},
        }
        for section, upd in kw.items():
            body.setdefault(section, {}).update(upd)
        path = root / name
        path.write_text(json.dumps(body))
        return path

    return root, csv, config


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["synth", "--days", "150", "--seed", "9", "--out", str(a)]) == 0
    assert cli.main(["synth", "--days", "150", "--seed", "9", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_synth_refuses_overwrite(tmp_path, capsys):
    target = tmp_path / "x.csv"
    assert cli.main(["synth", "--days", "150", "--seed", "0", "--out", str(target)]) == 0
    assert cli.main(["synth", "--days", "150", "--seed", "0", "--out", str(target)]) == 1
    assert "--force" in capsys.readouterr().err
    assert cli.main(["synth", "--days", "150", "--seed", "0", "--out", str(target),
                     "--force"]) == 0


def test_unknown_subcommand(capsys):
    assert cli.main(["transmogrify"]) == 1
    assert "invalid choice" in capsys.readouterr().err


def test_unknown_config_key_rejected(workdir, tmp_path, capsys):
    root, csv, config = workdir
    path = config("bad_top.json")
    body = json.loads(path.read_text())
    body["modell"] = {}
    path.write_text(json.dumps(body))
    assert cli.main(["params", "--config", str(path)]) == 1
    assert "modell" in capsys.readouterr().err

    body = json.loads(config("bad_nested.json").read_text())
    body["train"]["learning_rate"] = 0.1
    path.write_text(json.dumps(body))
    assert cli.main(["params", "--config", str(path)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_missing_config_file(capsys):
    assert cli.main(["params", "--config", "/nonexistent/run.json"]) == 1
    assert "not found" in capsys.readouterr().err


def test_params_matches_formula(workdir, capsys):
    root, csv, config = workdir
    assert cli.main(["params", "--config", str(config("params.json"))]) == 0
    out = capsys.readouterr().out
    expected = count_params(ModelConfig(
        n_channels=8, lookback=32, horizon=8, patch_len=8, stride=8,
        d_model=8, fm_rank=4, spatial_rank=4, dropout=0.0,
        dyn_vocab_sizes=(24, 7, 31, 12)))
    assert f"{expected['total']:,}" in out
    assert "head" in out


def test_train_eval_end_to_end(workdir, tmp_path):
    root, csv, config = workdir
    cfg = config("e2e.json")
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    for artifact in ("model.ckpt", "train_log.tsv", "manifest.json",
                     "report.json", "per_channel.csv"):
        assert (run / artifact).exists(), artifact

    ev = tmp_path / "ev"
    assert cli.main(["eval", "--config", str(cfg),
                     "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(ev)]) == 0
    train_report = json.loads((run / "report.json").read_text())
    eval_report = json.loads((ev / "report.json").read_text())
    assert eval_report["mse"] == train_report["mse"]

    # log format: epoch, train, val, lr, seconds
    lines = (run / "train_log.tsv").read_text().strip().split("\n")
    assert lines[0] == "epoch\ttrain_loss\tval_loss\tlr\tseconds"
    assert len(lines) == 3
    assert lines[1].split("\t")[0] == "1"


def test_train_refuses_overwrite(workdir, tmp_path, capsys):
    root, csv, config = workdir
    run = tmp_path / "run"
    cfg = config("ovw.json")
    assert cli.main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(run)]) == 1
    assert "--force" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(cfg), "--out", str(run),
                     "--force"]) == 0


def test_repeat_runs_identical(workdir, tmp_path):
    root, csv, config = workdir
    cfg = config("det.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(cfg), "--out", str(b)]) == 0
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    def stripped(path):
        rows = path.read_text().strip().split("\n")
        return [r.rsplit("\t", 1)[0] for r in rows]   # drop wall-clock column

    assert stripped(a / "train_log.tsv") == stripped(b / "train_log.tsv")
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_seed_precedence(workdir, tmp_path, monkeypatch):
    root, csv, config = workdir
    cfg = config("seed.json", train={"seed": 0})

    monkeypatch.setenv("FACTR_SEED", "77")
    out = tmp_path / "env"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 77

    out = tmp_path / "flag"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out),
                     "--seed", "12"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 12

    monkeypatch.setenv("FACTR_SEED", "notanumber")
    assert cli.main(["train", "--config", str(cfg), "--out",
                     str(tmp_path / "bad")]) == 1


def test_eval_channel_mismatch(workdir, tmp_path, capsys):
    root, csv, config = workdir
    cfg = config("mismatch.json")
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(run)]) == 0

    narrow = tmp_path / "narrow.csv"
    assert cli.main(["synth", "--days", "150", "--seed", "0",
                     "--out", str(narrow)]) == 0
    import pandas as pd
    frame = pd.read_csv(narrow)
    frame.iloc[:, :5].to_csv(narrow, index=False)

    body = json.loads(cfg.read_text())
    body["data"]["path"] = str(narrow)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(body))
    assert cli.main(["eval", "--config", str(bad),
                     "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(tmp_path / "ev")]) == 1
    assert "channels" in capsys.readouterr().err


def test_pretrain_probe_finetune_chain(workdir, tmp_path):
    root, csv, config = workdir
    pre_cfg = config("pre.json", model={"horizon": 32})
    xfer_cfg = config("xfer.json", transfer={"head_epochs": 1, "full_epochs": 1})

    pre = tmp_path / "pre"
    assert cli.main(["pretrain", "--config", str(pre_cfg), "--out", str(pre),
                     "--mask-ratio", "0.45"]) == 0
    assert (pre / "encoder.ckpt").exists()
    ckpt_config, _ = load_checkpoint(str(pre / "encoder.ckpt"))
    assert ckpt_config.horizon == ckpt_config.lookback == 32

    probe = tmp_path / "probe"
    assert cli.main(["probe", "--config", str(xfer_cfg),
                     "--checkpoint", str(pre / "encoder.ckpt"),
                     "--out", str(probe)]) == 0
    assert (probe / "probe_log.tsv").exists()

    fine = tmp_path / "fine"
    assert cli.main(["finetune", "--config", str(xfer_cfg),
                     "--checkpoint", str(pre / "encoder.ckpt"),
                     "--out", str(fine)]) == 0
    assert (fine / "finetune_log.tsv").exists()

    # the probe head was trained on a frozen encoder: encoder tensors in the
    # probe checkpoint equal the pretrained ones bit for bit
    _, pre_tensors = load_checkpoint(str(pre / "encoder.ckpt"))
    _, probe_tensors = load_checkpoint(str(probe / "model.ckpt"))
    for name, arr in pre_tensors.items():
        if not name.startswith("head."):
            assert np.array_equal(arr, probe_tensors[name]), name
    assert not np.array_equal(pre_tensors["head.weight"],
                              probe_tensors["head.weight"])


def test_inspect_and_dump(workdir, tmp_path):
    root, csv, config = workdir
    cfg = config("insp.json")
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(run)]) == 0

    insp = tmp_path / "insp"
    assert cli.main(["inspect", "--config", str(cfg),
                     "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(insp), "--window", "1"]) == 0
    for artifact in ("temporal_attention.csv", "fm_scores.csv",
                     "spatial_attention.csv", "fusion_gate.csv",
                     "spatial_attention.svg", "temporal_attention.svg"):
        assert (insp / artifact).exists(), artifact

    dmp = tmp_path / "dmp"
    assert cli.main(["dump", "--config", str(cfg),
                     "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(dmp), "--windows", "0,2"]) == 0
    assert (dmp / "forecast_w0.csv").exists()
    assert (dmp / "forecast_w2.svg").exists()

    assert cli.main(["dump", "--config", str(cfg),
                     "--checkpoint", str(run / "model.ckpt"),
                     "--out", str(tmp_path / "dmp2"), "--windows", "99999"]) == 1


def test_bench_validation(tmp_path):
    assert cli.main(["bench", "--sizes", "8"]) == 1
    out = tmp_path / "bench"
    assert cli.main(["bench", "--component", "cross_channel",
                     "--sizes", "4,8", "--reps", "1", "--out", str(out)]) == 0
    body = json.loads((out / "bench.json").read_text())
    assert body["component"] == "cross_channel"
    assert len(body["median_seconds"]) == 2


def test_console_script_installed():
    """The packaged entry point runs (subprocess, not in-process)."""
    proc = subprocess.run([sys.executable, "-m", "factr.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "subcommand" in proc.stdout or "synth" in proc.stdout
