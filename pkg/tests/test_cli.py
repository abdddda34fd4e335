import json

import numpy as np
import pytest

from probseq.cli import SWEEP, mean_sd, run
from probseq.data import load_dataset
from probseq.model import ModelConfig, SequenceRegressor, save_checkpoint
from probseq.runconfig import parse_config
from probseq.errors import ConfigError

CONFIG = """\
synthetic: {num_sessions: 40, dim: 6, t_min: 2, t_max: 5, noise: heteroscedastic, noise_cue: 1.0}
model: {mode: seq2one, hidden_dim: 4, num_layers: 1, num_heads: 2, head_widths: [6]}
train: {epochs: 2, lr_max: 0.01, lr_min: 0.001, transform: identity}
seeds: [0]
ablation: {epochs: 2}
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(CONFIG)
    return path


def files(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*") if p.is_file())


def test_train_artifacts(tmp_path, config):
    out = tmp_path / "train"
    assert run(["train", "--config", str(config), "--out", str(out)]) == 0
    assert files(out) == ["manifest.json", "seed_0/checkpoint.npz", "seed_0/history.csv", "summary.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_text"] == CONFIG and manifest["seeds"] == [0]
    assert {"numpy", "python", "probseq"} <= set(manifest["versions"]) and manifest["wall_time_s"] >= 0


def test_train_multi_seed_summary_and_determinism(tmp_path, config):
    args = ["train", "--config", str(config), "--seed", "1", "--seed", "2"]
    assert run(args + ["--out", str(tmp_path / "a")]) == 0
    assert run(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "summary.json").read_bytes()
    assert a == (tmp_path / "b" / "summary.json").read_bytes()
    summary = json.loads(a)
    assert summary["seeds"] == [1, 2]
    for key in ("dev_mae", "dev_rmse", "dev_nll", "test_mae", "test_rmse", "test_nll"):
        assert set(summary["aggregate"][key]) == {"mean", "sd"}
    vals = [summary["per_seed"][s]["test"]["mae"] for s in ("1", "2")]
    assert summary["aggregate"]["test_mae"] == mean_sd(vals)


def test_evaluate_and_calibrate(tmp_path, config):
    run(["train", "--config", str(config), "--out", str(tmp_path / "t")])
    ckpt = str(tmp_path / "t" / "seed_0" / "checkpoint.npz")
    assert run(["evaluate", "--config", str(config), "--checkpoint", ckpt, "--out", str(tmp_path / "e")]) == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())["metrics"]
    assert set(metrics) == {"train", "dev", "test"}

    for name in ("c1", "c2"):
        assert run(["calibrate", "--config", str(config), "--checkpoint", ckpt, "--out", str(tmp_path / name)]) == 0
    produced = files(tmp_path / "c1")
    assert produced == sorted([
        "predictions.csv", "report.json",
        "binned_calibration.csv", "scatter.csv", "coverage_curve.csv",
        "binned_calibration.svg", "scatter.svg", "coverage_curve.svg",
        "manifest.json",
    ])
    for name in produced:
        if name != "manifest.json":
            assert (tmp_path / "c1" / name).read_bytes() == (tmp_path / "c2" / name).read_bytes(), name
    report = json.loads((tmp_path / "c1" / "report.json").read_text())
    assert 0 <= report["ece_coverage"] <= 1 and all(0 <= v <= 1 for v in report["coverage"].values())
    assert (tmp_path / "c1" / "scatter.svg").read_text().startswith("<svg")


def test_calibrate_point_model_is_unsupported(tmp_path, config):
    ckpt = tmp_path / "point.npz"
    save_checkpoint(SequenceRegressor(ModelConfig(input_dim=6, hidden_dim=2, num_layers=1, num_heads=2,
                                                  head_widths=(2,), use_variance_head=False)), ckpt)
    assert run(["calibrate", "--config", str(config), "--checkpoint", str(ckpt), "--out", str(tmp_path / "c")]) == 2


def test_ablate_table(tmp_path, config):
    out = tmp_path / "abl"
    assert run(["ablate", "--config", str(config), "--out", str(out)]) == 0
    rows = json.loads((out / "summary.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["Full", "w/o Attention", "w/o Residual", "w/o Variance Head"]
    full = rows[0]
    assert full["delta_mae_pct"] is None and full["delta_rmse_pct"] is None
    for r in rows[1:]:
        assert r["delta_mae_pct"] == pytest.approx(100 * (r["mae"] - full["mae"]) / full["mae"])
        assert r["parameters"] <= full["parameters"]
    assert rows[1]["parameters"] < full["parameters"] and rows[3]["parameters"] < full["parameters"]
    # dropping the residual path removes no weights
    assert rows[2]["parameters"] == full["parameters"]
    lines = (out / "ablation.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[1].startswith("Full,") and ",,," in lines[1]


def test_sweep_table(tmp_path, config):
    out = tmp_path / "sw"
    assert run(["sweep", "--config", str(config), "--out", str(out)]) == 0
    rows = json.loads((out / "summary.json").read_text())["rows"]
    assert [r["comment"] for r in rows] == ["standard NLL", "uncertainty-averse", "error-focused", "calibration-first"]
    assert [(r["alpha"], r["beta"], r["gamma"]) for r in rows] == [w for w, _ in SWEEP]
    assert all(np.isfinite(r["test_nll"]["mean"]) for r in rows)


def test_synth_writes_reloadable_dataset(tmp_path, config):
    out = tmp_path / "syn"
    assert run(["synth", "--config", str(config), "--seed", "9", "--out", str(out)]) == 0
    sessions = load_dataset(out / "dataset.jsonl")
    truth = json.loads((out / "truth.json").read_text())
    assert len(sessions) == 40 == len(truth["sessions"]) and truth["spec"]["seed"] == 9
    assert set(truth["sessions"][sessions[0].id]) >= {"latent", "oracle_mu", "sigma", "carriers"}


def test_dataset_path_is_relative_to_config(tmp_path, config):
    run(["synth", "--config", str(config), "--out", str(tmp_path / "data")])
    cfg = tmp_path / "from_file.yaml"
    cfg.write_text(CONFIG.replace(CONFIG.splitlines()[0], "dataset: data/dataset.jsonl"))
    assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0


def test_env_var_sets_default_output(tmp_path, config, monkeypatch):
    monkeypatch.setenv("PROBSEQ_OUT", str(tmp_path / "root"))
    assert run(["synth", "--config", str(config)]) == 0
    assert (tmp_path / "root" / "synth" / "dataset.jsonl").exists()


def test_exit_codes(tmp_path, config, capsys):
    assert run(["train", "--config", str(tmp_path / "missing.yaml")]) == 4
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {epochs: 0}\nsynthetic: {}\n")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    bad.write_text("model: [1, 2\n")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert run(["evaluate", "--config", str(config), "--out", str(tmp_path / "x")]) == 2

    model = SequenceRegressor(ModelConfig(input_dim=6, hidden_dim=2, num_layers=1, num_heads=2, head_widths=(2,)))
    model.mu_head.layers[0].weight.data[0, 0] = np.nan
    save_checkpoint(model, tmp_path / "nan.npz")
    assert run(["evaluate", "--config", str(config), "--checkpoint", str(tmp_path / "nan.npz"),
                "--out", str(tmp_path / "x")]) == 3
    corrupt = tmp_path / "corrupt.npz"
    corrupt.write_bytes(b"junk")
    assert run(["evaluate", "--config", str(config), "--checkpoint", str(corrupt), "--out", str(tmp_path / "x")]) == 4
    assert "NumericFault" in capsys.readouterr().err


def test_parse_config_rejects_bad_sections():
    with pytest.raises(ConfigError):
        parse_config("dataset: a.jsonl\nsynthetic: {}\n")
    with pytest.raises(ConfigError):
        parse_config("seeds: []\n")
    with pytest.raises(ConfigError):
        parse_config("calibration: {convention: wide}\n")
    with pytest.raises(ConfigError):
        parse_config("model: {input_dim: 5}\nsynthetic: {dim: 6}\n").model_config(6, 0)
    assert parse_config("").seeds == (0,)
