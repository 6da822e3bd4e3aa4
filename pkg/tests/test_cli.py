from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from fp8train import cli
from fp8train.experiments import (
    ARTIFACT_FILES,
    ConfigError,
    ExperimentConfig,
    expand,
    parse_config,
    run_experiment,
    run_preset,
)
from fp8train.tensor import QuantizedTensor
from fp8train.tensorfile import read_tensor, write_csv_tensor, write_tensor

TINY = """\
[experiment]
name = tiny
seed = 3

[data]
dataset = blobs
samples = 96

[training]
epochs = 2
batch_size = 16

[quantization]
rounding = stochastic

[scaler]
kind = dynamic
initial_scale = 1024
schedule = 4:256, 8:512
growth_interval = 5
"""


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)


def test_range_report(capsys):
    assert cli.main(["range-report"]) == 0
    out = capsys.readouterr().out
    assert "57344" in out and "1.52e-5" in out and "3.40e+38" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "fp8train", "range-report"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "FP8 (1,5,2)" in proc.stdout


def test_usage_errors_exit_64(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        cli.main(["quantize", "a", "b", "--seed", "0"])
    assert e.value.code == cli.EXIT_USAGE


def test_quantize_zeros(tmp_path, capsys):
    write_csv_tensor(tmp_path / "z.csv", np.zeros((4, 4)))
    assert cli.main(["quantize", str(tmp_path / "z.csv"), str(tmp_path / "z.fp8t")]) == 0
    out = capsys.readouterr().out
    assert "overflow:   0" in out and "underflow:  0" in out
    q = read_tensor(tmp_path / "z.fp8t")
    assert isinstance(q, QuantizedTensor) and not q.codes.any()


def test_quantize_overflow_count(tmp_path, capsys):
    write_csv_tensor(tmp_path / "big.csv", np.array([1.0, 1e6, 2.0]))
    assert cli.main(["quantize", str(tmp_path / "big.csv"), str(tmp_path / "o.fp8t")]) == 0
    assert "overflow:   1" in capsys.readouterr().out
    assert read_tensor(tmp_path / "o.fp8t").overflow_count == 1


@pytest.mark.parametrize("mode", ["rne", "stochastic"])
def test_quantize_uniform_error_bound(tmp_path, capsys, mode):
    x = np.random.default_rng(0).uniform(1, 2, 5000).astype(np.float32)
    write_tensor(tmp_path / "u.fp8t", x)
    assert cli.main(["quantize", str(tmp_path / "u.fp8t"), str(tmp_path / "q.fp8t"), "--mode", mode, "--seed", "0x1d"]) == 0
    max_err = float(next(l for l in capsys.readouterr().out.splitlines() if l.startswith("max |err|")).split()[-1])
    vals = read_tensor(tmp_path / "q.fp8t").values()
    bound = 0.125 if mode == "rne" else 0.25
    assert max_err <= bound
    assert np.abs(vals - x).max() <= bound


def test_quantize_garbled_input(tmp_path):
    (tmp_path / "bad.fp8t").write_bytes(b"FP8T\x01\x01\x01\x00" + b"\x00" * 8)
    assert cli.main(["quantize", str(tmp_path / "bad.fp8t"), str(tmp_path / "o")]) == cli.EXIT_DATAERR
    (tmp_path / "bad.csv").write_text("1,2\nthree\n")
    assert cli.main(["quantize", str(tmp_path / "bad.csv"), str(tmp_path / "o")]) == cli.EXIT_DATAERR


def test_quantize_missing_and_unwritable(tmp_path):
    assert cli.main(["quantize", str(tmp_path / "nope.csv"), str(tmp_path / "o")]) == cli.EXIT_NOINPUT
    write_csv_tensor(tmp_path / "x.csv", np.ones(2))
    out = tmp_path / "no_dir" / "o.fp8t"
    assert cli.main(["quantize", str(tmp_path / "x.csv"), str(out)]) == cli.EXIT_IOERR


def test_train_writes_artifacts(tmp_path, capsys):
    (tmp_path / "c.ini").write_text(TINY)
    out = tmp_path / "out"
    assert cli.main(["train", str(tmp_path / "c.ini"), "--output-dir", str(out)]) == 0
    for name in ARTIFACT_FILES:
        assert (out / name).is_file()
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert manifest["master_format"] == "FP16"
    for p in manifest["params"].values():
        assert read_tensor(out / "checkpoint" / p["file"]).shape == tuple(p["shape"])


def test_config_snapshot_reruns_identically(tmp_path):
    (tmp_path / "c.ini").write_text(TINY)
    assert cli.main(["train", str(tmp_path / "c.ini"), "--output-dir", str(tmp_path / "a")]) == 0
    assert cli.main(["train", str(tmp_path / "a" / "config.ini"), "--output-dir", str(tmp_path / "b")]) == 0
    for name in ("steps.csv", "eval.csv", "scale_events.csv", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_env_var_sets_output_dir(tmp_path, monkeypatch):
    (tmp_path / "c.ini").write_text(TINY)
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["train", str(tmp_path / "c.ini")]) == 0
    assert (tmp_path / "env" / "steps.csv").is_file()
    # an explicit flag wins
    assert cli.main(["train", str(tmp_path / "c.ini"), "--output-dir", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "steps.csv").is_file()


def test_unknown_key_is_config_error(tmp_path):
    (tmp_path / "c.ini").write_text("[training]\nepochz = 3\n")
    assert cli.main(["train", str(tmp_path / "c.ini")]) == cli.EXIT_USAGE
    with pytest.raises(ConfigError):
        parse_config("[nosuch]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[scaler]\nkind = dynamic\ninitial_scale = 1000\n")


def test_missing_config_and_dataset(tmp_path):
    assert cli.main(["train", str(tmp_path / "none.ini")]) == cli.EXIT_NOINPUT
    (tmp_path / "c.ini").write_text("[data]\ndataset = /nonexistent/data.csv\n")
    assert cli.main(["train", str(tmp_path / "c.ini"), "--output-dir", str(tmp_path / "o")]) == cli.EXIT_NOINPUT
    assert not (tmp_path / "o").exists()


def test_unwritable_output_dir(tmp_path):
    (tmp_path / "c.ini").write_text(TINY)
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["train", str(tmp_path / "c.ini"), "--output-dir", str(blocker / "sub")]) == cli.EXIT_IOERR


def test_divergence_exit_code_keeps_artifacts(tmp_path):
    text = TINY.replace("batch_size = 16", "batch_size = 16\nlearning_rate = 1e6\nepochs = 40")
    text = text.replace("epochs = 2\n", "")
    (tmp_path / "d.ini").write_text(text)
    code = cli.main(["train", str(tmp_path / "d.ini"), "--output-dir", str(tmp_path / "d")])
    assert code == cli.EXIT_DIVERGED
    for name in ARTIFACT_FILES:
        assert (tmp_path / "d" / name).is_file()


def test_sweep_with_overrides(tmp_path, capsys):
    code = cli.main([
        "sweep", "fp32-baseline", "--output-dir", str(tmp_path / "s"),
        "--set", "training.epochs=1", "--set", "data.samples=64",
    ])
    assert code == 0
    rows = (tmp_path / "s" / "comparison.csv").read_text().splitlines()
    assert rows[0].startswith("run,final_train_loss")
    assert rows[1].startswith("fp32,")
    assert cli.main(["sweep", "fp32-baseline", "--set", "training"]) == cli.EXIT_USAGE


def test_train_config_with_preset(tmp_path):
    (tmp_path / "p.ini").write_text("[experiment]\npreset = fp32-baseline\n[training]\nepochs = 1\n[data]\nsamples = 64\n")
    assert cli.main(["train", str(tmp_path / "p.ini"), "--output-dir", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "fp32" / "steps.csv").is_file()


def test_preset_expansion_layers():
    runs = dict(expand("lossscale-sweep", {"epochs": 3, "initial_scale": 7.0}))
    assert set(runs) == {"fp32", "scale-1", "scale-100", "scale-10000"}
    assert runs["scale-100"].initial_scale == 100.0  # variant beats user value
    assert runs["scale-1"].epochs == 3  # user value beats preset base
    assert not runs["fp32"].quantize
    assert len({c.seed for c in runs.values()}) == 1  # paired seeds
    with pytest.raises(ConfigError):
        expand("nope")


def test_to_ini_round_trip():
    cfg = ExperimentConfig(schedule=((40, 8192.0), (150, 32768.0)), scaler="dynamic", initial_scale=2.0**15, noise=0.3)
    assert parse_config(cfg.to_ini()) == cfg


def test_parallel_matches_sequential(tmp_path):
    over = {"epochs": 1, "samples": 64}
    seq = run_preset("rounding-ablation", over, tmp_path / "seq")
    par = run_preset("rounding-ablation", over, tmp_path / "par", parallel=True)
    for a, b in zip(seq, par):
        assert a.path("steps.csv").read_bytes() == b.path("steps.csv").read_bytes()
    assert (tmp_path / "seq" / "comparison.csv").read_bytes() == (tmp_path / "par" / "comparison.csv").read_bytes()


def test_run_experiment_summary(tmp_path):
    art = run_experiment(parse_config(TINY), tmp_path / "r")
    s = art.summary()
    assert s["run"] == "r" and s["diverged"] == 0
    assert 0.0 <= s["mean_underflow_fraction"] <= 1.0
    assert s["final_scale"] >= 512.0
