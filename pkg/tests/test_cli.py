import json
import subprocess
import sys
from pathlib import Path

import pytest

from coisac import harness
from coisac.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ESTIMATOR, EXIT_OK, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """\
seed = 3
n_trials = 2
snr_db = [0.0, 10.0]

[ofdm]
n_subcarriers = 8
n_symbols = 8

[array]
n_tx = 4
n_rx = 4

[[stations]]
position_m = [0.0, 0.0]

[[stations]]
position_m = [100.0, 100.0]

[target]
x0_m = 60.0
y0_m = 40.0
vx_mps = 30.0
vy_mps = 50.0
"""


@pytest.fixture
def small_file(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_simulate_json(small_file, capsys):
    code = main(["simulate", "--config", str(small_file), "--snr", "5", "--trial", "1",
                 "--methods", "single_bs", "param_fusion"])
    assert code == EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert rec["trial"] == 1 and rec["snr_db"] == 5.0
    assert set(rec["results"]) == {"single_bs", "param_fusion"}


def test_simulate_repeatable(small_file, capsys):
    args = ["simulate", "--config", str(small_file), "--snr", "0", "--methods", "param_fusion"]
    main(args)
    a = json.loads(capsys.readouterr().out)
    main(args)
    b = json.loads(capsys.readouterr().out)
    for d in (a, b):
        for r in d["results"].values():
            r.pop("runtime_s")
    assert a == b


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("n_trials = 2", "n_trials = -1"))
    assert main(["simulate", "--config", str(bad), "--snr", "0"]) == EXIT_CONFIG
    assert "n_trials" in capsys.readouterr().err
    assert main(["sweep", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_unknown_method_is_config_error(small_file):
    assert main(["simulate", "--config", str(small_file), "--snr", "0", "--methods", "nope"]) == EXIT_CONFIG


def test_bad_snr_override(small_file, tmp_path):
    assert main(["sweep", "--config", str(small_file), "--out", str(tmp_path / "o"),
                 "--snr", "10", "0"]) == EXIT_CONFIG


def test_estimator_failure_every_trial(small_file, tmp_path, monkeypatch, capsys):
    def broken(config, echoes):
        raise RuntimeError("always")

    monkeypatch.setitem(harness.ESTIMATORS, "single_bs", broken)
    code = main(["sweep", "--config", str(small_file), "--out", str(tmp_path / "o"), "--trials", "1",
                 "--snr", "0", "--methods", "single_bs", "param_fusion", "--no-figures"])
    assert code == EXIT_ESTIMATOR
    assert "single_bs" in capsys.readouterr().err


def test_sweep_outputs(small_file, tmp_path, capsys):
    out = tmp_path / "res"
    code = main(["sweep", "--config", str(small_file), "--out", str(out), "--trials", "2",
                 "--methods", "single_bs", "param_fusion"])
    assert code == EXIT_OK
    stdout = capsys.readouterr().out.splitlines()
    assert stdout[0].startswith("snr_db,method,pos_rmse_m")
    assert len(stdout) == 1 + 2 * 2
    for name in ("summary.csv", "records.jsonl", "scatter.csv", "overhead.csv", "resolved_config.json",
                 "overhead.png", "scatter.png"):
        assert (out / name).is_file(), name
    assert list(out.glob("rmse*.png"))
    assert len((out / "records.jsonl").read_text().splitlines()) == 4


def test_sweep_no_figures(small_file, tmp_path):
    out = tmp_path / "res"
    main(["sweep", "--config", str(small_file), "--out", str(out), "--trials", "1", "--snr", "0",
          "--methods", "param_fusion", "--no-figures"])
    assert not list(out.glob("*.png"))


def test_oracle_check_lines(capsys):
    code = main(["oracle-check", "--config", str(CONFIGS / "tiny_oracle.toml")])
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) >= 5
    assert all(l.startswith(("PASS", "FAIL")) for l in lines)
    assert code == (EXIT_OK if all(l.startswith("PASS") for l in lines) else EXIT_CHECK_FAILED)


def test_console_entry_point(small_file):
    proc = subprocess.run([sys.executable, "-m", "coisac.cli", "simulate", "--config", str(small_file),
                           "--snr", "0", "--methods", "param_fusion"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["results"]["param_fusion"]["method"] == "param_fusion"
