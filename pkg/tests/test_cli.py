import json
import subprocess
import sys

import numpy as np
import pytest

from gpvol.cli import main
from gpvol.series import read_returns_csv, write_returns_csv

from fixtures import table1


@pytest.fixture
def returns_csv(tmp_path):
    path = tmp_path / "returns.csv"
    assert main(["simulate", "--T", "40", "--seed", "3", "--out", str(path)]) == 0
    return path


def test_no_args_prints_usage_and_exits_2(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gpvol"], capture_output=True, text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr


def test_simulate_shape_and_reproducibility(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["simulate", "--T", "100", "--seed", "7", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,x" and len(lines) == 101
    echoed = capsys.readouterr().err
    cfg = tmp_path / "echo.cfg"
    cfg.write_text(echoed)
    out2 = tmp_path / "s2.csv"
    assert main(["simulate", "--config", str(cfg), "--out", str(out2)]) == 0
    assert out2.read_bytes() == out.read_bytes()


def test_flag_overrides_config_file(tmp_path, returns_csv, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("particles = 100\nshrinkage = 0.9\n")
    out = tmp_path / "b.jsonl"
    code = main(["backtest", "--config", str(cfg), "--particles", "20", "--data", str(returns_csv), "--warmup", "35", "--seed", "1", "--out", str(out)])
    assert code == 0
    err = capsys.readouterr().err
    assert "particles = 20" in err and "shrinkage = 0.9" in err
    records = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(records) == 5 and records[0]["t"] == 36


def test_usage_errors_name_the_key(tmp_path, returns_csv, capsys):
    assert main(["backtest", "--data", str(returns_csv), "--shrinkage", "1.5", "--seed", "1"]) == 2
    assert "shrinkage" in capsys.readouterr().err
    assert main(["backtest", "--data", str(returns_csv)]) == 2
    assert "--seed" in capsys.readouterr().err
    assert main(["backtest", "--data", str(tmp_path / "missing.csv"), "--seed", "1"]) == 2
    assert "data" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("particlez = 3\n")
    assert main(["backtest", "--config", str(bad), "--data", str(returns_csv), "--seed", "1"]) == 2
    assert "particlez" in capsys.readouterr().err
    assert main(["backtest", "--bogus", "1"]) == 2
    assert main(["backtest", "--data", str(returns_csv), "--seed", "x"]) == 2


def test_computational_failure_exits_1(tmp_path, capsys):
    path = tmp_path / "r.csv"
    write_returns_csv(path, np.concatenate([np.full(30, 1e-12), [1e200]]))
    code = main(["backtest", "--data", str(path), "--warmup", "25", "--seed", "0", "--particles", "5",
                 "--prior-scale", "0.001,0.001,0.001,0.001,0.001", "--prior-loc", "0,0,-1,-8,0"])
    assert code == 1
    assert "failed" in capsys.readouterr().err


def test_compare_reports_cd(tmp_path, capsys):
    tpath = tmp_path / "t.csv"
    table1().to_csv(tpath)
    before = tpath.read_bytes()
    out = tmp_path / "rank.json"
    assert main(["compare", "--table", str(tpath), "--alpha", "0.05", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert abs(doc["cd"] - 1.0487) < 1e-4 and doc["alpha"] == 0.05
    assert tpath.read_bytes() == before


def test_fit_baseline_and_pgas_outputs(tmp_path, returns_csv):
    fit = tmp_path / "fit.json"
    assert main(["fit-baseline", "--data", str(returns_csv), "--model", "egarch", "--seed", "0", "--restarts", "2", "--out", str(fit)]) == 0
    assert json.loads(fit.read_text())["model"] == "egarch"
    draws = tmp_path / "draws.jsonl"
    assert main(["pgas", "--data", str(returns_csv), "--pgas-particles", "3", "--iters", "2", "--seed", "0", "--out", str(draws)]) == 0
    assert len(draws.read_text().splitlines()) == 2
    assert main(["fit-baseline", "--data", str(returns_csv), "--model", "arch", "--seed", "0"]) == 2


def test_surface_recovery_speed_prepare(tmp_path, returns_csv):
    surf = tmp_path / "surf.csv"
    assert main(["surface", "--data", str(returns_csv), "--particles", "5", "--seed", "0", "--v-min", "-1", "--v-max", "1",
                 "--x-min", "0", "--x-max", "0.5", "--step", "0.5", "--out", str(surf)]) == 0
    assert len(surf.read_text().splitlines()) == 1 + 5 * 2
    rec = tmp_path / "rec.csv"
    assert main(["recovery", "--datasets", "1", "--T", "5", "--particles", "5", "--seed", "0", "--out", str(rec)]) == 0
    assert rec.read_text().startswith("seed,t,param,q05,q95,truth")
    spd = tmp_path / "speed.csv"
    assert main(["speed", "--T", "24", "--warmup", "22", "--particles", "5", "--pgas-particles", "3", "--iters", "2",
                 "--seed", "0", "--out", str(spd), "--threads", "1"]) == 0
    assert len(spd.read_text().splitlines()) == 3

    prices = tmp_path / "p.csv"
    prices.write_text("timestamp,price\n" + "".join(f"2011-01-{d:02d},{p}\n" for d, p in zip(range(1, 9), [1, 1.1, 1.1, 1.1, 1.1, 1.2, 1.0, 1.3])))
    out = tmp_path / "x.csv"
    assert main(["prepare", "--prices", str(prices), "--out", str(out)]) == 0
    x = read_returns_csv(out)
    assert len(x) == 6 and abs(x.values.std() - 1) < 1e-12
