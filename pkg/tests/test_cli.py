from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from uaro.cli import (GAMMA_FIELDS, SUMMARY_FIELDS, ConfigError, build_model, compare_rows, main,
                      parse_config, read_summary, validate_trace)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run(tmp_path, name, *extra, dest=None):
    out = tmp_path / (dest or name)
    code = main(["run", "--config", str(CONFIGS / f"{name}.cfg"), "--out", str(out), *extra])
    return code, out


def test_shipped_configs_parse():
    for name in ("scenario1", "scenario2", "scenario3", "toy-integrator", "toy-feas"):
        cfg = parse_config(CONFIGS / f"{name}.cfg")
        build_model(cfg)
    s2 = parse_config(CONFIGS / "scenario2.cfg")
    assert (s2.c, s2.wmax) == (0.1, 0.001)
    s3 = parse_config(CONFIGS / "scenario3.cfg")
    assert (s3.c, s3.wmax) == (1.0, 0.01)


def test_unknown_key_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("system = toy-feas\n# note\nbogus = 1\n")
    with pytest.raises(ConfigError, match=r"bad.cfg:3: unknown key 'bogus'"):
        parse_config(bad)
    assert main(["run", "--config", str(bad)]) == 1
    assert "bogus" in capsys.readouterr().err


@pytest.mark.parametrize("text,field", [("runs = 0\n", "runs"), ("c = -1\n", "c"),
                                        ("system = drone\n", "system"),
                                        ("include_center = maybe\n", "include_center")])
def test_invalid_values_rejected(tmp_path, text, field):
    f = tmp_path / "x.cfg"
    f.write_text(text)
    with pytest.raises(ConfigError, match=f"x.cfg:1: field '{field}'"):
        parse_config(f)


def test_missing_config_exit_code(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 1


def test_toy_integrator_run(tmp_path):
    code, out = run(tmp_path, "toy-integrator")
    assert code == 0
    summary = {r["controller"]: r for r in read_summary(out / "summary.csv")}
    assert float(summary["uaro"]["gamma0_mean"]) == pytest.approx(0.25, abs=1e-5)
    assert float(summary["ro"]["gamma0_mean"]) == pytest.approx(1.0, abs=1e-5)
    assert rows(out / "summary.csv")[0] == SUMMARY_FIELDS
    assert rows(out / "gamma_uaro.csv")[0] == GAMMA_FIELDS
    assert rows(out / "trace_uaro.csv")[0] == ["run", "k", "gamma", "u0", "w0", "x_next0",
                                               "node_solves", "step_wall_ms"]
    m = build_model(parse_config(CONFIGS / "toy-integrator.cfg"))
    for ctl in ("uaro", "ro"):
        assert validate_trace(out / f"trace_{ctl}.csv", m)


def test_toy_feas_run_reports_infeasible(tmp_path, capsys):
    code, out = run(tmp_path, "toy-feas")
    assert code == 2
    assert "infeasible at k = 0" in capsys.readouterr().out
    summary = {r["controller"]: r for r in read_summary(out / "summary.csv")}
    assert summary["ro"]["infeasible"] == "1"
    assert summary["uaro"]["completed"] == "1"
    assert float(summary["uaro"]["max_violation"]) <= 0


def test_runs_are_deterministic(tmp_path):
    _, a = run(tmp_path, "toy-integrator", "--runs", "3", "--disturbance", "random")
    b_dir = tmp_path / "again"
    main(["run", "--config", str(CONFIGS / "toy-integrator.cfg"), "--out", str(b_dir),
          "--runs", "3", "--disturbance", "random"])
    ra, rb = rows(a / "summary.csv"), rows(b_dir / "summary.csv")
    # wall time sits in the last column only
    assert [r[:-1] for r in ra] == [r[:-1] for r in rb]
    assert (a / "gamma_uaro.csv").read_bytes() == (b_dir / "gamma_uaro.csv").read_bytes()
    strip = lambda p: [r[:-1] for r in rows(p)]
    assert strip(a / "trace_ro.csv") == strip(b_dir / "trace_ro.csv")


def test_compare_identical_and_toy_difference(tmp_path, capsys):
    _, u = run(tmp_path, "toy-integrator", "--controller", "uaro", dest="u")
    _, r = run(tmp_path, "toy-integrator", "--controller", "ro", dest="r")
    table = compare_rows(read_summary(u / "summary.csv"), read_summary(u / "summary.csv"))
    assert all(d == 0 for *_, d, _ in table)
    table = {m: (a, b, d) for _, m, a, b, d, _ in
             compare_rows(read_summary(u / "summary.csv"), read_summary(r / "summary.csv"))}
    assert table["gamma0_mean"][2] == pytest.approx(0.75, abs=1e-5)
    assert main(["compare", str(u / "summary.csv"), str(r / "summary.csv")]) == 0
    assert "gamma0_mean" in capsys.readouterr().out


def test_compare_schema_mismatch(tmp_path):
    f = tmp_path / "junk.csv"
    f.write_text("a,b\n1,2\n")
    assert main(["compare", str(f), str(f)]) == 1


def test_certify_examples(tmp_path, capsys):
    seq = tmp_path / "zeros.csv"
    seq.write_text("0\n0\n")
    assert main(["certify", "--config", str(CONFIGS / "toy-feas.cfg"), "--controls", str(seq)]) == 2
    out = capsys.readouterr().out
    assert "violated" in out and "0.29999999999999999" in out and "local" in out
    assert main(["certify", "--config", str(CONFIGS / "toy-integrator.cfg"),
                 "--controls", str(seq)]) == 0
    assert "certified" in capsys.readouterr().out


def test_certify_quadrotor_hover(tmp_path, capsys):
    seq = tmp_path / "hover.csv"
    np.savetxt(seq, np.full((5, 2), 0.73575), delimiter=",")
    # hover is not robust against a sustained vertex torque
    assert main(["certify", "--config", str(CONFIGS / "scenario1.cfg"), "--controls", str(seq)]) == 2
    assert "violated" in capsys.readouterr().out


def test_certify_dimension_mismatch(tmp_path, capsys):
    seq = tmp_path / "bad.csv"
    seq.write_text("0,0,0\n")
    assert main(["certify", "--config", str(CONFIGS / "toy-feas.cfg"), "--controls", str(seq)]) == 1
    assert "expected 2x1" in capsys.readouterr().err


def test_log_level_env(tmp_path, monkeypatch):
    monkeypatch.setenv("UARO_LOG_LEVEL", "debug")
    code, _ = run(tmp_path, "toy-integrator", "--controller", "uaro")
    assert code == 0
