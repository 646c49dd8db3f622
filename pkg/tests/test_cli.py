import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from shelving_qnd import cli

SMALL = """\
scenario = "custom"
n_b = [0, 1]

[params]
g = 0.01
G = 0.1
delta_omega = 0.13

[time]
start = 0.5
stop = 2.0
num = 4
"""


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _run(tmp_path, text, *extra):
    cfg = _write(tmp_path, text)
    out = tmp_path / "out"
    code = cli.main([str(cfg), "--out", str(out), *extra])
    return code, out


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_no_config_prints_usage(capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_empty_config_prints_usage(tmp_path, capsys):
    assert cli.main([str(_write(tmp_path, "\n  \n"))]) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err and "empty" in err


def test_missing_file(tmp_path, capsys):
    assert cli.main([str(tmp_path / "nope.toml")]) == cli.EXIT_USAGE
    assert "cannot read" in capsys.readouterr().err


def test_unknown_key_reports_line(tmp_path, capsys):
    text = SMALL.replace("G = 0.1", "G = 0.1\ncoupling = 2.0")
    code, _ = _run(tmp_path, text)
    assert code == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "line 7" in err and "params.coupling" in err


def test_wrong_type_reports_line(tmp_path, capsys):
    code, _ = _run(tmp_path, SMALL.replace("num = 4", 'num = "four"'))
    assert code == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "line 12" in err and "time.num must be int" in err


def test_bad_toml(tmp_path, capsys):
    code, _ = _run(tmp_path, SMALL + "[time\n")
    assert code == cli.EXIT_USAGE
    assert "invalid config" in capsys.readouterr().err


def test_unknown_scenario_and_missing_scenario():
    with pytest.raises(cli.ConfigError, match="line 1"):
        cli.load_config('scenario = "nonexistent"\n')
    with pytest.raises(cli.ConfigError, match="scenario"):
        cli.load_config("n_b = [1]\n")


@pytest.mark.parametrize("edit,message", [
    (("n_b = [0, 1]", "n_b = [0, 9]"), "exceeds truncation.n_tot_max"),
    (("stop = 2.0", "stop = 0.1"), "monotone"),
    (("start = 0.5", "start = 0.0"), "start above 0"),
    (("n_b = [0, 1]", "n_b = [-1]"), "non-negative"),
    (("g = 0.01", "g = 0.01\nkappa_plus = -1.0"), "kappa_plus"),
])
def test_semantic_errors(edit, message):
    with pytest.raises(cli.ConfigError, match=message):
        cli.load_config(SMALL.replace(*edit))


def test_override_is_applied_and_echoed(tmp_path):
    code, out = _run(tmp_path, SMALL, "--set", "params.g=0.02", "--set", "time.num=3")
    assert code == 0
    report = (out / "report.txt").read_text()
    assert "params.g = 0.02" in report and "time.num = 3" in report
    rows = _rows(out / "custom.csv")
    assert len(rows) == 2 * 3
    assert {float(r["g"]) for r in rows} == {0.02}


def test_bad_override(tmp_path, capsys):
    code, _ = _run(tmp_path, SMALL, "--set", "params.g")
    assert code == cli.EXIT_USAGE
    assert "expected key=value" in capsys.readouterr().err
    with pytest.raises(cli.ConfigError, match="--set params.bogus"):
        cli.load_config(SMALL, ["params.bogus=1"])
    assert cli.parse_override("scan.B=[0.5, 1]") == (["scan", "B"], [0.5, 1])
    assert cli.parse_override("protocol=ramped") == (["protocol"], "ramped")


def test_bad_threads(tmp_path):
    code, _ = _run(tmp_path, SMALL, "--threads", "0")
    assert code == cli.EXIT_USAGE


def test_custom_run_outputs(tmp_path, capsys):
    code, out = _run(tmp_path, SMALL)
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert str(out / "custom.csv") in printed and str(out / "report.txt") in printed
    text = (out / "custom.csv").read_text()
    header = text.splitlines()[0].split(",")
    for col in ("n_b", "t", "t_tau", "g", "G", "delta_omega", "gamma", "n_th"):
        assert col in header
    rows = _rows(out / "custom.csv")
    assert len(rows) == 2 * 4
    # every float written in one fixed scientific format
    t_field = text.splitlines()[1].split(",")[header.index("t")]
    assert t_field == cli.FLOAT_FMT % float(t_field)
    t_tau = sorted({float(r["t_tau"]) for r in rows})
    np.testing.assert_allclose(t_tau, np.linspace(0.5, 2.0, 4))
    report = (out / "report.txt").read_text()
    assert "QND feasibility" in report and "scenario custom" in report


def test_repeat_runs_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main([str(cfg), "--out", str(a)]) == 0
    assert cli.main([str(cfg), "--out", str(b), "--threads", "2"]) == 0
    for name in ("custom.csv", "report.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_threads_preserve_cell_order(tmp_path):
    text = 'scenario = "spin_dynamics"\nn_b = [1]\n[scan]\nB = [0.5, 1.0]\n[time]\nstop = 0.5\nnum = 3\n' \
           '[truncation]\nn_plus = 2\n'
    cfg = _write(tmp_path, text)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main([str(cfg), "--out", str(a)]) == 0
    assert cli.main([str(cfg), "--out", str(b), "--threads", "2"]) == 0
    assert (a / "spin_dynamics.csv").read_bytes() == (b / "spin_dynamics.csv").read_bytes()
    Bs = [float(r["B"]) for r in _rows(a / "spin_dynamics.csv")]
    assert Bs == sorted(Bs)


def test_under_truncation_is_flagged(tmp_path):
    text = SMALL.replace("delta_omega = 0.13", "delta_omega = 0.13\ngamma = 1e-3\nn_th = 1.0") \
        + "\n[truncation]\nn_plus = 2\nn_tot_max = 1\n"
    code, out = _run(tmp_path, text, "--convergence-check")
    assert code == 0
    report = (out / "report.txt").read_text()
    assert "under-truncated" in report
    assert "max drift" in report
    assert "n_tot" in _rows(out / "custom.csv")[0]


def test_convergence_check_on_converged_ideal_run(tmp_path):
    code, out = _run(tmp_path, SMALL, "--convergence-check")
    assert code == 0
    report = (out / "report.txt").read_text()
    assert "under-truncated" not in report
    line = [s for s in report.splitlines() if "max drift" in s][0]
    assert line.endswith("pass")


def test_numerical_failure_exit_code(tmp_path, monkeypatch, capsys):
    def broken(*args, **kwargs):
        raise np.linalg.LinAlgError("eigenbasis singular")

    monkeypatch.setattr(cli, "simulate_estimator", broken)
    code, _ = _run(tmp_path, SMALL)
    assert code == cli.EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "numerical failure in estimator_statistics" in err and "singular" in err


def test_relative_drift():
    assert cli.relative_drift([1.0, 2.0], [1.0, 2.0]) == 0
    assert cli.relative_drift([1.0, 2.1], [1.0, 2.0]) == pytest.approx(0.05)
    assert cli.relative_drift([1e-13], [0.0]) == pytest.approx(0.1)


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, SMALL)
    proc = subprocess.run([sys.executable, "-m", "shelving_qnd", str(cfg), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "custom.csv").exists()


@pytest.mark.parametrize("name", cli.SCENARIOS)
def test_shipped_configs_load(name):
    from pathlib import Path
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.toml"
    sc = cli.load_config(path.read_text(), source=str(path))
    assert sc.name == name
    cli.build_params(sc)
