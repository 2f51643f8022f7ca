import csv
import json
import os

import pytest

from acdispatch.cli import run_cli
from acdispatch.errors import NonConvergence
from acdispatch.netmodel import dumps_case
from acdispatch.sqp import SolverOptions, solve_dispatch
from acdispatch.writer import read_schedule, write_solution
from conftest import case, solved


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_solve_writes_all_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli(["solve", "--case", "case3ramp", "--out", str(out)]) == 0
    names = sorted(os.listdir(out))
    assert names == ["congestion.csv", "prices.csv", "report.txt", "schedule.csv"]
    assert "converged" in capsys.readouterr().out
    sched = read_schedule(str(out))
    sol = solved("case3ramp")
    c = case("case3ramp")
    for (bid, t), mw in sched.items():
        assert mw == pytest.approx(sol.schedule_mw[t, c.bid_index[bid]], abs=1e-6)
    rows = list(csv.DictReader(open(out / "congestion.csv")))
    assert any(r["constraint"] == "cut13" for r in rows)


def test_outputs_are_byte_identical_across_runs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run_cli(["solve", "--case", "case2", "--out", str(d)]) == 0
    for name in os.listdir(a):
        assert _read(a / name) == _read(b / name), name


def test_lossless_loss_column_is_zero(tmp_path):
    write_solution(solved("case_lossless"), str(tmp_path))
    rows = list(csv.DictReader(open(tmp_path / "prices.csv")))
    assert rows and all(float(r["loss"]) == 0.0 for r in rows)
    assert len({r["lmp"] for r in rows}) == 1


def test_nonconverged_run_writes_report_only(tmp_path):
    with pytest.raises(NonConvergence) as err:
        solve_dispatch(case("case2"), SolverOptions(max_iter=1, tol_opt=0.0))
    files = write_solution(err.value.report, str(tmp_path))
    assert [os.path.basename(f) for f in files] == ["report.txt"]
    assert "outputs,report_only" in open(tmp_path / "report.txt").read()
    out = tmp_path / "cli"
    assert run_cli(["solve", "--case", "case2", "--out", str(out), "--max-iter", "1", "--tol-opt", "0"]) == 1
    assert os.listdir(out) == ["report.txt"]


def test_validate_and_case_files(tmp_path, capsys):
    assert run_cli(["validate", "--case", "case14"]) == 0
    p = tmp_path / "c.json"
    p.write_text(dumps_case(case("case2")))
    assert run_cli(["validate", "--case", str(p)]) == 0
    doc = json.loads(dumps_case(case("case2")))
    doc["bids"][0]["lb"] = 1e6
    p.write_text(json.dumps(doc))
    assert run_cli(["validate", "--case", str(p)]) == 1
    assert "invalid case" in capsys.readouterr().err
    p.write_text("{ not json")
    assert run_cli(["validate", "--case", str(p)]) == 1
    assert run_cli(["validate", "--case", "no_such_case"]) == 1


def test_usage_errors_exit_2(tmp_path):
    assert run_cli([]) == 2
    assert run_cli(["solve", "--case", "case2"]) == 2
    assert run_cli(["solve", "--case", "case2", "--out", str(tmp_path), "--workers", "0"]) == 2
    assert run_cli(["oracle", "--case", "case1", "--lmp", "1"]) == 2
    assert run_cli(["oracle", "--case", "case1", "--lmp", "9,0"]) == 2
    assert run_cli(["oracle", "--case", "case1", "--steps", "1"]) == 2
    assert run_cli(["frobnicate"]) == 2


def test_oracle_command(capsys):
    assert run_cli(["oracle", "--case", "case1", "--lmp", "1,0"]) == 0
    text = capsys.readouterr().out
    assert "g1,0,100.000000" in text and "lmp 1 hour 0: 10.0000" in text
    assert run_cli(["oracle", "--case", "case14"]) == 1


def test_diagnose_round_trip(tmp_path, capsys):
    out = tmp_path / "dup"
    assert run_cli(["solve", "--case", "case_dupbid", "--out", str(out)]) == 0
    assert run_cli(["diagnose", "--case", "case_dupbid", "--solution", str(out)]) == 0
    rep = json.load(open(out / "regularity.json"))
    assert rep["licq"]["holds"] is False and rep["nodal_price_uniqueness"]["unique"] is True
    assert "LICQ fails" in capsys.readouterr().out
    # a schedule from another case does not belong here
    assert run_cli(["diagnose", "--case", "case2", "--solution", str(out)]) == 1
    assert run_cli(["diagnose", "--case", "case2", "--solution", str(tmp_path / "missing")]) == 1


def test_help_exits_0(capsys):
    assert run_cli(["--help"]) == 0
    assert "solve" in capsys.readouterr().out
