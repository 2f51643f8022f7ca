"""Solution and report files.

Every file is comma-separated text with a header row and ``.`` decimals.

``schedule.csv``  bid, hour, bus, mw
``prices.csv``    bus, hour, lmp, energy, loss, congestion  (currency/MWh, 2 decimals)
``congestion.csv`` bus, hour, constraint, share             (per-constraint split of congestion)
``report.txt``    sectioned key/value and tables: summary, history, active_sets,
                  switches, weak_locations
``regularity.json`` diagnostics written by ``diagnose``

Run timing is left out of the files so that identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .errors import DispatchError
from .pricing import compute_lmps


class IoError(DispatchError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return str(v)


def _price(v: float) -> str:
    r = round(float(v), 2)
    return f"{0.0 if r == 0 else r:.2f}"


def _rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _report_lines(solution) -> list[str]:
    rep = solution.report
    out = ["[summary]", "key,value"]
    for k in ("converged", "iterations", "final_feasibility", "final_equilibrium", "final_hdx",
              "workers", "max_active_per_hour"):
        out.append(f"{k},{_fmt(rep.get(k))}")
    out.append(f"cost_pu,{_fmt(solution.cost)}")
    out.append(f"outputs,{'complete' if solution.converged else 'report_only'}")
    out += ["", "[history]", "k,feasibility,hdx,equilibrium,step,alpha,phase,qp_status"]
    for rec in rep.get("history", []):
        out.append(",".join([_fmt(rec["k"]), _fmt(rec["feasibility"]), _fmt(rec["hdx"]),
                             _fmt(rec["equilibrium"]), _fmt(rec["step"]), _fmt(rec.get("alpha", "")),
                             _fmt(rec.get("phase", "")), rec.get("qp_status", "")]))
    out += ["", "[active_sets]", "hour,constraints"]
    for t, rows in enumerate(solution.active):
        out.append(f"{t},{' '.join(solution.case.flow_constraints[j].id for j in rows)}")
    out += ["", "[switches]", "hour,bus,new_kind,q,v"]
    for e in rep.get("switches", []):
        out.append(f"{e.hour},{e.bus},{e.new_kind},{_fmt(e.q)},{_fmt(e.v)}")
    out += ["", "[weak_locations]", "hour,island,bus,pivot"]
    for h, isl, bus, piv in rep.get("weak_locations", []):
        out.append(f"{h},{isl},{bus},{_fmt(piv)}")
    return out


def write_report(solution, path: str) -> str:
    fn = os.path.join(path, "report.txt")
    with open(fn, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_report_lines(solution)) + "\n")
    return fn


def write_solution(solution, path: str, prices=None) -> list[str]:
    """Write the output files; a non-converged solution gets the report only."""
    case = solution.case
    try:
        os.makedirs(path, exist_ok=True)
        written = [write_report(solution, path)]
        if not solution.converged:
            return written
        prices = prices if prices is not None else compute_lmps(solution, case)
        mw = solution.schedule_mw
        sched = os.path.join(path, "schedule.csv")
        _rows(sched, ["bid", "hour", "bus", "mw"],
              [[b.id, t, b.bus, f"{mw[t, j]:.6f}"] for t in range(case.T) for j, b in enumerate(case.bids)])
        pr = os.path.join(path, "prices.csv")
        _rows(pr, ["bus", "hour", "lmp", "energy", "loss", "congestion"],
              [[p.bus, p.hour, _price(p.lmp), _price(p.energy), _price(p.loss), _price(p.congestion)]
               for p in prices])
        cg = os.path.join(path, "congestion.csv")
        _rows(cg, ["bus", "hour", "constraint", "share"],
              [[p.bus, p.hour, fid, _price(v)] for p in prices for fid, v in sorted(p.by_constraint.items())])
        return written + [sched, pr, cg]
    except OSError as exc:
        raise IoError(f"cannot write solution to {path}: {exc}") from None


def write_regularity(report, path: str) -> str:
    fn = os.path.join(path, "regularity.json")
    try:
        with open(fn, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {fn}: {exc}") from None
    return fn


def read_schedule(path: str) -> dict:
    """(bid, hour) -> MW from a ``schedule.csv``."""
    fn = os.path.join(path, "schedule.csv") if os.path.isdir(path) else path
    try:
        with open(fn, newline="", encoding="utf-8") as fh:
            return {(r["bid"], int(r["hour"])): float(r["mw"]) for r in csv.DictReader(fh)}
    except (OSError, KeyError, ValueError) as exc:
        raise IoError(f"cannot read schedule {fn}: {exc}") from None
