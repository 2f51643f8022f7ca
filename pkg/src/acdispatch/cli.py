"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (invalid case, non-convergence, infeasible
oracle problem, I/O trouble), 2 usage error.  Log verbosity comes from the
``ACDISPATCH_LOG`` environment variable (DEBUG, INFO, WARNING, ...; default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import fixtures
from .errors import DispatchError, NonConvergence, ParseError, ValidationError
from .netmodel import load_case, validate_case

log = logging.getLogger("acdispatch")

LOG_ENV = "ACDISPATCH_LOG"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _case(ref: str):
    """Path to a case file, or the name of a shipped fixture."""
    if os.path.exists(ref):
        return load_case(ref)
    if ref in fixtures.names():
        return fixtures.load(ref)
    raise ParseError(f"no case file or fixture named {ref!r}")


def _parser() -> _Parser:
    p = _Parser(prog="acdispatch", description="Multi-period AC dispatch with nodal prices")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("solve", help="solve a case and write schedule, prices and report")
    s.add_argument("--case", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tol-feas", type=float, default=1e-6)
    s.add_argument("--tol-opt", type=float, default=0.01)
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--workers", type=int, default=1)

    d = sub.add_parser("diagnose", help="regularity checks for a solved case")
    d.add_argument("--case", required=True)
    d.add_argument("--solution", required=True)
    d.add_argument("--workers", type=int, default=1)

    o = sub.add_parser("oracle", help="brute-force reference solution of a small case")
    o.add_argument("--case", required=True)
    o.add_argument("--steps", type=int, default=20)
    o.add_argument("--lmp", action="append", default=[], metavar="BUS,HOUR")

    v = sub.add_parser("validate", help="check a case file")
    v.add_argument("--case", required=True)
    return p


def _solve(a) -> int:
    out = sys.stdout
    from .sqp import SolverOptions, solve_dispatch
    from .writer import write_solution

    case = _case(a.case)
    try:
        opts = SolverOptions(tol_feas=a.tol_feas, tol_opt=a.tol_opt, max_iter=a.max_iter, workers=a.workers)
    except ValueError as exc:
        raise _UsageError(str(exc)) from None
    try:
        sol = solve_dispatch(case, opts)
    except NonConvergence as exc:
        if exc.report is not None:
            write_solution(exc.report, a.out)
        raise
    files = write_solution(sol, a.out)
    print(f"converged in {sol.report['iterations']} iterations, cost {sol.cost * case.base_mva:.2f}", file=out)
    for f in files:
        print(f"wrote {f}", file=out)
    return 0


def _diagnose(a) -> int:
    out = sys.stdout
    from .diagnostics import regularity_report
    from .sqp import SolverOptions, solve_dispatch
    from .writer import read_schedule, write_regularity

    case = _case(a.case)
    stored = read_schedule(a.solution)
    sol = solve_dispatch(case, SolverOptions(workers=a.workers))
    mw = sol.schedule_mw
    worst = 0.0
    for (bid, t), v in stored.items():
        if bid not in case.bid_index or not 0 <= t < case.T:
            raise DispatchError(f"schedule entry {bid} hour {t} does not belong to the case")
        worst = max(worst, abs(mw[t, case.bid_index[bid]] - v))
    if worst > 1e-4:
        raise DispatchError(f"stored schedule differs from a fresh solve by {worst:.3e} MW")
    rep = regularity_report(sol, case)
    fn = write_regularity(rep, a.solution)
    print(f"LICQ {'holds' if rep.licq['holds'] else 'fails'} (rank {rep.licq['rank']} of {rep.licq['rows']})",
          file=out)
    print(f"MFCQ {'holds' if rep.mfcq['holds'] else 'fails'}", file=out)
    print(f"strict complementarity {'holds' if rep.strict_complementarity['holds'] else 'fails'}; "
          f"nonlinear rows {'clean' if rep.nonlinear_subset['strict_complementarity'] else 'degenerate'}",
          file=out)
    print(f"nodal prices {'unique' if rep.nodal_price_uniqueness['unique'] else 'not unique'}", file=out)
    print(f"wrote {fn}", file=out)
    return 0


def _oracle(a) -> int:
    out = sys.stdout
    from .oracle import oracle_lmp, oracle_solve

    case = _case(a.case)
    if a.steps < 2:
        raise _UsageError("--steps must be at least 2")
    res = oracle_solve(case, steps=a.steps)
    print(f"cost {res.cost * case.base_mva:.6f}", file=out)
    print("bid,hour,mw", file=out)
    for t in range(case.T):
        for j, b in enumerate(case.bids):
            print(f"{b.id},{t},{res.x[t, j] * case.base_mva:.6f}", file=out)
    for spec in a.lmp:
        try:
            bus, hour = spec.split(",")
            hour = int(hour)
        except ValueError:
            raise _UsageError(f"--lmp expects BUS,HOUR, got {spec!r}") from None
        if bus not in case.bus_index or not 0 <= hour < case.T:
            raise _UsageError(f"--lmp {spec}: unknown bus or hour")
        print(f"lmp {bus} hour {hour}: {oracle_lmp(case, bus, hour, steps=a.steps, base=res):.4f}", file=out)
    return 0


def _validate(a) -> int:
    out = sys.stdout
    case = _case(a.case)
    rep = validate_case(case)
    if not rep.ok:
        raise ValidationError(rep.violations)
    print(f"{case.name}: {case.n_bus} buses, {len(case.branches)} branches, {case.n_bid} bids, "
          f"{case.T} hours; valid", file=out)
    return 0


_COMMANDS = {"solve": _solve, "diagnose": _diagnose, "oracle": _oracle, "validate": _validate}


def run_cli(argv=None) -> int:
    _setup_logging()
    try:
        a = _parser().parse_args(argv)
        return _COMMANDS[a.cmd](a)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except ValidationError as exc:
        print("invalid case:", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return 1
    except DispatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:       # --help
        return int(exc.code or 0)


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
