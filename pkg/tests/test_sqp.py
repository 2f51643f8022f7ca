import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acdispatch import compute_lmps
from acdispatch.errors import NonConvergence, ValidationError
from acdispatch.netmodel import island_subcase, scale_prices
from acdispatch.qpsolve import solve_qp
from acdispatch.sqp import (SolverOptions, assemble_subproblem, check_convergence, flat_start,
                            intertemporal_rows, manage_active_set, solve_dispatch)
from conftest import case, solved


def test_flat_start_has_zero_flow_duals_and_median_price():
    c = case("case3ramp")
    it = flat_start(c)
    assert np.all(it.sigma == 0) and all(a == () for a in it.active)
    assert np.all(it.lam0 == np.median(c.price))
    assert np.all(it.x >= c.lb) and np.all(it.x <= c.ub)


def test_case2_flat_start_proxy_is_median_bid_price():
    c = case("case2")
    assert flat_start(c).lam0[0, 0] == pytest.approx(np.median(c.price[0]))


def test_lossless_reconstructed_prices_equal_lambda0():
    c = case("case_lossless")
    it = flat_start(c)
    _, blocks = assemble_subproblem(it, c)
    assert np.allclose(blocks[0].lam_p, it.lam0[0, 0], atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(prev=st.sets(st.integers(0, 9)), G=st.lists(st.floats(-2, 2), min_size=10, max_size=10))
def test_active_set_only_grows(prev, G):
    out = manage_active_set(tuple(sorted(prev)), np.array(G), np.ones(10))
    assert set(prev) <= set(out)
    assert set(np.flatnonzero(np.array(G) >= 1 - 1e-4)) <= set(out)
    assert list(out) == sorted(out)


def test_intertemporal_row_structure():
    c = case("case3ramp")
    IT, b, labels = intertemporal_rows(c)
    assert IT.shape == (len(labels), c.T * c.n_bid) and b.shape == (len(labels),)
    for row, lab in zip(IT, labels):
        nz = row[np.flatnonzero(row)]
        if lab.startswith("ramp") and not lab.endswith("hour 0"):
            assert sorted(nz.tolist()) == [-1.0, 1.0]
        elif lab.startswith("energy"):
            assert np.all(np.abs(nz) == 1.0)


def test_flat_start_is_not_converged():
    c = case("case2")
    opts = SolverOptions()
    it = flat_start(c, opts)
    qp, blocks = assemble_subproblem(it, c, opts)
    status, errs = check_convergence(it, qp, solve_qp(qp), c, opts, feas=max(b.feas for b in blocks))
    assert status == "iterate"
    assert errs["feasibility"] > opts.tol_feas


def test_zero_optimality_tolerance_reports_non_convergence():
    c = case("case2")
    with pytest.raises(NonConvergence) as err:
        solve_dispatch(c, SolverOptions(tol_opt=0.0, max_iter=4))
    assert not err.value.report.converged
    assert err.value.report.report["iterations"] == 4


def test_single_bus_dispatch():
    c = case("case1")
    sol = solved("case1")
    assert sol.converged
    assert sol.x[0, c.bid_index["g1"]] == pytest.approx(1.0, abs=1e-9)
    assert compute_lmps(sol, c)[0].lmp == pytest.approx(10.0, abs=1e-9)


def test_islands_solve_separately():
    c = case("case_islands")
    whole = solved("case_islands")
    for isl in c.island_ids:
        sub = island_subcase(c, isl)
        part = solve_dispatch(sub)
        for j, bid in enumerate(sub.bids):
            assert part.x[0, j] == pytest.approx(whole.x[0, c.bid_index[bid.id]], abs=1e-8)


def test_worker_count_does_not_change_the_answer():
    a = solved("case3ramp")
    b = solved("case3ramp", workers=2)
    assert np.abs(a.x - b.x).max() <= 1e-10
    assert np.abs(a.lam0 - b.lam0).max() <= 1e-8


@pytest.mark.parametrize("scale", [0.5, 3.0])
def test_price_scaling_keeps_dispatch_and_scales_prices(scale):
    c = case("case3ramp")
    base = solved("case3ramp")
    sol = solve_dispatch(scale_prices(c, scale))
    assert np.abs(sol.x - base.x).max() <= 1e-7
    assert np.allclose(sol.lam0, scale * base.lam0, rtol=1e-6)


@pytest.mark.parametrize("name", ["case2", "case3ramp", "case_islands", "case30"])
def test_history_invariants(name):
    rep = solved(name).report
    sets = rep["active_sets"]
    for prev, cur in zip(sets, sets[1:]):
        assert all(set(p) <= set(q) for p, q in zip(prev, cur))
    for phase, m0, m1 in rep["merit"]:
        if phase == 2:
            assert m1 <= m0 + 1e-12


def test_invalid_case_is_rejected_before_solving():
    c = case("case2")
    bad = c.replace(bids=tuple(type(b)(**{**b.__dict__, "lb": np.asarray(b.ub) + 1.0}) for b in c.bids))
    with pytest.raises(ValidationError):
        solve_dispatch(bad)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(max_iter=0)
    with pytest.raises(ValueError):
        SolverOptions(lambda0_rule="mode")
