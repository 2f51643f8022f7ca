import dataclasses

import numpy as np
import pytest

from acdispatch import compute_lmps, equilibrium_check, marginal_profits, solve_dispatch
from acdispatch.errors import NonConvergence, NotConverged
from acdispatch.netmodel import with_demand
from acdispatch.pricing import AT_LB, AT_UB, INTERIOR, RAMP_BOUND, classify_positions
from acdispatch.sqp import SolverOptions
from conftest import case, solved

NAMES = ["case1", "case2", "case3ramp", "case_islands", "case_lossless", "case_dupbid", "case14", "case30"]


@pytest.mark.parametrize("name", NAMES)
def test_components_add_up(name):
    for p in compute_lmps(solved(name), case(name)):
        assert abs(p.energy + p.loss + p.congestion - p.lmp) <= 1e-9
        assert abs(sum(p.by_constraint.values()) - p.congestion) <= 1e-9


def test_lossless_prices_are_uniform_without_loss_part():
    prices = compute_lmps(solved("case_lossless"), case("case_lossless"))
    assert max(p.lmp for p in prices) - min(p.lmp for p in prices) <= 1e-9
    assert all(p.loss == 0.0 for p in prices)


@pytest.mark.parametrize("name,bus,hour", [("case2", "2", 0), ("case3ramp", "3", 1), ("case3ramp", "2", 0)])
def test_lmp_is_derivative_of_optimal_cost(name, bus, hour):
    c = case(name)
    lmp = {(p.bus, p.hour): p.lmp for p in compute_lmps(solved(name), c)}[(bus, hour)]
    d = 1e-4
    up = solve_dispatch(with_demand(c, bus, hour, d)).cost
    dn = solve_dispatch(with_demand(c, bus, hour, -d)).cost
    assert lmp == pytest.approx((up - dn) / (2 * d), abs=1e-5)


def test_uncongested_price_ratios_follow_loss_factors():
    c, sol = case("case2"), solved("case2")
    p = compute_lmps(sol, c)
    assert p[1].lmp / p[0].lmp == pytest.approx(sol.L0_bus[0, 1] / sol.L0_bus[0, 0], rel=1e-12)


def test_congestion_is_attributed_to_the_binding_cut():
    c, sol = case("case3ramp"), solved("case3ramp")
    h1 = {p.bus: p for p in compute_lmps(sol, c) if p.hour == 1}
    assert h1["3"].by_constraint["cut13"] == pytest.approx(19.3685, abs=1e-3)
    assert h1["2"].congestion == pytest.approx(9.30, abs=1e-2)
    assert h1["1"].congestion == pytest.approx(0.0, abs=1e-9)


def test_unconverged_solution_has_no_prices():
    with pytest.raises(NonConvergence) as err:
        solve_dispatch(case("case2"), SolverOptions(max_iter=1, tol_opt=0.0))
    with pytest.raises(NotConverged):
        compute_lmps(err.value.report, case("case2"))
    with pytest.raises(NotConverged):
        marginal_profits(err.value.report, case("case2"))


@pytest.mark.parametrize("name", NAMES)
def test_sign_rules_of_marginal_profit(name):
    c, sol = case(name), solved(name)
    for u in marginal_profits(sol, c):
        box = u.pi - u.ramp_dual - u.energy_dual
        if u.position == AT_UB:
            assert box >= -0.01
        elif u.position == AT_LB:
            assert box <= 0.01
        elif u.position == INTERIOR:
            assert abs(u.pi) <= 0.01
    assert equilibrium_check(sol, c).ok


def test_ramp_bound_unit_profit_is_its_ramp_dual():
    c, sol = case("case3ramp"), solved("case3ramp")
    pos = classify_positions(sol, c)
    j = c.bid_index["g2"]
    assert pos[1, j] == RAMP_BOUND
    u = [e for e in marginal_profits(sol, c) if e.bid == "g2" and e.hour == 1][0]
    assert u.pi == pytest.approx(u.ramp_dual, abs=1e-8)
    assert u.pi == pytest.approx(4.466, abs=1e-3)


def test_moved_unit_is_flagged():
    c, sol = case("case2"), solved("case2")
    x = sol.x.copy()
    j = c.bid_index["g2"]
    x[0, j] -= 0.05
    rep = equilibrium_check(dataclasses.replace(sol, x=x), c)
    assert not rep.ok
    assert rep.worst == ("g2", 0)
    assert rep.violation[0, j] == pytest.approx(5.5285, abs=1e-3)
    assert np.count_nonzero(np.abs(rep.violation) > 0.01) == 1


def test_prices_rebuild_from_duals_and_sensitivities():
    c, sol = case("case3ramp"), solved("case3ramp")
    for t in range(c.T):
        lmp = np.array([p.lmp for p in compute_lmps(sol, c) if p.hour == t])
        sig = np.zeros(0) if not sol.active[t] else sol.sigma[t, list(sol.active[t])]
        rebuilt = sol.lam0[t, 0] * sol.L0_bus[t] - (sol.S_bus[t].T @ sig if sig.size else 0.0)
        assert np.abs(lmp - rebuilt).max() <= 1e-9
