import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acdispatch import acpf, fixtures
from acdispatch.errors import DimensionMismatch, NonConvergence, SingularJacobian
from acdispatch.netmodel import PQ, PV, with_demand
from acdispatch.reduction import factorize
from conftest import central_fd, interior_state, solved

H_FD = 1e-6


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    s = float(np.abs(b).max(initial=0.0))
    d = float(np.abs(a - b).max(initial=0.0))
    return d / s if s > 1e-9 else d


def resolve_loss(case, state, bus, delta):
    """Total loss after shifting the specified active injection at ``bus`` by ``delta``.

    Independent Newton on the free rows with the current free injections as targets.
    """
    lay = state.layout
    P, Q = acpf.injections(state, case)
    target = np.concatenate([P[lay.ns], Q[lay.pq]])
    k = np.flatnonzero(lay.ns == bus)
    if k.size:
        target[k[0]] += delta
    s = state
    for _ in range(30):
        P, Q = acpf.injections(s, case)
        mis = target - np.concatenate([P[lay.ns], Q[lay.pq]])
        if np.abs(mis).max() < 1e-14:
            break
        DF, _ = acpf.eval_jacobian(s, case)
        s = s.step(np.linalg.solve(DF.toarray(), mis))
    return float(acpf.injections(s, case)[0].sum())


def _states(name, n, seed):
    c = fixtures.load(name)
    rng = np.random.default_rng(seed)
    return c, [interior_state(c, int(rng.integers(c.T)), rng) for _ in range(n)]


# derivative suite -------------------------------------------------------------

@pytest.mark.parametrize("name", ["case2", "case3ramp"])
def test_jacobian_matches_central_fd(name):
    c, states = _states(name, 10, 1)
    x = np.zeros(c.n_bid)
    for s in states:
        DF, DF0 = acpf.eval_jacobian(s, c)
        y = s.free_vector()
        Jfd = central_fd(lambda v: acpf.eval_balance(s.with_free(v), c, x).vector, y, H_FD)
        J0fd = central_fd(lambda v: acpf.eval_balance(s.with_free(v), c, x).swing, y, H_FD)
        assert rel(-DF.toarray(), Jfd) <= 1e-6
        assert rel(-DF0, J0fd) <= 1e-6


def test_flow_gradients_match_central_fd():
    c, states = _states("case3ramp", 10, 2)
    for s in states:
        fv = acpf.eval_flow_constraints(s, c)
        y = s.free_vector()
        fd = central_fd(lambda v: acpf.eval_flow_constraints(s.with_free(v), c).G, y, H_FD)
        assert rel(fv.DG, fd) <= 1e-6


@pytest.mark.parametrize("name", ["case2", "case3ramp"])
def test_loss_gradients_match_resolve_fd(name):
    c, states = _states(name, 5, 3)
    for s in states:
        info = acpf.loss_and_gradients(s, c)
        for i in s.layout.ns:
            fd = (resolve_loss(c, s, i, H_FD) - resolve_loss(c, s, i, -H_FD)) / (2 * H_FD)
            assert abs(info.d_active[i] - fd) <= 1e-5 * max(abs(fd), 1e-2)


@pytest.mark.parametrize("name", ["case2", "case3ramp"])
def test_hessian_action_matches_fd_of_gradient(name):
    c, states = _states(name, 10, 4)
    rng = np.random.default_rng(5)
    for s in states:
        lam_p = rng.uniform(10, 40, c.n_bus)
        lam_q = rng.uniform(-5, 5, c.n_bus)
        sigma = rng.uniform(0, 10, len(c.flow_constraints))
        lay = s.layout
        w = np.concatenate([lam_p, lam_q])

        def grad(v):
            st_ = s.with_free(v)
            J = acpf.full_jacobian(st_, c)[:, lay.free].toarray()
            g = J.T @ w
            if sigma.size:
                g = g + acpf.eval_flow_constraints(st_, c).DG.T @ sigma
            return g

        H = acpf.hessian_matrix(s, c, lam_p, lam_q, sigma if sigma.size else None).toarray()
        Hfd = central_fd(grad, s.free_vector(), H_FD)
        assert rel(H, Hfd) <= 1e-5
        v = rng.normal(size=lay.nfree)
        hv = acpf.constraint_hessian_apply(s, c, lam_p, lam_q, sigma if sigma.size else None, v)
        assert rel(hv, Hfd @ v) <= 1e-5


# balance and Jacobian ------------------------------------------------------------

def test_flat_start_residual_case2():
    c = fixtures.load("case2")
    res = acpf.eval_balance(acpf.flat_state(c, 0), c, np.zeros(c.n_bid))
    lay = acpf.flat_state(c, 0).layout
    assert res.p[list(lay.ns).index(1)] == pytest.approx(-1.0)
    assert res.q.size == 1 and res.swing.size == 1


def test_residual_dimensions_follow_typing():
    c = fixtures.load("case3ramp")
    res = acpf.eval_balance(acpf.flat_state(c, 0), c, np.zeros(c.n_bid))
    n_pq = int(np.sum(c.kind == PQ))
    n_pv = int(np.sum(c.kind == PV))
    assert res.vector.size == 2 * n_pq + n_pv
    assert res.swing.size == len(c.island_ids)


def test_dimension_mismatch():
    c = fixtures.load("case2")
    with pytest.raises(DimensionMismatch):
        acpf.eval_balance(acpf.flat_state(c, 0), c, np.zeros(5))
    with pytest.raises(DimensionMismatch):
        acpf.eval_balance(acpf.flat_state(fixtures.load("case3ramp"), 0), c, np.zeros(3))


def test_case2_flat_start_jacobian_by_hand():
    c = fixtures.load("case2")
    DF, DF0 = acpf.eval_jacobian(acpf.flat_state(c, 0), c)
    y = 1 / complex(0.01, 0.1)
    g, b = y.real, y.imag
    assert np.allclose(DF.toarray(), [[-b, g], [-g, -b]], atol=1e-12)
    assert np.allclose(DF0, [[b, -g]], atol=1e-12)


def test_jacobian_pattern_stable_across_states(rng):
    c = fixtures.load("case3ramp")
    a = acpf.eval_jacobian(interior_state(c, 0, rng), c)[0]
    b = acpf.eval_jacobian(interior_state(c, 0, rng), c)[0]
    assert np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)


def test_solved_state_has_small_residual():
    c = fixtures.load("case3ramp")
    x = np.array([1.0, 0.3, 0.2])
    s = acpf.newton_power_flow(c, 0, x)
    assert np.abs(acpf.eval_balance(s, c, x).vector).max() <= 1e-8


def test_oracle_dispatch_is_feasible_case2():
    from acdispatch.oracle import oracle_solve

    c = fixtures.load("case2")
    o = oracle_solve(c)
    s = acpf.newton_power_flow(c, 0, o.x[0])
    assert acpf.eval_balance(s, c, o.x[0]).inf_norm() <= 1e-6


# Newton power flow ---------------------------------------------------------------

def test_zero_load_flat_start_is_solution():
    c = fixtures.load("case2")
    c0 = with_demand(c, "2", 0, -c.p_load[0, 1])
    c0 = c0.replace(buses=tuple(dataclasses.replace(b, q_load=np.zeros(1)) for b in c0.buses))
    s = acpf.newton_power_flow(c0, 0, np.zeros(c.n_bid))
    assert np.allclose(s.theta, 0) and np.allclose(s.vm, 1)


def test_case2_feeding_load_lowers_v2():
    c = fixtures.load("case2")
    s = acpf.newton_power_flow(c, 0, np.array([1.0, 0.0, 0.0]))
    assert s.vm[1] < 1.0


def test_absurd_load_fails():
    c = with_demand(fixtures.load("case2"), "2", 0, 100.0)
    with pytest.raises((SingularJacobian, NonConvergence)):
        acpf.newton_power_flow(c, 0, np.zeros(3))


# PV-PQ switching -----------------------------------------------------------------

def _heavy_q_case(q_mvar):
    c = fixtures.load("case3ramp")
    buses = tuple(dataclasses.replace(b, q_load=np.full(c.T, q_mvar / c.base_mva)) if b.id == "2" else b
                  for b in c.buses)
    return c.replace(buses=buses)


def test_pv_bus_beyond_qmax_becomes_pq_at_limit():
    c = _heavy_q_case(120.0)
    s = acpf.newton_power_flow(c, 0, np.array([1.0, 0.3, 0.2]), switching=False)
    new, changes, events = acpf.pv_pq_switch(s, c)
    i = c.bus_index["2"]
    assert changes == 1 and new.kind[i] == PQ
    assert new.q_pin[i] == pytest.approx(c.q_limits[1][i])
    assert events[0].new_kind == "PQ"
    again, n2, _ = acpf.pv_pq_switch(new, c)
    assert n2 == 0


def test_no_switch_within_limits():
    c = fixtures.load("case3ramp")
    s = acpf.newton_power_flow(c, 0, np.array([1.0, 0.3, 0.2]), switching=False)
    _, changes, _ = acpf.pv_pq_switch(s, c)
    assert changes == 0


def test_case3ramp_typing_at_optimum_unchanged():
    sol = solved("case3ramp")
    c = sol.case
    for s in sol.states:
        assert np.array_equal(s.kind, c.kind)


# flows and losses ----------------------------------------------------------------

def test_flat_start_nullity():
    for name in ["case2", "case3ramp", "case_lossless"]:
        c = fixtures.load(name)
        c = c.replace(branches=tuple(dataclasses.replace(b, b_ch=0.0) for b in c.branches))
        s = acpf.flat_state(c, 0)
        assert np.abs(acpf.branch_flows(s, c)).max() <= 1e-12
        info = acpf.loss_and_gradients(s, c)
        assert abs(info.total) <= 1e-12
        assert np.abs(info.d_active).max() <= 1e-12 and np.abs(info.d_reactive).max() <= 1e-12
        assert np.abs(acpf.eval_flow_constraints(s, c).G).max(initial=0.0) <= 1e-12


def test_reversing_signs_negates_flow_values(rng):
    c = fixtures.load("case3ramp")
    flipped = tuple(dataclasses.replace(fc, terms=tuple((b, -s) for b, s in fc.terms))
                    for fc in c.flow_constraints)
    c2 = c.replace(flow_constraints=flipped)
    s = interior_state(c, 0, rng)
    assert np.allclose(acpf.eval_flow_constraints(s, c2).G, -acpf.eval_flow_constraints(s, c).G)


def test_binding_flow_row_at_optimum():
    sol = solved("case3ramp")
    c = sol.case
    G = acpf.eval_flow_constraints(sol.states[1], c).G
    assert G[0] == pytest.approx(c.flow_limits[1, 0], abs=1e-6)


def test_lossless_network_has_zero_loss(rng):
    c = fixtures.load("case_lossless")
    for _ in range(5):
        assert abs(acpf.loss_and_gradients(interior_state(c, 0, rng, 0.3), c).total) <= 1e-12


@pytest.mark.parametrize("name", ["case2", "case3ramp", "case_islands", "case14"])
def test_conservation_at_solved_flow(name):
    sol = solved(name)
    c = sol.case
    for t, s in enumerate(sol.states):
        info = acpf.loss_and_gradients(s, c)
        gen = np.bincount(c.bus_island[c.bid_bus], sol.x[t], len(c.island_ids))
        load = np.bincount(c.bus_island, c.p_load[t], len(c.island_ids))
        assert np.allclose(gen - load, info.per_island, atol=1e-8)


# Hessian -------------------------------------------------------------------------

def test_zero_multipliers_zero_hessian(rng):
    c = fixtures.load("case3ramp")
    s = interior_state(c, 0, rng)
    z = np.zeros(c.n_bus)
    H = acpf.hessian_matrix(s, c, z, z, np.zeros(1))
    assert abs(H).max() == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_hessian_symmetry_property(seed):
    rng = np.random.default_rng(seed)
    c = fixtures.load("case3ramp")
    s = interior_state(c, int(rng.integers(2)), rng, 0.2)
    lam_p, lam_q = rng.normal(size=c.n_bus) * 30, rng.normal(size=c.n_bus) * 5
    H = acpf.hessian_matrix(s, c, lam_p, lam_q, rng.uniform(0, 5, 1))
    u, v = rng.normal(size=H.shape[0]), rng.normal(size=H.shape[0])
    assert abs(u @ (H @ v) - v @ (H @ u)) <= 1e-10 * max(1.0, abs(u @ (H @ v)))


@pytest.mark.parametrize("name", ["case2", "case3ramp"])
def test_flat_start_uniform_lambda_positive_curvature(name, rng):
    c = fixtures.load(name)
    s = acpf.flat_state(c, 0)
    DF, DF0 = acpf.eval_jacobian(s, c)
    lam_free = -factorize(DF).solve_t(DF0.T @ np.array([30.0]))
    lay = s.layout
    lam_p, lam_q = np.zeros(c.n_bus), np.zeros(c.n_bus)
    lam_p[lay.ns] = lam_free[: lay.ns.size]
    lam_q[lay.pq] = lam_free[lay.ns.size:]
    lam_p[c.swing_buses] = 30.0
    assert np.allclose(lam_p, 30.0) and np.allclose(lam_q, 0.0)
    H = acpf.hessian_matrix(s, c, lam_p, lam_q)
    for _ in range(20):
        v = rng.normal(size=H.shape[0])
        assert v @ (H @ v) > 0
