import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acdispatch.errors import DimensionMismatch, Infeasible
from acdispatch.qpsolve import ELASTIC_PENALTY, ReducedQP, kkt_residual, solve_qp


def _qp(H, c, lo, hi, L0=None, rL=None, S=None, rS=None, IT=None, rIT=None):
    c = np.atleast_2d(np.asarray(c, float))
    T, nb = c.shape
    H = [np.atleast_2d(np.asarray(h, float)) for h in H]
    L0 = L0 if L0 is not None else [np.zeros((0, nb))] * T
    rL = rL if rL is not None else [np.zeros(0)] * T
    S = S if S is not None else [np.zeros((0, nb))] * T
    rS = rS if rS is not None else [np.zeros(0)] * T
    IT = IT if IT is not None else np.zeros((0, T * nb))
    rIT = rIT if rIT is not None else np.zeros(0)
    return ReducedQP(H=H, c=c, L0=L0, rL=rL, S=S, rS=rS, IT=IT, rIT=rIT,
                     lo=np.atleast_2d(np.asarray(lo, float)), hi=np.atleast_2d(np.asarray(hi, float)))


def _objective(qp, dx):
    return sum(qp.c[t] @ dx[t] + 0.5 * dx[t] @ qp.H[t] @ dx[t] for t in range(qp.T))


def _dual_objective(qp, sol):
    val = 0.0
    for t in range(qp.T):
        val -= 0.5 * sol.dx[t] @ qp.H[t] @ sol.dx[t]
        val += np.asarray(sol.lam0[t]) @ np.asarray(qp.rL[t])
        val -= np.asarray(sol.sigma[t]) @ np.asarray(qp.rS[t])
    val -= sol.mu @ qp.rIT
    val += (sol.nu_lo * qp.lo).sum() - (sol.nu_hi * qp.hi).sum()
    return val


def test_single_bid_lp_goes_to_upper_bound():
    sol = solve_qp(_qp([[[0.0]]], [[-5.0]], [[0.0]], [[2.0]]))
    assert sol.dx[0, 0] == pytest.approx(2.0, abs=1e-12)
    assert sol.pi[0, 0] == pytest.approx(5.0, abs=1e-12)


def test_identity_hessian_zero_cost_stays_put():
    qp = _qp([np.eye(3)], np.zeros((1, 3)), -np.ones((1, 3)), np.ones((1, 3)))
    sol = solve_qp(qp)
    assert np.abs(sol.dx).max() <= 1e-12
    assert kkt_residual(qp, sol) <= 1e-12


def test_balance_row_sets_price():
    # two bids, one balance row: the cheap one fills to its bound and the other is marginal
    qp = _qp([np.zeros((2, 2))], [[10.0, 20.0]], [[0.0, 0.0]], [[1.0, 5.0]],
             L0=[np.ones((1, 2))], rL=[np.array([3.0])])
    sol = solve_qp(qp)
    assert np.allclose(sol.dx, [[1.0, 2.0]], atol=1e-12)
    assert sol.lam0[0][0] == pytest.approx(20.0)
    assert sol.pi[0, 0] == pytest.approx(10.0)


def _random_qp(seed, T, nb, n_s, n_it):
    rng = np.random.default_rng(seed)
    H = []
    for _ in range(T):
        A = rng.normal(size=(nb, max(1, nb - 1)))
        H.append(A @ A.T * rng.uniform(0, 2))
    c = rng.normal(scale=10, size=(T, nb))
    lo = -rng.uniform(0.1, 2, size=(T, nb))
    hi = rng.uniform(0.1, 2, size=(T, nb))
    z0 = lo + rng.uniform(0.2, 0.8, size=(T, nb)) * (hi - lo)
    L0 = [rng.uniform(0.8, 1.2, size=(1, nb)) for _ in range(T)]
    rL = [L0[t] @ z0[t] for t in range(T)]
    S = [rng.normal(size=(n_s, nb)) for _ in range(T)]
    rS = [S[t] @ z0[t] + rng.uniform(0, 0.5, n_s) for t in range(T)]
    IT = rng.normal(size=(n_it, T * nb))
    rIT = IT @ z0.ravel() + rng.uniform(0, 0.5, n_it)
    return _qp(H, c, lo, hi, L0, rL, S, rS, IT, rIT)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), T=st.integers(1, 3), nb=st.integers(1, 5),
       n_s=st.integers(0, 3), n_it=st.integers(0, 3))
def test_random_convex_qp_kkt_and_zero_gap(seed, T, nb, n_s, n_it):
    qp = _random_qp(seed, T, nb, n_s, n_it)
    sol = solve_qp(qp)
    assert sol.status == "optimal"
    assert kkt_residual(qp, sol) <= 1e-8
    primal = _objective(qp, sol.dx)
    assert abs(primal - _dual_objective(qp, sol)) <= 1e-8 * max(1.0, abs(primal))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100.0))
def test_objective_scaling_scales_duals_only(seed, scale):
    qp = _random_qp(seed, 2, 3, 2, 1)
    a = solve_qp(qp)
    qp2 = _qp([scale * h for h in qp.H], scale * qp.c, qp.lo, qp.hi, qp.L0, qp.rL, qp.S, qp.rS,
              qp.IT, qp.rIT)
    b = solve_qp(qp2)
    assert np.abs(a.dx - b.dx).max() <= 1e-7
    assert np.abs(scale * a.pi - b.pi).max() <= 1e-6 * scale * max(1.0, np.abs(a.pi).max())
    for t in range(2):
        assert np.allclose(scale * a.lam0[t], b.lam0[t], rtol=1e-7, atol=1e-7 * scale)


def test_removing_inactive_row_changes_nothing():
    qp = _random_qp(7, 1, 3, 0, 0)
    base = solve_qp(qp)
    S = np.ones((1, 3))
    with_row = _qp(qp.H, qp.c, qp.lo, qp.hi, qp.L0, qp.rL, [S], [np.array([S @ base.dx[0] + 1.0]).ravel()])
    sol = solve_qp(with_row)
    assert np.abs(sol.dx - base.dx).max() <= 1e-10
    assert sol.sigma[0][0] == pytest.approx(0.0, abs=1e-10)


def test_infeasible_flow_row_is_relaxed_elastically():
    qp = _qp([np.zeros((1, 1))], [[1.0]], [[0.0]], [[2.0]], S=[np.array([[-1.0]])], rS=[np.array([-3.0])])
    sol = solve_qp(qp)
    assert sol.status == "elastic"
    assert sol.slack[0][0] == pytest.approx(1.0, abs=1e-9)
    assert sol.sigma[0][0] == pytest.approx(ELASTIC_PENALTY, rel=1e-9)


def test_infeasible_balance_raises_with_certificate():
    qp = _qp([np.zeros((1, 1))], [[1.0]], [[0.0]], [[2.0]], L0=[np.ones((1, 1))], rL=[np.array([5.0])])
    with pytest.raises(Infeasible) as err:
        solve_qp(qp)
    # violation can sit on either the balance row or the upper bound (same L1 cost)
    assert err.value.rows
    assert all(("balance" in r) or ("hi bound" in r) for r in err.value.rows)


def test_dimension_mismatch():
    qp = _qp([np.eye(2)], np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2)))
    qp.lo = np.zeros((1, 3))
    with pytest.raises(DimensionMismatch):
        solve_qp(qp)
    good = _qp([np.eye(2)], np.zeros((1, 2)), np.zeros((1, 2)), np.ones((1, 2)))
    sol = solve_qp(good)
    sol.pi = np.zeros((2, 2))
    with pytest.raises(DimensionMismatch):
        kkt_residual(good, sol)


def test_rhs_perturbation_moves_price_linearly_with_quadratic_cost():
    # min 1/2 h x^2 + c x  s.t. x = r:  lam0 = c + h r
    for r in (0.1, 0.2, 0.4):
        sol = solve_qp(_qp([[[4.0]]], [[3.0]], [[-1.0]], [[1.0]], L0=[np.ones((1, 1))],
                           rL=[np.array([r])]))
        assert sol.lam0[0][0] == pytest.approx(3.0 + 4.0 * r, abs=1e-10)
