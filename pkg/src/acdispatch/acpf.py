"""AC power-flow evaluation: balance residuals, Jacobians, flow constraints,
losses, Hessian-of-Lagrangian action, PV-PQ switching and Newton power flow.

Injections ``P_i(y), Q_i(y)`` are the power delivered from bus ``i`` into the
network (branch flows plus shunt).  Balance residuals are
``g = gen - load - injection`` so a solved state has ``g = 0``.

Free state variables are ordered [theta at non-swing buses, V at PQ buses];
balance rows follow the same order [P at non-swing, Q at PQ].
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import DimensionMismatch, NonConvergence, NumericallySingular, SingularJacobian
from .netmodel import PQ, PV, SWING, CaseModel
from .reduction import factorize

log = logging.getLogger(__name__)

PV_HYSTERESIS = 1e-4
Q_LIMIT_TOL = 1e-10


@dataclass(eq=False)
class SystemState:
    hour: int
    theta: np.ndarray
    vm: np.ndarray
    kind: np.ndarray
    q_pin: np.ndarray

    def copy(self) -> "SystemState":
        return SystemState(self.hour, self.theta.copy(), self.vm.copy(), self.kind.copy(), self.q_pin.copy())

    @cached_property
    def layout(self) -> "Layout":
        return Layout(self.kind)

    def free_vector(self) -> np.ndarray:
        lay = self.layout
        return np.concatenate([self.theta[lay.ns], self.vm[lay.pq]])

    def with_free(self, y: np.ndarray) -> "SystemState":
        lay = self.layout
        s = self.copy()
        s.theta[lay.ns] = y[: lay.ns.size]
        s.vm[lay.pq] = y[lay.ns.size:]
        s.__dict__["layout"] = lay
        return s

    def step(self, dy: np.ndarray, alpha: float = 1.0) -> "SystemState":
        return self.with_free(self.free_vector() + alpha * dy)


def flat_state(case: CaseModel, hour: int) -> SystemState:
    n = case.n_bus
    kind = case.kind.copy()
    vm = np.where(kind == PQ, 1.0, case.v_set)
    return SystemState(hour, np.zeros(n), vm.astype(float), kind, np.full(n, np.nan))


class Layout:
    """Index bookkeeping for one bus typing."""

    def __init__(self, kind: np.ndarray):
        self.kind = np.asarray(kind)
        self.n = self.kind.size
        self.ns = np.flatnonzero(self.kind != SWING)
        self.pq = np.flatnonzero(self.kind == PQ)
        self.nfree = self.ns.size + self.pq.size
        # index into the stacked [P; Q] / [theta; V] vectors of length 2n
        self.free = np.concatenate([self.ns, self.n + self.pq])
        pos = np.full(2 * self.n, -1, dtype=np.int64)
        pos[self.free] = np.arange(self.nfree)
        self.pos = pos

    def key(self) -> bytes:
        return self.kind.tobytes()


@dataclass(eq=False)
class HourNetwork:
    """Per-hour branch coefficients with the in-service mask applied."""

    case: CaseModel
    hour: int
    f: np.ndarray
    t: np.ndarray
    K: np.ndarray  # (4 flows, 4 coefficients, m)

    @cached_property
    def jac_pattern(self):
        f, t, n = self.f, self.t, self.case.n_bus
        row_of_flow = np.stack([f, n + f, t, n + t])             # (4, m)
        col_of_var = np.stack([f, t, n + f, n + t])               # (4, m)
        rows = np.repeat(row_of_flow[:, None, :], 4, axis=1)      # (4, 4, m)
        cols = np.repeat(col_of_var[None, :, :], 4, axis=0)
        return rows.ravel(), cols.ravel()

    @cached_property
    def hess_pattern(self):
        f, t, n = self.f, self.t, self.case.n_bus
        var = np.stack([f, t, n + f, n + t])
        rows = np.repeat(var[:, None, :], 4, axis=1)
        cols = np.repeat(var[None, :, :], 4, axis=0)
        return rows.ravel(), cols.ravel()


def _coefficient_tensor(coef: np.ndarray, on: np.ndarray) -> np.ndarray:
    Gff, Bff, Gft, Bft, Gtf, Btf, Gtt, Btt = coef * on
    z = np.zeros_like(Gff)
    K = np.array([
        [Gff, z, Gft, Bft],       # P_ft
        [-Bff, z, -Bft, Gft],     # Q_ft
        [z, Gtt, Gtf, -Btf],      # P_tf
        [z, -Btt, -Btf, -Gtf],    # Q_tf
    ])
    return np.ascontiguousarray(K)


def hour_network(case: CaseModel, hour: int) -> HourNetwork:
    cache = case.__dict__.setdefault("_hour_networks", {})
    net = cache.get(hour)
    if net is None:
        f, t = case.branch_ends
        K = _coefficient_tensor(case.branch_coef, case.branch_status[hour].astype(float))
        net = HourNetwork(case, hour, np.ascontiguousarray(f), np.ascontiguousarray(t), K)
        cache[hour] = net
    return net


def _check(state: SystemState, case: CaseModel):
    n = case.n_bus
    if state.theta.shape != (n,) or state.vm.shape != (n,) or state.kind.shape != (n,):
        raise DimensionMismatch(f"state has {state.theta.shape[0]} buses, case has {n}")
    if not 0 <= state.hour < case.T:
        raise DimensionMismatch(f"hour {state.hour} outside the session")


def branch_flows(state: SystemState, case: CaseModel) -> np.ndarray:
    """(4, n_branch) array P_ft, Q_ft, P_tf, Q_tf."""
    net = hour_network(case, state.hour)
    return kernels.flows(net.K, net.f, net.t, state.theta, state.vm)


def injections(state: SystemState, case: CaseModel) -> tuple[np.ndarray, np.ndarray]:
    net = hour_network(case, state.hour)
    fl = kernels.flows(net.K, net.f, net.t, state.theta, state.vm)
    n = case.n_bus
    g_sh, b_sh = case.shunts
    v2 = state.vm * state.vm
    P = g_sh * v2 + np.bincount(net.f, fl[0], n) + np.bincount(net.t, fl[2], n)
    Q = -b_sh * v2 + np.bincount(net.f, fl[1], n) + np.bincount(net.t, fl[3], n)
    return P, Q


def full_jacobian(state: SystemState, case: CaseModel) -> sp.csr_matrix:
    """d[P; Q]/d[theta; V] over all buses, (2n x 2n), fixed structural pattern."""
    net = hour_network(case, state.hour)
    n = case.n_bus
    gr = kernels.flow_grads(net.K, net.f, net.t, state.theta, state.vm)
    rows, cols = net.jac_pattern
    g_sh, b_sh = case.shunts
    diag = np.arange(n)
    rows = np.concatenate([rows, diag, n + diag])
    cols = np.concatenate([cols, n + diag, n + diag])
    vals = np.concatenate([gr.ravel(), 2.0 * g_sh * state.vm, -2.0 * b_sh * state.vm])
    J = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n))
    J.sum_duplicates()
    return J


@dataclass(eq=False)
class BalanceResidual:
    p: np.ndarray        # non-swing buses, layout.ns order
    q: np.ndarray        # PQ buses, layout.pq order
    swing: np.ndarray    # one per island
    layout: Layout

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.q])

    @property
    def all(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.swing])

    def inf_norm(self) -> float:
        a = self.all
        return float(np.max(np.abs(a))) if a.size else 0.0


def bus_generation(case: CaseModel, x: np.ndarray) -> np.ndarray:
    return np.bincount(case.bid_bus, np.asarray(x, dtype=float), case.n_bus)


def eval_balance(state: SystemState, case: CaseModel, x: np.ndarray) -> BalanceResidual:
    _check(state, case)
    x = np.asarray(x, dtype=float)
    if x.shape != (case.n_bid,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({case.n_bid},)")
    P, Q = injections(state, case)
    h = state.hour
    gp = bus_generation(case, x) - case.p_load[h] - P
    gq = np.nan_to_num(state.q_pin) - case.q_load[h] - Q
    lay = state.layout
    return BalanceResidual(gp[lay.ns], gq[lay.pq], gp[case.swing_buses], lay)


def eval_jacobian(state: SystemState, case: CaseModel, J: sp.csr_matrix | None = None):
    """Free-state Jacobian ``DF`` (csc) and swing-row gradients ``DF0`` (dense)."""
    _check(state, case)
    if J is None:
        J = full_jacobian(state, case)
    lay = state.layout
    Jr = J[lay.free]
    DF = Jr[:, lay.free].tocsc()
    DF0 = J[case.swing_buses][:, lay.free].toarray()
    return DF, DF0


@dataclass(eq=False)
class FlowValues:
    G: np.ndarray
    DG: np.ndarray  # (n_fc, nfree)


def eval_flow_constraints(state: SystemState, case: CaseModel, rows=None) -> FlowValues:
    """Directed sums of from-end active flows and their free-state gradients."""
    _check(state, case)
    net = hour_network(case, state.hour)
    lay = state.layout
    nfc = len(case.flow_constraints)
    row, br, sign = case.flow_terms
    if rows is not None:
        rows = np.asarray(rows, dtype=np.int64)
    if nfc == 0:
        return FlowValues(np.zeros(0), np.zeros((0, lay.nfree)))
    fl = kernels.flows(net.K, net.f, net.t, state.theta, state.vm)
    G = np.bincount(row, sign * fl[0, br], nfc)
    gr = kernels.flow_grads(net.K, net.f, net.t, state.theta, state.vm)[0]  # (4 vars, m)
    n = case.n_bus
    f, t = net.f[br], net.t[br]
    cols = np.stack([f, t, n + f, n + t])
    vals = sign * gr[:, br]
    DGfull = sp.csr_matrix((vals.ravel(), (np.tile(row, 4), cols.ravel())), shape=(nfc, 2 * n))
    DG = DGfull[:, lay.free].toarray()
    if rows is not None:
        return FlowValues(G[rows], DG[rows])
    return FlowValues(G, DG)


@dataclass(eq=False)
class LossInfo:
    total: float
    per_island: np.ndarray
    d_active: np.ndarray    # dLoss/dP_inj per bus (zero at swing buses)
    d_reactive: np.ndarray  # dLoss/dQ_inj per bus (zero where Q is not a free row)


def loss_and_gradients(state: SystemState, case: CaseModel, lu=None, J=None) -> LossInfo:
    """Total active loss and its gradient w.r.t. nodal injections (swing absorbs).

    Loss is the sum of all injections, i.e. series I^2 r plus shunt conductance.
    One adjoint solve with ``DF'``.
    """
    _check(state, case)
    P, _ = injections(state, case)
    per_island = np.bincount(case.bus_island, P, len(case.island_ids))
    if J is None:
        J = full_jacobian(state, case)
    lay = state.layout
    n = case.n_bus
    dL_dy = np.asarray(J[:n].sum(axis=0)).ravel()[lay.free]
    if lu is None:
        DF, _ = eval_jacobian(state, case, J)
        try:
            lu = factorize(DF)
        except NumericallySingular as exc:
            raise SingularJacobian(str(exc)) from None
    w = lu.solve_t(dL_dy) if lay.nfree else np.zeros(0)
    d_active = np.zeros(n)
    d_reactive = np.zeros(n)
    d_active[lay.ns] = w[: lay.ns.size]
    d_reactive[lay.pq] = w[lay.ns.size:]
    return LossInfo(float(P.sum()), per_island, d_active, d_reactive)


def hessian_matrix(state: SystemState, case: CaseModel, lam_p, lam_q, sigma=None) -> sp.csr_matrix:
    """Free-state Hessian of ``sum lam_p P + sum lam_q Q + sum sigma G``.

    ``lam_p`` and ``lam_q`` are full-bus arrays; the swing entry of ``lam_p``
    carries the swing-row multiplier.
    """
    _check(state, case)
    lam_p = np.asarray(lam_p, dtype=float)
    lam_q = np.asarray(lam_q, dtype=float)
    n = case.n_bus
    if lam_p.shape != (n,) or lam_q.shape != (n,):
        raise DimensionMismatch("multipliers must be full-bus arrays")
    net = hour_network(case, state.hour)
    w = np.stack([lam_p[net.f], lam_q[net.f], lam_p[net.t], lam_q[net.t]])
    if sigma is not None and len(case.flow_constraints):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (len(case.flow_constraints),):
            raise DimensionMismatch("sigma must have one entry per flow constraint")
        row, br, sign = case.flow_terms
        w[0] += np.bincount(br, sign * sigma[row], net.f.size)
    w = np.ascontiguousarray(w)
    hb = kernels.weighted_hessian(net.K, net.f, net.t, state.theta, state.vm, w)
    rows, cols = net.hess_pattern
    g_sh, b_sh = case.shunts
    diag = n + np.arange(n)
    rows = np.concatenate([rows, diag])
    cols = np.concatenate([cols, diag])
    vals = np.concatenate([hb.ravel(), 2.0 * g_sh * lam_p - 2.0 * b_sh * lam_q])
    H = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n))
    H.sum_duplicates()
    lay = state.layout
    return H[lay.free][:, lay.free].tocsr()


def constraint_hessian_apply(state: SystemState, case: CaseModel, lam_p, lam_q, sigma, v):
    H = hessian_matrix(state, case, lam_p, lam_q, sigma)
    v = np.asarray(v, dtype=float)
    if v.shape[0] != H.shape[0]:
        raise DimensionMismatch(f"vector has {v.shape[0]} rows, Hessian is {H.shape}")
    return H @ v


def reactive_generation(state: SystemState, case: CaseModel) -> np.ndarray:
    _, Q = injections(state, case)
    return Q + case.q_load[state.hour]


@dataclass(frozen=True)
class SwitchEvent:
    hour: int
    bus: str
    new_kind: str
    q: float
    v: float


def pv_pq_switch(state: SystemState, case: CaseModel):
    """Apply reactive-limit switching; returns (new state, change count, events)."""
    _check(state, case)
    qgen = reactive_generation(state, case)
    qmin, qmax = case.q_limits
    vset = case.v_set
    new = state.copy()
    events = []
    for i in np.flatnonzero(case.kind == PV):
        if state.kind[i] == PV:
            if qgen[i] > qmax[i] + Q_LIMIT_TOL:
                new.kind[i], new.q_pin[i] = PQ, qmax[i]
            elif qgen[i] < qmin[i] - Q_LIMIT_TOL:
                new.kind[i], new.q_pin[i] = PQ, qmin[i]
            else:
                continue
            events.append(SwitchEvent(state.hour, case.buses[i].id, "PQ", float(new.q_pin[i]), float(state.vm[i])))
        else:
            at_max = state.q_pin[i] == qmax[i]
            released = (state.vm[i] > vset[i] + PV_HYSTERESIS) if at_max else (state.vm[i] < vset[i] - PV_HYSTERESIS)
            if released:
                new.kind[i], new.q_pin[i], new.vm[i] = PV, np.nan, vset[i]
                events.append(SwitchEvent(state.hour, case.buses[i].id, "PV", float(qgen[i]), float(state.vm[i])))
    if events:
        new.__dict__.pop("layout", None)
    return new, len(events), events


def newton_polish(case: CaseModel, x: np.ndarray, state: SystemState, tol: float = 1e-10,
                  max_iter: int = 50, prior=None):
    """Newton on the non-swing balance rows at fixed typing and fixed ``x``."""
    s = state
    tok = prior
    for it in range(max_iter + 1):
        res = eval_balance(s, case, x)
        g = res.vector
        err = float(np.max(np.abs(g))) if g.size else 0.0
        if not np.isfinite(err):
            raise NonConvergence(f"power flow diverged at hour {s.hour}")
        if err <= tol:
            return s, it, tok
        if it == max_iter:
            break
        DF, _ = eval_jacobian(s, case)
        try:
            lu = factorize(DF, tok)
        except NumericallySingular as exc:
            raise SingularJacobian(f"hour {s.hour}: {exc}") from None
        tok = lu.token
        s = s.step(lu.solve(g))
        if np.any(s.vm <= 0) or not np.all(np.isfinite(s.vm)):
            raise NonConvergence(f"power flow left the solvability region at hour {s.hour}")
    raise NonConvergence(f"power flow did not converge in {max_iter} iterations at hour {s.hour} "
                         f"(mismatch {err:.3e})")


def newton_power_flow(case: CaseModel, hour: int, x: np.ndarray, start: SystemState | None = None,
                      tol: float = 1e-8, max_iter: int = 50, switching: bool = True,
                      max_switch_rounds: int = 20) -> SystemState:
    """Solve the non-swing balance rows for the state, with PV-PQ switching between passes."""
    s = flat_state(case, hour) if start is None else start.copy()
    for _ in range(max_switch_rounds):
        s, _, _ = newton_polish(case, x, s, tol=tol, max_iter=max_iter)
        if not switching:
            return s
        s2, changes, _ = pv_pq_switch(s, case)
        if changes == 0:
            return s
        s = s2
    raise NonConvergence(f"PV-PQ switching did not settle at hour {hour}")
