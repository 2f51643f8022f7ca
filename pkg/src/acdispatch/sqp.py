"""Reduced-space SQP driver for multi-period AC dispatch.

Each iteration linearizes the balance and flow equations per hour, eliminates
the states through the LU factors of the power-flow Jacobian, solves one joint
convex QP over all hours and takes a two-phase line search step with the
states re-solved by Newton polish.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import acpf, reduction
from .errors import (NonConvergence, NumericallySingular, SingularJacobian, SolvabilityBoundary,
                     StepFailure, ValidationError)
from .netmodel import SWING, CaseModel, bid_incidence, validate_case
from .qpsolve import ReducedQP, QPSolution, solve_qp

log = logging.getLogger(__name__)

ALPHAS = tuple(2.0 ** -k for k in range(11))


@dataclass
class SolverOptions:
    tol_feas: float = 1e-6       # p.u. power
    tol_opt: float = 0.01        # currency/MWh
    max_iter: int = 50
    lambda0_rule: str = "median"
    workers: int = 1
    tol_step: float = 1e-6       # p.u., extra guard on the final step size
    active_band: float = 1e-4    # p.u.
    polish_tol: float = 1e-11

    def __post_init__(self):
        if not (self.tol_feas > 0 and self.tol_opt >= 0 and self.tol_step > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.workers < 1:
            raise ValueError("max_iter and workers must be at least 1")
        if self.lambda0_rule not in ("median", "mean", "max"):
            raise ValueError(f"unknown lambda0 rule {self.lambda0_rule!r}")


@dataclass(eq=False)
class HourBlocks:
    """Per-hour linearization at the current iterate."""

    hour: int
    g: np.ndarray            # free balance rows
    g0: np.ndarray           # swing rows, one per island
    feas: float              # balance inf-norm (all rows)
    G: np.ndarray            # all flow-constraint values
    active: tuple            # extended active set after this evaluation
    L0: np.ndarray           # (n_island, n_bid)
    rL: np.ndarray
    S: np.ndarray            # (n_active, n_bid)
    rS: np.ndarray
    H: np.ndarray            # PSD-projected reduced Hessian (n_bid, n_bid)
    H_raw_min: float
    c_tilde: np.ndarray
    lam_p: np.ndarray        # full-bus active prices from the multiplier reconstruction
    lam_q: np.ndarray
    L0_bus: np.ndarray       # bus loss coefficients (1 - dLoss/dP_inj)
    S_bus: np.ndarray        # (n_active, n_bus) PTDF over bus injections
    token: object
    pivots: np.ndarray       # |U_kk| per free state column
    solves: int


@dataclass(eq=False)
class Iterate:
    x: np.ndarray                    # (T, n_bid) p.u.
    states: list                     # SystemState per hour
    lam0: np.ndarray                 # (T, n_island)
    lam_p: np.ndarray                # (T, n_bus)
    lam_q: np.ndarray
    sigma: np.ndarray                # (T, n_flow), zero outside the active set
    pi: np.ndarray                   # (T, n_bid)
    mu: np.ndarray                   # intertemporal duals
    active: list                     # per hour tuple of flow rows
    tokens: list
    k: int = 0
    feas: float = np.inf
    stat: float = np.inf
    frozen: bool = False


@dataclass(eq=False)
class DispatchSolution:
    case: CaseModel
    x: np.ndarray
    states: list
    lam0: np.ndarray
    lam_p: np.ndarray
    lam_q: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray
    mu: np.ndarray
    L0_bus: np.ndarray               # (T, n_bus)
    S_bus: list                      # per hour (n_active, n_bus)
    active: list
    converged: bool
    report: dict
    qp: ReducedQP | None = None
    qp_solution: QPSolution | None = None
    it_rows: tuple = ()

    @property
    def cost(self) -> float:
        """Bid cost in currency per hour-p.u. summed over the session (multiply by base_mva for currency)."""
        return float(np.sum(self.case.price * self.x))

    @property
    def schedule_mw(self) -> np.ndarray:
        return self.x * self.case.base_mva


# ---------------------------------------------------------------------------
# incidence helpers


@dataclass(eq=False)
class _HourMaps:
    B: sp.csr_matrix        # free rows x bids
    B0: np.ndarray          # islands x bids
    Bg: sp.csc_matrix       # free rows x groups
    E: sp.csr_matrix        # bids x groups


def _hour_maps(case: CaseModel, layout: acpf.Layout) -> _HourMaps:
    inc = bid_incidence(case)
    nb = case.n_bid
    pos = layout.pos[case.bid_bus]
    live = pos >= 0
    B = sp.csr_matrix((np.ones(live.sum()), (pos[live], np.flatnonzero(live))), shape=(layout.nfree, nb))
    B0 = np.zeros((len(case.island_ids), nb))
    for k, sw in enumerate(case.swing_buses):
        B0[k, case.bid_bus == sw] = 1.0
    gpos = layout.pos[inc.group_bus] if inc.n_groups else np.zeros(0, dtype=np.int64)
    glive = gpos >= 0
    Bg = sp.csc_matrix((np.ones(glive.sum()), (gpos[glive], np.flatnonzero(glive))),
                       shape=(layout.nfree, inc.n_groups))
    E = sp.csr_matrix((np.ones(nb), (np.arange(nb), inc.group_of_bid)), shape=(nb, inc.n_groups))
    return _HourMaps(B, B0, Bg, E)


def _bus_of_free(case: CaseModel, layout: acpf.Layout, cols) -> list:
    n = case.n_bus
    return [case.buses[int(layout.free[c]) % n].id for c in cols]


def _factor(case: CaseModel, state: acpf.SystemState, DF, token):
    try:
        return reduction.factorize(DF, token)
    except NumericallySingular as exc:
        lay = state.layout
        buses = _bus_of_free(case, lay, exc.rows)
        isl = sorted({case.buses[case.bus_index[b]].island for b in buses})
        raise SolvabilityBoundary(f"hour {state.hour}: Jacobian numerically singular ({exc})",
                                  hour=state.hour, island=",".join(isl), buses=tuple(buses)) from None


# ---------------------------------------------------------------------------
# per-hour tasks (pure functions of their arguments)


def assemble_hour(case: CaseModel, state: acpf.SystemState, x_t, lam0_t, sigma_t, active_t,
                  token, band: float) -> HourBlocks:
    """Linearize one hour: residuals, reduced gradients, reduced Hessian and cost."""
    h = state.hour
    lay = state.layout
    n = case.n_bus
    res = acpf.eval_balance(state, case, x_t)
    J = acpf.full_jacobian(state, case)
    DF, DF0 = acpf.eval_jacobian(state, case, J)
    lu = _factor(case, state, DF, token)
    maps = _hour_maps(case, lay)

    fv = acpf.eval_flow_constraints(state, case)
    limits = case.flow_limits[h]
    newly = np.flatnonzero(fv.G >= limits - band) if fv.G.size else np.zeros(0, dtype=np.int64)
    active = tuple(sorted(set(active_t) | set(int(j) for j in newly)))
    rows = np.array(active, dtype=np.int64)
    DGa = fv.DG[rows] if rows.size else np.zeros((0, lay.nfree))

    # multipliers on the free balance rows: lam' DF + lam0 DF0 + sigma DG = 0
    rhs = DF0.T @ lam0_t
    if fv.G.size:
        rhs = rhs + fv.DG.T @ sigma_t
    lam_free = -lu.solve_t(rhs) if lay.nfree else np.zeros(0)
    lam_p = np.zeros(n)
    lam_q = np.zeros(n)
    lam_p[lay.ns] = lam_free[: lay.ns.size]
    lam_q[lay.pq] = lam_free[lay.ns.size:]
    lam_p[case.swing_buses] = lam0_t

    Hs = acpf.hessian_matrix(state, case, lam_p, lam_q, sigma_t if fv.G.size else None)

    def happly(v):
        return Hs @ v

    # adjoint solves give bus-level coefficients; bid-level rows follow by incidence
    u0 = lu.solve_t(DF0.T) if lay.nfree else np.zeros((0, DF0.shape[0]))
    ug = lu.solve_t(DGa.T) if rows.size else np.zeros((lay.nfree, 0))
    L0 = maps.B0 - (maps.B.T @ u0).T
    S = (maps.B.T @ ug).T if rows.size else np.zeros((0, case.n_bid))
    L0_bus = np.ones(n)
    S_bus = np.zeros((rows.size, n))
    isl = case.bus_island
    ns = lay.ns
    L0_bus[ns] = -u0[np.arange(ns.size), isl[ns]]
    if rows.size:
        S_bus[:, ns] = ug[: ns.size].T

    g = res.vector
    rL = -res.swing + (DF0 @ lu.solve(g) if lay.nfree else 0.0)
    rS = limits[rows] - fv.G[rows] - (DGa @ lu.solve(g) if rows.size else 0.0)
    Hraw = reduction.reduced_hessian(lu, maps.Bg, maps.E, happly)
    w = np.linalg.eigvalsh(0.5 * (Hraw + Hraw.T)) if Hraw.size else np.zeros(1)
    Hp = reduction.psd_project(Hraw)
    ct = reduction.reduced_cost(case.price[h], g, lu, happly, maps.B)
    return HourBlocks(hour=h, g=g, g0=res.swing, feas=res.inf_norm(), G=fv.G, active=active,
                      L0=L0, rL=np.atleast_1d(rL).astype(float), S=S, rS=np.atleast_1d(rS).astype(float),
                      H=Hp, H_raw_min=float(w[0]), c_tilde=np.asarray(ct, dtype=float).ravel(),
                      lam_p=lam_p, lam_q=lam_q, L0_bus=L0_bus, S_bus=S_bus, token=lu.token,
                      pivots=reduction.pivot_growth(lu), solves=lu.solves)


@dataclass(eq=False)
class Trial:
    alpha: float
    state: acpf.SystemState | None
    l1: float = np.inf
    l2sq: float = np.inf
    flow_excess: float = np.inf


def trial_hour(case: CaseModel, state: acpf.SystemState, x_t, dx_t, token, alphas, polish_tol):
    """States and residual measures along ``x + alpha dx`` for one hour."""
    res = acpf.eval_balance(state, case, x_t)
    DF, _ = acpf.eval_jacobian(state, case)
    lu = _factor(case, state, DF, token)
    maps = _hour_maps(case, state.layout)
    dy = lu.solve(res.vector + maps.B @ dx_t) if state.layout.nfree else np.zeros(0)
    limits = case.flow_limits[state.hour]
    out = []
    for a in alphas:
        xa = x_t + a * dx_t
        try:
            s, _, _ = acpf.newton_polish(case, xa, state.step(dy, a), tol=polish_tol, max_iter=20,
                                         prior=lu.token)
        except (NonConvergence, SingularJacobian):
            out.append(Trial(a, None))
            continue
        r = acpf.eval_balance(s, case, xa).all
        G = acpf.eval_flow_constraints(s, case).G
        exc = float(np.maximum(G - limits, 0).sum()) if G.size else 0.0
        out.append(Trial(a, s, float(np.abs(r).sum()), float(r @ r), exc))
    return out


def settle_hour(case: CaseModel, state: acpf.SystemState, x_t, polish_tol, switching: bool):
    """PV-PQ switching after an accepted step, followed by a re-polish at fixed x."""
    if not switching:
        return state, []
    new, count, events = acpf.pv_pq_switch(state, case)
    if count == 0:
        return state, []
    try:
        new, _, _ = acpf.newton_polish(case, x_t, new, tol=polish_tol, max_iter=30)
    except (NonConvergence, SingularJacobian):
        log.info("re-polish after switching failed at hour %d; keeping the switched state", state.hour)
    return new, events


# ---------------------------------------------------------------------------
# worker plumbing

_WORKER_CASE = None


def _worker_init(case):
    global _WORKER_CASE
    _WORKER_CASE = case


def _call(fn, args):
    return fn(_WORKER_CASE, *args)


class _Runner:
    """Maps per-hour tasks either in-process or over a process pool."""

    def __init__(self, case: CaseModel, workers: int):
        self.case = case
        self.pool = None
        if workers > 1:
            self.pool = ProcessPoolExecutor(max_workers=workers, initializer=_worker_init, initargs=(case,))

    def map(self, fn, arglist):
        if self.pool is None:
            return [fn(self.case, *a) for a in arglist]
        futs = [self.pool.submit(_call, fn, a) for a in arglist]
        return [f.result() for f in futs]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()
            self.pool = None


# ---------------------------------------------------------------------------
# intertemporal rows


def intertemporal_rows(case: CaseModel):
    """Ramp and energy-group rows ``IT x <= b`` over the hour-major bid vector."""
    T, nb = case.T, case.n_bid
    rows, rhs, labels = [], [], []
    for i, bid in enumerate(case.bids):
        for t in range(T):
            if t == 0 and bid.p_initial is None:
                continue
            for sign, lim, name in ((1.0, bid.ramp_up, "ramp_up"), (-1.0, bid.ramp_down, "ramp_down")):
                if not np.isfinite(lim):
                    continue
                a = np.zeros(T * nb)
                a[t * nb + i] = sign
                b = lim
                if t == 0:
                    b = lim + sign * bid.p_initial
                else:
                    a[(t - 1) * nb + i] = -sign
                rows.append(a)
                rhs.append(b)
                labels.append(f"{name} {bid.id} hour {t}")
    for grp in case.energy_groups:
        a = np.zeros(T * nb)
        for m in grp.members:
            i = case.bid_index[m]
            a[i::nb] = 1.0
        if np.isfinite(grp.e_max):
            rows.append(a.copy())
            rhs.append(grp.e_max)
            labels.append(f"energy_max {grp.id}")
        if np.isfinite(grp.e_min):
            rows.append(-a)
            rhs.append(-grp.e_min)
            labels.append(f"energy_min {grp.id}")
    IT = np.array(rows) if rows else np.zeros((0, T * nb))
    return IT, np.array(rhs, dtype=float), tuple(labels)


# ---------------------------------------------------------------------------
# driver operations


def _lambda0_proxy(case: CaseModel, rule: str) -> float:
    p = case.price.ravel()
    if p.size == 0:
        return 1.0
    val = {"median": np.median, "mean": np.mean, "max": np.max}[rule](p)
    return float(val) if val > 0 else float(max(np.abs(p).max(), 1.0))


def flat_start(case: CaseModel, opts: SolverOptions | None = None) -> Iterate:
    opts = opts or SolverOptions()
    T, nb = case.T, case.n_bid
    p0 = np.array([b.p_initial if b.p_initial is not None else 0.0 for b in case.bids])
    x = np.clip(np.broadcast_to(p0, (T, nb)), case.lb, case.ub).astype(float)
    n_isl = len(case.island_ids)
    lam0 = np.full((T, n_isl), _lambda0_proxy(case, opts.lambda0_rule))
    nfc = len(case.flow_constraints)
    return Iterate(x=x, states=[acpf.flat_state(case, t) for t in range(T)], lam0=lam0,
                   lam_p=np.zeros((T, case.n_bus)), lam_q=np.zeros((T, case.n_bus)),
                   sigma=np.zeros((T, nfc)), pi=np.zeros((T, nb)), mu=np.zeros(0),
                   active=[() for _ in range(T)], tokens=[None] * T)


def manage_active_set(previous: tuple, G: np.ndarray, limits: np.ndarray, band: float = 1e-4) -> tuple:
    """Previous set plus every row within ``band`` of its limit; rows never leave."""
    newly = np.flatnonzero(np.asarray(G) >= np.asarray(limits) - band)
    return tuple(sorted(set(previous) | set(int(j) for j in newly)))


def assemble_subproblem(it: Iterate, case: CaseModel, opts: SolverOptions | None = None,
                        runner: _Runner | None = None, IT=None):
    """Per-hour blocks and the joint reduced QP at the current iterate."""
    opts = opts or SolverOptions()
    own = runner is None
    runner = runner or _Runner(case, 1)
    try:
        args = [(it.states[t], it.x[t], it.lam0[t], it.sigma[t], it.active[t], it.tokens[t], opts.active_band)
                for t in range(case.T)]
        blocks = runner.map(assemble_hour, args)
    finally:
        if own:
            runner.close()
    if IT is None:
        IT = intertemporal_rows(case)
    ITm, itb, labels = IT
    xr = it.x.ravel()
    qp = ReducedQP(H=[b.H for b in blocks], c=np.array([b.c_tilde for b in blocks]),
                   L0=[b.L0 for b in blocks], rL=[b.rL for b in blocks],
                   S=[b.S for b in blocks], rS=[b.rS for b in blocks],
                   IT=ITm, rIT=itb - ITm @ xr if itb.size else np.zeros(0),
                   lo=case.lb - it.x, hi=case.ub - it.x,
                   S_labels=[[case.flow_constraints[j].id for j in b.active] for b in blocks],
                   IT_labels=list(labels))
    return qp, blocks


def _feasibility(case: CaseModel, x, blocks, IT) -> float:
    ITm, itb, _ = IT
    parts = [max((b.feas for b in blocks), default=0.0)]
    for b in blocks:
        if b.G.size:
            parts.append(float(np.maximum(b.G - case.flow_limits[b.hour], 0).max()))
    if itb.size:
        parts.append(float(np.maximum(ITm @ x.ravel() - itb, 0).max()))
    parts.append(float(np.maximum(case.lb - x, 0).max(initial=0.0)))
    parts.append(float(np.maximum(x - case.ub, 0).max(initial=0.0)))
    return max(parts)


def equilibrium_residual(case: CaseModel, qp: ReducedQP, sol: QPSolution) -> np.ndarray:
    """Per bid-hour ``c + pi - L0' lam0 + S' sigma`` with the QP duals."""
    out = np.empty_like(qp.c)
    for t in range(case.T):
        out[t] = (case.price[t] + sol.pi[t] - qp.L0[t].T @ sol.lam0[t]
                  + (qp.S[t].T @ sol.sigma[t] if sol.sigma[t].size else 0.0))
    return out


def check_convergence(it: Iterate, qp: ReducedQP, sol: QPSolution, case: CaseModel, opts: SolverOptions,
                      feas: float):
    """Status string plus the measured errors for the subproblem at the current iterate."""
    hdx = max(float(np.abs(qp.H[t] @ sol.dx[t]).max(initial=0.0)) for t in range(case.T))
    eq21 = float(np.abs(equilibrium_residual(case, qp, sol)).max(initial=0.0))
    step = float(np.abs(sol.dx).max(initial=0.0))
    errs = {"feasibility": feas, "hdx": hdx, "equilibrium": eq21, "step": step}
    if feas <= opts.tol_feas and hdx <= opts.tol_opt and eq21 <= opts.tol_opt and step <= opts.tol_step:
        return "converged", errs
    return "iterate", errs


def _merit_terms(case, x, trials_by_hour, j, IT):
    l1 = sum(tr[j].l1 for tr in trials_by_hour)
    l2 = sum(tr[j].l2sq for tr in trials_by_hour)
    fx = sum(tr[j].flow_excess for tr in trials_by_hour)
    ITm, itb, _ = IT
    itx = float(np.maximum(ITm @ x.ravel() - itb, 0).sum()) if itb.size else 0.0
    return l1, l2, fx, itx


def line_search(it: Iterate, sol: QPSolution, case: CaseModel, opts: SolverOptions, runner: _Runner,
                IT, feas: float, blocks):
    """Choose alpha on the halving grid; returns (alpha, states, info)."""
    T = case.T
    args = [(it.states[t], it.x[t], sol.dx[t], blocks[t].token, ALPHAS, opts.polish_tol) for t in range(T)]
    trials = runner.map(trial_hour, args)
    phase = 1 if feas > 10.0 * opts.tol_feas else 2
    duals = [np.abs(it.lam_p).max(initial=0.0), np.abs(it.lam_q).max(initial=0.0)]
    duals += [np.abs(np.asarray(l)).max(initial=0.0) for l in sol.lam0]
    rho = 2.0 * max(duals)
    cur_l1 = sum(float(np.abs(np.concatenate([b.g, b.g0])).sum()) for b in blocks)
    cur_l2 = sum(float(np.concatenate([b.g, b.g0]) @ np.concatenate([b.g, b.g0])) for b in blocks)
    cur_fx = sum(float(np.maximum(b.G - case.flow_limits[b.hour], 0).sum()) for b in blocks if b.G.size)
    ITm, itb, _ = IT
    cur_it = float(np.maximum(ITm @ it.x.ravel() - itb, 0).sum()) if itb.size else 0.0
    cost0 = float(np.sum(case.price * it.x))
    if phase == 1:
        m0 = np.sqrt(cur_l2)
    else:
        m0 = cost0 + rho * (cur_l1 + cur_fx + cur_it)
    best, best_m = -1, np.inf
    merits = []
    for j, a in enumerate(ALPHAS):
        if any(tr[j].state is None for tr in trials):
            merits.append(np.inf)
            continue
        xa = it.x + a * sol.dx
        l1, l2, fx, itx = _merit_terms(case, xa, trials, j, IT)
        m = np.sqrt(l2) if phase == 1 else float(np.sum(case.price * xa)) + rho * (l1 + fx + itx)
        merits.append(m)
        if m < best_m:
            best, best_m = j, m
    slack = 1e-12 * max(1.0, abs(m0))
    if best < 0 or best_m > m0 + slack:
        weak = _weak_locations(case, it, blocks)
        raise StepFailure(f"no step size improves the phase-{phase} merit (current {m0:.6e}, best "
                          f"{best_m:.6e})", weak_locations=weak)
    a = ALPHAS[best]
    info = {"phase": phase, "alpha": a, "merit0": m0, "merit": best_m, "rho": rho, "merits": merits}
    return a, [trials[t][best].state for t in range(T)], info


def update_iterate(it: Iterate, alpha: float, sol: QPSolution, states, case: CaseModel,
                   opts: SolverOptions, runner: _Runner, tokens):
    """Primal step with the line-search states, PV-PQ switching, full dual step."""
    x = it.x + alpha * sol.dx
    x = np.minimum(np.maximum(x, case.lb), case.ub)
    results = runner.map(settle_hour, [(states[t], x[t], opts.polish_tol, not it.frozen)
                                       for t in range(case.T)])
    sigma = np.zeros_like(it.sigma)
    for t in range(case.T):
        if len(it.active[t]):
            sigma[t, list(it.active[t])] = sol.sigma[t]
    nxt = Iterate(x=x, states=[r[0] for r in results], lam0=np.array([np.asarray(l) for l in sol.lam0]),
                  lam_p=it.lam_p, lam_q=it.lam_q, sigma=sigma, pi=sol.pi.copy(), mu=sol.mu.copy(),
                  active=list(it.active), tokens=list(tokens), k=it.k + 1, frozen=it.frozen)
    events = [e for r in results for e in r[1]]
    return nxt, events


def _weak_locations(case: CaseModel, it: Iterate, blocks, top: int = 5):
    out = []
    for b in blocks:
        lay = it.states[b.hour].layout
        order = np.argsort(b.pivots)[:top]
        for c in order:
            bus = case.buses[int(lay.free[c]) % case.n_bus]
            out.append((b.hour, bus.island, bus.id, float(b.pivots[c])))
    out.sort(key=lambda r: r[3])
    return out[:top]


def solve_dispatch(case: CaseModel, opts: SolverOptions | None = None) -> DispatchSolution:
    """Run the SQP loop from a flat start; raises NonConvergence with a weak-location report."""
    opts = opts or SolverOptions()
    rep = validate_case(case)
    if not rep.ok:
        raise ValidationError(rep.violations)
    IT = intertemporal_rows(case)
    it = flat_start(case, opts)
    runner = _Runner(case, opts.workers)
    history = {"iterations": [], "active_sets": [], "switches": [], "merit": []}
    t0 = time.perf_counter()
    converged = False
    blocks = qp = sol = None
    try:
        while True:
            qp, blocks = assemble_subproblem(it, case, opts, runner, IT)
            it.active = [b.active for b in blocks]
            it.lam_p = np.array([b.lam_p for b in blocks])
            it.lam_q = np.array([b.lam_q for b in blocks])
            feas = _feasibility(case, it.x, blocks, IT)
            history["active_sets"].append([list(a) for a in it.active])
            sol = solve_qp(qp)
            status, errs = check_convergence(it, qp, sol, case, opts, feas)
            it.feas, it.stat = feas, errs["equilibrium"]
            rec = {"k": it.k, **errs, "qp_status": sol.status, "qp_iterations": sol.iterations,
                   "switching_frozen": it.frozen}
            history["iterations"].append(rec)
            log.info("iter %d feas %.3e hdx %.3e eq %.3e step %.3e", it.k, feas, errs["hdx"],
                     errs["equilibrium"], errs["step"])
            if status == "converged":
                # final full step onto the QP solution, states polished at the new x
                alpha, states, info = 1.0, None, {"phase": 2, "alpha": 1.0}
                trials = runner.map(trial_hour, [(it.states[t], it.x[t], sol.dx[t], blocks[t].token,
                                                  (1.0,), opts.polish_tol) for t in range(case.T)])
                if all(tr[0].state is not None for tr in trials):
                    states = [tr[0].state for tr in trials]
                    fin = it
                    fin.frozen = True
                    it, _ = update_iterate(fin, 1.0, sol, states, case, opts, runner,
                                           [b.token for b in blocks])
                    rec["final_step"] = True
                    converged = True
                    break
            if it.k >= opts.max_iter:
                break
            alpha, states, info = line_search(it, sol, case, opts, runner, IT, feas, blocks)
            rec.update(alpha=alpha, phase=info["phase"], merit=info["merit"])
            history["merit"].append((info["phase"], info["merit0"], info["merit"]))
            it, events = update_iterate(it, alpha, sol, states, case, opts, runner,
                                        [b.token for b in blocks])
            history["switches"].extend(events)
            if not it.frozen and feas <= 10.0 * opts.tol_feas:
                it.frozen = True
        # final evaluation at the returned point: prices and residuals
        fqp, fblocks = assemble_subproblem(it, case, opts, runner, IT)
    finally:
        runner.close()
    it.active = [b.active for b in fblocks]
    ffeas = _feasibility(case, it.x, fblocks, IT)
    history["active_sets"].append([list(a) for a in it.active])
    elapsed = time.perf_counter() - t0
    sigma_act = [it.sigma[t, list(fblocks[t].active)] if fblocks[t].active else np.zeros(0)
                 for t in range(case.T)]
    report = {
        "converged": converged,
        "iterations": it.k,
        "final_feasibility": ffeas,
        "final_equilibrium": history["iterations"][-1]["equilibrium"],
        "final_hdx": history["iterations"][-1]["hdx"],
        "elapsed_s": elapsed,
        "workers": opts.workers,
        "history": history["iterations"],
        "active_sets": history["active_sets"],
        "switches": history["switches"],
        "merit": history["merit"],
        "weak_locations": _weak_locations(case, it, fblocks),
        "max_active_per_hour": max((len(a) for a in it.active), default=0),
    }
    if report["max_active_per_hour"] > 20:
        log.warning("extended active set reached %d rows in one hour", report["max_active_per_hour"])
    out = DispatchSolution(case=case, x=it.x, states=it.states, lam0=it.lam0,
                           lam_p=np.array([b.lam_p for b in fblocks]),
                           lam_q=np.array([b.lam_q for b in fblocks]), sigma=it.sigma, pi=it.pi, mu=it.mu,
                           L0_bus=np.array([b.L0_bus for b in fblocks]),
                           S_bus=[b.S_bus for b in fblocks], active=it.active, converged=converged,
                           report=report, qp=qp, qp_solution=sol, it_rows=IT[2])
    if not converged:
        weak = report["weak_locations"]
        msg = (f"SQP did not converge in {opts.max_iter} iterations (feasibility {ffeas:.3e}, "
               f"equilibrium {report['final_equilibrium']:.3e}); weakest locations: "
               + ", ".join(f"hour {h} island {i} bus {b}" for h, i, b, _ in weak))
        raise NonConvergence(msg, report=out)
    return out
