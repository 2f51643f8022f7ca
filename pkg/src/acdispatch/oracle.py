"""Brute-force reference solver for small cases.

Bid volumes are enumerated on a grid (zoomed around the incumbent until the
cell width reaches ``resolution``); every grid point is checked with an
independent batched power flow written in complex-voltage form.  Bids at an
island's swing bus absorb the balance in merit order, which is exact for a
linear cost.  Intended for cases with at most four buses and three hours.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GridTooLarge, NoFeasiblePoint
from .netmodel import PQ, PV, SWING, CaseModel, build_admittance, with_demand

log = logging.getLogger(__name__)

MAX_POINTS = 10_000_000
MAX_BUSES = 4
MAX_HOURS = 3


@dataclass
class OracleResult:
    x: np.ndarray                 # (T, n_bid) p.u.
    cost: float                   # sum of price * x (currency/MWh * p.u.)
    prices: dict = field(default_factory=dict)   # (bus id, hour) -> FD price
    active: list = field(default_factory=list)
    levels: int = 0
    evaluations: int = 0
    resolution: float = 0.0


# ---------------------------------------------------------------------------
# batched power flow on one island-hour


@dataclass(eq=False)
class _Block:
    hour: int
    buses: np.ndarray        # case bus indices of the island
    sw: int                  # local index of the swing bus
    Y: np.ndarray            # complex island admittance
    free_bids: np.ndarray    # bids whose volume is gridded
    slack_bids: np.ndarray   # bids at the swing bus, merit ordered
    others: np.ndarray       # local non-swing indices
    flow_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _blocks(case: CaseModel):
    out = []
    for h in range(case.T):
        adm = build_admittance(case, h)
        Yfull = adm.ybus.toarray()
        for k, idx in enumerate(adm.islands):
            sw_bus = case.swing_buses[k]
            sw = int(np.flatnonzero(idx == sw_bus)[0])
            in_isl = np.isin(case.bid_bus, idx)
            at_sw = case.bid_bus == sw_bus
            slack = np.flatnonzero(in_isl & at_sw)
            order = np.lexsort((slack, case.price[h, slack]))
            free = np.flatnonzero(in_isl & ~at_sw)
            rows = np.zeros(0, dtype=np.int64)
            if case.flow_constraints:
                row, br, _ = case.flow_terms
                f, _ = case.branch_ends
                rows = np.unique(row[np.isin(f[br], idx)]).astype(np.int64)
            out.append(_Block(h, idx, sw, Yfull[np.ix_(idx, idx)], free, slack[order],
                              np.array([i for i in range(idx.size) if i != sw], dtype=np.int64), rows))
    return out


def _injections(Y, V):
    I = V @ Y.T
    return V * np.conj(I)


def batch_power_flow(Y, sw, kind, vset, p_spec, q_spec, qmin, qmax, tol=1e-12, max_iter=40):
    """Solve many power flows sharing one network.

    ``p_spec``/``q_spec`` (N, m) are net specified injections (generation minus
    load) at every bus; swing entries are ignored.  PV buses that exceed their
    reactive limits are re-solved as PQ at the limit.  Returns complex voltages
    (N, m), a convergence mask and the final typing.
    """
    N, m = p_spec.shape
    ns = np.array([i for i in range(m) if i != sw], dtype=np.int64)
    kind = np.broadcast_to(kind, (N, m)).copy()
    qpin = np.zeros((N, m))
    vm = np.where(kind == PQ, 1.0, np.broadcast_to(vset, (N, m)))
    va = np.zeros((N, m))
    ok = np.ones(N, dtype=bool)
    for _ in range(10):
        ok, vm, va = _newton(Y, ns, kind, vset, p_spec, q_spec + qpin, vm, va, tol, max_iter)
        S = _injections(Y, vm * np.exp(1j * va))
        qg = S.imag - q_spec    # generation = injection + load
        changed = np.zeros(N, dtype=bool)
        for j in ns:
            pv = kind[:, j] == PV
            hi = pv & ok & (qg[:, j] > qmax[j] + 1e-10)
            lo = pv & ok & (qg[:, j] < qmin[j] - 1e-10)
            kind[hi | lo, j] = PQ
            qpin[hi, j] = qmax[j]
            qpin[lo, j] = qmin[j]
            changed |= hi | lo
        if not changed.any():
            break
    return vm * np.exp(1j * va), ok, kind


def _newton(Y, ns, kind, vset, p_spec, q_spec, vm, va, tol, max_iter):
    N, m = p_spec.shape
    k = ns.size
    vm, va = vm.copy(), va.copy()
    done = np.zeros(N, dtype=bool)
    vs = np.broadcast_to(vset, (N, m))
    for _ in range(max_iter):
        V = vm * np.exp(1j * va)
        S = _injections(Y, V)
        pv = kind[:, ns] == PV
        F = np.concatenate([p_spec[:, ns] - S.real[:, ns],
                            np.where(pv, vm[:, ns] - vs[:, ns], q_spec[:, ns] - S.imag[:, ns])], axis=1)
        err = np.abs(F).max(axis=1) if k else np.zeros(N)
        done = np.isfinite(err) & (err <= tol)
        live = ~done & np.isfinite(err)
        if not live.any():
            break
        V_l = V[live]
        I = V_l @ Y.T
        Vn = V_l / np.abs(V_l)
        # dS/dva = j diag(V) conj(diag(I) - Y diag(V)); dS/dvm = diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
        dS_dva = 1j * (V_l[:, :, None] * np.conj(I[:, :, None] * np.eye(m)[None] - Y[None] * V_l[:, None, :]))
        dS_dvm = (V_l[:, :, None] * np.conj(Y[None] * Vn[:, None, :])
                  + np.conj(I)[:, :, None] * np.eye(m)[None] * Vn[:, None, :])
        J = np.zeros((live.sum(), 2 * k, 2 * k))
        J[:, :k, :k] = dS_dva.real[:, ns][:, :, ns]
        J[:, :k, k:] = dS_dvm.real[:, ns][:, :, ns]
        Jq = np.concatenate([dS_dva.imag[:, ns][:, :, ns], dS_dvm.imag[:, ns][:, :, ns]], axis=2)
        Jv = np.concatenate([np.zeros((live.sum(), k, k)), np.broadcast_to(np.eye(k), (live.sum(), k, k))], axis=2)
        pvl = pv[live][:, :, None]
        # the residual for V rows is vm - vset, whose derivative is +1; flip sign to match the -dS convention
        J[:, k:, :] = np.where(pvl, -Jv, Jq)
        try:
            d = np.linalg.solve(J, F[live][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            d = np.full((live.sum(), 2 * k), np.nan)
            for r in range(live.sum()):
                try:
                    d[r] = np.linalg.solve(J[r], F[live][r])
                except np.linalg.LinAlgError:
                    pass
        va_l = va[live]
        vm_l = vm[live]
        va_l[:, ns] += d[:, :k]
        vm_l[:, ns] += d[:, k:]
        va[live] = va_l
        vm[live] = vm_l
        bad = ~np.isfinite(vm).all(axis=1) | (vm <= 0).any(axis=1)
        vm[bad] = np.nan
    V = vm * np.exp(1j * va)
    S = _injections(Y, V)
    pv = kind[:, ns] == PV
    F = np.concatenate([p_spec[:, ns] - S.real[:, ns],
                        np.where(pv, vm[:, ns] - vs[:, ns], q_spec[:, ns] - S.imag[:, ns])], axis=1)
    err = np.abs(F).max(axis=1) if k else np.zeros(N)
    ok = np.isfinite(err) & (err <= max(tol, 1e-10))
    return ok, vm, va


# ---------------------------------------------------------------------------
# candidate evaluation


def _branch_from_flow(case, hour, V_full):
    """Active power leaving the from end of every branch, (N, n_branch)."""
    f, t = case.branch_ends
    c = case.branch_coef
    on = case.branch_status[hour]
    yff = (c[0] + 1j * c[1]) * on
    yft = (c[2] + 1j * c[3]) * on
    If = yff * V_full[:, f] + yft * V_full[:, t]
    return (V_full[:, f] * np.conj(If)).real


def _block_physics(case: CaseModel, blk: _Block, X_free: np.ndarray):
    """Power flow for a batch of free volumes: (required swing generation, flows, converged).

    ``flows`` has one column per flow constraint touching the island.
    """
    h = blk.hour
    N = X_free.shape[0]
    idx = blk.buses
    m = idx.size
    pl = case.p_load[h, idx]
    ql = case.q_load[h, idx]
    gen = np.zeros((N, m))
    pos = {int(b): i for i, b in enumerate(idx)}
    for j, b in enumerate(blk.free_bids):
        gen[:, pos[int(case.bid_bus[b])]] += X_free[:, j]
    q_spec = np.broadcast_to(-ql, (N, m)).copy()
    qmin, qmax = case.q_limits
    V, ok, _ = batch_power_flow(blk.Y, blk.sw, case.kind[idx], case.v_set[idx], gen - pl, q_spec,
                                qmin[idx], qmax[idx])
    S = _injections(blk.Y, V)
    need = S.real[:, blk.sw] + pl[blk.sw]
    flows = np.zeros((N, blk.flow_rows.size))
    if blk.flow_rows.size:
        V_full = np.ones((N, case.n_bus), dtype=complex)
        V_full[:, idx] = V
        fl = _branch_from_flow(case, h, V_full)
        row, br, sign = case.flow_terms
        for k, j in enumerate(blk.flow_rows):
            sel = row == j
            flows[:, k] = fl[:, br[sel]] @ sign[sel]
    return need, flows, ok & np.isfinite(need)


def _evaluate_block(case: CaseModel, blk: _Block, X_free: np.ndarray):
    """Full bid volumes, block cost and feasibility for gridded free volumes."""
    h = blk.hour
    N = X_free.shape[0]
    need, flows, feas = _block_physics(case, blk, X_free)
    xs = np.zeros((N, blk.slack_bids.size))
    lbs = case.lb[h, blk.slack_bids]
    ubs = case.ub[h, blk.slack_bids]
    rest = need - lbs.sum()
    if blk.slack_bids.size:
        feas &= (rest >= -1e-12) & (need <= ubs.sum() + 1e-12)
        rest = np.maximum(rest, 0.0)
        for j in range(blk.slack_bids.size):
            take = np.minimum(rest, ubs[j] - lbs[j])
            xs[:, j] = lbs[j] + take
            rest = rest - take
    else:
        feas &= np.abs(need) <= 1e-10
    if blk.flow_rows.size:
        feas &= np.all(flows <= case.flow_limits[h, blk.flow_rows] + 1e-12, axis=1)
    x = np.zeros((N, case.n_bid))
    x[:, blk.free_bids] = X_free
    x[:, blk.slack_bids] = xs
    cost = x @ case.price[h]
    return x, cost, feas


def _grid(lo, hi, steps):
    axes = [np.linspace(a, b, steps + 1) if b > a else np.array([a]) for a, b in zip(lo, hi)]
    if not axes:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def _it_rows(case: CaseModel):
    from .sqp import intertemporal_rows
    return intertemporal_rows(case)


def _search(case: CaseModel, blocks, boxes, steps, IT):
    """Best grid combination over all blocks; returns (x, cost, n_eval) or None."""
    per = []
    total = 1
    n_eval = 0
    for blk, (lo, hi) in zip(blocks, boxes):
        X = _grid(lo, hi, steps)
        n_eval += X.shape[0]
        x, cost, feas = _evaluate_block(case, blk, X)
        keep = np.flatnonzero(feas)
        if keep.size == 0:
            return None, n_eval
        per.append((blk, x[keep], cost[keep], X[keep]))
        total *= keep.size
    if total > MAX_POINTS:
        raise GridTooLarge(f"{total} feasible combinations exceed the {MAX_POINTS} guard")
    ITm, itb, _ = IT
    T, nb = case.T, case.n_bid
    # combine blocks one at a time; block volumes occupy disjoint (hour, bid) slots
    comb_x = np.zeros((1, T * nb))
    comb_c = np.zeros(1)
    comb_f = [np.zeros((1, 0))]
    for blk, x, cost, Xf in per:
        slots = blk.hour * nb + np.concatenate([blk.free_bids, blk.slack_bids])
        vals = x[:, np.concatenate([blk.free_bids, blk.slack_bids])]
        na, nbk = comb_x.shape[0], x.shape[0]
        new = np.repeat(comb_x, nbk, axis=0)
        new[:, slots] = np.tile(vals, (na, 1))
        comb_x = new
        comb_c = (comb_c[:, None] + cost[None, :]).ravel()
        comb_f = [np.repeat(f, nbk, axis=0) for f in comb_f] + [np.tile(Xf, (na, 1))]
    ok = np.ones(comb_x.shape[0], dtype=bool)
    if itb.size:
        ok &= np.all(comb_x @ ITm.T <= itb + 1e-12, axis=1)
    if not ok.any():
        return None, n_eval
    cand = np.flatnonzero(ok)
    best_cost = comb_c[cand].min()
    tied = cand[comb_c[cand] <= best_cost + 1e-15 * max(1.0, abs(best_cost))]
    # lexicographic tie-break on x
    order = np.lexsort(comb_x[tied].T[::-1])
    b = tied[order[0]]
    frees = [f[b] for f in comb_f[1:]]
    return (comb_x[b].reshape(T, nb), float(comb_c[b]), frees), n_eval


def _windows(case, blocks, frees, half):
    out = []
    for blk, f in zip(blocks, frees):
        lb = case.lb[blk.hour, blk.free_bids]
        ub = case.ub[blk.hour, blk.free_bids]
        out.append((np.maximum(lb, f - half), np.minimum(ub, f + half)))
    return out


def _refine(case: CaseModel, blocks, res, IT, margin=1e-9, fd=1e-6):
    """Local polish of the grid incumbent with SLSQP on the same power-flow model.

    Grid refinement alone stalls where a curved flow limit meets a linear
    intertemporal row.  Here every bid volume is a variable, each block gets a
    balance equality at its swing bus and inequality rows are tightened by
    ``margin`` so the polished point passes the strict grid feasibility test.
    """
    from scipy.optimize import minimize

    T, nb = case.T, case.n_bid
    ITm, itb, _ = IT
    lb, ub = case.lb.ravel(), case.ub.ravel()
    price = case.price.ravel()
    cache = {}

    def physics(z):
        key = z.tobytes()
        if key not in cache:
            X = z.reshape(T, nb)
            out = []
            for blk in blocks:
                xf = X[blk.hour, blk.free_bids]
                k = xf.size
                P = np.vstack([xf, xf + fd * np.eye(k), xf - fd * np.eye(k)]) if k else xf[None, :]
                need, flows, ok = _block_physics(case, blk, P)
                if not ok.all():
                    raise _PFFail
                dneed = (need[1:k + 1] - need[k + 1:]) / (2 * fd)
                dflow = (flows[1:k + 1] - flows[k + 1:]) / (2 * fd)
                out.append((need[0], flows[0], dneed, dflow))
            cache.clear()
            cache[key] = out
        return cache[key]

    def eq(z):
        X = z.reshape(T, nb)
        return np.array([X[blk.hour, blk.slack_bids].sum() - ph[0]
                         for blk, ph in zip(blocks, physics(z))])

    def eq_jac(z):
        J = np.zeros((len(blocks), T * nb))
        for r, (blk, ph) in enumerate(zip(blocks, physics(z))):
            J[r, blk.hour * nb + blk.slack_bids] = 1.0
            J[r, blk.hour * nb + blk.free_bids] = -ph[2]
        return J

    def ineq(z):
        parts = [case.flow_limits[blk.hour, blk.flow_rows] - margin - ph[1]
                 for blk, ph in zip(blocks, physics(z))]
        if itb.size:
            parts.append(itb - margin - ITm @ z)
        return np.concatenate(parts) if parts else np.zeros(0)

    def ineq_jac(z):
        rows = []
        for blk, ph in zip(blocks, physics(z)):
            J = np.zeros((blk.flow_rows.size, T * nb))
            if blk.flow_rows.size:
                J[:, blk.hour * nb + blk.free_bids] = -ph[3].T
            rows.append(J)
        if itb.size:
            rows.append(-np.asarray(ITm.todense() if hasattr(ITm, "todense") else ITm))
        return np.vstack(rows) if rows else np.zeros((0, T * nb))

    cons = [{"type": "eq", "fun": eq, "jac": eq_jac}]
    if ineq(res[0].ravel()).size:
        cons.append({"type": "ineq", "fun": ineq, "jac": ineq_jac})
    try:
        out = minimize(lambda z: float(price @ z), res[0].ravel(), jac=lambda z: price, method="SLSQP",
                       bounds=list(zip(lb, ub)), constraints=cons,
                       options={"ftol": 1e-15, "maxiter": 500})
    except _PFFail:
        return None, 0
    X = np.clip(out.x, lb, ub).reshape(T, nb)
    frees = [X[blk.hour, blk.free_bids][None, :] for blk in blocks]
    cand, n = _search_fixed(case, blocks, frees, IT)
    return cand, n


class _PFFail(Exception):
    pass


def _search_fixed(case, blocks, frees, IT):
    """Evaluate one fixed free-volume vector per block with the strict grid checks."""
    T, nb = case.T, case.n_bid
    x = np.zeros((T, nb))
    cost = 0.0
    for blk, Xf in zip(blocks, frees):
        xb, cb, feas = _evaluate_block(case, blk, Xf)
        if not feas[0]:
            return None, len(blocks)
        cols = np.concatenate([blk.free_bids, blk.slack_bids])
        x[blk.hour, cols] = xb[0, cols]
        cost += float(cb[0])
    ITm, itb, _ = IT
    if itb.size and np.any(ITm @ x.ravel() > itb + 1e-12):
        return None, len(blocks)
    return (x, cost, [f[0] for f in frees]), len(blocks)


def oracle_solve(case: CaseModel, steps: int = 20, resolution: float = 1e-5, start=None,
                 window: float | None = None, refine: bool = True) -> OracleResult:
    """Zoomed grid search followed by a local polish.

    ``start``/``window`` restrict the first level; ``refine=False`` returns the pure grid answer.
    """
    if case.n_bus > MAX_BUSES or case.T > MAX_HOURS:
        raise GridTooLarge(f"oracle is limited to {MAX_BUSES} buses and {MAX_HOURS} hours")
    if steps < 2:
        raise ValueError("steps must be at least 2")
    blocks = _blocks(case)
    IT = _it_rows(case)
    boxes = []
    for blk in blocks:
        lo = case.lb[blk.hour, blk.free_bids].astype(float)
        hi = case.ub[blk.hour, blk.free_bids].astype(float)
        if start is not None and window is not None:
            c = start[blk.hour, blk.free_bids]
            lo, hi = np.maximum(lo, c - window), np.minimum(hi, c + window)
        boxes.append((lo, hi))
    first = 1
    for lo, hi in boxes:
        first *= int(np.prod([steps + 1 if b > a else 1 for a, b in zip(lo, hi)]))
    if first > MAX_POINTS:
        raise GridTooLarge(f"grid of {first} points exceeds the {MAX_POINTS} guard")
    res, n_eval = _search(case, blocks, boxes, steps, IT)
    if res is None and start is not None:
        return oracle_solve(case, steps, resolution, refine=refine)
    if res is None:
        raise NoFeasiblePoint("no grid point satisfies balance, flow, box and intertemporal limits")
    levels = 1
    width = max([float((hi - lo).max()) if lo.size else 0.0 for lo, hi in boxes] + [0.0])
    half = 0.5 * width
    while 2 * half / steps > resolution and levels < 200:
        half *= 0.5
        nb_boxes = _windows(case, blocks, res[2], half)
        new, ne = _search(case, blocks, nb_boxes, steps, IT)
        n_eval += ne
        levels += 1
        if new is not None and new[1] <= res[1] + 1e-15 * max(1.0, abs(res[1])):
            res = new
    if refine:
        new, ne = _refine(case, blocks, res, IT)
        n_eval += ne
        if new is not None and new[1] < res[1]:
            res = new
    cell = 2 * half / steps
    x, cost, _ = res
    return OracleResult(x=x, cost=cost, active=_active_list(case, x), levels=levels, evaluations=n_eval,
                        resolution=cell)


def _active_list(case: CaseModel, x, tol=1e-6):
    out = []
    T, nb = x.shape
    for t in range(T):
        for i, b in enumerate(case.bids):
            if x[t, i] >= case.ub[t, i] - tol:
                out.append(f"ub {b.id} hour {t}")
            elif x[t, i] <= case.lb[t, i] + tol:
                out.append(f"lb {b.id} hour {t}")
    ITm, itb, labels = _it_rows(case)
    if itb.size:
        slack = itb - ITm @ x.ravel()
        out += [labels[j] for j in np.flatnonzero(slack <= tol)]
    if case.flow_constraints:
        for t in range(T):
            G = flow_values(case, t, x[t])
            for j in np.flatnonzero(G >= case.flow_limits[t] - tol):
                out.append(f"flow {case.flow_constraints[j].id} hour {t}")
    return out


def flow_values(case: CaseModel, hour: int, x_t) -> np.ndarray:
    """Flow-constraint values at the oracle power flow for bid volumes ``x_t``."""
    V_full = np.ones((1, case.n_bus), dtype=complex)
    for blk in _blocks(case):
        if blk.hour != hour:
            continue
        idx = blk.buses
        local = [int(np.flatnonzero(idx == case.bid_bus[b])[0]) for b in blk.free_bids]
        gen = np.bincount(np.array(local, dtype=np.int64), weights=x_t[blk.free_bids], minlength=idx.size)
        p_spec = (gen - case.p_load[hour, idx])[None]
        q_spec = (-case.q_load[hour, idx])[None]
        qmin, qmax = case.q_limits
        V, _, _ = batch_power_flow(blk.Y, blk.sw, case.kind[idx], case.v_set[idx], p_spec, q_spec,
                                   qmin[idx], qmax[idx])
        V_full[:, idx] = V
    fl = _branch_from_flow(case, hour, V_full)[0]
    row, br, sign = case.flow_terms
    return np.bincount(row, sign * fl[br], len(case.flow_constraints))


def oracle_lmp(case: CaseModel, bus: str, hour: int, delta: float = 1e-3, steps: int = 20,
               base: OracleResult | None = None, resolution: float = 1e-6) -> float:
    """Central difference of the oracle optimal cost w.r.t. demand at ``(bus, hour)``."""
    if base is None:
        base = oracle_solve(case, steps, resolution)
    win = 20 * delta
    up = oracle_solve(with_demand(case, bus, hour, delta), steps, resolution, start=base.x, window=win)
    dn = oracle_solve(with_demand(case, bus, hour, -delta), steps, resolution, start=base.x, window=win)
    return (up.cost - dn.cost) / (2 * delta)


def oracle_prices(case: CaseModel, base: OracleResult | None = None, delta: float = 1e-3, steps: int = 20):
    base = base or oracle_solve(case, steps)
    out = {}
    for t in range(case.T):
        for b in case.buses:
            out[(b.id, t)] = oracle_lmp(case, b.id, t, delta, steps, base)
    base.prices = out
    return base
