"""Regularity checks at a converged dispatch and the flat-start convexity check.

All gradients live in the reduced bid space (hour-major ``T * n_bid`` columns).
Rows come from four families: island balance equalities and active flow limits
(nonlinear in the original variables) and active intertemporal and box rows
(linear).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linprog

from . import acpf
from .errors import NotConverged
from .netmodel import CaseModel
from .pricing import _it_split, locational_values
from .reduction import factorize

TOL_ACTIVE = 1e-6
RANK_RTOL = 1e-8

NONLINEAR = "nonlinear"
LINEAR = "linear"


@dataclass
class ActiveGradients:
    A: np.ndarray           # (rows, T * n_bid)
    labels: list
    kinds: list             # NONLINEAR or LINEAR
    equality: np.ndarray    # bool per row
    duals: np.ndarray       # multiplier per row, sign matched to the row orientation
    price_rows: np.ndarray  # balance and flow rows (they determine nodal prices)

    def subset(self, mask) -> "ActiveGradients":
        mask = np.asarray(mask, dtype=bool)
        return ActiveGradients(self.A[mask], [l for l, m in zip(self.labels, mask) if m],
                               [k for k, m in zip(self.kinds, mask) if m], self.equality[mask],
                               self.duals[mask], self.price_rows[mask])


def _require(solution):
    if not solution.converged:
        raise NotConverged("regularity checks need a converged solution")


def active_constraint_gradients(solution, case: CaseModel, tol_active: float = TOL_ACTIVE) -> ActiveGradients:
    _require(solution)
    T, nb = case.T, case.n_bid
    n = T * nb
    rows, labels, kinds, eq, duals, price = [], [], [], [], [], []

    def add(vec, label, kind, is_eq, dual, is_price):
        rows.append(vec)
        labels.append(label)
        kinds.append(kind)
        eq.append(is_eq)
        duals.append(dual)
        price.append(is_price)

    isl_of_bid = case.bus_island[case.bid_bus]
    for t in range(T):
        L0b = solution.L0_bus[t][case.bid_bus]
        for k, isl in enumerate(case.island_ids):
            a = np.zeros(n)
            sel = isl_of_bid == k
            a[t * nb + np.flatnonzero(sel)] = L0b[sel]
            add(a, f"balance island {isl} hour {t}", NONLINEAR, True, float(solution.lam0[t][k]), True)
        if solution.active[t]:
            G = acpf.eval_flow_constraints(solution.states[t], case).G
            for r, j in enumerate(solution.active[t]):
                if case.flow_limits[t, j] - G[j] <= tol_active:
                    a = np.zeros(n)
                    a[t * nb:(t + 1) * nb] = solution.S_bus[t][r][case.bid_bus]
                    add(a, f"flow {case.flow_constraints[j].id} hour {t}", NONLINEAR, False,
                        float(solution.sigma[t][j]), True)

    from .sqp import intertemporal_rows

    IT, rhs, it_labels = intertemporal_rows(case)
    xv = solution.x.ravel()
    mu = np.asarray(solution.mu, dtype=float)
    if mu.size != len(it_labels):
        mu = np.zeros(len(it_labels))
    for r, lab in enumerate(it_labels):
        if rhs[r] - IT[r] @ xv <= tol_active:
            add(IT[r].copy(), lab, LINEAR, False, float(mu[r]), False)

    ramp, energy, _, _ = _it_split(solution, case)
    value = locational_values(solution, case)[:, case.bid_bus]
    box = value - case.price - ramp - energy
    for t in range(T):
        for j, bid in enumerate(case.bids):
            if solution.x[t, j] >= case.ub[t, j] - tol_active:
                a = np.zeros(n)
                a[t * nb + j] = 1.0
                add(a, f"ub {bid.id} hour {t}", LINEAR, False, float(max(box[t, j], 0.0)), False)
            if solution.x[t, j] <= case.lb[t, j] + tol_active:
                a = np.zeros(n)
                a[t * nb + j] = -1.0
                add(a, f"lb {bid.id} hour {t}", LINEAR, False, float(max(-box[t, j], 0.0)), False)
    A = np.array(rows) if rows else np.zeros((0, n))
    return ActiveGradients(A, labels, kinds, np.array(eq, dtype=bool), np.array(duals, dtype=float),
                           np.array(price, dtype=bool))


def _matrix(g):
    return g.A if isinstance(g, ActiveGradients) else np.atleast_2d(np.asarray(g, dtype=float))


def _rank(A):
    if A.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(s > RANK_RTOL * s[0])) if s[0] > 0 else 0, s


@dataclass
class LICQResult:
    holds: bool
    rank: int
    rows: int
    deficiency: int
    dependent: list = field(default_factory=list)   # labels involved in the smallest singular directions


def check_licq(gradients) -> LICQResult:
    """Numerical rank with threshold ``1e-8 * sigma_max``; holds iff full row rank."""
    A = _matrix(gradients)
    m = A.shape[0]
    if m == 0:
        raise ValueError("no active rows to check")
    r, _ = _rank(A)
    dep = []
    if r < m and isinstance(gradients, ActiveGradients):
        U, s, _ = np.linalg.svd(A)
        thr = RANK_RTOL * s[0] if s.size and s[0] > 0 else 0.0
        null = U[:, [k for k in range(m) if k >= s.size or s[k] <= thr]]
        w = np.abs(null).max(axis=1)
        dep = [gradients.labels[i] for i in np.flatnonzero(w > 1e-6)]
    return LICQResult(r == m, r, m, m - r, dep)


@dataclass
class MFCQResult:
    holds: bool
    equality_rank_ok: bool
    margin: float
    direction: np.ndarray | None = None     # certificate when holds
    witness: np.ndarray | None = None       # LP multipliers on active inequalities otherwise


def check_mfcq(solution, case: CaseModel, gradients: ActiveGradients | None = None) -> MFCQResult:
    """Equality rank plus an LP for a direction strictly decreasing every active inequality."""
    g = gradients if gradients is not None else active_constraint_gradients(solution, case)
    Aeq = g.A[g.equality]
    Ain = g.A[~g.equality]
    rank_ok = True
    if Aeq.shape[0]:
        rank_ok = _rank(Aeq)[0] == Aeq.shape[0]
    n = g.A.shape[1]
    if Ain.shape[0] == 0:
        d = np.zeros(n)
        if Aeq.shape[0]:
            _, _, Vt = np.linalg.svd(Aeq)
            r = _rank(Aeq)[0]
            if r < n:
                d = Vt[r]
        return MFCQResult(rank_ok, rank_ok, np.inf, d, None)
    # variables (d, s): maximize s subject to Ain d + s <= 0, Aeq d = 0, |d| <= 1, 0 <= s <= 1
    cobj = np.zeros(n + 1)
    cobj[-1] = -1.0
    A_ub = np.hstack([Ain, np.ones((Ain.shape[0], 1))])
    A_eq = np.hstack([Aeq, np.zeros((Aeq.shape[0], 1))]) if Aeq.shape[0] else None
    res = linprog(cobj, A_ub=A_ub, b_ub=np.zeros(Ain.shape[0]), A_eq=A_eq,
                  b_eq=np.zeros(Aeq.shape[0]) if Aeq.shape[0] else None,
                  bounds=[(-1.0, 1.0)] * n + [(0.0, 1.0)], method="highs")
    margin = float(-res.fun) if res.status == 0 else 0.0
    ok = rank_ok and margin > 1e-9
    if ok:
        d = res.x[:n]
        return MFCQResult(True, rank_ok, margin, d / np.abs(Ain @ d).min(), None)
    wit = -np.asarray(res.ineqlin.marginals) if res.status == 0 else None
    return MFCQResult(False, rank_ok, margin, None, wit)


@dataclass
class ComplementarityResult:
    holds: bool
    degenerate: list
    nonlinear_holds: bool
    nonlinear_degenerate: list


def check_strict_complementarity(solution, case: CaseModel | None = None, tol: float = 0.01,
                                 gradients: ActiveGradients | None = None,
                                 tol_active: float = TOL_ACTIVE) -> ComplementarityResult:
    """Active inequality rows whose multiplier is at most ``tol`` in magnitude."""
    case = case if case is not None else solution.case
    g = gradients if gradients is not None else active_constraint_gradients(solution, case, tol_active)
    deg, deg_nl = [], []
    for lab, kind, is_eq, dual in zip(g.labels, g.kinds, g.equality, g.duals):
        if is_eq or abs(dual) > tol:
            continue
        deg.append(lab)
        if kind == NONLINEAR:
            deg_nl.append(lab)
    return ComplementarityResult(not deg, deg, not deg_nl, deg_nl)


@dataclass
class UniquenessResult:
    unique: bool                 # LMP values are unique
    multipliers_unique: bool     # lam0 and sigma individually unique
    nonlinear_independent: bool
    alternative_duals: np.ndarray | None = None   # basis over price rows when not unique
    price_labels: list = field(default_factory=list)


def _lmp_map(solution, case: CaseModel, g: ActiveGradients):
    """Linear map from price-row multipliers to the stacked LMP vector."""
    nbus = case.n_bus
    labels = [l for l, p in zip(g.labels, g.price_rows) if p]
    M = np.zeros((case.T * nbus, len(labels)))
    fc = {f.id: j for j, f in enumerate(case.flow_constraints)}
    isl = {i: k for k, i in enumerate(case.island_ids)}
    for c, lab in enumerate(labels):
        parts = lab.split()
        t = int(parts[-1])
        if parts[0] == "balance":
            k = isl[parts[2]]
            sel = case.bus_island == k
            M[t * nbus + np.flatnonzero(sel), c] = solution.L0_bus[t][sel]
        else:
            j = fc[parts[1]]
            r = list(solution.active[t]).index(j)
            M[t * nbus:(t + 1) * nbus, c] = -solution.S_bus[t][r]
    return M, labels


def nodal_price_uniqueness(solution, case: CaseModel, gradients: ActiveGradients | None = None) -> UniquenessResult:
    """Null space of the dual-feasibility system, projected on price multipliers and on LMPs."""
    g = gradients if gradients is not None else active_constraint_gradients(solution, case)
    nl = g.subset(g.price_rows)
    nl_indep = _rank(nl.A)[0] == nl.A.shape[0] if nl.A.shape[0] else True
    m = g.A.shape[0]
    U, s, _ = np.linalg.svd(g.A) if m else (np.zeros((0, 0)), np.zeros(0), None)
    thr = RANK_RTOL * s[0] if s.size and s[0] > 0 else 0.0
    null = U[:, [k for k in range(m) if k >= s.size or s[k] <= thr]] if m else np.zeros((0, 0))
    P = null[g.price_rows] if null.size else np.zeros((int(g.price_rows.sum()), 0))
    mult_unique = P.size == 0 or np.abs(P).max() <= 1e-8
    M, labels = _lmp_map(solution, case, g)
    lmp_unique = mult_unique or np.abs(M @ P).max() <= 1e-8 * max(1.0, np.abs(M).max())
    alt = None if mult_unique else P
    return UniquenessResult(bool(lmp_unique), bool(mult_unique), bool(nl_indep), alt, labels)


def flat_start_hessian(case: CaseModel, hour: int, lam0: float | None = None):
    """Free-state Hessian at flat start with uniform ``lam0`` on every swing row and sigma = 0."""
    from .sqp import _lambda0_proxy

    lam0 = _lambda0_proxy(case, "median") if lam0 is None else lam0
    st = acpf.flat_state(case, hour)
    lay = st.layout
    if lay.nfree == 0:
        return np.zeros((0, 0))
    DF, DF0 = acpf.eval_jacobian(st, case)
    l0 = np.full(len(case.island_ids), float(lam0))
    lam_free = -factorize(DF).solve_t(DF0.T @ l0)
    lp = np.zeros(case.n_bus)
    lq = np.zeros(case.n_bus)
    lp[lay.ns] = lam_free[: lay.ns.size]
    lq[lay.pq] = lam_free[lay.ns.size:]
    lp[case.swing_buses] = l0
    return acpf.hessian_matrix(st, case, lp, lq).toarray()


def check_flat_start_convexity(case: CaseModel) -> list:
    """Smallest eigenvalue per hour (None for an hour without free states)."""
    out = []
    for t in range(case.T):
        H = flat_start_hessian(case, t)
        out.append(float(np.linalg.eigvalsh(0.5 * (H + H.T))[0]) if H.size else None)
    return out


def weak_locations(solution, case: CaseModel, gradients: ActiveGradients | None = None, top: int = 5) -> list:
    """Ranked (bus, hour, score, source) hints from rank loss and from LU pivot decay."""
    g = gradients if gradients is not None else active_constraint_gradients(solution, case)
    nb = case.n_bid
    scores = {}
    if g.A.shape[0]:
        U, s, _ = np.linalg.svd(g.A)
        m = g.A.shape[0]
        s_min = s[-1] if m <= s.size else 0.0
        rel = s_min / s[0] if s[0] > 0 else 0.0
        # columns touched by the weakest row combination
        v = np.abs(g.A).T @ np.abs(U[:, -1])
        v = v / v.max() if v.max() > 0 else v
        for col in np.flatnonzero(np.abs(v) > 1e-6):
            t, j = divmod(int(col), nb)
            key = (case.buses[case.bid_bus[j]].id, t, "rank")
            scores[key] = max(scores.get(key, 0.0), float(abs(v[col]) * (1.0 - min(rel, 1.0))))
    for h, _isl, bus, piv in solution.report.get("weak_locations", []):
        key = (bus, h, "pivot")
        scores[key] = max(scores.get(key, 0.0), 1.0 / (1.0 + abs(piv)))
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(b, t, sc, src) for (b, t, src), sc in ranked[:top]]


@dataclass
class RegularityReport:
    licq: dict
    mfcq: dict
    strict_complementarity: dict
    nonlinear_subset: dict
    nodal_price_uniqueness: dict
    flat_start_convexity: dict
    weak_locations: list

    def to_dict(self) -> dict:
        return asdict(self)


def regularity_report(solution, case: CaseModel, tol_opt: float = 0.01) -> RegularityReport:
    g = active_constraint_gradients(solution, case)
    licq = check_licq(g)
    mf = check_mfcq(solution, case, g)
    sc = check_strict_complementarity(solution, case, tol_opt, g)
    nl = g.subset(g.price_rows)
    nl_licq = check_licq(nl) if nl.A.shape[0] else LICQResult(True, 0, 0, 0)
    uq = nodal_price_uniqueness(solution, case, g)
    eig = check_flat_start_convexity(case)
    return RegularityReport(
        licq={"holds": licq.holds, "rank": licq.rank, "rows": licq.rows, "deficiency": licq.deficiency,
              "dependent_rows": licq.dependent},
        mfcq={"holds": mf.holds, "equality_rank_ok": mf.equality_rank_ok, "margin": mf.margin,
              "direction": None if mf.direction is None else mf.direction.tolist(),
              "witness": None if mf.witness is None else mf.witness.tolist()},
        strict_complementarity={"holds": sc.holds, "degenerate_rows": sc.degenerate},
        nonlinear_subset={"independent": nl_licq.holds, "strict_complementarity": sc.nonlinear_holds,
                          "degenerate_rows": sc.nonlinear_degenerate},
        nodal_price_uniqueness={"unique": uq.unique, "multipliers_unique": uq.multipliers_unique,
                                "nonlinear_independent": uq.nonlinear_independent,
                                "alternative_duals": None if uq.alternative_duals is None
                                else uq.alternative_duals.tolist()},
        flat_start_convexity={"min_eigenvalue": eig},
        weak_locations=[list(w) for w in weak_locations(solution, case, g)],
    )
