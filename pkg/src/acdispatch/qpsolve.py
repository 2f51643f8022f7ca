"""Hour-coupled convex reduced subproblem and a dense primal active-set QP solver.

Subproblem in ``dx`` (hour-major, ``T x n_bid``)::

    min  sum_t  c~_t' dx_t + 1/2 dx_t' H_t dx_t
    s.t. L0_t dx_t  = rL_t            [lam0_t, free sign]
         S_t  dx_t <= rS_t            [sigma_t >= 0]
         IT dx     <= rIT             [mu >= 0]
         lo <= dx <= hi               [nu_lo, nu_hi >= 0]

Stationarity (currency/MWh when costs are in currency/MWh and volumes in p.u.)::

    c~ + H dx - L0' lam0 + S' sigma + pi = 0,     pi = IT' mu + nu_hi - nu_lo
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import DimensionMismatch, DispatchError, Infeasible

log = logging.getLogger(__name__)

ELASTIC_PENALTY = 1e6


@dataclass(eq=False)
class ReducedQP:
    H: list            # per hour (n_bid, n_bid), PSD
    c: np.ndarray      # (T, n_bid)
    L0: list           # per hour (n_island, n_bid)
    rL: list
    S: list            # per hour (n_active, n_bid)
    rS: list
    IT: np.ndarray     # (n_it, T*n_bid)
    rIT: np.ndarray
    lo: np.ndarray     # (T, n_bid)
    hi: np.ndarray
    S_labels: list = field(default_factory=list)   # per hour: flow-constraint row ids
    IT_labels: list = field(default_factory=list)
    elastic: bool = False

    @property
    def T(self) -> int:
        return self.c.shape[0]

    @property
    def n_bid(self) -> int:
        return self.c.shape[1]

    def check(self):
        T, nb = self.c.shape
        if self.lo.shape != (T, nb) or self.hi.shape != (T, nb):
            raise DimensionMismatch("box arrays must be (T, n_bid)")
        if len(self.H) != T or len(self.L0) != T or len(self.S) != T:
            raise DimensionMismatch("per-hour block lists must have length T")
        if self.IT.shape != (self.rIT.size, T * nb):
            raise DimensionMismatch("IT must be (n_it, T*n_bid)")
        for t in range(T):
            if self.H[t].shape != (nb, nb):
                raise DimensionMismatch(f"H[{t}] has shape {self.H[t].shape}")
            if np.asarray(self.L0[t]).reshape(-1, nb).shape[0] != np.asarray(self.rL[t]).size:
                raise DimensionMismatch(f"L0[{t}] rows disagree with rL")
            if np.asarray(self.S[t]).reshape(-1, nb).shape[0] != np.asarray(self.rS[t]).size:
                raise DimensionMismatch(f"S[{t}] rows disagree with rS")
        if np.any(self.lo > self.hi + 1e-12):
            raise DimensionMismatch("box lower bound above upper bound")


@dataclass(eq=False)
class QPSolution:
    dx: np.ndarray          # (T, n_bid)
    lam0: list              # per hour
    sigma: list             # per hour
    mu: np.ndarray          # intertemporal duals
    nu_lo: np.ndarray       # (T, n_bid)
    nu_hi: np.ndarray
    slack: list             # per hour elastic flow slacks (zeros unless relaxed)
    status: str = "optimal"
    iterations: int = 0
    objective: float = 0.0
    pi: np.ndarray | None = None  # aggregate box/intertemporal dual per bid-hour


# ---------------------------------------------------------------------------
# generic dense active-set solver


@dataclass
class _Generic:
    Q: np.ndarray
    q: np.ndarray
    Aeq: np.ndarray
    beq: np.ndarray
    A: np.ndarray      # inequalities (including finite bounds)
    b: np.ndarray


class QPError(DispatchError):
    pass


def _phase_one(P: _Generic, n: int):
    """Feasible vertex by simplex on the linear part; None if infeasible."""
    res = linprog(P.q, A_ub=P.A if P.A.size else None, b_ub=P.b if P.A.size else None,
                  A_eq=P.Aeq if P.Aeq.size else None, b_eq=P.beq if P.Aeq.size else None,
                  bounds=[(None, None)] * n, method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10,
                           "presolve": True})
    if res.status == 2:
        return None
    if res.status == 3:
        # linear part unbounded: any feasible point will do
        res = linprog(np.zeros(n), A_ub=P.A if P.A.size else None, b_ub=P.b if P.A.size else None,
                      A_eq=P.Aeq if P.Aeq.size else None, b_eq=P.beq if P.Aeq.size else None,
                      bounds=[(None, None)] * n, method="highs-ds")
        if res.status == 2:
            return None
    if res.status != 0:
        raise QPError(f"phase-one LP failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def _independent_rows(M: np.ndarray, candidates, base: np.ndarray, tol=1e-9):
    """Greedily keep candidate rows (in order) independent of ``base`` and each other."""
    n = M.shape[1]
    basis = np.zeros((n, 0))
    if base.size:
        Qb, R = np.linalg.qr(base.T)
        basis = Qb[:, np.abs(np.diag(R)) > tol * max(1.0, np.abs(R).max())]
    chosen = []
    for i in candidates:
        a = M[i]
        r = a - basis @ (basis.T @ a)
        r = r - basis @ (basis.T @ r)
        nr = np.linalg.norm(r)
        if nr > tol * max(1.0, np.linalg.norm(a)):
            chosen.append(i)
            basis = np.hstack([basis, (r / nr)[:, None]])
    return chosen


def active_set_qp(P: _Generic, z0: np.ndarray | None = None, max_iter: int = 5000,
                  feas_tol: float = 1e-9):
    n = P.q.size
    meq = P.beq.size
    if z0 is None:
        z0 = _phase_one(P, n)
        if z0 is None:
            return None
    z = z0.copy()
    slack = P.b - P.A @ z if P.A.size else np.zeros(0)
    act = [i for i in np.flatnonzero(slack <= 1e-7)]
    if meq:
        r_eq = np.linalg.matrix_rank(P.Aeq)
        if r_eq < meq:
            raise QPError("equality rows are linearly dependent")
    W = _independent_rows(P.A, act, P.Aeq)
    # snap onto the working set exactly
    AW = np.vstack([P.Aeq, P.A[W]]) if W else P.Aeq
    bW = np.concatenate([P.beq, P.b[W]]) if W else P.beq
    if AW.size:
        d = np.linalg.lstsq(AW, bW - AW @ z, rcond=None)[0]
        z = z + d
    scale = max(1.0, np.abs(P.q).max() if n else 1.0, np.abs(P.Q).max() if n else 1.0)
    inW = np.zeros(P.b.size, dtype=bool)
    inW[W] = True
    newton_done = False
    for it in range(max_iter):
        g = P.Q @ z + P.q
        AW = np.vstack([P.Aeq, P.A[inW]]) if (meq or inW.any()) else np.zeros((0, n))
        m = AW.shape[0]
        if m:
            Qf, _ = sla.qr(AW.T, mode="full")
            Z = Qf[:, m:]
        else:
            Z = np.eye(n)
        unbounded = False
        stationary = True
        if Z.shape[1]:
            gr = Z.T @ g
            if not newton_done and np.linalg.norm(gr, np.inf) > 1e-13 * scale:
                stationary = False
                Hr = Z.T @ P.Q @ Z
                w, U = np.linalg.eigh(0.5 * (Hr + Hr.T))
                pos = w > 1e-13 * max(1.0, np.abs(w).max())
                gn = U[:, ~pos].T @ gr
                if gn.size and np.linalg.norm(gn, np.inf) > 1e-13 * scale:
                    p = -Z @ (U[:, ~pos] @ gn)
                    unbounded = True
                else:
                    Up = U[:, pos]
                    p = -Z @ (Up @ ((Up.T @ gr) / w[pos]))
        if stationary:
            if m:
                y = np.linalg.lstsq(AW.T, -g, rcond=None)[0]
            else:
                y = np.zeros(0)
            y_in = y[meq:]
            idx = np.flatnonzero(inW)
            if y_in.size == 0 or y_in.min() >= -1e-11 * scale:
                lam_eq = y[:meq]
                lam_in = np.zeros(P.b.size)
                lam_in[idx] = np.maximum(y_in, 0.0)
                return z, lam_eq, lam_in, it
            j = int(np.argmin(y_in))  # argmin returns the lowest index on ties
            inW[idx[j]] = False
            newton_done = False
            continue
        Ap = P.A @ p if P.A.size else np.zeros(0)
        cand = np.flatnonzero(~inW & (Ap > 1e-12 * max(1.0, np.linalg.norm(p, np.inf))))
        alpha_max, block = np.inf, -1
        if cand.size:
            ratios = (P.b[cand] - P.A[cand] @ z) / Ap[cand]
            ratios = np.maximum(ratios, 0.0)
            k = int(np.argmin(ratios))
            alpha_max, block = float(ratios[k]), int(cand[k])
        if unbounded:
            if block < 0:
                raise QPError("QP unbounded (internal error: boxes should bound every direction)")
            alpha = alpha_max
        else:
            alpha = min(1.0, alpha_max)
        z = z + alpha * p
        if block >= 0 and alpha == alpha_max:
            inW[block] = True
            newton_done = False
        else:
            # full Newton step on the working set; the next gradient is roundoff
            newton_done = True
    raise QPError(f"active-set QP did not terminate in {max_iter} iterations")


# ---------------------------------------------------------------------------
# reduced subproblem wrapper


def _assemble(qp: ReducedQP, elastic: bool):
    T, nb = qp.c.shape
    nx = T * nb
    Ls = [np.asarray(qp.L0[t], dtype=float).reshape(-1, nb) for t in range(T)]
    Ss = [np.asarray(qp.S[t], dtype=float).reshape(-1, nb) for t in range(T)]
    n_s = [s.shape[0] for s in Ss]
    ns_tot = sum(n_s)
    n = nx + (ns_tot if elastic else 0)
    Q = np.zeros((n, n))
    for t in range(T):
        Q[t * nb:(t + 1) * nb, t * nb:(t + 1) * nb] = qp.H[t]
    q = np.zeros(n)
    q[:nx] = qp.c.ravel()
    if elastic:
        q[nx:] = ELASTIC_PENALTY
    neq = sum(L.shape[0] for L in Ls)
    Aeq = np.zeros((neq, n))
    beq = np.zeros(neq)
    r = 0
    for t in range(T):
        k = Ls[t].shape[0]
        Aeq[r:r + k, t * nb:(t + 1) * nb] = Ls[t]
        beq[r:r + k] = np.asarray(qp.rL[t], dtype=float).ravel()
        r += k
    rows, rhs, tags = [], [], []
    s_off = nx
    for t in range(T):
        for j in range(n_s[t]):
            a = np.zeros(n)
            a[t * nb:(t + 1) * nb] = Ss[t][j]
            if elastic:
                a[s_off] = -1.0
                s_off += 1
            rows.append(a)
            rhs.append(float(np.asarray(qp.rS[t]).ravel()[j]))
            tags.append(("S", t, j))
    for j in range(qp.rIT.size):
        a = np.zeros(n)
        a[:nx] = qp.IT[j]
        rows.append(a)
        rhs.append(float(qp.rIT[j]))
        tags.append(("IT", j))
    lo, hi = qp.lo.ravel(), qp.hi.ravel()
    for i in range(nx):
        if np.isfinite(hi[i]):
            a = np.zeros(n)
            a[i] = 1.0
            rows.append(a)
            rhs.append(hi[i])
            tags.append(("hi", i))
        if np.isfinite(lo[i]):
            a = np.zeros(n)
            a[i] = -1.0
            rows.append(a)
            rhs.append(-lo[i])
            tags.append(("lo", i))
    if elastic:
        for i in range(nx, n):
            a = np.zeros(n)
            a[i] = -1.0
            rows.append(a)
            rhs.append(0.0)
            tags.append(("slack", i - nx))
    A = np.array(rows) if rows else np.zeros((0, n))
    b = np.array(rhs) if rhs else np.zeros(0)
    return _Generic(Q, q, Aeq, beq, A, b), tags, n_s


def _row_name(qp: ReducedQP, tag) -> str:
    kind = tag[0]
    if kind == "S":
        _, t, j = tag
        labels = qp.S_labels[t] if t < len(qp.S_labels) else []
        return f"flow {labels[j] if j < len(labels) else j} hour {t}"
    if kind == "IT":
        return f"intertemporal {qp.IT_labels[tag[1]] if tag[1] < len(qp.IT_labels) else tag[1]}"
    if kind == "L0":
        return f"balance island {tag[2]} hour {tag[1]}"
    t, k = divmod(tag[1], qp.n_bid)
    return f"{kind} bound bid {k} hour {t}"


def infeasibility_certificate(qp: ReducedQP) -> list[str]:
    """Rows that carry positive elastic violation in a minimum-violation LP."""
    P, tags, _ = _assemble(qp, elastic=False)
    n = P.q.size
    meq, mi = P.beq.size, P.b.size
    # variables: z, e_plus(meq), e_minus(meq), v(mi) >= 0
    N = n + 2 * meq + mi
    cost = np.concatenate([np.zeros(n), np.ones(2 * meq + mi)])
    Aeq = np.hstack([P.Aeq, np.eye(meq), -np.eye(meq), np.zeros((meq, mi))]) if meq else None
    Aub = np.hstack([P.A, np.zeros((mi, 2 * meq)), -np.eye(mi)]) if mi else None
    bounds = [(None, None)] * n + [(0, None)] * (2 * meq + mi)
    res = linprog(cost, A_ub=Aub, b_ub=P.b if mi else None, A_eq=Aeq, b_eq=P.beq if meq else None,
                  bounds=bounds, method="highs")
    names = []
    if res.status != 0:
        return ["(certificate LP failed)"]
    ep, em = res.x[n:n + meq], res.x[n + meq:n + 2 * meq]
    v = res.x[n + 2 * meq:]
    r = 0
    for t in range(qp.T):
        k = np.asarray(qp.rL[t]).size
        for i in range(k):
            if ep[r] + em[r] > 1e-9:
                names.append(_row_name(qp, ("L0", t, i)))
            r += 1
    for i in np.flatnonzero(v > 1e-9):
        names.append(_row_name(qp, tags[i]))
    return names


def solve_qp(qp: ReducedQP) -> QPSolution:
    """Solve the reduced subproblem; flow rows are relaxed elastically if needed."""
    qp.check()
    T, nb = qp.c.shape
    nx = T * nb
    elastic = qp.elastic
    P, tags, n_s = _assemble(qp, elastic)
    out = active_set_qp(P)
    if out is None and not elastic and sum(n_s):
        log.warning("reduced QP infeasible; relaxing flow rows with penalty %g", ELASTIC_PENALTY)
        elastic = True
        P, tags, n_s = _assemble(qp, elastic)
        out = active_set_qp(P)
    if out is None:
        rows = infeasibility_certificate(qp)
        raise Infeasible("reduced subproblem infeasible: " + ", ".join(rows), rows=rows)
    z, y_eq, y_in, iters = out

    dx = z[:nx].reshape(T, nb)
    lam0, sigma, slack = [], [], []
    r = 0
    for t in range(T):
        k = np.asarray(qp.rL[t]).size
        lam0.append(-y_eq[r:r + k])
        r += k
    mu = np.zeros(qp.rIT.size)
    nu_lo = np.zeros(nx)
    nu_hi = np.zeros(nx)
    sig_all = {t: np.zeros(n_s[t]) for t in range(T)}
    for i, tag in enumerate(tags):
        kind = tag[0]
        if kind == "S":
            sig_all[tag[1]][tag[2]] = y_in[i]
        elif kind == "IT":
            mu[tag[1]] = y_in[i]
        elif kind == "hi":
            nu_hi[tag[1]] = y_in[i]
        elif kind == "lo":
            nu_lo[tag[1]] = y_in[i]
    off = nx
    for t in range(T):
        sigma.append(sig_all[t])
        if elastic:
            slack.append(z[off:off + n_s[t]].copy())
            off += n_s[t]
        else:
            slack.append(np.zeros(n_s[t]))
    pi = (qp.IT.T @ mu if qp.rIT.size else np.zeros(nx)) + nu_hi - nu_lo
    obj = float(P.q @ z + 0.5 * z @ P.Q @ z)
    return QPSolution(dx=dx, lam0=lam0, sigma=sigma, mu=mu, nu_lo=nu_lo.reshape(T, nb),
                      nu_hi=nu_hi.reshape(T, nb), slack=slack,
                      status="elastic" if elastic else "optimal", iterations=iters, objective=obj,
                      pi=pi.reshape(T, nb))


def stationarity(qp: ReducedQP, sol: QPSolution) -> np.ndarray:
    """Per bid-hour residual of ``c~ + H dx - L0' lam0 + S' sigma + pi``."""
    T, nb = qp.c.shape
    out = np.empty((T, nb))
    for t in range(T):
        L0 = np.asarray(qp.L0[t], dtype=float).reshape(-1, nb)
        S = np.asarray(qp.S[t], dtype=float).reshape(-1, nb)
        out[t] = (qp.c[t] + qp.H[t] @ sol.dx[t] - L0.T @ np.asarray(sol.lam0[t])
                  + S.T @ np.asarray(sol.sigma[t]) + sol.pi[t])
    return out


def kkt_residual(qp: ReducedQP, sol: QPSolution) -> float:
    """Max of stationarity, primal/dual feasibility and complementarity violations."""
    T, nb = qp.c.shape
    if sol.dx.shape != (T, nb) or sol.pi.shape != (T, nb) or len(sol.lam0) != T or len(sol.sigma) != T:
        raise DimensionMismatch("solution does not match the subproblem dimensions")
    parts = [np.abs(stationarity(qp, sol)).max(initial=0.0)]
    x = sol.dx.ravel()
    for t in range(T):
        L0 = np.asarray(qp.L0[t], dtype=float).reshape(-1, nb)
        S = np.asarray(qp.S[t], dtype=float).reshape(-1, nb)
        sig = np.asarray(sol.sigma[t])
        if L0.size:
            parts.append(np.abs(L0 @ sol.dx[t] - np.asarray(qp.rL[t])).max())
        if S.size:
            s_el = np.asarray(sol.slack[t]) if len(sol.slack) > t else np.zeros(sig.size)
            gap = np.asarray(qp.rS[t]) + s_el - S @ sol.dx[t]
            parts += [np.maximum(-gap, 0).max(), np.maximum(-sig, 0).max(), np.abs(sig * gap).max()]
            if np.any(s_el):
                parts.append(np.abs(s_el * (ELASTIC_PENALTY - sig)).max())
                parts.append(np.maximum(sig - ELASTIC_PENALTY, 0).max())
    if qp.rIT.size:
        gap = qp.rIT - qp.IT @ x
        parts += [np.maximum(-gap, 0).max(), np.maximum(-sol.mu, 0).max(), np.abs(sol.mu * gap).max()]
    lo, hi = qp.lo.ravel(), qp.hi.ravel()
    nl, nh = sol.nu_lo.ravel(), sol.nu_hi.ravel()
    fl, fh = np.isfinite(lo), np.isfinite(hi)
    parts.append(np.maximum(lo[fl] - x[fl], 0).max(initial=0.0))
    parts.append(np.maximum(x[fh] - hi[fh], 0).max(initial=0.0))
    parts.append(np.maximum(-nl, 0).max(initial=0.0))
    parts.append(np.maximum(-nh, 0).max(initial=0.0))
    parts.append(np.abs(nl[fl] * (x[fl] - lo[fl])).max(initial=0.0))
    parts.append(np.abs(nh[fh] * (hi[fh] - x[fh])).max(initial=0.0))
    agg = (qp.IT.T @ sol.mu if qp.rIT.size else 0.0) + nh - nl
    parts.append(np.abs(sol.pi.ravel() - agg).max(initial=0.0))
    return float(max(parts))
