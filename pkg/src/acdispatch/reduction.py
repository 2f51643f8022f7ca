"""State elimination: sparse LU of the power-flow Jacobian and the reduced-space blocks.

Conventions (shared with :mod:`acpf`): ``DF`` is the Jacobian of bus injections
with respect to the free state variables, the balance residual is
``g = Bx - d - P(y)``, so a linearized step satisfies ``DF dy = g + B dx``.
With that,

* loss coefficients   ``L0 = B0 - DF0 DF^-1 B``   (equals 1 - dLoss/dP_inj),
* flow sensitivities  ``S  = DG DF^-1 B``          (PTDF, flow per unit injection),
* reduced Hessian     ``H~ = B' DF^-T H DF^-1 B``,
* reduced cost        ``c~ = c + B' DF^-T H DF^-1 g``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, NumericallySingular

PIVOT_RTOL = 1e-12


@dataclass(frozen=True)
class SymbolicToken:
    pattern: str
    perm_c: np.ndarray


def _pattern_key(A: sp.csc_matrix) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.asarray(A.shape, dtype=np.int64).tobytes())
    h.update(A.indptr.astype(np.int64).tobytes())
    h.update(A.indices.astype(np.int64).tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class LUHandle:
    """Numeric LU factors of ``DF[:, perm_c]`` plus the reusable column ordering."""

    lu: object
    token: SymbolicToken
    n: int
    reused: bool = False
    solves: int = field(default=0)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        self.solves += 1 if b.ndim == 1 else b.shape[1]
        z = self.lu.solve(b)
        x = np.empty_like(z)
        x[self.token.perm_c] = z
        return x

    def solve_t(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        self.solves += 1 if c.ndim == 1 else c.shape[1]
        return self.lu.solve(c[self.token.perm_c], trans="T")


def factorize(DF, prior: SymbolicToken | LUHandle | None = None) -> LUHandle:
    """Factorize ``DF``; the column ordering of ``prior`` is reused when the pattern matches."""
    A = sp.csc_matrix(DF)
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"Jacobian is {A.shape}, not square")
    if n == 0:
        tok = SymbolicToken("empty", np.zeros(0, dtype=np.int64))
        return LUHandle(lu=_EmptyLU(), token=tok, n=0)
    if isinstance(prior, LUHandle):
        prior = prior.token
    key = _pattern_key(A)
    reused = prior is not None and prior.pattern == key
    if reused:
        perm_c = prior.perm_c
    else:
        perm_c = spla.splu(A, permc_spec="COLAMD").perm_c
    try:
        lu = spla.splu(A[:, perm_c], permc_spec="NATURAL")
    except RuntimeError as exc:
        raise NumericallySingular(f"exactly singular Jacobian: {exc}") from None
    piv = np.abs(lu.U.diagonal())
    scale = piv.max() if piv.size else 0.0
    if not np.all(np.isfinite(piv)) or scale == 0.0 or piv.min() < PIVOT_RTOL * scale:
        weak = np.argsort(piv)[:5]
        # pivot k sits on column perm_c[k] of DF
        raise NumericallySingular(
            f"pivot ratio {piv.min() / scale if scale else 0.0:.2e} below {PIVOT_RTOL:g}",
            rows=tuple(int(perm_c[k]) for k in weak))
    return LUHandle(lu=lu, token=SymbolicToken(key, perm_c), n=n, reused=reused)


class _EmptyLU:
    def solve(self, b, trans="N"):
        return np.zeros_like(b)


def pivot_growth(lu: LUHandle) -> np.ndarray:
    """|U_kk| per state column, small values mark weak locations."""
    piv = np.abs(lu.lu.U.diagonal()) if lu.n else np.zeros(0)
    out = np.empty_like(piv)
    out[lu.token.perm_c] = piv
    return out


def reduced_gradients(lu: LUHandle, B, B0, DF0, DG):
    """Loss-coefficient rows ``L0`` (one per island) and flow-sensitivity rows ``S``.

    ``B`` maps bids onto free balance rows, ``B0`` onto swing rows; ``DF0`` and
    ``DG`` are swing-injection and flow-constraint gradients over free states.
    Uses one adjoint solve per row.
    """
    B = sp.csr_matrix(B)
    DF0 = np.atleast_2d(np.asarray(DF0.todense() if sp.issparse(DF0) else DF0, dtype=float))
    DG = np.asarray(DG.todense() if sp.issparse(DG) else DG, dtype=float).reshape(-1, lu.n)
    B0 = np.asarray(B0.todense() if sp.issparse(B0) else B0, dtype=float).reshape(DF0.shape[0], B.shape[1])
    if B.shape[0] != lu.n or DF0.shape[1] != lu.n:
        raise DimensionMismatch("reduced_gradients: operand sizes disagree with the factorization")
    if DF0.shape[0]:
        u0 = lu.solve_t(DF0.T)
        L0 = B0 - (B.T @ u0).T
    else:
        L0 = np.zeros((0, B.shape[1]))
    if DG.shape[0]:
        ug = lu.solve_t(DG.T)
        S = (B.T @ ug).T
    else:
        S = np.zeros((0, B.shape[1]))
    return np.asarray(L0), np.asarray(S)


def state_directions(lu: LUHandle, B_groups) -> np.ndarray:
    """``DF^-1`` applied to every nonzero group column (swing-bus groups give zero)."""
    Bg = sp.csc_matrix(B_groups)
    W = np.zeros(Bg.shape)
    live = np.flatnonzero(np.diff(Bg.indptr) > 0)
    if live.size:
        W[:, live] = lu.solve(Bg[:, live].toarray())
    return W


def reduced_hessian(lu: LUHandle, B_groups, membership, hess_apply, W=None) -> np.ndarray:
    """Dense reduced Hessian over bids built from one forward solve per bus group.

    ``B_groups`` holds one column per bus group (rows: free balance rows);
    ``membership`` is the (n_bid x n_group) 0/1 expansion matrix.
    """
    if W is None:
        W = state_directions(lu, B_groups)
    HW = np.asarray(hess_apply(W))
    Hg = W.T @ HW
    Hg = 0.5 * (Hg + Hg.T)
    E = sp.csr_matrix(membership)
    return np.asarray(E @ (E @ Hg).T)


def reduced_hessian_per_bid(lu: LUHandle, B, hess_apply) -> np.ndarray:
    """Column-per-bid variant (no dedup); reference for the dedup path."""
    W = state_directions(lu, B)
    Ht = W.T @ np.asarray(hess_apply(W))
    return 0.5 * (Ht + Ht.T)


def psd_project(H: np.ndarray) -> np.ndarray:
    """Clip eigenvalues from below at ``1e-8 * max(1, lambda_max)``."""
    H = np.asarray(H, dtype=float)
    if H.size == 0:
        return H.copy()
    Hs = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(Hs)
    eps = 1e-8 * max(1.0, float(w[-1]))
    if w[0] >= eps:
        return Hs
    w = np.maximum(w, eps)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def reduced_cost(c, g, lu: LUHandle, hess_apply, B) -> np.ndarray:
    """``c + B' DF^-T H DF^-1 g``; equals ``c`` when ``g = 0`` or ``H = 0``."""
    c = np.asarray(c, dtype=float)
    g = np.asarray(g, dtype=float)
    if lu.n == 0 or not np.any(g):
        return c.copy()
    z = lu.solve(g)
    hz = np.asarray(hess_apply(z)).ravel()
    if not np.any(hz):
        return c.copy()
    u = lu.solve_t(hz)
    return c + sp.csr_matrix(B).T @ u
