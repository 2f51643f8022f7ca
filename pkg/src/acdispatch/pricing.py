"""Nodal prices, their energy/loss/congestion split and per-unit marginal profits.

LMP at bus i in hour t is ``lam0 * L0_bus[i] - S_bus[:, i]' sigma`` with
``L0_bus = 1 - dLoss/dP_inj`` and ``S_bus`` the PTDF rows of the active flow
constraints.  A bid's locational value is the LMP of its bus, and its marginal
profit is that value minus its price.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotConverged

POSITION_TOL_MW = 1e-8

AT_LB = "at_lb"
AT_UB = "at_ub"
INTERIOR = "interior"
RAMP_BOUND = "ramp_bound"
ENERGY_BOUND = "energy_bound"


@dataclass(frozen=True)
class NodalPrice:
    bus: str
    hour: int
    lmp: float
    energy: float
    loss: float
    congestion: float
    by_constraint: dict = field(default_factory=dict)   # flow-constraint id -> congestion share


@dataclass(frozen=True)
class UnitEconomics:
    bid: str
    hour: int
    pi: float
    position: str
    locational_value: float
    ramp_dual: float = 0.0      # part of pi carried by binding ramp rows
    energy_dual: float = 0.0    # part of pi carried by binding energy rows


def _require(solution):
    if not solution.converged:
        raise NotConverged("prices are only defined at a converged solution")


def _bus_components(solution, case, t):
    """(energy, loss, congestion, per-row congestion matrix) for every bus in hour ``t``."""
    isl = case.bus_island
    lam0 = np.asarray(solution.lam0[t])[isl]
    energy = lam0
    loss = lam0 * (solution.L0_bus[t] - 1.0)
    active = list(solution.active[t])
    if active:
        sig = np.asarray(solution.sigma[t])[active]
        per_row = -(solution.S_bus[t] * sig[:, None])      # (n_active, n_bus)
        congestion = per_row.sum(axis=0)
    else:
        per_row = np.zeros((0, case.n_bus))
        congestion = np.zeros(case.n_bus)
    return energy, loss, congestion, per_row, active


def locational_values(solution, case) -> np.ndarray:
    """(T, n_bus) LMPs at full precision."""
    out = np.zeros((case.T, case.n_bus))
    for t in range(case.T):
        e, l, c, _, _ = _bus_components(solution, case, t)
        out[t] = e + l + c
    return out


def compute_lmps(solution, case) -> list[NodalPrice]:
    """One :class:`NodalPrice` per bus-hour, hour-major in case bus order."""
    _require(solution)
    out = []
    for t in range(case.T):
        e, l, c, per_row, active = _bus_components(solution, case, t)
        ids = [case.flow_constraints[j].id for j in active]
        for i, bus in enumerate(case.buses):
            shares = {fid: float(per_row[k, i]) for k, fid in enumerate(ids) if per_row[k, i] != 0.0}
            out.append(NodalPrice(bus.id, t, float(e[i] + l[i] + c[i]), float(e[i]), float(l[i]),
                                  float(c[i]), shares))
    return out


def _it_split(solution, case):
    """Ramp and energy parts of ``IT' mu`` per bid-hour, plus binding-row masks."""
    T, nb = case.T, case.n_bid
    ramp = np.zeros(T * nb)
    energy = np.zeros(T * nb)
    ramp_bind = np.zeros(T * nb, dtype=bool)
    energy_bind = np.zeros(T * nb, dtype=bool)
    from .sqp import intertemporal_rows

    IT, rhs, labels = intertemporal_rows(case)
    if not len(labels):
        return ramp.reshape(T, nb), energy.reshape(T, nb), ramp_bind.reshape(T, nb), energy_bind.reshape(T, nb)
    mu = np.asarray(solution.mu, dtype=float)
    if mu.size != len(labels):
        mu = np.zeros(len(labels))
    slack = rhs - IT @ solution.x.ravel()
    tol = POSITION_TOL_MW / case.base_mva
    for r, lab in enumerate(labels):
        touched = IT[r] != 0
        binding = slack[r] <= tol
        if lab.startswith("ramp"):
            ramp += IT[r] * mu[r]
            if binding:
                ramp_bind |= touched
        else:
            energy += IT[r] * mu[r]
            if binding:
                energy_bind |= touched
    shape = (T, nb)
    return ramp.reshape(shape), energy.reshape(shape), ramp_bind.reshape(shape), energy_bind.reshape(shape)


def classify_positions(solution, case) -> np.ndarray:
    """Position label per bid-hour; box limits take precedence over intertemporal rows."""
    tol = POSITION_TOL_MW / case.base_mva
    x = solution.x
    _, _, rb, eb = _it_split(solution, case)
    pos = np.full(x.shape, INTERIOR, dtype=object)
    pos[eb] = ENERGY_BOUND
    pos[rb] = RAMP_BOUND
    pos[x <= case.lb + tol] = AT_LB
    pos[x >= case.ub - tol] = AT_UB
    return pos


def _profits(solution, case):
    lmp = locational_values(solution, case)
    value = lmp[:, case.bid_bus]
    return value, value - case.price


def marginal_profits(solution, case) -> list[UnitEconomics]:
    _require(solution)
    value, pi = _profits(solution, case)
    pos = classify_positions(solution, case)
    ramp, energy, _, _ = _it_split(solution, case)
    out = []
    for t in range(case.T):
        for j, bid in enumerate(case.bids):
            out.append(UnitEconomics(bid.id, t, float(pi[t, j]), pos[t, j], float(value[t, j]),
                                     float(ramp[t, j]), float(energy[t, j])))
    return out


@dataclass
class EquilibriumReport:
    violation: np.ndarray        # (T, n_bid) signed violation, currency/MWh
    max_violation: float
    worst: tuple | None          # (bid id, hour) of the largest violation
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_violation <= self.tol


def equilibrium_check(solution, case, tol: float = 0.01) -> EquilibriumReport:
    """Complementarity sign rules for marginal profits.

    The box part of pi (pi minus the intertemporal-dual contribution) must be
    nonnegative at ub, nonpositive at lb and zero in between.  The signed
    violation is the amount by which that rule fails; positive at lb means the
    unit should run more, negative at ub means it should run less.
    """
    _, pi = _profits(solution, case)
    ramp, energy, _, _ = _it_split(solution, case)
    box = pi - ramp - energy
    tol_x = POSITION_TOL_MW / case.base_mva
    at_lb = solution.x <= case.lb + tol_x
    at_ub = solution.x >= case.ub - tol_x
    viol = np.where(at_lb & at_ub, 0.0,
                    np.where(at_ub, np.minimum(box, 0.0),
                             np.where(at_lb, np.maximum(box, 0.0), box)))
    mx = float(np.abs(viol).max(initial=0.0))
    worst = None
    if viol.size and mx > 0:
        t, j = np.unravel_index(int(np.argmax(np.abs(viol))), viol.shape)
        worst = (case.bids[j].id, int(t))
    return EquilibriumReport(viol, mx, worst, tol)
