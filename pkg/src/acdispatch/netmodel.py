"""Case data model, case-file parsing/serialization, admittance and bid incidence.

Electrical quantities are stored per unit on ``base_mva``.  Case files carry
MW / MVAr / MWh and are converted when loaded.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import IslandingError, ParseError, ValidationError

PQ, PV, SWING = 0, 1, 2
KIND_CODES = {"PQ": PQ, "PV": PV, "swing": SWING}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass(frozen=True, eq=False)
class Bus:
    id: str
    island: str
    kind: int
    p_load: np.ndarray
    q_load: np.ndarray
    g_sh: float = 0.0
    b_sh: float = 0.0
    v_set: float | None = None
    q_min: float = -math.inf
    q_max: float = math.inf


@dataclass(frozen=True, eq=False)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    b_ch: float
    tap: float
    shift: float
    status: np.ndarray


@dataclass(frozen=True, eq=False)
class Bid:
    id: str
    bus: str
    price: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    ramp_up: float = math.inf
    ramp_down: float = math.inf
    p_initial: float | None = None


@dataclass(frozen=True, eq=False)
class EnergyGroup:
    id: str
    members: tuple[str, ...]
    e_min: float
    e_max: float


@dataclass(frozen=True, eq=False)
class FlowConstraint:
    id: str
    terms: tuple[tuple[str, int], ...]
    limit: np.ndarray


@dataclass(frozen=True)
class Violation:
    entity: str
    message: str
    hour: int | None = None

    def __str__(self):
        where = f" at hour {self.hour}" if self.hour is not None else ""
        return f"{self.entity}{where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)


@dataclass(frozen=True, eq=False)
class CaseModel:
    """Immutable network, bids, demand and constraints for a session of ``T`` hours."""

    T: int
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    bids: tuple[Bid, ...]
    energy_groups: tuple[EnergyGroup, ...] = ()
    flow_constraints: tuple[FlowConstraint, ...] = ()
    name: str = "case"

    # -- index maps and packed arrays (lazy, so invalid cases can still be validated)

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_index(self) -> dict[str, int]:
        return {br.id: i for i, br in enumerate(self.branches)}

    @cached_property
    def bid_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.bids)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_bid(self) -> int:
        return len(self.bids)

    @cached_property
    def kind(self) -> np.ndarray:
        return np.array([b.kind for b in self.buses], dtype=np.int64)

    @cached_property
    def island_ids(self) -> tuple[str, ...]:
        seen = []
        for b in self.buses:
            if b.island not in seen:
                seen.append(b.island)
        return tuple(seen)

    @cached_property
    def bus_island(self) -> np.ndarray:
        pos = {isl: k for k, isl in enumerate(self.island_ids)}
        return np.array([pos[b.island] for b in self.buses], dtype=np.int64)

    @cached_property
    def swing_buses(self) -> np.ndarray:
        """Swing bus index per island (island order of ``island_ids``)."""
        out = np.full(len(self.island_ids), -1, dtype=np.int64)
        for i, b in enumerate(self.buses):
            if b.kind == SWING:
                out[self.bus_island[i]] = i
        return out

    @cached_property
    def v_set(self) -> np.ndarray:
        return np.array([b.v_set if b.v_set is not None else 1.0 for b in self.buses])

    @cached_property
    def q_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.q_min for b in self.buses]),
                np.array([b.q_max for b in self.buses]))

    @cached_property
    def shunts(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([b.g_sh for b in self.buses]),
                np.array([b.b_sh for b in self.buses]))

    @cached_property
    def p_load(self) -> np.ndarray:
        """(T, n_bus) active demand, p.u."""
        return np.array([b.p_load for b in self.buses], dtype=float).reshape(self.n_bus, self.T).T.copy()

    @cached_property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses], dtype=float).reshape(self.n_bus, self.T).T.copy()

    @cached_property
    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        f = np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=np.int64)
        t = np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=np.int64)
        return f, t

    @cached_property
    def branch_status(self) -> np.ndarray:
        """(T, n_branch) boolean in-service mask."""
        if not self.branches:
            return np.zeros((self.T, 0), dtype=bool)
        return np.array([br.status for br in self.branches], dtype=bool).reshape(-1, self.T).T.copy()

    @cached_property
    def branch_coef(self) -> np.ndarray:
        """(8, n_branch) array Gff, Bff, Gft, Bft, Gtf, Btf, Gtt, Btt of the pi-model."""
        out = np.zeros((8, len(self.branches)))
        for k, br in enumerate(self.branches):
            ys = 1.0 / complex(br.r, br.x)
            half = 0.5j * br.b_ch
            t = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
            yff = (ys + half) / (br.tap * br.tap)
            yft = -ys / t.conjugate()
            ytf = -ys / t
            ytt = ys + half
            out[:, k] = (yff.real, yff.imag, yft.real, yft.imag,
                         ytf.real, ytf.imag, ytt.real, ytt.imag)
        return out

    @cached_property
    def bid_bus(self) -> np.ndarray:
        return np.array([self.bus_index[b.bus] for b in self.bids], dtype=np.int64)

    @cached_property
    def price(self) -> np.ndarray:
        """(T, n_bid) currency/MWh."""
        return np.array([b.price for b in self.bids], dtype=float).reshape(self.n_bid, self.T).T.copy()

    @cached_property
    def lb(self) -> np.ndarray:
        return np.array([b.lb for b in self.bids], dtype=float).reshape(self.n_bid, self.T).T.copy()

    @cached_property
    def ub(self) -> np.ndarray:
        return np.array([b.ub for b in self.bids], dtype=float).reshape(self.n_bid, self.T).T.copy()

    @cached_property
    def flow_limits(self) -> np.ndarray:
        """(T, n_flow) p.u."""
        if not self.flow_constraints:
            return np.zeros((self.T, 0))
        return np.array([fc.limit for fc in self.flow_constraints], dtype=float).reshape(-1, self.T).T.copy()

    @cached_property
    def flow_terms(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(constraint row, branch index, sign) triplets over all terms."""
        rows, brs, signs = [], [], []
        for j, fc in enumerate(self.flow_constraints):
            for br_id, sign in fc.terms:
                rows.append(j)
                brs.append(self.branch_index[br_id])
                signs.append(float(sign))
        return (np.array(rows, dtype=np.int64), np.array(brs, dtype=np.int64),
                np.array(signs, dtype=float))

    def replace(self, **changes) -> "CaseModel":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# parsing


def _as_hourly(value, T, where, scale=1.0):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return np.full(T, float(value) * scale)
    if not isinstance(value, list):
        raise ParseError("expected a number or an array of numbers", field=where)
    try:
        arr = np.array([float(v) for v in value]) * scale
    except (TypeError, ValueError):
        raise ParseError("non-numeric entry", field=where) from None
    # length mismatches are left to validation
    return arr


def _num(obj, key, where, default=None, scale=1.0):
    if key not in obj:
        if default is None:
            raise ParseError(f"missing field '{key}'", field=where)
        return default
    v = obj[key]
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"field '{key}' must be a number", field=f"{where}.{key}")
    return float(v) * scale


def _str(obj, key, where):
    if key not in obj:
        raise ParseError(f"missing field '{key}'", field=where)
    return str(obj[key])


def _line_of(text: str, needle: str) -> int | None:
    pos = text.find(needle)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else None


def parse_case(doc: dict, name: str = "case", text: str = "") -> CaseModel:
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", line=1)
    try:
        meta = doc["meta"]
        T = int(meta["T"])
        base = float(meta.get("base_mva", 100.0))
    except (KeyError, TypeError, ValueError):
        raise ParseError("meta {T, base_mva} missing or malformed", line=_line_of(text, '"meta"'),
                         field="meta") from None
    demand = doc.get("demand", {}) or {}
    if not isinstance(demand, dict):
        raise ParseError("demand must map bus id to hourly values", field="demand")

    buses = []
    for i, b in enumerate(doc.get("buses", [])):
        where = f"buses[{i}]"
        bid_ = _str(b, "id", where)
        kind_name = b.get("kind", "PQ")
        if kind_name not in KIND_CODES:
            raise ParseError(f"unknown bus kind '{kind_name}'", line=_line_of(text, f'"{kind_name}"'),
                             field=f"{where}.kind")
        dem = demand.get(bid_, {})
        zeros = [0.0] * T
        p = _as_hourly(dem.get("p", b.get("p_load", zeros)), T, f"demand.{bid_}.p", 1.0 / base)
        q = _as_hourly(dem.get("q", b.get("q_load", zeros)), T, f"demand.{bid_}.q", 1.0 / base)
        qmin = _num(b, "q_min", where, default=-math.inf)
        qmax = _num(b, "q_max", where, default=math.inf)
        buses.append(Bus(
            id=bid_, island=str(b.get("island", "1")), kind=KIND_CODES[kind_name],
            p_load=p, q_load=q,
            g_sh=_num(b, "g_sh", where, default=0.0), b_sh=_num(b, "b_sh", where, default=0.0),
            v_set=_num(b, "v_set", where, default=math.nan) if kind_name != "PQ" or "v_set" in b else None,
            q_min=-math.inf if qmin is None else qmin / base if math.isfinite(qmin) else qmin,
            q_max=math.inf if qmax is None else qmax / base if math.isfinite(qmax) else qmax,
        ))

    branches = []
    for i, br in enumerate(doc.get("branches", [])):
        where = f"branches[{i}]"
        status = br.get("status", 1)
        if isinstance(status, list):
            st = np.array([bool(s) for s in status])
        else:
            st = np.full(T, bool(status))
        branches.append(Branch(
            id=str(br.get("id", f"br{i}")), from_bus=_str(br, "from", where), to_bus=_str(br, "to", where),
            r=_num(br, "r", where, default=0.0), x=_num(br, "x", where),
            b_ch=_num(br, "b_ch", where, default=0.0), tap=_num(br, "tap", where, default=1.0),
            shift=_num(br, "shift", where, default=0.0), status=st,
        ))

    bids = []
    for i, b in enumerate(doc.get("bids", [])):
        where = f"bids[{i}]"
        for key in ("price", "lb", "ub"):
            if key not in b:
                raise ParseError(f"missing field '{key}'", field=where)
        ru = _num(b, "ramp_up", where, default=math.inf)
        rd = _num(b, "ramp_down", where, default=math.inf)
        p0 = b.get("p_initial")
        bids.append(Bid(
            id=_str(b, "id", where), bus=_str(b, "bus", where),
            price=_as_hourly(b["price"], T, f"{where}.price"),
            lb=_as_hourly(b["lb"], T, f"{where}.lb", 1.0 / base),
            ub=_as_hourly(b["ub"], T, f"{where}.ub", 1.0 / base),
            ramp_up=math.inf if ru is None else ru / base,
            ramp_down=math.inf if rd is None else rd / base,
            p_initial=None if p0 is None else _num(b, "p_initial", where) / base,
        ))

    groups = []
    for i, g in enumerate(doc.get("energy_groups", [])):
        where = f"energy_groups[{i}]"
        groups.append(EnergyGroup(
            id=_str(g, "id", where), members=tuple(str(m) for m in g.get("members", [])),
            e_min=_num(g, "e_min", where, default=-math.inf) / base,
            e_max=_num(g, "e_max", where, default=math.inf) / base,
        ))

    flows = []
    for i, fc in enumerate(doc.get("flow_constraints", [])):
        where = f"flow_constraints[{i}]"
        terms = []
        for j, term in enumerate(fc.get("terms", [])):
            try:
                br_id, sign = term
                terms.append((str(br_id), int(sign)))
            except (TypeError, ValueError):
                raise ParseError("term must be [branch id, sign]", field=f"{where}.terms[{j}]") from None
        if "limit" not in fc:
            raise ParseError("missing field 'limit'", field=where)
        flows.append(FlowConstraint(id=_str(fc, "id", where), terms=tuple(terms),
                                    limit=_as_hourly(fc["limit"], T, f"{where}.limit", 1.0 / base)))

    return CaseModel(T=T, base_mva=base, buses=tuple(buses), branches=tuple(branches),
                     bids=tuple(bids), energy_groups=tuple(groups), flow_constraints=tuple(flows),
                     name=str(meta.get("name", name)))


def loads_case(text: str, name: str = "case") -> CaseModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno, field=f"column {exc.colno}") from None
    case = parse_case(doc, name=name, text=text)
    report = validate_case(case)
    if not report.ok:
        raise ValidationError(report.violations)
    return case


def load_case(source: IO | str | bytes) -> CaseModel:
    """Read and validate a case document from a path, text/bytes stream or raw bytes."""
    name = "case"
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
        name = source.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    return loads_case(text, name=name)


def _num_out(v: float):
    if v is None:
        return None
    if math.isinf(v):
        return None
    return float(v)


def case_to_dict(case: CaseModel) -> dict:
    base = case.base_mva
    out = {"meta": {"T": case.T, "base_mva": base, "name": case.name}, "buses": [], "branches": [],
           "bids": [], "energy_groups": [], "flow_constraints": [], "demand": {}}
    for b in case.buses:
        d = {"id": b.id, "island": b.island, "kind": KIND_NAMES[b.kind], "g_sh": b.g_sh, "b_sh": b.b_sh}
        if b.v_set is not None:
            d["v_set"] = b.v_set
        if math.isfinite(b.q_min):
            d["q_min"] = b.q_min * base
        if math.isfinite(b.q_max):
            d["q_max"] = b.q_max * base
        out["buses"].append(d)
        if np.any(b.p_load) or np.any(b.q_load):
            out["demand"][b.id] = {"p": (np.asarray(b.p_load) * base).tolist(),
                                  "q": (np.asarray(b.q_load) * base).tolist()}
    for br in case.branches:
        out["branches"].append({"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
                                "b_ch": br.b_ch, "tap": br.tap, "shift": br.shift,
                                "status": [int(s) for s in br.status]})
    for b in case.bids:
        d = {"id": b.id, "bus": b.bus, "price": np.asarray(b.price).tolist(),
             "lb": (np.asarray(b.lb) * base).tolist(), "ub": (np.asarray(b.ub) * base).tolist()}
        if math.isfinite(b.ramp_up):
            d["ramp_up"] = b.ramp_up * base
        if math.isfinite(b.ramp_down):
            d["ramp_down"] = b.ramp_down * base
        d["p_initial"] = None if b.p_initial is None else b.p_initial * base
        out["bids"].append(d)
    for g in case.energy_groups:
        d = {"id": g.id, "members": list(g.members)}
        if math.isfinite(g.e_min):
            d["e_min"] = g.e_min * base
        if math.isfinite(g.e_max):
            d["e_max"] = g.e_max * base
        out["energy_groups"].append(d)
    for fc in case.flow_constraints:
        out["flow_constraints"].append({"id": fc.id, "terms": [[b, s] for b, s in fc.terms],
                                        "limit": (np.asarray(fc.limit) * base).tolist()})
    return out


def dumps_case(case: CaseModel) -> str:
    return json.dumps(case_to_dict(case), indent=1)


def structurally_equal(a: CaseModel, b: CaseModel, tol: float = 1e-12) -> bool:
    """Field-by-field comparison of two cases (arrays within ``tol``)."""
    if a.T != b.T or abs(a.base_mva - b.base_mva) > tol:
        return False
    for xs, ys in ((a.buses, b.buses), (a.branches, b.branches), (a.bids, b.bids),
                   (a.energy_groups, b.energy_groups), (a.flow_constraints, b.flow_constraints)):
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            for f in dataclasses.fields(x):
                u, v = getattr(x, f.name), getattr(y, f.name)
                if isinstance(u, np.ndarray) or isinstance(v, np.ndarray):
                    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
                    if u.shape != v.shape or not np.allclose(u, v, atol=tol, rtol=0):
                        return False
                elif isinstance(u, float) and isinstance(v, float):
                    if not (u == v or abs(u - v) <= tol or (math.isnan(u) and math.isnan(v))):
                        return False
                elif u != v:
                    return False
    return True


# ---------------------------------------------------------------------------
# validation


def _hourly_issues(arr, T, entity, label):
    if np.asarray(arr).shape != (T,):
        return [Violation(entity, f"{label} has length {np.asarray(arr).size}, expected {T}")]
    return []


def _island_components(case: CaseModel, hour: int):
    n = case.n_bus
    f, t = case.branch_ends
    on = case.branch_status[hour]
    adj = sp.coo_matrix((np.ones(int(on.sum())), (f[on], t[on])), shape=(n, n))
    return connected_components(adj, directed=False)


def validate_case(case: CaseModel) -> ValidationReport:
    """Collect every invariant violation; an empty report means the case is valid."""
    v: list[Violation] = []
    T = case.T
    if T < 1:
        v.append(Violation("meta", "T must be >= 1"))
        return ValidationReport(tuple(v))
    if case.base_mva <= 0:
        v.append(Violation("meta", "base_mva must be positive"))

    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        v.append(Violation("buses", "duplicate bus ids"))
    bus_ids = set(ids)
    swings: dict[str, int] = {}
    for b in case.buses:
        swings.setdefault(b.island, 0)
        if b.kind == SWING:
            swings[b.island] += 1
        v += _hourly_issues(b.p_load, T, f"bus {b.id}", "p_load")
        v += _hourly_issues(b.q_load, T, f"bus {b.id}", "q_load")
        if b.q_min > b.q_max:
            v.append(Violation(f"bus {b.id}", "q_min > q_max"))
        if b.kind != PQ and not (b.v_set is not None and b.v_set > 0):
            v.append(Violation(f"bus {b.id}", "v_set must be positive for PV/swing buses"))
    for isl, count in swings.items():
        if count != 1:
            v.append(Violation(f"island {isl}", f"has {count} swing buses, expected exactly one"))

    br_ids = set()
    for br in case.branches:
        e = f"branch {br.id}"
        if br.id in br_ids:
            v.append(Violation(e, "duplicate branch id"))
        br_ids.add(br.id)
        if br.from_bus not in bus_ids or br.to_bus not in bus_ids:
            v.append(Violation(e, "endpoint bus does not exist"))
        if br.from_bus == br.to_bus:
            v.append(Violation(e, "from == to"))
        if br.x == 0:
            v.append(Violation(e, "zero reactance"))
        if not br.tap > 0:
            v.append(Violation(e, "tap must be positive"))
        v += _hourly_issues(br.status, T, e, "status")

    bid_ids = set()
    for b in case.bids:
        e = f"bid {b.id}"
        if b.id in bid_ids:
            v.append(Violation(e, "duplicate bid id"))
        bid_ids.add(b.id)
        if b.bus not in bus_ids:
            v.append(Violation(e, f"bus {b.bus} does not exist"))
        bad = False
        for arr, label in ((b.price, "price"), (b.lb, "lb"), (b.ub, "ub")):
            issues = _hourly_issues(arr, T, e, label)
            bad |= bool(issues)
            v += issues
        if not bad:
            for h in np.flatnonzero(np.asarray(b.lb) > np.asarray(b.ub)):
                v.append(Violation(e, "lb > ub", hour=int(h)))
        if b.ramp_up < 0:
            v.append(Violation(e, "ramp_up < 0"))
        if b.ramp_down < 0:
            v.append(Violation(e, "ramp_down < 0"))

    for g in case.energy_groups:
        e = f"energy group {g.id}"
        if not g.members:
            v.append(Violation(e, "no members"))
        for m in g.members:
            if m not in bid_ids:
                v.append(Violation(e, f"member bid {m} does not exist"))
        if g.e_min > g.e_max:
            v.append(Violation(e, "e_min > e_max"))

    for fc in case.flow_constraints:
        e = f"flow constraint {fc.id}"
        if not fc.terms:
            v.append(Violation(e, "no terms"))
        for br_id, sign in fc.terms:
            if br_id not in br_ids:
                v.append(Violation(e, f"branch {br_id} does not exist"))
            if sign not in (1, -1):
                v.append(Violation(e, f"direction sign {sign} not in {{+1,-1}}"))
        v += _hourly_issues(fc.limit, T, e, "limit")

    structural_ok = not any(x.entity.startswith(("branch", "bus", "buses")) for x in v)
    if structural_ok and case.buses:
        for h in range(T):
            ncomp, labels = _island_components(case, h)
            for isl in swings:
                members = [i for i, b in enumerate(case.buses) if b.island == isl]
                if len(set(labels[members])) != 1:
                    v.append(Violation(f"island {isl}", "not connected by in-service branches", hour=h))
            for comp in range(ncomp):
                isls = {case.buses[i].island for i in np.flatnonzero(labels == comp)}
                if len(isls) > 1:
                    v.append(Violation(f"islands {','.join(sorted(isls))}",
                                       "connected to each other by in-service branches", hour=h))
    return ValidationReport(tuple(v))


# ---------------------------------------------------------------------------
# admittance and incidence


@dataclass(frozen=True, eq=False)
class AdmittanceStructure:
    hour: int
    ybus: sp.csr_matrix
    islands: tuple[np.ndarray, ...]
    swing: np.ndarray

    def island_block(self, k: int) -> sp.csr_matrix:
        idx = self.islands[k]
        return self.ybus[idx][:, idx]


def build_admittance(case: CaseModel, hour: int) -> AdmittanceStructure:
    """Nodal admittance for ``hour`` with out-of-service branches dropped."""
    if not 0 <= hour < case.T:
        raise IndexError(f"hour {hour} outside 0..{case.T - 1}")
    n = case.n_bus
    f, t = case.branch_ends
    on = case.branch_status[hour]
    c = case.branch_coef
    yff = (c[0] + 1j * c[1]) * on
    yft = (c[2] + 1j * c[3]) * on
    ytf = (c[4] + 1j * c[5]) * on
    ytt = (c[6] + 1j * c[7]) * on
    g_sh, b_sh = case.shunts
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, g_sh + 1j * b_sh])
    ybus = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    ybus.sum_duplicates()

    _, labels = _island_components(case, hour)
    islands = []
    for k, isl in enumerate(case.island_ids):
        members = np.flatnonzero(case.bus_island == k)
        sw = case.swing_buses[k]
        comps = set(labels[members])
        if sw < 0 or len(comps) != 1:
            stranded = [case.buses[i].id for i in members if sw < 0 or labels[i] != labels[sw]]
            raise IslandingError(f"island {isl} at hour {hour}: buses {stranded} have no swing bus")
        islands.append(members)
    return AdmittanceStructure(hour=hour, ybus=ybus, islands=tuple(islands), swing=case.swing_buses.copy())


@dataclass(frozen=True, eq=False)
class IncidenceMap:
    """Bid-to-bus incidence and the partition of bids by bus."""

    bid_bus: np.ndarray
    matrix: sp.csr_matrix
    groups: tuple[tuple[int, np.ndarray], ...]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def group_of_bid(self) -> np.ndarray:
        out = np.empty(self.bid_bus.size, dtype=np.int64)
        for g, (_, members) in enumerate(self.groups):
            out[members] = g
        return out

    @cached_property
    def group_bus(self) -> np.ndarray:
        return np.array([bus for bus, _ in self.groups], dtype=np.int64)


def bid_incidence(case: CaseModel) -> IncidenceMap:
    nb = case.n_bid
    bb = case.bid_bus
    B = sp.csr_matrix((np.ones(nb), (bb, np.arange(nb))), shape=(case.n_bus, nb))
    groups = []
    for bus in sorted(set(bb.tolist())):
        groups.append((bus, np.flatnonzero(bb == bus)))
    return IncidenceMap(bid_bus=bb.copy(), matrix=B, groups=tuple(groups))


def island_subcase(case: CaseModel, island: str) -> CaseModel:
    """The part of ``case`` belonging to one island, as a standalone case."""
    buses = tuple(b for b in case.buses if b.island == island)
    ids = {b.id for b in buses}
    branches = tuple(br for br in case.branches if br.from_bus in ids)
    br_ids = {br.id for br in branches}
    bids = tuple(b for b in case.bids if b.bus in ids)
    bid_ids = {b.id for b in bids}
    groups = tuple(g for g in case.energy_groups if set(g.members) <= bid_ids)
    flows = tuple(fc for fc in case.flow_constraints if all(t[0] in br_ids for t in fc.terms))
    return dataclasses.replace(case, buses=buses, branches=branches, bids=bids, energy_groups=groups,
                               flow_constraints=flows, name=f"{case.name}:{island}")


def scale_prices(case: CaseModel, s: float) -> CaseModel:
    bids = tuple(dataclasses.replace(b, price=np.asarray(b.price) * s) for b in case.bids)
    return dataclasses.replace(case, bids=bids)


def with_demand(case: CaseModel, bus: str, hour: int, delta_pu: float) -> CaseModel:
    """Copy of ``case`` with active demand at (bus, hour) shifted by ``delta_pu``."""
    buses = []
    for b in case.buses:
        if b.id == bus:
            p = np.array(b.p_load, dtype=float)
            p[hour] += delta_pu
            b = dataclasses.replace(b, p_load=p)
        buses.append(b)
    return dataclasses.replace(case, buses=tuple(buses))


def iter_bids_at(case: CaseModel, bus: str) -> Iterable[Bid]:
    return (b for b in case.bids if b.bus == bus)
