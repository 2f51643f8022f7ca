import copy
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acdispatch import fixtures
from acdispatch.errors import IslandingError, ParseError, ValidationError
from acdispatch.netmodel import (PQ, SWING, bid_incidence, build_admittance, dumps_case, load_case,
                                 loads_case, parse_case, structurally_equal, validate_case)

MINIMAL = {
    "meta": {"T": 1, "base_mva": 100.0},
    "buses": [{"id": "a", "kind": "swing", "v_set": 1.0}, {"id": "b", "kind": "PQ"}],
    "branches": [{"id": "ab", "from": "a", "to": "b", "r": 0.0, "x": 0.1}],
    "bids": [{"id": "g", "bus": "a", "price": 10.0, "lb": 0.0, "ub": 200.0}],
    "demand": {"b": {"p": [50.0], "q": [10.0]}},
}


def _doc(**edits):
    d = copy.deepcopy(MINIMAL)
    for k, v in edits.items():
        d[k] = v
    return d


def test_minimal_case_round_trip():
    c = loads_case(json.dumps(MINIMAL))
    assert c.n_bus == 2 and c.n_bid == 1 and c.T == 1
    assert c.p_load[0, 1] == pytest.approx(0.5)
    again = loads_case(dumps_case(c))
    assert structurally_equal(c, again)


def test_load_case_accepts_streams_and_bytes():
    text = json.dumps(MINIMAL)
    a = load_case(io.StringIO(text))
    b = load_case(text.encode())
    assert structurally_equal(a, b)


@pytest.mark.parametrize("name", fixtures.names())
def test_fixture_round_trip(name):
    c = fixtures.load(name)
    assert structurally_equal(c, loads_case(dumps_case(c)))


def test_case3ramp_has_two_hours_and_one_flow_constraint():
    c = fixtures.load("case3ramp")
    assert c.T == 2 and len(c.flow_constraints) == 1


def test_malformed_text_reports_line():
    with pytest.raises(ParseError) as err:
        loads_case('{\n "meta": {"T": 1,\n  }\n}')
    assert err.value.line is not None


def test_unknown_bus_kind_is_parse_error():
    d = _doc()
    d["buses"][1]["kind"] = "slack-ish"
    with pytest.raises(ParseError):
        loads_case(json.dumps(d))


def test_two_swing_buses_in_one_island_named():
    d = _doc()
    d["buses"][1] = {"id": "b", "kind": "swing", "v_set": 1.0}
    with pytest.raises(ValidationError) as err:
        loads_case(json.dumps(d))
    assert any("island 1" in str(v) for v in err.value.violations)


def test_lb_above_ub_at_hour_3_names_bid_and_hour():
    d = _doc(meta={"T": 5, "base_mva": 100.0})
    d["demand"] = {"b": {"p": [50.0] * 5, "q": [10.0] * 5}}
    d["bids"][0]["lb"] = [0, 0, 0, 300, 0]
    rep = validate_case(parse_case(d))
    assert len(rep) == 1
    v = rep.violations[0]
    assert v.entity.endswith("g") and v.hour == 3


def test_negative_ramp_down_is_one_violation():
    d = _doc()
    d["bids"][0]["ramp_down"] = -5.0
    rep = validate_case(parse_case(d))
    assert len(rep) == 1


def test_valid_case_has_empty_report():
    assert validate_case(parse_case(_doc())).ok


def test_single_branch_admittance_textbook():
    c = loads_case(json.dumps(MINIMAL))
    Y = build_admittance(c, 0).ybus.toarray()
    assert Y[0, 1] == pytest.approx(-1 / (0.1j))
    assert Y[1, 0] == pytest.approx(-1 / (0.1j))


def test_out_of_service_branch_has_no_coupling():
    d = _doc(meta={"T": 2, "base_mva": 100.0})
    d["buses"].append({"id": "c", "kind": "PQ"})
    d["branches"] = [{"id": "ab", "from": "a", "to": "b", "x": 0.1},
                     {"id": "bc", "from": "b", "to": "c", "x": 0.1},
                     {"id": "ac", "from": "a", "to": "c", "x": 0.2, "status": [1, 0]}]
    d["demand"] = {"b": {"p": [50.0, 50.0], "q": [0, 0]}}
    c = loads_case(json.dumps(d))
    assert build_admittance(c, 0).ybus[0, 2] != 0
    assert build_admittance(c, 1).ybus[0, 2] == 0


def test_losing_swing_connection_is_islanding_error():
    d = _doc(meta={"T": 1, "base_mva": 100.0})
    d["branches"][0]["status"] = [0]
    c = parse_case(d)
    assert not validate_case(c).ok
    with pytest.raises(IslandingError):
        build_admittance(c, 0)


def test_case2_admittance_pattern():
    Y = build_admittance(fixtures.load("case2"), 0).ybus
    assert Y.shape == (2, 2) and Y.nnz == 4


@pytest.mark.parametrize("name", ["case2", "case3ramp", "case_islands", "case_lossless"])
def test_row_sums_vanish_without_shunts(name):
    c = fixtures.load(name)
    if any(br.b_ch for br in c.branches) or any(b.g_sh or b.b_sh for b in c.buses):
        c = c.replace(branches=tuple(type(br)(**{**br.__dict__, "b_ch": 0.0}) for br in c.branches))
    Y = build_admittance(c, 0).ybus.toarray()
    assert np.abs(Y.sum(axis=1)).max() <= 1e-12


def test_incidence_groups():
    c = fixtures.load("case2")
    inc = bid_incidence(c)
    assert inc.n_groups == 2
    assert inc.matrix.shape == (2, 3) and inc.matrix.sum() == 3
    one = loads_case(json.dumps(MINIMAL))
    B = bid_incidence(one).matrix.toarray()
    assert B[:, 0].tolist() == [1.0, 0.0]


def test_case3ramp_groups_one_per_bus():
    c = fixtures.load("case3ramp")
    inc = bid_incidence(c)
    assert [c.buses[b].id for b in inc.group_bus] == ["1", "2", "3"]


@pytest.mark.parametrize("name", fixtures.names())
def test_groups_partition_bids(name):
    c = fixtures.load(name)
    inc = bid_incidence(c)
    members = np.concatenate([m for _, m in inc.groups])
    assert sorted(members.tolist()) == list(range(c.n_bid))
    for bus, m in inc.groups:
        assert np.all(c.bid_bus[m] == bus)


def test_kinds_and_swing_detection():
    c = fixtures.load("case_islands")
    assert len(c.island_ids) == 2
    assert np.all(c.kind[c.swing_buses] == SWING)
    assert np.sum(c.kind == PQ) == 2


@settings(max_examples=40, deadline=None)
@given(price=st.floats(0.0, 1e4), ub=st.floats(1.0, 500.0), load=st.floats(0.0, 200.0),
       r=st.floats(0.0, 0.2), x=st.floats(0.01, 1.0))
def test_round_trip_property(price, ub, load, r, x):
    d = _doc()
    d["bids"][0].update(price=price, ub=ub)
    d["branches"][0].update(r=r, x=x)
    d["demand"]["b"]["p"] = [load]
    c = loads_case(json.dumps(d))
    assert structurally_equal(c, loads_case(dumps_case(c)))
