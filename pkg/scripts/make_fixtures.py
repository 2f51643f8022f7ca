"""Write the canonical case fixtures into src/acdispatch/fixtures/.

    python3 scripts/make_fixtures.py

The 14- and 30-bus networks are the standard IEEE test systems (MATPOWER
tables, 100 MVA base) with synthetic bids, a 24-hour load profile, ramp
limits, one energy-limited unit and transfer limits added.
"""
import json
import os
import sys

OUT = os.path.join(os.path.dirname(__file__), "..", "src", "acdispatch", "fixtures")

PROFILE = [0.72, 0.68, 0.66, 0.65, 0.66, 0.70, 0.78, 0.86, 0.93, 0.97, 0.99, 1.00,
           0.99, 0.98, 0.97, 0.96, 0.97, 1.00, 1.02, 1.00, 0.96, 0.90, 0.83, 0.76]

CASE14_BUS = [  # id, Pd MW, Qd MVAr, Gs MW, Bs MVAr
    (1, 0.0, 0.0, 0.0, 0.0),
    (2, 21.7, 12.7, 0.0, 0.0),
    (3, 94.2, 19.0, 0.0, 0.0),
    (4, 47.8, -3.9, 0.0, 0.0),
    (5, 7.6, 1.6, 0.0, 0.0),
    (6, 11.2, 7.5, 0.0, 0.0),
    (7, 0.0, 0.0, 0.0, 0.0),
    (8, 0.0, 0.0, 0.0, 0.0),
    (9, 29.5, 16.6, 0.0, 19.0),
    (10, 9.0, 5.8, 0.0, 0.0),
    (11, 3.5, 1.8, 0.0, 0.0),
    (12, 6.1, 1.6, 0.0, 0.0),
    (13, 13.5, 5.8, 0.0, 0.0),
    (14, 14.9, 5.0, 0.0, 0.0),
]
CASE14_BRANCH = [  # from, to, r, x, b, tap
    (1, 2, 0.01938, 0.05917, 0.0528, 1.0),
    (1, 5, 0.05403, 0.22304, 0.0492, 1.0),
    (2, 3, 0.04699, 0.19797, 0.0438, 1.0),
    (2, 4, 0.05811, 0.17632, 0.034, 1.0),
    (2, 5, 0.05695, 0.17388, 0.0346, 1.0),
    (3, 4, 0.06701, 0.17103, 0.0128, 1.0),
    (4, 5, 0.01335, 0.04211, 0.0, 1.0),
    (6, 11, 0.09498, 0.1989, 0.0, 1.0),
    (6, 12, 0.12291, 0.25581, 0.0, 1.0),
    (6, 13, 0.06615, 0.13027, 0.0, 1.0),
    (9, 10, 0.03181, 0.0845, 0.0, 1.0),
    (9, 14, 0.12711, 0.27038, 0.0, 1.0),
    (10, 11, 0.08205, 0.19207, 0.0, 1.0),
    (12, 13, 0.22092, 0.19988, 0.0, 1.0),
    (13, 14, 0.17093, 0.34802, 0.0, 1.0),
    (4, 7, 0.0, 0.20912, 0.0, 0.978),
    (4, 9, 0.0, 0.55618, 0.0, 0.969),
    (5, 6, 0.0, 0.25202, 0.0, 0.932),
    (7, 8, 0.0, 0.17615, 0.0, 1.0),
    (7, 9, 0.0, 0.11001, 0.0, 1.0),
]
CASE14_GEN = [  # bus, Vg, Qmin, Qmax, Pmax
    (1, 1.06, 0.0, 10.0, 332.4),
    (2, 1.045, -40.0, 50.0, 140.0),
    (3, 1.01, 0.0, 40.0, 100.0),
    (6, 1.07, -6.0, 24.0, 100.0),
    (8, 1.09, -6.0, 24.0, 100.0),
]
CASE30_BUS = [  # id, Pd MW, Qd MVAr, Gs MW, Bs MVAr
    (1, 0.0, 0.0, 0.0, 0.0),
    (2, 21.7, 12.7, 0.0, 0.0),
    (3, 2.4, 1.2, 0.0, 0.0),
    (4, 7.6, 1.6, 0.0, 0.0),
    (5, 0.0, 0.0, 0.0, 0.19),
    (6, 0.0, 0.0, 0.0, 0.0),
    (7, 22.8, 10.9, 0.0, 0.0),
    (8, 30.0, 30.0, 0.0, 0.0),
    (9, 0.0, 0.0, 0.0, 0.0),
    (10, 5.8, 2.0, 0.0, 0.0),
    (11, 0.0, 0.0, 0.0, 0.0),
    (12, 11.2, 7.5, 0.0, 0.0),
    (13, 0.0, 0.0, 0.0, 0.0),
    (14, 6.2, 1.6, 0.0, 0.0),
    (15, 8.2, 2.5, 0.0, 0.0),
    (16, 3.5, 1.8, 0.0, 0.0),
    (17, 9.0, 5.8, 0.0, 0.0),
    (18, 3.2, 0.9, 0.0, 0.0),
    (19, 9.5, 3.4, 0.0, 0.0),
    (20, 2.2, 0.7, 0.0, 0.0),
    (21, 17.5, 11.2, 0.0, 0.0),
    (22, 0.0, 0.0, 0.0, 0.0),
    (23, 3.2, 1.6, 0.0, 0.0),
    (24, 8.7, 6.7, 0.0, 0.04),
    (25, 0.0, 0.0, 0.0, 0.0),
    (26, 3.5, 2.3, 0.0, 0.0),
    (27, 0.0, 0.0, 0.0, 0.0),
    (28, 0.0, 0.0, 0.0, 0.0),
    (29, 2.4, 0.9, 0.0, 0.0),
    (30, 10.6, 1.9, 0.0, 0.0),
]
CASE30_BRANCH = [  # from, to, r, x, b, tap
    (1, 2, 0.02, 0.06, 0.03, 1.0),
    (1, 3, 0.05, 0.19, 0.02, 1.0),
    (2, 4, 0.06, 0.17, 0.02, 1.0),
    (3, 4, 0.01, 0.04, 0.0, 1.0),
    (2, 5, 0.05, 0.2, 0.02, 1.0),
    (2, 6, 0.06, 0.18, 0.02, 1.0),
    (4, 6, 0.01, 0.04, 0.0, 1.0),
    (5, 7, 0.05, 0.12, 0.01, 1.0),
    (6, 7, 0.03, 0.08, 0.01, 1.0),
    (6, 8, 0.01, 0.04, 0.0, 1.0),
    (6, 9, 0.0, 0.21, 0.0, 1.0),
    (6, 10, 0.0, 0.56, 0.0, 1.0),
    (9, 11, 0.0, 0.21, 0.0, 1.0),
    (9, 10, 0.0, 0.11, 0.0, 1.0),
    (4, 12, 0.0, 0.26, 0.0, 1.0),
    (12, 13, 0.0, 0.14, 0.0, 1.0),
    (12, 14, 0.12, 0.26, 0.0, 1.0),
    (12, 15, 0.07, 0.13, 0.0, 1.0),
    (12, 16, 0.09, 0.2, 0.0, 1.0),
    (14, 15, 0.22, 0.2, 0.0, 1.0),
    (16, 17, 0.08, 0.19, 0.0, 1.0),
    (15, 18, 0.11, 0.22, 0.0, 1.0),
    (18, 19, 0.06, 0.13, 0.0, 1.0),
    (19, 20, 0.03, 0.07, 0.0, 1.0),
    (10, 20, 0.09, 0.21, 0.0, 1.0),
    (10, 17, 0.03, 0.08, 0.0, 1.0),
    (10, 21, 0.03, 0.07, 0.0, 1.0),
    (10, 22, 0.07, 0.15, 0.0, 1.0),
    (21, 22, 0.01, 0.02, 0.0, 1.0),
    (15, 23, 0.1, 0.2, 0.0, 1.0),
    (22, 24, 0.12, 0.18, 0.0, 1.0),
    (23, 24, 0.13, 0.27, 0.0, 1.0),
    (24, 25, 0.19, 0.33, 0.0, 1.0),
    (25, 26, 0.25, 0.38, 0.0, 1.0),
    (25, 27, 0.11, 0.21, 0.0, 1.0),
    (28, 27, 0.0, 0.4, 0.0, 1.0),
    (27, 29, 0.22, 0.42, 0.0, 1.0),
    (27, 30, 0.32, 0.6, 0.0, 1.0),
    (29, 30, 0.24, 0.45, 0.0, 1.0),
    (8, 28, 0.06, 0.2, 0.02, 1.0),
    (6, 28, 0.02, 0.06, 0.01, 1.0),
]
CASE30_GEN = [  # bus, Vg, Qmin, Qmax, Pmax
    (1, 1.0, -20.0, 150.0, 80.0),
    (2, 1.0, -20.0, 60.0, 80.0),
    (22, 1.0, -15.0, 62.5, 50.0),
    (27, 1.0, -15.0, 48.7, 55.0),
    (23, 1.0, -10.0, 40.0, 30.0),
    (13, 1.0, -15.0, 44.7, 40.0),
]


def bus(i, kind="PQ", island="1", **kw):
    out = {"id": str(i), "island": island, "kind": kind}
    out.update(kw)
    return out


def case1():
    return {
        "meta": {"T": 1, "base_mva": 100.0, "name": "case1"},
        "buses": [bus(1, "swing", v_set=1.0)],
        "branches": [],
        "bids": [
            {"id": "g1", "bus": "1", "price": 10.0, "lb": 0.0, "ub": 150.0},
            {"id": "g2", "bus": "1", "price": 20.0, "lb": 0.0, "ub": 100.0},
        ],
        "demand": {"1": {"p": [100.0], "q": [0.0]}},
    }


def case2(prefix="", island="1", load=100.0, r=0.01, name="case2"):
    b1, b2 = f"{prefix}1", f"{prefix}2"
    return {
        "meta": {"T": 1, "base_mva": 100.0, "name": name},
        "buses": [
            {"id": b1, "island": island, "kind": "swing", "v_set": 1.0},
            {"id": b2, "island": island, "kind": "PQ"},
        ],
        "branches": [{"id": f"{prefix}l12", "from": b1, "to": b2, "r": r, "x": 0.1, "b_ch": 0.0}],
        "bids": [
            {"id": f"{prefix}g1a", "bus": b1, "price": 20.0, "lb": 0.0, "ub": 60.0},
            {"id": f"{prefix}g1b", "bus": b1, "price": 35.0, "lb": 0.0, "ub": 100.0},
            {"id": f"{prefix}g2", "bus": b2, "price": 30.0, "lb": 0.0, "ub": 30.0},
        ],
        "demand": {b2: {"p": [load], "q": [20.0]}},
    }


def case_islands():
    a = case2("a", "A")
    b = case2("b", "B", load=80.0)
    doc = {"meta": {"T": 1, "base_mva": 100.0, "name": "case_islands"}}
    for key in ("buses", "branches", "bids"):
        doc[key] = a[key] + b[key]
    doc["demand"] = {**a["demand"], **b["demand"]}
    return doc


def case_lossless():
    doc = case2(r=0.0, name="case_lossless")
    return doc


def case_dupbid():
    """Two identical bids at bus 2 sharing a site limit equal to their joint capacity."""
    doc = case2(name="case_dupbid")
    doc["bids"] = doc["bids"][:2] + [
        {"id": "g2a", "bus": "2", "price": 30.0, "lb": 0.0, "ub": 15.0},
        {"id": "g2b", "bus": "2", "price": 30.0, "lb": 0.0, "ub": 15.0},
    ]
    doc["energy_groups"] = [{"id": "site2", "members": ["g2a", "g2b"], "e_max": 30.0}]
    return doc


def case3ramp():
    return {
        "meta": {"T": 2, "base_mva": 100.0, "name": "case3ramp"},
        "buses": [
            bus(1, "swing", v_set=1.0),
            bus(2, "PV", v_set=1.0, q_min=-40.0, q_max=40.0),
            bus(3),
        ],
        "branches": [
            {"id": "l12", "from": "1", "to": "2", "r": 0.02, "x": 0.2, "b_ch": 0.02},
            {"id": "l23", "from": "2", "to": "3", "r": 0.02, "x": 0.2, "b_ch": 0.02},
            {"id": "l13", "from": "1", "to": "3", "r": 0.02, "x": 0.2, "b_ch": 0.02},
        ],
        "bids": [
            {"id": "g1", "bus": "1", "price": 20.0, "lb": 0.0, "ub": 200.0},
            {"id": "g2", "bus": "2", "price": 25.0, "lb": 0.0, "ub": 100.0,
             "ramp_up": 30.0, "ramp_down": 30.0, "p_initial": 20.0},
            {"id": "g3", "bus": "3", "price": 40.0, "lb": 0.0, "ub": 100.0},
        ],
        "energy_groups": [{"id": "hydro3", "members": ["g3"], "e_max": 150.0}],
        "flow_constraints": [{"id": "cut13", "terms": [["l13", 1]], "limit": 70.0}],
        "demand": {"3": {"p": [80.0, 140.0], "q": [20.0, 30.0]}},
    }


# synthetic offers per generator: (share of Pmax, price) blocks
LEVELS = [18.0, 22.0, 26.0, 31.0, 37.0, 44.0]


def standard(name, bus_table, branch_table, gen_table, flow_limits, ramp_buses, hydro, T=24):
    gen_bus = {g[0]: g for g in gen_table}
    swing = gen_table[0][0]
    buses, demand = [], {}
    for i, pd, qd, gs, bs in bus_table:
        kw = {}
        kind = "PQ"
        if i == swing:
            kind = "swing"
            kw["v_set"] = gen_bus[i][1]
        elif i in gen_bus:
            kind = "PV"
            g = gen_bus[i]
            kw.update(v_set=g[1], q_min=g[2], q_max=g[3])
        if gs or bs:
            kw.update(g_sh=gs / 100.0, b_sh=bs / 100.0)
        buses.append(bus(i, kind, **kw))
        if pd or qd:
            demand[str(i)] = {"p": [round(pd * f, 4) for f in PROFILE[:T]],
                              "q": [round(qd * f, 4) for f in PROFILE[:T]]}
    branches = []
    for k, (f, t, r, x, b, tap) in enumerate(branch_table):
        br = {"id": f"l{f}_{t}" + ("" if all((f, t) != (o[0], o[1]) for o in branch_table[:k]) else f"_{k}"),
              "from": str(f), "to": str(t), "r": r, "x": x, "b_ch": b}
        if tap != 1.0:
            br["tap"] = tap
        branches.append(br)
    bids = []
    for k, (i, vg, qmin, qmax, pmax) in enumerate(gen_table):
        base = LEVELS[k % len(LEVELS)]
        if hydro is not None and i == hydro[0]:
            base = 12.0
        blocks = [(0.6, base), (0.4, base + 9.0)]
        for j, (share, price) in enumerate(blocks):
            bid = {"id": f"g{i}_{j}", "bus": str(i), "price": price, "lb": 0.0,
                   "ub": round(share * pmax, 3)}
            if i in ramp_buses:
                bid.update(ramp_up=ramp_buses[i], ramp_down=ramp_buses[i],
                           p_initial=round(0.3 * share * pmax, 3))
            bids.append(bid)
    groups = []
    if hydro is not None:
        hb, emax = hydro
        groups.append({"id": f"hydro{hb}", "members": [b["id"] for b in bids if b["bus"] == str(hb)],
                       "e_max": emax})
    flows = [{"id": fid, "terms": terms, "limit": lim} for fid, terms, lim in flow_limits]
    return {"meta": {"T": T, "base_mva": 100.0, "name": name}, "buses": buses, "branches": branches,
            "bids": bids, "energy_groups": groups, "flow_constraints": flows, "demand": demand}


def case14():
    return standard("case14", CASE14_BUS, CASE14_BRANCH, CASE14_GEN,
                    flow_limits=[("cut1", [["l1_2", 1], ["l1_5", 1]], 160.0)],
                    ramp_buses={2: 25.0, 3: 20.0}, hydro=(6, 900.0))


def case30():
    return standard("case30", CASE30_BUS, CASE30_BRANCH, CASE30_GEN,
                    flow_limits=[("cut1", [["l1_2", 1], ["l1_3", 1]], 60.0),
                                 ("l2_6", [["l2_6", 1]], 30.0)],
                    ramp_buses={22: 12.0, 27: 12.0}, hydro=(23, 400.0))


FIXTURES = {"case1": case1, "case2": case2, "case3ramp": case3ramp, "case_islands": case_islands,
            "case_lossless": case_lossless, "case_dupbid": case_dupbid, "case14": case14, "case30": case30}


def main(argv):
    os.makedirs(OUT, exist_ok=True)
    names = argv or sorted(FIXTURES)
    for name in names:
        path = os.path.join(OUT, f"{name}.json")
        with open(path, "w") as fh:
            json.dump(FIXTURES[name](), fh, indent=1)
            fh.write("\n")
        print(path)


if __name__ == "__main__":
    main(sys.argv[1:])
