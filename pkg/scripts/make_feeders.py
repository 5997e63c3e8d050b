"""Regenerate the synthetic bundled feeders (hipv.json, day.csv, coupled30.json).

Run from the repository root:  python scripts/make_feeders.py
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "crossphase" / "data"

CONDUCTORS = {
    "ACSR_336400_26_7": {"gmr_ft": 0.0244, "r_ohm_per_mile": 0.306, "ampacity_a": 530},
    "ACSR_4/0_6_1": {"gmr_ft": 0.00814, "r_ohm_per_mile": 0.592, "ampacity_a": 340},
    "ACSR_1/0_6_1": {"gmr_ft": 0.00446, "r_ohm_per_mile": 1.12, "ampacity_a": 230},
}
TRUNK = ["ACSR_336400_26_7"] * 3 + ["ACSR_4/0_6_1"]
GEOMETRIES = {
    "trunk_4wire": {
        "phases": ["A", "B", "C", "N"],
        "positions_ft": [[0.0, 29.0], [2.5, 29.0], [7.0, 29.0], [4.0, 25.0]],
    },
}
for ph in "ABC":
    GEOMETRIES[f"lateral_{ph}"] = {"phases": [ph, "N"], "positions_ft": [[0.0, 29.0], [0.5, 25.0]]}


def seg(sid, a, b, miles, geom):
    conds = TRUNK if geom == "trunk_4wire" else ["ACSR_1/0_6_1", "ACSR_4/0_6_1"]
    return {"id": sid, "from_bus": a, "to_bus": b, "length_miles": miles,
            "geometry": geom, "conductors": conds}


def pf_q(p, pf=0.95):
    return round(p * math.tan(math.acos(pf)), 3)


def hipv():
    buses = ["S"] + [f"T{i}" for i in range(1, 9)]
    segs = [seg("L01", "S", "T1", 0.3, "trunk_4wire")]
    for i in range(1, 8):
        segs.append(seg(f"L{i + 1:02d}", f"T{i}", f"T{i + 1}", 0.35, "trunk_4wire"))
    loads, pvs = [], []
    for i in range(1, 9):
        b = f"T{i}"
        for ph, p in (("A", 90), ("B", 60), ("C", 100)):
            loads.append({"id": f"ld{ph}{i}", "bus": b, "phase": ph, "p_kw": p, "q_kvar": pf_q(p)})
        if i >= 3:
            pvs.append({"id": f"pvB{i}", "bus": b, "phase": "B", "p_kw": 420, "s_kva": 530, "q_kvar": 0})
            pvs.append({"id": f"pvC{i}", "bus": b, "phase": "C", "p_kw": 120, "s_kva": 260, "q_kvar": 0})
    regs = [
        {"id": "reg_A", "segment": "L01", "phase": "A", "tap_ratio": 1.03},
        {"id": "reg_B", "segment": "L01", "phase": "B", "tap_ratio": 1.03},
        {"id": "reg_C", "segment": "L01", "phase": "C", "tap_ratio": 1.01},
    ]
    return {
        "schema_version": 1,
        "name": "hipv",
        "description": "Synthetic 9-bus high-PV feeder (12.47 kV, 4-wire trunk). Heavy phase-B PV drives phase-B over-voltage at midday and, through the line coupling, lifts phase A close to its limit. Phase A has no PV, so only cross-phase action (phase-C injection) can hold phase A down while phase B absorbs.",
        "source_bus": "S",
        "source_kv_ll": 12.47,
        "buses": buses,
        "conductors": CONDUCTORS,
        "geometries": GEOMETRIES,
        "segments": segs,
        "loads": loads,
        "pvs": pvs,
        "regulators": regs,
        "capacitors": [],
    }


def day_profile(feeder):
    rows = []
    for h in range(24):
        sun = max(0.0, math.sin(math.pi * (h - 6) / 12)) if 6 <= h <= 18 else 0.0
        load = 0.55 + 0.25 * math.exp(-((h - 19) / 3.0) ** 2) + 0.1 * math.exp(-((h - 8) / 2.0) ** 2)
        rows.append((f"h{h:02d}", round(load, 4), round(sun, 4)))
    loads = sorted({l["id"] for l in feeder["loads"]})
    pvs = [p["id"] for p in feeder["pvs"]]
    return rows, loads, pvs


def write_profile(path, rows, loads, pvs):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance"] + [f"load:{l}" for l in loads] + [f"pv:{p}" for p in pvs])
        for label, lm, pm in rows:
            w.writerow([label] + [lm] * len(loads) + [pm] * len(pvs))


def coupled30(
    pool_p=200.0,
    pool_s=400.0,
    tap_b=1.065,
    a_load=40.0,
    b_load=40.0,
    c_load=40.0,
    a_pv_p=330.0,
    a_pv_s=530.0,
):
    """Returns (feeder dict, pool PV list).

    Defaults are tuned so that adding the pool two at a time first violates
    phase B only, and re-applying the earlier phase-B absorption pushes phase A
    over the limit at the last step.
    """
    buses = ["S"] + [f"T{i}" for i in range(1, 11)]
    segs = [seg("L01", "S", "T1", 0.4, "trunk_4wire")]
    for i in range(1, 10):
        segs.append(seg(f"L{i + 1:02d}", f"T{i}", f"T{i + 1}", 0.3, "trunk_4wire"))
    loads, pvs, pool = [], [], []
    lat_phase = ["A", "B", "C"]
    n_lat = 0
    for i in range(1, 11):
        t = f"T{i}"
        for ph, p in (("A", a_load), ("B", b_load), ("C", c_load)):
            loads.append({"id": f"ld{ph}_{t}", "bus": t, "phase": ph, "p_kw": p, "q_kvar": pf_q(p)})
        for k in range(2 if i < 10 else 1):
            ph = lat_phase[(i + k) % 3]
            b = f"{t}{ph.lower()}{k}"
            buses.append(b)
            n_lat += 1
            segs.append(seg(f"X{n_lat:02d}", t, b, 0.15, f"lateral_{ph}"))
            loads.append({"id": f"ld_{b}", "bus": b, "phase": ph, "p_kw": 40.0, "q_kvar": pf_q(40.0)})
            if ph == "A" and i >= 4:
                pvs.append({"id": f"pv_{b}", "bus": b, "phase": "A", "p_kw": a_pv_p, "s_kva": a_pv_s, "q_kvar": 0})
            if ph == "B" and i >= 5:
                pool.append({"id": f"pv_{b}", "bus": b, "phase": "B", "p_kw": pool_p, "s_kva": pool_s, "q_kvar": 0})
    for i in range(5, 11):
        pool.append({"id": f"pvB_T{i}", "bus": f"T{i}", "phase": "B", "p_kw": pool_p, "s_kva": pool_s, "q_kvar": 0})
    regs = [{"id": "svr_B", "segment": "L05", "phase": "B", "tap_ratio": tap_b}]
    feeder = {
        "schema_version": 1,
        "name": "coupled30",
        "description": "Synthetic 30-bus feeder (12.47 kV): 4-wire trunk T1-T10, single-phase laterals, a phase-B step-up regulator between T4 and T5, phase-A PVs with reactive headroom downstream. The ordered pv_pool list adds phase-B PVs below the regulator; the addition study adds them two at a time.",
        "source_bus": "S",
        "source_kv_ll": 12.47,
        "buses": buses,
        "conductors": CONDUCTORS,
        "geometries": GEOMETRIES,
        "segments": segs,
        "loads": loads,
        "pvs": pvs,
        "regulators": regs,
        "capacitors": [],
    }
    return feeder, pool


def main():
    f = hipv()
    (OUT / "hipv.json").write_text(json.dumps(f, indent=2) + "\n")
    write_profile(OUT / "day.csv", *day_profile(f))
    c, pool = coupled30()
    c["pv_pool"] = pool
    (OUT / "coupled30.json").write_text(json.dumps(c, indent=2) + "\n")


if __name__ == "__main__":
    main()
