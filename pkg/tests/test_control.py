import math

import numpy as np
import pytest
from builders import chain
from hypothesis import given, settings
from hypothesis import strategies as st

from crossphase.control import (
    FULL,
    PER_PHASE,
    STRATEGIES,
    ControlPlan,
    PartitionScheme,
    apply_plan,
    compare_controllers,
    iterative_control,
    lp_min_q,
    prioritized_q_intervention,
    pv_addition_study,
    run_strategy,
    solve_min_q,
)
from crossphase.netmodel import PHASES, PVSpec, apply_instance, feeder_from_dict
from crossphase.sensitivity import build_vqsm
from crossphase.solver import ConvergenceConfig, VoltageLimits, check_violations, solve

LIMITS = VoltageLimits()
CFG = ConvergenceConfig()


def over_a(tap=1.058):
    """Two-bus feeder whose phase A sits about 1% above the upper limit."""
    doc = chain(2, miles=2500 / 5280, load_kw=30)
    doc["regulators"].append({"id": "r", "segment": "S01", "phase": "A", "tap_ratio": tap})
    for ph in PHASES:
        doc["pvs"].append({"id": f"pv{ph}", "bus": "B1", "phase": ph, "p_kw": 100, "s_kva": 300})
    return feeder_from_dict(doc)


def single_pv(tap):
    doc = chain(2, miles=2500 / 5280, load_kw=30)
    doc["regulators"].append({"id": "r", "segment": "S01", "phase": "A", "tap_ratio": tap})
    doc["pvs"].append({"id": "pvA", "bus": "B1", "phase": "A", "p_kw": 100, "s_kva": 300})
    return feeder_from_dict(doc)


def b_pool_feeder(kw=200.0):
    doc = chain(6, miles=0.3, load_kw=20)
    for ph in "AC":
        doc["pvs"].append({"id": f"pv{ph}", "bus": "B3", "phase": ph, "p_kw": 50, "s_kva": 300})
    pool = [PVSpec(f"pb{i}", f"B{i}", "B", kw, 1.3 * kw) for i in (3, 4, 5)]
    return feeder_from_dict(doc), pool


def assert_honest(plan, feeder):
    """The residual is what a fresh nonlinear solve of the plan reports."""
    again = check_violations(solve(apply_plan(feeder, plan)), LIMITS)
    assert again.entries == plan.residual.entries


def assert_capability(plan, feeder):
    for a in plan.actions:
        pv = feeder.pv(a.pv)
        assert math.hypot(pv.p_kw, a.q_kvar) <= pv.s_kva * (1 + 1e-9)


class TestGreedy:
    def test_contrived_phase_a(self):
        f = over_a()
        vpu = solve(f).phasors.magnitude("B1", "A") / f.v_base
        assert 1.055 < vpu < 1.065
        plan = prioritized_q_intervention(f)
        assert plan.status == "ok" and plan.feasible
        assert [a.pv for a in plan.actions] == ["pvA"]
        q = plan.actions[0].q_kvar
        assert q > 0
        # brute force over the step grid: the smallest clearing setpoint
        grid = np.arange(0.0, 300.0, 10.0)
        clearing = next(
            g for g in grid if not check_violations(solve(f.with_pv_setpoints({"pvA": g})), LIMITS)
        )
        assert abs(q - clearing) <= 10.0
        assert_honest(plan, f)

    def test_no_violations_empty_plan(self, twobus):
        plan = prioritized_q_intervention(twobus, limits=VoltageLimits(0.8, 1.2))
        assert plan.actions == () and plan.iterations == 0 and plan.status == "ok"

    def test_bad_step(self):
        with pytest.raises(ValueError):
            prioritized_q_intervention(over_a(), step_q=0)

    def test_progress_and_capability(self, hipv, day):
        f = apply_plan(apply_instance(hipv, day, "h12"), {})
        plan = prioritized_q_intervention(f, step_q=20)
        worst = [row["worst_excess_pu"] for row in plan.trace]
        assert all(b <= a + 1e-12 for a, b in zip(worst, worst[1:]))
        assert plan.status in ("ok", "oscillation", "infeasible", "max-rounds")
        assert_capability(plan, f)
        assert_honest(plan, f)

    def test_infeasible_without_capability(self):
        doc = chain(2, miles=2500 / 5280, load_kw=30)
        doc["regulators"].append({"id": "r", "segment": "S01", "phase": "A", "tap_ratio": 1.08})
        doc["pvs"].append({"id": "pv", "bus": "B1", "phase": "A", "p_kw": 100, "s_kva": 100})
        plan = prioritized_q_intervention(feeder_from_dict(doc))
        assert plan.status == "infeasible"
        assert not plan.feasible

    def test_deterministic(self):
        a, b = prioritized_q_intervention(over_a()), prioritized_q_intervention(over_a())
        assert a.actions == b.actions and a.trace == b.trace


class TestStudy:
    def test_empty_pool(self, twobus):
        rep = pv_addition_study(twobus, [], limits=VoltageLimits(0.8, 1.2))
        assert len(rep.rows) == 1 and rep.rows[0].stage == "upf"

    def test_unknown_bus(self, twobus):
        with pytest.raises(ValueError):
            pv_addition_study(twobus, [PVSpec("x", "ghost", "A", 1, 2)])

    def test_bad_batch(self, twobus):
        with pytest.raises(ValueError):
            pv_addition_study(twobus, [], batch=0)

    def test_single_phase_violation(self):
        f, pool = b_pool_feeder()
        rep = pv_addition_study(f, pool)
        violated = {ph for r in rep.rows for ph, n in r.violations.items() if n and r.stage == "upf"}
        assert violated == {"C"}
        acted = {ph for r in rep.rows for ph, n in r.interventions.items() if n}
        assert acted == {"C"}
        final = rep.plans[-1]
        assert final.feasible
        # brute force on the only phase-C PV
        grown = f.with_pvs(pool)
        q = final.setpoints["pvC"]
        grid = sorted(np.arange(-290.0, 300.0, 10.0), key=lambda g: (abs(g), g))
        smallest = next(
            g for g in grid
            if not check_violations(solve(grown.with_pv_setpoints({"pvC": g})), LIMITS)
        )
        assert abs(q - smallest) <= 10.0

    def test_hosting_capacity_and_progress(self, coupled30, coupled30_pool):
        rep = pv_addition_study(coupled30, coupled30_pool, batch=2)
        assert rep.error is None
        for plan in rep.plans:
            worst = [row["worst_excess_pu"] for row in plan.trace]
            assert all(b <= a + 1e-12 for a, b in zip(worst, worst[1:]))
        hc = rep.hosting_capacity_kw()
        last_ok = max(i for i, p in enumerate(rep.plans) if p.feasible)
        assert hc == rep.pv_kw_by_step[last_ok]
        assert rep.cross_phase_events()


class TestLinear:
    def test_closed_form(self):
        sol = solve_min_q(np.array([1.05 * 2400 + 7.06]), np.array([[-0.353]]), np.zeros(1),
                          np.array([100.0]), 0.95 * 2400, 1.05 * 2400)
        assert sol.status == "optimal"
        assert sol.q[0] == pytest.approx(20.0, rel=1e-9)

    def test_no_violation_zero(self):
        sol = solve_min_q(np.array([1.0, 1.01]), np.array([[-0.01, 0.002], [0.003, -0.01]]),
                          np.zeros(2), np.full(2, 50.0), 0.95, 1.05)
        np.testing.assert_allclose(sol.q, 0.0, atol=1e-12)

    def test_infeasible_fallback(self):
        sol = solve_min_q(np.array([1.10]), np.array([[-0.0001]]), np.zeros(1),
                          np.array([100.0]), 0.95, 1.05)
        assert sol.status == "infeasible"
        assert sol.q[0] == pytest.approx(100.0)
        assert sol.max_violation == pytest.approx(0.04, rel=1e-6)

    def test_no_columns(self):
        assert solve_min_q(np.array([1.1]), np.zeros((1, 0)), np.zeros(0), np.zeros(0),
                           0.95, 1.05).status == "infeasible"

    @settings(max_examples=10, deadline=None)
    @given(st.floats(1.053, 1.075))
    def test_single_pv_matches_closed_form(self, tap):
        f = single_pv(tap)
        base = solve(f)
        sm = build_vqsm(f, [("B1", "A")], ["pvA"], base=base)
        overshoot = base.phasors.magnitude("B1", "A") - LIMITS.v_max * f.v_base
        plan = lp_min_q(f, sm, LIMITS, base=base)
        expected = min(overshoot / abs(sm.values[0, 0]), f.pv("pvA").q_capability)
        assert abs(plan.setpoints["pvA"] - expected) <= 10.0
        assert_capability(plan, f)

    def test_lp_no_violation(self, twobus):
        lim = VoltageLimits(0.8, 1.2)
        sm = build_vqsm(twobus, [("N4", ph) for ph in PHASES])
        plan = lp_min_q(twobus, sm, lim)
        assert plan.actions == () and plan.feasible


class TestPartition:
    def test_modes(self):
        with pytest.raises(ValueError):
            PartitionScheme("zones")

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.sampled_from(PHASES), max_size=12),
        st.lists(st.sampled_from(PHASES), max_size=8),
    )
    def test_cells_disjoint_cover(self, row_ph, col_ph):
        rows = [(f"n{i}", ph) for i, ph in enumerate(row_ph)]
        cols = [(f"p{i}", ph) for i, ph in enumerate(col_ph)]
        cells = PER_PHASE.cells(rows, cols)
        r = [i for c, _ in cells for i in c]
        c = [j for _, cc in cells for j in cc]
        assert sorted(r) == list(range(len(rows)))
        assert sorted(c) == list(range(len(cols)))
        for rr, cc in cells:
            assert len({rows[i][1] for i in rr} | {cols[j][1] for j in cc}) <= 1
        (full_r, full_c), = FULL.cells(rows, cols)
        assert full_r == list(range(len(rows))) and full_c == list(range(len(cols)))


class TestIterative:
    def test_one_outer_round(self):
        plan = iterative_control(over_a())
        assert plan.status == "ok" and plan.iterations == 1
        assert [a.pv for a in plan.actions] == ["pvA"]

    def test_no_violations(self, twobus):
        plan = iterative_control(twobus, VoltageLimits(0.8, 1.2))
        assert plan.iterations == 0 and plan.actions == ()

    def test_full_beats_per_phase(self, hipv, day):
        f = apply_plan(apply_instance(hipv, day, "h12"), {})
        base = solve(f)
        sm = build_vqsm(f, base=base)
        full = iterative_control(f, LIMITS, FULL, sm=sm)
        per = iterative_control(f, LIMITS, PER_PHASE, sm=sm)
        assert full.feasible and full.iterations <= 5
        assert len(full.residual) <= len(per.residual)
        for plan in (full, per):
            assert_honest(plan, f)
            assert_capability(plan, f)


@pytest.fixture(scope="module")
def rows(hipv, day):
    return compare_controllers(hipv, day)


class TestCompare:
    def test_ordering(self, rows, day):
        by = {(r.instance, r.strategy): r for r in rows}
        assert len(rows) == 3 * len(day.labels)
        for t in day.labels:
            upf, per, full = (by[t, s] for s in STRATEGIES)
            assert upf.violations >= per.violations >= full.violations == 0
            assert upf.total_q == 0
            if upf.violations == 0:
                assert per.total_q == full.total_q == 0

    def test_pattern(self, rows):
        upf = [r for r in rows if r.strategy == "upf"]
        assert any(r.violations for r in upf) and max(r.max_vpu for r in upf) > 1.05
        assert any(r.violations for r in rows if r.strategy == "per-phase")
        assert any(r.total_q > 0 for r in rows if r.strategy == "full")

    def test_bad_instance_does_not_abort(self, hipv, day):
        rows = compare_controllers(hipv, day, ["nope", day.labels[0]])
        assert [r.status for r in rows[:3]] == ["error"] * 3
        assert all(r.status != "error" for r in rows[3:])

    def test_unknown_strategy(self, twobus):
        with pytest.raises(ValueError):
            run_strategy(twobus, "magic", LIMITS, CFG)

    def test_plan_helpers(self):
        plan = ControlPlan((), check_violations(solve(over_a()), LIMITS), 0)
        assert plan.total_q == 0 and not plan.feasible and plan.setpoints == {}
