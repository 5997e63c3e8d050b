"""Reactive-power voltage control strategies.

* :func:`prioritized_q_intervention`: greedy loop, worst violation first,
  most sensitive PV first, fixed kVAr steps, re-solving after every step.
* :func:`pv_addition_study`: the PV-addition / voltage-control procedure that
  grows PV penetration batch by batch and repairs violations after each batch.
* :func:`lp_min_q`: minimum total |Q| that keeps the linearised voltages inside
  the limits, over the full sensitivity matrix or per phase.
* :func:`iterative_control`: repeated LP with sensitivity refresh.
* :func:`compare_controllers`: UPF vs per-phase vs full, per instance.

Every plan is verified with a nonlinear power flow; ``plan.residual`` always
comes from that solve, never from the linear model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .netmodel import PHASES, Feeder, PVSpec, TimeSeriesProfile, apply_instance
from .sensitivity import DEFAULT_DELTA_Q, SensitivityMatrix, Solver, build_vqsm
from .solver import (
    ConvergenceConfig,
    PowerFlowError,
    PowerFlowResult,
    ViolationReport,
    VoltageLimits,
    check_violations,
    solve,
)

log = logging.getLogger(__name__)

DEFAULT_STEP_Q = 10.0
REFRESH_FACTOR = 5.0
CANDIDATES_PER_TARGET = 3
_Q_EPS = 1e-6


@dataclass(frozen=True)
class ControlAction:
    pv: str
    q_kvar: float


@dataclass(frozen=True)
class PartitionScheme:
    mode: str = "full"  # "full" or "per-phase"

    def __post_init__(self) -> None:
        if self.mode not in ("full", "per-phase"):
            raise ValueError(f"unknown partition mode {self.mode!r}")

    def cells(
        self, rows: Sequence[tuple[str, str]], columns: Sequence[tuple[str, str]]
    ) -> list[tuple[list[int], list[int]]]:
        """Row/column index groups; per-phase cells are disjoint and cover all."""
        if self.mode == "full":
            return [(list(range(len(rows))), list(range(len(columns))))]
        return [
            (
                [i for i, r in enumerate(rows) if r[1] == ph],
                [j for j, c in enumerate(columns) if c[1] == ph],
            )
            for ph in PHASES
        ]


FULL = PartitionScheme("full")
PER_PHASE = PartitionScheme("per-phase")


@dataclass
class ControlPlan:
    actions: tuple[ControlAction, ...]
    residual: ViolationReport
    iterations: int
    status: str = "ok"  # ok | infeasible | oscillation | max-rounds
    result: PowerFlowResult | None = field(default=None, repr=False)
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def total_q(self) -> float:
        return float(sum(abs(a.q_kvar) for a in self.actions))

    @property
    def setpoints(self) -> dict[str, float]:
        return {a.pv: a.q_kvar for a in self.actions}

    @property
    def feasible(self) -> bool:
        return len(self.residual) == 0


def _actions(feeder: Feeder) -> tuple[ControlAction, ...]:
    return tuple(
        ControlAction(pv.id, pv.q_kvar) for pv in feeder.pvs if abs(pv.q_kvar) > _Q_EPS
    )


def apply_plan(feeder: Feeder, plan: ControlPlan | dict[str, float]) -> Feeder:
    """Feeder with every PV at the plan's setpoint (UPF for PVs not in the plan)."""
    q = plan.setpoints if isinstance(plan, ControlPlan) else dict(plan)
    return feeder.with_pv_setpoints({pv.id: q.get(pv.id, 0.0) for pv in feeder.pvs})


def _clip_to_capability(feeder: Feeder, q: dict[str, float]) -> dict[str, float]:
    out = {}
    for pid, val in q.items():
        cap = feeder.pv(pid).q_capability
        out[pid] = max(-cap, min(cap, val))
    return out


# --------------------------------------------------------------------------
# Greedy prioritised intervention
# --------------------------------------------------------------------------


def prioritized_q_intervention(
    feeder: Feeder,
    sm: SensitivityMatrix | None = None,
    limits: VoltageLimits | None = None,
    step_q: float = DEFAULT_STEP_Q,
    max_rounds: int = 500,
    cfg: ConvergenceConfig | None = None,
    solver: Solver = solve,
    delta_q: float = DEFAULT_DELTA_Q,
) -> ControlPlan:
    """Greedy repair starting from the feeder's current PV setpoints.

    Each round takes the worst violation, ranks PVs by |sensitivity| at that
    node-phase and moves one that still has headroom by ``step_q`` in the
    direction that helps (absorb for over-voltage on a same-phase PV). A move
    that would raise the worst violation is rejected; the next-ranked PV is
    tried, then the worst violation of each other violated phase, and finally
    one joint move taking the best candidate for every violated phase at once
    (two phases whose worst violations are tied can only improve together).
    Violations created on another phase are therefore handled by recruiting
    PVs of that phase. When every candidate is rejected the plan stops as
    "oscillation".
    """
    limits = limits or VoltageLimits()
    cfg = cfg or ConvergenceConfig()
    if step_q <= 0:
        raise ValueError("step_q must be > 0")
    current = feeder
    result = solver(current, cfg)
    report = check_violations(result, limits)
    trace = [_trace_row(0, report, None, 0.0)]
    start_phases = {e.phase for e in report.entries}
    if not report.entries:
        return ControlPlan(_actions(current), report, 0, "ok", result, trace)
    if sm is None:
        sm = build_vqsm(current, cfg=cfg, solver=solver, base=result, delta_q=delta_q)

    status = "max-rounds"
    rounds = 0
    while rounds < max_rounds:
        per_target = [
            _candidate_moves(current, sm, (t.bus, t.phase), t.kind, step_q)
            for t in _targets(report)
        ]
        per_target = [c for c in per_target if c]
        if not per_target:
            status = "infeasible"
            break
        # single moves first, then one joint move across the violated phases
        trials = [{pid: dq} for cands in per_target for pid, dq in cands]
        if len(per_target) > 1:
            joint: dict[str, float] = {}
            for cands in per_target:
                pid, dq = next(((p, d) for p, d in cands if p not in joint), cands[0])
                joint.setdefault(pid, dq)
            trials.append(joint)
        accepted = None
        for move in trials:
            candidate = current.with_pv_setpoints(
                {pid: current.pv(pid).q_kvar + dq for pid, dq in move.items()}
            )
            new_result = solver(candidate, cfg)
            new_report = check_violations(new_result, limits)
            if new_report.worst_excess <= report.worst_excess + 1e-12:
                accepted = (move, candidate, new_result, new_report)
                break
        if accepted is None:
            log.info("every candidate move raises the worst violation; stopping")
            status = "oscillation"
            break
        move, current, result, report = accepted
        rounds += 1
        new_phases = sorted({e.phase for e in report.entries} - start_phases)
        trace.append(
            _trace_row(rounds, report, "+".join(move), sum(move.values()), new_phases)
        )
        if not report.entries:
            status = "ok"
            break
    return ControlPlan(_actions(current), report, rounds, status, result, trace)


def _trace_row(rnd, report, pid, dq, new_phases=()) -> dict:
    return {
        "round": rnd,
        "pv": pid or "",
        "dq_kvar": dq,
        "violations": len(report),
        **{f"violations_{ph}": n for ph, n in report.counts.items()},
        "worst_excess_pu": report.worst_excess,
        "max_vpu": report.max_vpu,
        "new_phases": "".join(new_phases),
    }


def _targets(report) -> list:
    """Worst violation of each violated phase, most severe first."""
    worst: dict[str, object] = {}
    for e in report.entries:
        if e.phase not in worst or e.excess > worst[e.phase].excess:
            worst[e.phase] = e
    return sorted(worst.values(), key=lambda e: (-e.excess, e.phase))


def _candidate_moves(
    feeder: Feeder,
    sm: SensitivityMatrix,
    node: tuple[str, str],
    kind: str,
    step_q: float,
    limit: int = CANDIDATES_PER_TARGET,
) -> list[tuple[str, float]]:
    """Up to ``limit`` helpful moves at ``node``, by descending |sensitivity|."""
    row = sm.row(*node)
    want = -1.0 if kind == "over" else 1.0
    order = sorted(range(len(row)), key=lambda j: (-abs(row[j]), sm.pv_ids[j]))
    out = []
    for j in order:
        if abs(row[j]) < 1e-12:
            continue
        pid = sm.pv_ids[j]
        direction = want * math.copysign(1.0, row[j])
        pv = feeder.pv(pid)
        room = pv.q_capability - direction * pv.q_kvar
        if room <= _Q_EPS:
            continue
        out.append((pid, direction * min(step_q, room)))
        if len(out) == limit:
            break
    return out


# --------------------------------------------------------------------------
# PV addition study
# --------------------------------------------------------------------------


@dataclass
class StudyRow:
    step: int
    n_added: int
    stage: str  # upf | carried | controlled
    violations: dict[str, int]
    max_vpu: float
    interventions: dict[str, int]
    total_q: float
    new_phases: str = ""

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


@dataclass
class StudyReport:
    rows: list[StudyRow] = field(default_factory=list)
    plans: list[ControlPlan] = field(default_factory=list)
    pv_kw_by_step: list[float] = field(default_factory=list)
    error: str | None = None

    def hosting_capacity_kw(self) -> float:
        """Installed PV kW at the last step whose final plan clears every violation."""
        hc = 0.0
        for step, plan in enumerate(self.plans):
            if plan.feasible:
                hc = self.pv_kw_by_step[step]
        return hc

    def cross_phase_events(self) -> list[StudyRow]:
        return [r for r in self.rows if r.new_phases]


def _interventions(feeder: Feeder, plan: ControlPlan) -> dict[str, int]:
    out = {ph: 0 for ph in PHASES}
    for a in plan.actions:
        out[feeder.pv(a.pv).phase] += 1
    return out


def pv_addition_study(
    feeder: Feeder,
    pv_pool: Sequence[PVSpec],
    profile: TimeSeriesProfile | None = None,
    instance: str | None = None,
    limits: VoltageLimits | None = None,
    cfg: ConvergenceConfig | None = None,
    batch: int = 1,
    step_q: float = DEFAULT_STEP_Q,
    max_rounds: int = 500,
    solver: Solver = solve,
    delta_q: float = DEFAULT_DELTA_Q,
) -> StudyReport:
    """Add PVs from ``pv_pool`` ``batch`` at a time; after each addition run UPF,
    re-apply the previous setpoints, and repair with the greedy loop.

    Step 0 is the feeder as given (UPF only, no repair needed unless violated).
    A stage row's ``new_phases`` lists phases violated somewhere in that stage
    (including inside the greedy loop) but not at UPF.
    """
    limits = limits or VoltageLimits()
    cfg = cfg or ConvergenceConfig()
    if batch < 1:
        raise ValueError("batch must be >= 1")
    known = set(feeder.buses)
    for pv in pv_pool:
        if pv.bus not in known:
            raise ValueError(f"pool PV {pv.id!r} sits on unknown bus {pv.bus!r}")

    report = StudyReport()
    prev_q: dict[str, float] = {}
    steps = [0] + list(range(batch, len(pv_pool) + batch, batch)) if pv_pool else [0]
    for step, n in enumerate(steps):
        n = min(n, len(pv_pool))
        grown = feeder.with_pvs(pv_pool[:n])
        if profile is not None and instance is not None:
            grown = apply_instance(grown, profile, instance)
        upf = apply_plan(grown, {})
        try:
            upf_res = solver(upf, cfg)
            upf_rep = check_violations(upf_res, limits)
            upf_phases = {e.phase for e in upf_rep.entries}
            report.rows.append(_study_row(step, n, "upf", upf_rep, {}, upf, ""))
            carried = apply_plan(upf, _clip_to_capability(upf, prev_q))
            carried_new = ""
            if prev_q:
                c_res = solver(carried, cfg)
                c_rep = check_violations(c_res, limits)
                carried_new = "".join(sorted({e.phase for e in c_rep.entries} - upf_phases))
                report.rows.append(
                    _study_row(step, n, "carried", c_rep, prev_q, carried, carried_new)
                )
            if step == 0 and not upf_rep.entries and not prev_q:
                plan = ControlPlan((), upf_rep, 0, "ok", upf_res, [])
            else:
                plan = prioritized_q_intervention(
                    carried, None, limits, step_q, max_rounds, cfg, solver, delta_q
                )
                new = "".join(
                    sorted(
                        {e.phase for e in plan.residual.entries} - upf_phases
                        | {ph for t in plan.trace for ph in t["new_phases"]}
                        | set(carried_new)
                    )
                )
                report.rows.append(
                    _study_row(step, n, "controlled", plan.residual, plan.setpoints, carried, new)
                )
        except PowerFlowError as exc:
            report.error = f"step {step}: {exc}"
            return report
        report.plans.append(plan)
        report.pv_kw_by_step.append(sum(p.p_kw for p in grown.pvs))
        prev_q = plan.setpoints
    return report


def _study_row(step, n, stage, rep, q, feeder, new) -> StudyRow:
    inter = {ph: 0 for ph in PHASES}
    for pid, val in q.items():
        if abs(val) > _Q_EPS:
            inter[feeder.pv(pid).phase] += 1
    return StudyRow(
        step=step,
        n_added=n,
        stage=stage,
        violations=rep.counts,
        max_vpu=rep.max_vpu,
        interventions=inter,
        total_q=float(sum(abs(v) for v in q.values())),
        new_phases=new,
    )


# --------------------------------------------------------------------------
# Linear programme
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearSolution:
    q: np.ndarray
    status: str  # "optimal" or "infeasible" (least max violation returned)
    max_violation: float


def solve_min_q(
    v0: np.ndarray,
    sens: np.ndarray,
    q0: np.ndarray,
    capability: np.ndarray,
    v_min: float,
    v_max: float,
) -> LinearSolution:
    """min sum|q|  s.t.  v_min <= v0 + sens (q - q0) <= v_max,  |q| <= capability.

    ``q = u - w`` with ``u, w >= 0``. If no ``q`` satisfies the limits, the
    least achievable max violation ``t`` is found first and the Q total is then
    minimised with the limits relaxed by ``t``.
    """
    v0 = np.asarray(v0, float)
    sens = np.asarray(sens, float).reshape(len(v0), -1)
    q0 = np.asarray(q0, float)
    cap = np.maximum(np.asarray(capability, float), 0.0)
    n = sens.shape[1]
    if n == 0:
        worst = float(np.max(np.maximum(v0 - v_max, v_min - v0), initial=0.0))
        return LinearSolution(np.zeros(0), "optimal" if worst <= 0 else "infeasible", max(worst, 0.0))

    base = v0 - sens @ q0
    a = np.hstack([sens, -sens])
    a_ub = np.vstack([a, -a])
    bounds = [(0.0, c) for c in cap] * 2
    cost = np.ones(2 * n)

    def stage_two(slack: float):
        b_ub = np.concatenate([v_max + slack - base, base - (v_min - slack)])
        return linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")

    res = stage_two(0.0)
    if res.status == 0:
        return LinearSolution(res.x[:n] - res.x[n:], "optimal", 0.0)

    # least max violation: variables (u, w, t)
    a_t = np.hstack([a_ub, -np.ones((a_ub.shape[0], 1))])
    b_t = np.concatenate([v_max - base, base - v_min])
    c_t = np.zeros(2 * n + 1)
    c_t[-1] = 1.0
    first = linprog(c_t, A_ub=a_t, b_ub=b_t, bounds=bounds + [(0.0, None)], method="highs")
    if first.status != 0:
        raise RuntimeError(f"fallback LP failed: {first.message}")
    t = float(first.x[-1])
    res = stage_two(t * (1 + 1e-9) + 1e-12)
    x = res.x if res.status == 0 else first.x[:-1]
    return LinearSolution(x[:n] - x[n:], "infeasible", t)


def lp_min_q(
    feeder: Feeder,
    sm: SensitivityMatrix,
    limits: VoltageLimits | None = None,
    partition: PartitionScheme = FULL,
    cfg: ConvergenceConfig | None = None,
    solver: Solver = solve,
    base: PowerFlowResult | None = None,
    margin: float = 0.0,
) -> ControlPlan:
    """Minimum-|Q| setpoints from the linearised voltages, verified nonlinearly.

    ``sm`` rows are the constrained node-phases. In per-phase mode each phase
    is solved on its own rows and PVs only; the cell results are merged before
    the verification solve. ``margin`` (p.u.) tightens both limits in the LP.
    """
    limits = limits or VoltageLimits()
    cfg = cfg or ConvergenceConfig()
    base = base or solver(feeder, cfg)
    v0 = np.array([base.phasors.magnitude(b, ph) for b, ph in sm.rows]) / feeder.v_base
    sens = sm.per_unit()
    pvs = [feeder.pv(pid) for pid in sm.pv_ids]
    q0 = np.array([pv.q_kvar for pv in pvs])
    cap = np.array([pv.q_capability for pv in pvs])

    q_new = q0.copy()
    status = "ok"
    for rows, cols in partition.cells(sm.rows, sm.columns):
        if not rows:
            continue
        sol = solve_min_q(
            v0[rows],
            sens[np.ix_(rows, cols)],
            q0[cols],
            cap[cols],
            limits.v_min + margin,
            limits.v_max - margin,
        )
        if cols:
            q_new[cols] = sol.q
        if sol.status != "optimal":
            status = "infeasible"
    setpoints = {pid: float(np.clip(q, -c, c)) for pid, q, c in zip(sm.pv_ids, q_new, cap)}
    controlled = feeder.with_pv_setpoints(setpoints)
    result = solver(controlled, cfg)
    residual = check_violations(result, limits)
    trace = [
        {
            "round": 1,
            "violations": len(residual),
            "max_vpu": residual.max_vpu,
            "total_q_kvar": float(sum(abs(v) for v in setpoints.values())),
            "lp_status": status,
        }
    ]
    return ControlPlan(_actions(controlled), residual, 1, status, result, trace)


# --------------------------------------------------------------------------
# Iterative refinement
# --------------------------------------------------------------------------


def _refresh(
    feeder: Feeder,
    sm: SensitivityMatrix,
    built_at: dict[str, float],
    threshold: float,
    cfg: ConvergenceConfig,
    solver: Solver,
    base: PowerFlowResult,
    delta_q: float,
) -> tuple[SensitivityMatrix, dict[str, float]]:
    moved = [
        pid for pid in sm.pv_ids if abs(feeder.pv(pid).q_kvar - built_at[pid]) > threshold
    ]
    v0 = np.array([base.phasors.magnitude(b, ph) for b, ph in sm.rows])
    values = sm.values.copy()
    steps = list(sm.delta_q)
    if moved:
        part = build_vqsm(
            feeder, sm.rows, moved, delta_q, cfg=cfg, solver=solver, base=base
        )
        for k, pid in enumerate(moved):
            j = sm.pv_ids.index(pid)
            values[:, j] = part.values[:, k]
            steps[j] = part.delta_q[k]
            built_at = {**built_at, pid: feeder.pv(pid).q_kvar}
    new = SensitivityMatrix(values, sm.rows, sm.columns, tuple(steps), v0, sm.v_base, sm.base_instance)
    return new, built_at


def iterative_control(
    feeder: Feeder,
    limits: VoltageLimits | None = None,
    partition: PartitionScheme = FULL,
    max_outer: int = 5,
    cfg: ConvergenceConfig | None = None,
    solver: Solver = solve,
    delta_q: float = DEFAULT_DELTA_Q,
    step_q: float = DEFAULT_STEP_Q,
    margin: float = 0.001,
    sm: SensitivityMatrix | None = None,
) -> ControlPlan:
    """LP control with sensitivity refinement at each verified operating point.

    Stops when the verified residual is empty, after ``max_outer`` rounds, or
    when the same non-empty violation set shows up for a third time.
    """
    limits = limits or VoltageLimits()
    cfg = cfg or ConvergenceConfig()
    current = feeder
    result = solver(current, cfg)
    report = check_violations(result, limits)
    if not report.entries:
        return ControlPlan(_actions(current), report, 0, "ok", result, [])
    if sm is None:
        sm = build_vqsm(current, cfg=cfg, solver=solver, base=result, delta_q=delta_q)
    built_at = {pid: current.pv(pid).q_kvar for pid in sm.pv_ids}

    seen: dict[frozenset, int] = {}
    trace = []
    status = "max-rounds"
    outer = 0
    plan = None
    while outer < max_outer:
        outer += 1
        plan = lp_min_q(current, sm, limits, partition, cfg, solver, base=result, margin=margin)
        current = current.with_pv_setpoints(
            {pid: plan.setpoints.get(pid, 0.0) for pid in sm.pv_ids}
        )
        result, report = plan.result, plan.residual
        trace.append(
            {
                "round": outer,
                "violations": len(report),
                **{f"violations_{ph}": n for ph, n in report.counts.items()},
                "max_vpu": report.max_vpu,
                "total_q_kvar": plan.total_q,
                "lp_status": plan.status,
            }
        )
        if not report.entries:
            status = "ok"
            break
        key = report.keys
        seen[key] = seen.get(key, 0) + 1
        if seen[key] >= 3:
            status = "oscillation"
            break
        sm, built_at = _refresh(
            current, sm, built_at, REFRESH_FACTOR * step_q, cfg, solver, result, delta_q
        )
    if status == "max-rounds" and plan is not None and plan.status == "infeasible":
        status = "infeasible"
    return ControlPlan(_actions(current), report, outer, status, result, trace)


# --------------------------------------------------------------------------
# Strategy comparison
# --------------------------------------------------------------------------

STRATEGIES = ("upf", "per-phase", "full")


@dataclass(frozen=True)
class ComparisonRow:
    instance: str
    strategy: str
    violations: int
    max_vpu: float
    total_q: float
    iterations: int
    status: str
    error: str = ""


def run_strategy(
    feeder: Feeder,
    strategy: str,
    limits: VoltageLimits,
    cfg: ConvergenceConfig,
    max_outer: int = 5,
    solver: Solver = solve,
    sm: SensitivityMatrix | None = None,
) -> ControlPlan:
    if strategy == "upf":
        upf = apply_plan(feeder, {})
        res = solver(upf, cfg)
        return ControlPlan((), check_violations(res, limits), 0, "ok", res, [])
    part = PER_PHASE if strategy == "per-phase" else FULL
    if strategy not in ("per-phase", "full"):
        raise ValueError(f"unknown strategy {strategy!r}")
    return iterative_control(
        apply_plan(feeder, {}), limits, part, max_outer, cfg, solver, sm=sm
    )


def compare_controllers(
    feeder: Feeder,
    profile: TimeSeriesProfile,
    instances: Sequence[str] | None = None,
    limits: VoltageLimits | None = None,
    cfg: ConvergenceConfig | None = None,
    max_outer: int = 5,
    solver: Solver = solve,
) -> list[ComparisonRow]:
    """UPF, per-phase and full-matrix control at every instance.

    Both controlled strategies start from UPF and run the same iterative LP;
    they differ only in the partition. A failing instance is reported with its
    error and the batch carries on.
    """
    limits = limits or VoltageLimits()
    cfg = cfg or ConvergenceConfig()
    instances = list(profile.labels if instances is None else instances)
    rows = []
    for t in instances:
        try:
            inst = apply_plan(apply_instance(feeder, profile, t), {})
            base = solver(inst, cfg)
            sm = None
            if check_violations(base, limits).entries:
                sm = build_vqsm(inst, cfg=cfg, solver=solver, base=base, label=t)
        except (PowerFlowError, KeyError, ValueError) as exc:
            for s in STRATEGIES:
                rows.append(ComparisonRow(t, s, -1, math.nan, math.nan, 0, "error", str(exc)))
            continue
        for s in STRATEGIES:
            try:
                plan = run_strategy(inst, s, limits, cfg, max_outer, solver, sm)
                rows.append(
                    ComparisonRow(
                        t, s, len(plan.residual), plan.residual.max_vpu,
                        plan.total_q, plan.iterations, plan.status,
                    )
                )
            except (PowerFlowError, RuntimeError, ValueError) as exc:
                rows.append(ComparisonRow(t, s, -1, math.nan, math.nan, 0, "error", str(exc)))
    return rows
