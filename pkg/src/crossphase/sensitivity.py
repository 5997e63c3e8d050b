"""Voltage/reactive-power sensitivities by perturbation, and the earth/mutual
split of a voltage change on the two-bus system."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .carson import build_primitive, decompose
from .netmodel import PHASES, Feeder
from .solver import (
    PHASE_INDEX,
    ConvergenceConfig,
    PowerFlowResult,
    solve,
    solve_two_bus,
)

Solver = Callable[[Feeder, ConvergenceConfig], PowerFlowResult]

DEFAULT_DELTA_Q = 100.0


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityMatrix:
    """``values[i, j]``: change of |V| at node-phase ``rows[i]`` (volts) per kVAr
    absorbed by PV ``columns[j]``."""

    values: np.ndarray
    rows: tuple[tuple[str, str], ...]
    columns: tuple[tuple[str, str], ...]  # (pv id, phase)
    delta_q: tuple[float, ...]
    v0: np.ndarray  # base |V| per row, volts
    v_base: float
    base_instance: str = ""

    @property
    def pv_ids(self) -> tuple[str, ...]:
        return tuple(c[0] for c in self.columns)

    def row(self, bus: str, phase: str) -> np.ndarray:
        try:
            return self.values[self.rows.index((bus, phase))]
        except ValueError:
            raise KeyError(f"node {bus}.{phase} is not a monitored row") from None

    def column(self, pv_id: str) -> np.ndarray:
        return self.values[:, self.pv_ids.index(pv_id)]

    def per_unit(self) -> np.ndarray:
        """Sensitivities in p.u. per kVAr."""
        return self.values / self.v_base

    def subset(self, rows: Sequence[tuple[str, str]], pv_ids: Sequence[str]) -> SensitivityMatrix:
        ri = [self.rows.index(r) for r in rows]
        ci = [self.pv_ids.index(p) for p in pv_ids]
        return replace(
            self,
            values=self.values[np.ix_(ri, ci)],
            rows=tuple(self.rows[i] for i in ri),
            columns=tuple(self.columns[j] for j in ci),
            delta_q=tuple(self.delta_q[j] for j in ci),
            v0=self.v0[ri],
        )


def perturb(feeder: Feeder, dq: dict[str, float]) -> Feeder:
    """Add ``dq`` kVAr of absorption to the named PVs."""
    return feeder.with_pv_setpoints({k: feeder.pv(k).q_kvar + v for k, v in dq.items()})


def _feasible_step(feeder: Feeder, pv_id: str, delta_q: float) -> float:
    pv = feeder.pv(pv_id)
    cap = pv.q_capability
    room = cap - pv.q_kvar if delta_q > 0 else -cap - pv.q_kvar
    step = delta_q if abs(room) >= abs(delta_q) else room
    if abs(step) < 1e-9 * max(1.0, abs(delta_q)):
        # no headroom in the requested direction: probe the other way
        room = -cap - pv.q_kvar if delta_q > 0 else cap - pv.q_kvar
        step = -delta_q if abs(room) >= abs(delta_q) else room
    return step


def _magnitudes(result: PowerFlowResult, rows: Sequence[tuple[str, str]]) -> np.ndarray:
    return np.array([result.phasors.magnitude(b, ph) for b, ph in rows])


def build_vqsm(
    feeder: Feeder,
    monitored: Sequence[tuple[str, str]] | None = None,
    controllable: Sequence[str] | None = None,
    delta_q: float = DEFAULT_DELTA_Q,
    cfg: ConvergenceConfig | None = None,
    solver: Solver = solve,
    base: PowerFlowResult | None = None,
    label: str = "",
) -> SensitivityMatrix:
    """One-sided perturbation sensitivities, one extra solve per PV.

    A PV without ``delta_q`` of headroom is perturbed by what it has left (or
    in the opposite direction when it has none) and its column is scaled by
    the step actually taken.
    """
    if delta_q == 0 or not math.isfinite(delta_q):
        raise SensitivityError("delta_q must be a non-zero finite number")
    cfg = cfg or ConvergenceConfig()
    rows = tuple(monitored) if monitored is not None else tuple(feeder.node_phases())
    pv_ids = tuple(controllable) if controllable is not None else tuple(p.id for p in feeder.pvs)
    base = base or solver(feeder, cfg)
    v0 = _magnitudes(base, rows)

    values = np.zeros((len(rows), len(pv_ids)))
    steps = []
    for j, pid in enumerate(pv_ids):
        step = _feasible_step(feeder, pid, delta_q)
        steps.append(step)
        if step == 0:
            continue
        res = solver(perturb(feeder, {pid: step}), cfg)
        values[:, j] = (_magnitudes(res, rows) - v0) / step
    cols = tuple((pid, feeder.pv(pid).phase) for pid in pv_ids)
    return SensitivityMatrix(values, rows, cols, tuple(steps), v0, feeder.v_base, label)


def rank_pvs_for_node(sm: SensitivityMatrix, node: tuple[str, str]) -> list[str]:
    """PV ids by descending |sensitivity| at ``node``; ties by id."""
    r = sm.row(*node)
    return [pid for _, pid in sorted(zip(-np.abs(r), sm.pv_ids), key=lambda t: (t[0], t[1]))]


# --------------------------------------------------------------------------
# Earth / mutual decomposition (two-bus)
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeltaDecomposition:
    """Voltage change at the load bus split into the uniform earth-return part
    and the remaining self/mutual part. Voltage changes are ``-Z @ dI``."""

    labels: tuple[str, ...]
    delta_i: np.ndarray  # per conductor, A
    dv_earth: np.ndarray  # per phase A, B, C, V
    dv_mut: np.ndarray
    dv_total: np.ndarray
    base: PowerFlowResult
    perturbed: PowerFlowResult

    @property
    def load_bus(self) -> str:
        return self.base.feeder.tree[0][2]


def _same_except_pv_q(a: Feeder, b: Feeder) -> bool:
    if len(a.pvs) != len(b.pvs) or [p.id for p in a.pvs] != [p.id for p in b.pvs]:
        return False
    b_like_a = b.with_pv_setpoints({p.id: p.q_kvar for p in a.pvs})
    return b_like_a == a


def decompose_delta(
    feeder: Feeder,
    perturbed: Feeder,
    cfg: ConvergenceConfig | None = None,
    neutral: str = "floating",
) -> DeltaDecomposition:
    if not _same_except_pv_q(feeder, perturbed):
        raise SensitivityError("feeders must differ only in PV reactive setpoints")
    cfg = cfg or ConvergenceConfig()
    r0 = solve_two_bus(feeder, cfg, neutral=neutral)
    r1 = solve_two_bus(perturbed, cfg, neutral=neutral)
    (seg, _, _), = feeder.tree
    prim = build_primitive(seg)
    parts = decompose(prim)
    seg_id = seg.id
    di = np.array(
        [r1.phasors.currents[seg_id][lab] - r0.phasors.currents[seg_id][lab] for lab in prim.labels]
    )
    rows = prim.phase_index
    cols = [PHASE_INDEX[prim.labels[i]] for i in rows]
    dv_e = np.full(3, np.nan + 0j)
    dv_m = np.full(3, np.nan + 0j)
    dv_e[cols] = -(parts.z_earth @ di)[rows]
    dv_m[cols] = -(parts.z_mut @ di)[rows]
    return DeltaDecomposition(prim.labels, di, dv_e, dv_m, dv_e + dv_m, r0, r1)


@dataclass(frozen=True)
class PhasorEntry:
    phase: str
    base: tuple[float, float]
    perturbed: tuple[float, float]
    dv_earth: tuple[float, float]
    dv_mut: tuple[float, float]
    dv_total: tuple[float, float]
    closure_error: float


@dataclass(frozen=True)
class PhasorReport:
    bus: str
    entries: tuple[PhasorEntry, ...]

    def entry(self, phase: str) -> PhasorEntry:
        for e in self.entries:
            if e.phase == phase:
                return e
        raise KeyError(phase)

    def as_dict(self) -> dict:
        return {
            "bus": self.bus,
            "units": {"magnitude": "V", "angle": "deg"},
            "phases": {
                e.phase: {
                    k: {"magnitude": getattr(e, k)[0], "angle_deg": getattr(e, k)[1]}
                    for k in ("base", "perturbed", "dv_earth", "dv_mut", "dv_total")
                }
                | {"closure_error_v": e.closure_error}
                for e in self.entries
            },
        }

    def endpoints(self) -> list[tuple[str, str, float, float, float, float]]:
        """Vector tail/head coordinates for plotting: (phase, name, x0, y0, x1, y1).

        The earth and mutual deltas are chained tip-to-tail from the base phasor.
        """
        out = []
        for e in self.entries:
            b = _rect(e.base)
            de = _rect(e.dv_earth)
            dm = _rect(e.dv_mut)
            p = _rect(e.perturbed)
            for name, t, h in (
                ("base", 0j, b),
                ("dv_earth", b, b + de),
                ("dv_mut", b + de, b + de + dm),
                ("perturbed", 0j, p),
            ):
                out.append((e.phase, name, t.real, t.imag, h.real, h.imag))
        return out


def _polar(z: complex) -> tuple[float, float]:
    return abs(z), math.degrees(np.angle(z))


def _rect(p: tuple[float, float]) -> complex:
    return p[0] * complex(math.cos(math.radians(p[1])), math.sin(math.radians(p[1])))


CLOSURE_TOL_V = 1e-6


def phasor_report(
    decomp: DeltaDecomposition, base: PowerFlowResult, perturbed: PowerFlowResult
) -> PhasorReport:
    bus = decomp.load_bus
    if not (
        np.array_equal(base.phasors.voltages, decomp.base.phasors.voltages, equal_nan=True)
        and np.array_equal(
            perturbed.phasors.voltages, decomp.perturbed.phasors.voltages, equal_nan=True
        )
    ):
        raise SensitivityError("power-flow results do not belong to this decomposition")
    entries = []
    for ph in PHASES:
        k = PHASE_INDEX[ph]
        if np.isnan(decomp.dv_total[k]):
            continue
        v0 = base.phasors.v(bus, ph)
        v1 = perturbed.phasors.v(bus, ph)
        err = abs(v0 + decomp.dv_earth[k] + decomp.dv_mut[k] - v1)
        if err > CLOSURE_TOL_V:
            raise SensitivityError(f"phase {ph}: phasor closure error {err:.3e} V")
        entries.append(
            PhasorEntry(
                ph,
                _polar(v0),
                _polar(v1),
                _polar(decomp.dv_earth[k]),
                _polar(decomp.dv_mut[k]),
                _polar(decomp.dv_total[k]),
                err,
            )
        )
    return PhasorReport(bus, tuple(entries))
