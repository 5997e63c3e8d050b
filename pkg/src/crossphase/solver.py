"""Unbalanced power flow for the two-bus 4-wire system and radial feeders.

Both solvers use the same plain fixed-point scheme: load currents from the
last voltage estimate (``I = conj(S / V)``), then a voltage update through the
line impedance. No Newton step is taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .carson import build_primitive, kron_reduce
from .netmodel import PHASES, Feeder, LineSegment, RegulatorSpec

PHASE_INDEX = {ph: k for k, ph in enumerate(PHASES)}
SOURCE_ANGLES_DEG = (0.0, -120.0, 120.0)

# residual must grow this many iterations in a row before we call it divergence
DIVERGENCE_WINDOW = 10


class PowerFlowError(RuntimeError):
    pass


class ConvergenceError(PowerFlowError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} p.u. after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class DivergenceError(ConvergenceError):
    pass


@dataclass(frozen=True)
class ConvergenceConfig:
    tolerance: float = 1e-9
    max_iterations: int = 100

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class VoltageLimits:
    v_min: float = 0.95
    v_max: float = 1.05

    def __post_init__(self) -> None:
        if not 0 < self.v_min < self.v_max:
            raise ValueError("need 0 < v_min < v_max")


@dataclass(frozen=True)
class PhasorSet:
    """Solved phasors. ``voltages[b, k]`` is bus ``b`` phase ``A/B/C[k]`` (V, L-N);
    NaN marks a phase that is not present at the bus."""

    buses: tuple[str, ...]
    voltages: np.ndarray
    currents: dict[str, dict[str, complex]]
    neutral_voltages: dict[str, complex] = field(default_factory=dict)

    def v(self, bus: str, phase: str) -> complex:
        val = self.voltages[self.buses.index(bus), PHASE_INDEX[phase]]
        if np.isnan(val):
            raise KeyError(f"phase {phase} not present at bus {bus!r}")
        return complex(val)

    def magnitude(self, bus: str, phase: str) -> float:
        return abs(self.v(bus, phase))

    def angle_deg(self, bus: str, phase: str) -> float:
        return math.degrees(np.angle(self.v(bus, phase)))


@dataclass(frozen=True)
class PowerFlowResult:
    feeder: Feeder
    phasors: PhasorSet
    iterations: int
    converged: bool
    residual: float
    source_kva: dict[str, complex]
    losses_kva: complex
    model: str

    @property
    def v_base(self) -> float:
        return self.feeder.v_base

    def vpu(self, bus: str, phase: str) -> float:
        return self.phasors.magnitude(bus, phase) / self.v_base

    def magnitudes_pu(self) -> dict[tuple[str, str], float]:
        out = {}
        for b, bus in enumerate(self.phasors.buses):
            for ph, k in PHASE_INDEX.items():
                val = self.phasors.voltages[b, k]
                if not np.isnan(val):
                    out[(bus, ph)] = abs(val) / self.v_base
        return out


@dataclass(frozen=True)
class Violation:
    bus: str
    phase: str
    vpu: float
    kind: str  # "over" or "under"
    limit: float

    @property
    def excess(self) -> float:
        """How far beyond the limit, p.u. (always positive)."""
        return self.vpu - self.limit if self.kind == "over" else self.limit - self.vpu


@dataclass(frozen=True)
class ViolationReport:
    entries: tuple[Violation, ...]
    max_vpu: float
    min_vpu: float

    @property
    def counts(self) -> dict[str, int]:
        out = {ph: 0 for ph in PHASES}
        for e in self.entries:
            out[e.phase] += 1
        return out

    @property
    def worst(self) -> Violation | None:
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: (e.excess, e.bus, e.phase))

    @property
    def worst_excess(self) -> float:
        w = self.worst
        return 0.0 if w is None else w.excess

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def keys(self) -> frozenset[tuple[str, str, str]]:
        return frozenset((e.bus, e.phase, e.kind) for e in self.entries)


def source_voltages(feeder: Feeder) -> np.ndarray:
    ang = np.deg2rad(SOURCE_ANGLES_DEG)
    return feeder.v_base * np.exp(1j * ang)


def node_demand_va(feeder: Feeder) -> np.ndarray:
    """Constant-power demand per (bus, phase) in VA; PVs and capacitors as
    negative demand. Absorbed PV reactive power adds to demand."""
    idx = {b: i for i, b in enumerate(feeder.buses)}
    s = np.zeros((len(feeder.buses), 3), dtype=complex)
    for l in feeder.loads:
        s[idx[l.bus], PHASE_INDEX[l.phase]] += complex(l.p_kw, l.q_kvar) * 1e3
    for pv in feeder.pvs:
        s[idx[pv.bus], PHASE_INDEX[pv.phase]] += complex(-pv.p_kw, pv.q_kvar) * 1e3
    for c in feeder.capacitors:
        s[idx[c.bus], PHASE_INDEX[c.phase]] += complex(0.0, -c.q_kvar) * 1e3
    return s


def total_demand_kva(feeder: Feeder) -> tuple[complex, complex, complex]:
    """(loads, PV injections, capacitor injections) in kVA."""
    load = sum((complex(l.p_kw, l.q_kvar) for l in feeder.loads), 0j)
    pv = sum((complex(p.p_kw, -p.q_kvar) for p in feeder.pvs), 0j)
    cap = sum((complex(0.0, c.q_kvar) for c in feeder.capacitors), 0j)
    return load, pv, cap


class _Tracker:
    """Residual bookkeeping shared by both solvers."""

    def __init__(self, cfg: ConvergenceConfig):
        self.cfg = cfg
        self.last = math.inf
        self.rising = 0

    def update(self, residual: float, it: int) -> bool:
        if not math.isfinite(residual):
            raise DivergenceError("non-finite voltages", residual, it)
        if residual > self.last:
            self.rising += 1
            if self.rising >= DIVERGENCE_WINDOW:
                raise DivergenceError(
                    "residual grew for 10 consecutive iterations; load may exceed "
                    "deliverable power",
                    residual,
                    it,
                )
        else:
            self.rising = 0
        self.last = residual
        return residual < self.cfg.tolerance


# --------------------------------------------------------------------------
# Two-bus, explicit conductors
# --------------------------------------------------------------------------


def solve_two_bus(
    feeder: Feeder,
    cfg: ConvergenceConfig | None = None,
    neutral: str = "floating",
) -> PowerFlowResult:
    """Fixed-point solve of the two-bus system keeping every conductor explicit.

    ``neutral="floating"``: the neutral is bonded to earth at the source only,
    so it carries no current and the whole return flows through the earth; the
    induced neutral-to-earth voltage at the load end is reported.
    ``neutral="grounded"``: the neutral is bonded at both ends (0 V) and its
    current follows from the primitive system, ``In = -Znn^-1 Znp Ip``.
    """
    cfg = cfg or ConvergenceConfig()
    if neutral not in ("floating", "grounded"):
        raise ValueError(f"unknown neutral treatment {neutral!r}")
    if len(feeder.buses) != 2 or len(feeder.segments) != 1:
        raise ValueError("solve_two_bus needs exactly 2 buses joined by one segment")

    (seg, up, down), = feeder.tree
    prim = build_primitive(seg)
    p_idx, n_idx = prim.phase_index, prim.neutral_index
    labels = [prim.labels[i] for i in p_idx]
    cols = [PHASE_INDEX[ph] for ph in labels]
    z = prim.z
    zpp = z[np.ix_(p_idx, p_idx)]
    zpn = z[np.ix_(p_idx, n_idx)]
    znp = z[np.ix_(n_idx, p_idx)]
    znn = z[np.ix_(n_idx, n_idx)]

    taps = _segment_taps(feeder.regulators, seg.id, labels)
    b_up, b_dn = feeder.buses.index(up), feeder.buses.index(down)
    vs = source_voltages(feeder)
    v_send = taps * vs[cols]
    s_dn = node_demand_va(feeder)[b_dn, cols]

    v = v_send.copy()
    tracker = _Tracker(cfg)
    converged = False
    it = 0
    i_p = np.zeros(len(cols), dtype=complex)
    i_n = np.zeros(len(n_idx), dtype=complex)
    while it < cfg.max_iterations:
        it += 1
        i_p = np.conj(s_dn / v)
        if n_idx and neutral == "grounded":
            i_n = -np.linalg.solve(znn, znp @ i_p)
            v_new = v_send - zpp @ i_p - zpn @ i_n
        else:
            v_new = v_send - zpp @ i_p
        residual = float(np.max(np.abs(v_new - v))) / feeder.v_base
        v = v_new
        if tracker.update(residual, it):
            converged = True
            break
    if not converged:
        raise ConvergenceError("two-bus solve did not converge", tracker.last, it)

    # One last update so that the returned voltages and currents satisfy the
    # line equations exactly; the constant-power residual stays at tolerance.
    i_p = np.conj(s_dn / v)
    if n_idx and neutral == "grounded":
        i_n = -np.linalg.solve(znn, znp @ i_p)
    else:
        i_n = np.zeros(len(n_idx), dtype=complex)
    v = v_send - zpp @ i_p - zpn @ i_n

    volts = np.full((2, 3), np.nan, dtype=complex)
    volts[b_up] = vs
    volts[b_dn, cols] = v
    currents = {lab: complex(c) for lab, c in zip(labels, i_p)}
    for k, i in enumerate(n_idx):
        currents[prim.labels[i]] = complex(i_n[k])
    neutral_v = {}
    if n_idx:
        vn = -(znp @ i_p + znn @ i_n)
        neutral_v[down] = complex(vn[0])

    s_src = np.zeros(3, dtype=complex)
    s_src[cols] = vs[cols] * np.conj(taps * i_p)
    s_src += node_demand_va(feeder)[b_up]
    losses = np.sum((v_send - v) * np.conj(i_p))
    if n_idx:
        # neutral conductor: sending end at 0 V, receiving end at vn
        losses += np.sum((0.0 - vn) * np.conj(i_n))
    phasors = PhasorSet(feeder.buses, volts, {seg.id: currents}, neutral_v)
    return PowerFlowResult(
        feeder=feeder,
        phasors=phasors,
        iterations=it,
        converged=True,
        residual=tracker.last,
        source_kva={ph: complex(s_src[k]) / 1e3 for ph, k in PHASE_INDEX.items()},
        losses_kva=complex(losses) / 1e3,
        model=f"two-bus/{neutral}",
    )


def _segment_taps(
    regulators: tuple[RegulatorSpec, ...], seg_id: str, labels: list[str]
) -> np.ndarray:
    taps = np.ones(len(labels))
    for reg in regulators:
        if reg.segment == seg_id:
            taps[labels.index(reg.phase)] = reg.tap_ratio
    return taps


# --------------------------------------------------------------------------
# Radial backward-forward sweep, Kron-reduced segments
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Branch:
    seg_id: str
    up: int
    down: int
    cols: np.ndarray
    z: np.ndarray
    taps: np.ndarray
    z_full: np.ndarray
    p_idx: tuple[int, ...]
    n_idx: tuple[int, ...]
    labels: tuple[str, ...]


@lru_cache(maxsize=64)
def _topology(
    buses: tuple[str, ...],
    tree: tuple[tuple[LineSegment, str, str], ...],
    regulators: tuple[RegulatorSpec, ...],
) -> tuple[_Branch, ...]:
    idx = {b: i for i, b in enumerate(buses)}
    out = []
    for seg, up, down in tree:
        prim = build_primitive(seg)
        labels = [prim.labels[i] for i in prim.phase_index]
        out.append(
            _Branch(
                seg_id=seg.id,
                up=idx[up],
                down=idx[down],
                cols=np.array([PHASE_INDEX[ph] for ph in labels]),
                z=kron_reduce(prim),
                taps=_segment_taps(regulators, seg.id, labels),
                z_full=prim.z,
                p_idx=tuple(prim.phase_index),
                n_idx=tuple(prim.neutral_index),
                labels=prim.labels,
            )
        )
    return tuple(out)


def solve_radial(feeder: Feeder, cfg: ConvergenceConfig | None = None) -> PowerFlowResult:
    """Backward-forward sweep over the radial tree.

    Backward: node currents accumulate leaf to source (a regulator multiplies
    the downstream current by its tap on the way up). Forward: voltages are
    stepped source to leaf through each Kron-reduced segment impedance, with
    the regulator tap applied at the upstream end.
    """
    cfg = cfg or ConvergenceConfig()
    branches = _topology(feeder.buses, feeder.tree, feeder.regulators)
    nb = len(feeder.buses)
    src = feeder.buses.index(feeder.source_bus)
    vs = source_voltages(feeder)
    s_node = node_demand_va(feeder)

    present = np.zeros((nb, 3), dtype=bool)
    present[src] = True
    for br in branches:
        present[br.down, br.cols] = True

    # flat start scaled by the regulator taps along each path
    v = np.where(present, 0j, np.nan + 0j)
    v[src] = vs
    for br in branches:
        v[br.down, br.cols] = br.taps * v[br.up, br.cols]
    s_node = np.where(present, s_node, 0j)

    tracker = _Tracker(cfg)
    converged = False
    it = 0
    i_line: dict[str, np.ndarray] = {}
    while it < cfg.max_iterations:
        it += 1
        i_line = _backward(branches, v, s_node, present)
        v_new = v.copy()
        for br in branches:
            v_new[br.down, br.cols] = br.taps * v_new[br.up, br.cols] - br.z @ i_line[br.seg_id]
        residual = float(np.nanmax(np.abs(v_new - v))) / feeder.v_base
        v = v_new
        if tracker.update(residual, it):
            converged = True
            break
    if not converged:
        raise ConvergenceError("radial sweep did not converge", tracker.last, it)

    i_line = _backward(branches, v, s_node, present)
    currents: dict[str, dict[str, complex]] = {}
    losses = 0j
    i_src = np.zeros(3, dtype=complex)
    for br in branches:
        i = i_line[br.seg_id]
        losses += np.sum((br.taps * v[br.up, br.cols] - v[br.down, br.cols]) * np.conj(i))
        cur = {br.labels[p]: complex(c) for p, c in zip(br.p_idx, i)}
        if br.n_idx:
            zf = br.z_full
            i_n = -np.linalg.solve(
                zf[np.ix_(br.n_idx, br.n_idx)], zf[np.ix_(br.n_idx, br.p_idx)] @ i
            )
            for k, n in enumerate(br.n_idx):
                cur[br.labels[n]] = complex(i_n[k])
        currents[br.seg_id] = cur
        if br.up == src:
            i_src[br.cols] += br.taps * i
    s_src = vs * np.conj(i_src) + s_node[src]
    phasors = PhasorSet(feeder.buses, v, currents)
    return PowerFlowResult(
        feeder=feeder,
        phasors=phasors,
        iterations=it,
        converged=True,
        residual=tracker.last,
        source_kva={ph: complex(s_src[k]) / 1e3 for ph, k in PHASE_INDEX.items()},
        losses_kva=complex(losses) / 1e3,
        model="radial/kron",
    )


def _backward(branches, v, s_node, present) -> dict[str, np.ndarray]:
    i_bus = np.where(present, np.conj(s_node / np.where(present, v, 1.0)), 0j)
    out = {}
    for br in reversed(branches):
        i = i_bus[br.down, br.cols].copy()
        out[br.seg_id] = i
        i_bus[br.up, br.cols] += br.taps * i
    return out


def solve(feeder: Feeder, cfg: ConvergenceConfig | None = None) -> PowerFlowResult:
    """Default solver: explicit conductors for a two-bus feeder, sweep otherwise."""
    if len(feeder.buses) == 2 and len(feeder.segments) == 1:
        return solve_two_bus(feeder, cfg)
    return solve_radial(feeder, cfg)


# --------------------------------------------------------------------------
# Post-processing
# --------------------------------------------------------------------------


def check_violations(
    result: PowerFlowResult, limits: VoltageLimits | None = None
) -> ViolationReport:
    if not result.converged:
        raise ValueError("violation check needs a converged power flow")
    limits = limits or VoltageLimits()
    mags = result.magnitudes_pu()
    entries = []
    for (bus, ph), vpu in sorted(mags.items()):
        if vpu > limits.v_max:
            entries.append(Violation(bus, ph, vpu, "over", limits.v_max))
        elif vpu < limits.v_min:
            entries.append(Violation(bus, ph, vpu, "under", limits.v_min))
    vals = list(mags.values())
    return ViolationReport(tuple(entries), max(vals), min(vals))


def source_power_balance(result: PowerFlowResult) -> tuple[float, float]:
    """Source injection - loads - losses + PV + capacitors, in (kW, kVAr)."""
    load, pv, cap = total_demand_kva(result.feeder)
    src = sum(result.source_kva.values(), 0j)
    mis = src - load - result.losses_kva + pv + cap
    return float(mis.real), float(mis.imag)
