"""Feeder data model, JSON/CSV ingestion and radial topology checks.

Units are carried in field names throughout (``length_miles``, ``p_kw``,
``gmr_ft`` ...). Reactive power on PV inverters uses the absorption-positive
convention: ``q_kvar = +100`` means the inverter *absorbs* 100 kVAr, which
adds to the local load Q and pulls the voltage of its own phase down.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

PHASES = ("A", "B", "C")
NEUTRAL = "N"
THREE_PHASE = "ABC"

SCHEMA_VERSION = 1


class FeederError(ValueError):
    """Base class for feeder ingestion problems."""


class FeederFormatError(FeederError):
    """The file does not parse as the feeder or profile schema."""


class FeederValidationError(FeederError):
    """The feeder parses but breaks a model invariant."""


class TopologyError(FeederValidationError):
    """The segment graph is not a tree rooted at the source bus."""


@dataclass(frozen=True)
class ConductorSpec:
    name: str
    gmr_ft: float
    r_ohm_per_mile: float
    ampacity_a: float | None = None

    def __post_init__(self) -> None:
        if not self.gmr_ft > 0:
            raise FeederValidationError(f"conductor {self.name!r}: gmr_ft must be > 0")
        if not self.r_ohm_per_mile > 0:
            raise FeederValidationError(
                f"conductor {self.name!r}: r_ohm_per_mile must be > 0"
            )


@dataclass(frozen=True)
class LineGeometry:
    """Conductor positions (feet) and the phase label carried at each one."""

    name: str
    phases: tuple[str, ...]
    positions_ft: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if len(self.phases) != len(self.positions_ft):
            raise FeederValidationError(
                f"geometry {self.name!r}: one phase label per position required"
            )
        if not 1 <= len(self.phases) <= 4:
            raise FeederValidationError(f"geometry {self.name!r}: 1 to 4 conductors")
        for ph in self.phases:
            if ph not in PHASES and ph != NEUTRAL:
                raise FeederValidationError(f"geometry {self.name!r}: bad phase {ph!r}")
        if len(set(self.phases)) != len(self.phases):
            raise FeederValidationError(
                f"geometry {self.name!r}: duplicate phase label"
            )
        if not any(ph in PHASES for ph in self.phases):
            raise FeederValidationError(f"geometry {self.name!r}: no phase conductor")
        pts = self.positions_ft
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if math.dist(pts[i], pts[j]) <= 0:
                    raise FeederValidationError(
                        f"geometry {self.name!r}: conductors {self.phases[i]} and "
                        f"{self.phases[j]} share a position"
                    )

    @property
    def phase_conductors(self) -> tuple[str, ...]:
        return tuple(ph for ph in PHASES if ph in self.phases)

    @property
    def has_neutral(self) -> bool:
        return NEUTRAL in self.phases


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_bus: str
    to_bus: str
    length_miles: float
    geometry: LineGeometry
    conductors: tuple[ConductorSpec, ...]

    def __post_init__(self) -> None:
        if not self.length_miles > 0:
            raise FeederValidationError(f"segment {self.id!r}: length must be > 0")
        if self.from_bus == self.to_bus:
            raise FeederValidationError(
                f"segment {self.id!r}: from_bus and to_bus are both {self.from_bus!r}"
            )
        if len(self.conductors) != len(self.geometry.phases):
            raise FeederValidationError(
                f"segment {self.id!r}: one conductor per geometry position required"
            )

    @property
    def phases(self) -> tuple[str, ...]:
        return self.geometry.phase_conductors


@dataclass(frozen=True)
class LoadSpec:
    """Constant-power single-phase (wye, phase-to-neutral) load."""

    id: str
    bus: str
    phase: str
    p_kw: float
    q_kvar: float

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise FeederValidationError(f"load {self.id!r}: bad phase {self.phase!r}")
        if self.p_kw < 0:
            raise FeederValidationError(f"load {self.id!r}: p_kw must be >= 0")


@dataclass(frozen=True)
class PVSpec:
    """Single-phase PV inverter; ``q_kvar`` is absorption-positive."""

    id: str
    bus: str
    phase: str
    p_kw: float
    s_kva: float
    q_kvar: float = 0.0

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise FeederValidationError(f"pv {self.id!r}: bad phase {self.phase!r}")
        if self.p_kw < 0:
            raise FeederValidationError(f"pv {self.id!r}: p_kw must be >= 0")
        if math.hypot(self.p_kw, self.q_kvar) > self.s_kva * (1 + 1e-9):
            raise FeederValidationError(
                f"pv {self.id!r}: |p + jq| = {math.hypot(self.p_kw, self.q_kvar):.6g} "
                f"kVA exceeds rating {self.s_kva:.6g} kVA"
            )

    @property
    def q_capability(self) -> float:
        """Largest |q| (kVAr) available at the present active output."""
        return math.sqrt(max(self.s_kva**2 - self.p_kw**2, 0.0))


@dataclass(frozen=True)
class RegulatorSpec:
    """Ideal single-phase ratio regulator at the upstream end of a segment."""

    id: str
    segment: str
    phase: str
    tap_ratio: float

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise FeederValidationError(f"regulator {self.id!r}: bad phase")
        if not 0.9 <= self.tap_ratio <= 1.1:
            raise FeederValidationError(
                f"regulator {self.id!r}: tap_ratio {self.tap_ratio} outside [0.9, 1.1]"
            )


@dataclass(frozen=True)
class CapacitorSpec:
    """Static shunt capacitor modelled as a constant reactive injection."""

    id: str
    bus: str
    phase: str
    q_kvar: float

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise FeederValidationError(f"capacitor {self.id!r}: bad phase")
        if self.q_kvar < 0:
            raise FeederValidationError(f"capacitor {self.id!r}: q_kvar must be >= 0")


@dataclass(frozen=True)
class Feeder:
    name: str
    source_bus: str
    source_kv_ll: float
    buses: tuple[str, ...]
    segments: tuple[LineSegment, ...]
    loads: tuple[LoadSpec, ...] = ()
    pvs: tuple[PVSpec, ...] = ()
    regulators: tuple[RegulatorSpec, ...] = ()
    capacitors: tuple[CapacitorSpec, ...] = ()
    description: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        _validate_feeder(self)

    @property
    def v_base(self) -> float:
        """Nominal phase-to-neutral voltage in volts."""
        return self.source_kv_ll * 1000.0 / math.sqrt(3.0)

    @cached_property
    def tree(self) -> tuple[tuple[LineSegment, str, str], ...]:
        """``(segment, upstream_bus, downstream_bus)`` in breadth-first order."""
        return _bfs_tree(self)

    @cached_property
    def bus_phases(self) -> dict[str, tuple[str, ...]]:
        out = {self.source_bus: PHASES}
        for seg, _, down in self.tree:
            out[down] = seg.phases
        return out

    def node_phases(self) -> list[tuple[str, str]]:
        """Every energised (bus, phase) pair, source excluded, sorted."""
        return sorted(
            (bus, ph)
            for bus, phs in self.bus_phases.items()
            if bus != self.source_bus
            for ph in phs
        )

    def pv(self, pv_id: str) -> PVSpec:
        for pv in self.pvs:
            if pv.id == pv_id:
                return pv
        raise KeyError(pv_id)

    def segment(self, seg_id: str) -> LineSegment:
        for seg in self.segments:
            if seg.id == seg_id:
                return seg
        raise KeyError(seg_id)

    def with_pv_setpoints(self, q_kvar: Mapping[str, float]) -> Feeder:
        """Return a copy with the given PV reactive setpoints replaced."""
        unknown = set(q_kvar) - {pv.id for pv in self.pvs}
        if unknown:
            raise KeyError(f"unknown PV ids: {sorted(unknown)}")
        pvs = tuple(
            replace(pv, q_kvar=float(q_kvar[pv.id])) if pv.id in q_kvar else pv
            for pv in self.pvs
        )
        return replace(self, pvs=pvs)

    def with_pvs(self, extra: Iterable[PVSpec]) -> Feeder:
        return replace(self, pvs=self.pvs + tuple(extra))


def _validate_feeder(f: Feeder) -> None:
    if not f.source_kv_ll > 0:
        raise FeederValidationError("source_kv_ll must be > 0")
    if len(set(f.buses)) != len(f.buses):
        raise FeederValidationError("duplicate bus identifiers")
    if f.source_bus not in f.buses:
        raise FeederValidationError(f"source bus {f.source_bus!r} not in bus list")
    known = set(f.buses)
    for kind, items in (
        ("segment", f.segments),
        ("load", f.loads),
        ("pv", f.pvs),
        ("regulator", f.regulators),
        ("capacitor", f.capacitors),
    ):
        ids = [it.id for it in items]
        if len(set(ids)) != len(ids):
            raise FeederValidationError(f"duplicate {kind} identifiers")
    for seg in f.segments:
        for b in (seg.from_bus, seg.to_bus):
            if b not in known:
                raise FeederValidationError(
                    f"segment {seg.id!r} references unknown bus {b!r}"
                )
    # tree construction raises TopologyError on cycles / islands
    tree = f.tree
    phases = f.bus_phases
    for seg, up, _ in tree:
        missing = set(seg.phases) - set(phases[up])
        if missing:
            raise FeederValidationError(
                f"segment {seg.id!r} carries phase(s) {sorted(missing)} not supplied at {up!r}"
            )
    for kind, items in (("load", f.loads), ("pv", f.pvs), ("capacitor", f.capacitors)):
        for it in items:
            if it.bus not in known:
                raise FeederValidationError(
                    f"{kind} {it.id!r} references unknown bus {it.bus!r}"
                )
            if it.phase not in phases[it.bus]:
                raise FeederValidationError(
                    f"{kind} {it.id!r}: phase {it.phase} not supplied at bus {it.bus!r}"
                )
    seg_ids = {s.id for s in f.segments}
    for reg in f.regulators:
        if reg.segment not in seg_ids:
            raise FeederValidationError(
                f"regulator {reg.id!r} references unknown segment {reg.segment!r}"
            )
        if reg.phase not in f.segment(reg.segment).phases:
            raise FeederValidationError(
                f"regulator {reg.id!r}: segment {reg.segment!r} has no phase {reg.phase}"
            )
    seen = set()
    for reg in f.regulators:
        key = (reg.segment, reg.phase)
        if key in seen:
            raise FeederValidationError(f"two regulators on {key}")
        seen.add(key)


def _bfs_tree(f: Feeder) -> tuple[tuple[LineSegment, str, str], ...]:
    adj: dict[str, list[tuple[str, LineSegment]]] = {b: [] for b in f.buses}
    for seg in f.segments:
        adj[seg.from_bus].append((seg.id, seg))
        adj[seg.to_bus].append((seg.id, seg))
    for edges in adj.values():
        edges.sort(key=lambda e: e[0])

    order: list[tuple[LineSegment, str, str]] = []
    visited = {f.source_bus}
    used: set[str] = set()
    queue = deque([f.source_bus])
    while queue:
        bus = queue.popleft()
        for seg_id, seg in adj[bus]:
            if seg_id in used:
                continue
            other = seg.to_bus if seg.from_bus == bus else seg.from_bus
            if other in visited:
                raise TopologyError(f"cycle detected through segment {seg_id!r}")
            used.add(seg_id)
            visited.add(other)
            order.append((seg, bus, other))
            queue.append(other)
    unreached = [b for b in f.buses if b not in visited]
    if unreached:
        raise TopologyError(f"buses not connected to source: {unreached}")
    return tuple(order)


def validate_radial(feeder: Feeder) -> list[LineSegment]:
    """Segments in breadth-first order from the source, ties broken by id."""
    return [seg for seg, _, _ in _bfs_tree(feeder)]


# --------------------------------------------------------------------------
# JSON feeder files
# --------------------------------------------------------------------------


def _expand(kind: str, raw: dict) -> list[dict]:
    phase = raw.get("phase")
    if phase in (THREE_PHASE, "3ph", "three-phase"):
        out = []
        for ph in PHASES:
            item = dict(raw, id=f"{raw['id']}.{ph}", phase=ph)
            for key in ("p_kw", "q_kvar"):
                if key in item:
                    item[key] = item[key] / 3.0
            out.append(item)
        return out
    return [raw]


def _load_from_raw(raw: dict) -> LoadSpec:
    p = float(raw["p_kw"])
    if "q_kvar" in raw:
        q = float(raw["q_kvar"])
    elif "pf" in raw:
        pf = float(raw["pf"])
        if not 0 < pf <= 1:
            raise FeederValidationError(f"load {raw['id']!r}: pf must be in (0, 1]")
        q = p * math.tan(math.acos(pf))
    else:
        q = 0.0
    return LoadSpec(str(raw["id"]), str(raw["bus"]), raw["phase"], p, q)


def _pv_from_raw(p: Mapping) -> PVSpec:
    return PVSpec(
        str(p["id"]),
        str(p["bus"]),
        p["phase"],
        float(p["p_kw"]),
        float(p["s_kva"]),
        float(p.get("q_kvar", 0.0)),
    )


def feeder_from_dict(data: Mapping) -> Feeder:
    """Build a validated :class:`Feeder` from the parsed JSON document."""
    try:
        conductors = {
            name: ConductorSpec(
                name,
                float(c["gmr_ft"]),
                float(c["r_ohm_per_mile"]),
                None if c.get("ampacity_a") is None else float(c["ampacity_a"]),
            )
            for name, c in data.get("conductors", {}).items()
        }
        geometries = {
            name: LineGeometry(
                name,
                tuple(g["phases"]),
                tuple((float(x), float(y)) for x, y in g["positions_ft"]),
            )
            for name, g in data.get("geometries", {}).items()
        }
        segments = []
        for s in data["segments"]:
            if "length_miles" in s:
                length = float(s["length_miles"])
            else:
                length = float(s["length_ft"]) / 5280.0
            geom = geometries[s["geometry"]]
            conds = s["conductors"]
            if isinstance(conds, str):
                conds = [conds] * len(geom.phases)
            segments.append(
                LineSegment(
                    str(s["id"]),
                    str(s["from_bus"]),
                    str(s["to_bus"]),
                    length,
                    geom,
                    tuple(conductors[c] for c in conds),
                )
            )
        loads = [
            _load_from_raw(item)
            for raw in data.get("loads", [])
            for item in _expand("load", raw)
        ]
        pvs = [_pv_from_raw(p) for p in data.get("pvs", [])]
        regs = [
            RegulatorSpec(str(r["id"]), str(r["segment"]), r["phase"], float(r["tap_ratio"]))
            for r in data.get("regulators", [])
        ]
        caps = [
            CapacitorSpec(str(c["id"]), str(c["bus"]), c["phase"], float(c["q_kvar"]))
            for raw in data.get("capacitors", [])
            for c in _expand("capacitor", raw)
        ]
        return Feeder(
            name=str(data.get("name", "")),
            source_bus=str(data["source_bus"]),
            source_kv_ll=float(data["source_kv_ll"]),
            buses=tuple(str(b) for b in data["buses"]),
            segments=tuple(segments),
            loads=tuple(loads),
            pvs=tuple(pvs),
            regulators=tuple(regs),
            capacitors=tuple(caps),
            description=str(data.get("description", "")),
        )
    except FeederError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederFormatError(f"malformed feeder document: {exc!r}") from exc


def feeder_to_dict(f: Feeder) -> dict:
    conductors: dict[str, dict] = {}
    geometries: dict[str, dict] = {}
    segments = []
    for seg in f.segments:
        g = seg.geometry
        if g.name in geometries and geometries[g.name]["_obj"] != g:
            raise FeederValidationError(f"two different geometries named {g.name!r}")
        geometries[g.name] = {
            "_obj": g,
            "phases": list(g.phases),
            "positions_ft": [list(p) for p in g.positions_ft],
        }
        for c in seg.conductors:
            entry = {"gmr_ft": c.gmr_ft, "r_ohm_per_mile": c.r_ohm_per_mile}
            if c.ampacity_a is not None:
                entry["ampacity_a"] = c.ampacity_a
            if c.name in conductors and conductors[c.name] != entry:
                raise FeederValidationError(f"two different conductors named {c.name!r}")
            conductors[c.name] = entry
        segments.append(
            {
                "id": seg.id,
                "from_bus": seg.from_bus,
                "to_bus": seg.to_bus,
                "length_miles": seg.length_miles,
                "geometry": g.name,
                "conductors": [c.name for c in seg.conductors],
            }
        )
    for g in geometries.values():
        del g["_obj"]
    out = {
        "schema_version": SCHEMA_VERSION,
        "name": f.name,
        "description": f.description,
        "source_bus": f.source_bus,
        "source_kv_ll": f.source_kv_ll,
        "buses": list(f.buses),
        "conductors": conductors,
        "geometries": geometries,
        "segments": segments,
        "loads": [
            {"id": l.id, "bus": l.bus, "phase": l.phase, "p_kw": l.p_kw, "q_kvar": l.q_kvar}
            for l in f.loads
        ],
        "pvs": [
            {
                "id": p.id,
                "bus": p.bus,
                "phase": p.phase,
                "p_kw": p.p_kw,
                "s_kva": p.s_kva,
                "q_kvar": p.q_kvar,
            }
            for p in f.pvs
        ],
        "regulators": [
            {"id": r.id, "segment": r.segment, "phase": r.phase, "tap_ratio": r.tap_ratio}
            for r in f.regulators
        ],
        "capacitors": [
            {"id": c.id, "bus": c.bus, "phase": c.phase, "q_kvar": c.q_kvar}
            for c in f.capacitors
        ],
    }
    return out


def load_feeder(path: str | Path) -> Feeder:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FeederFormatError(f"{path}: {exc}") from exc
    return feeder_from_dict(data)


def load_pv_pool(path: str | Path) -> list[PVSpec]:
    """Ordered PV candidates from the optional ``pv_pool`` list of a feeder
    document (empty when the key is absent)."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        return [_pv_from_raw(p) for p in data.get("pv_pool", [])]
    except json.JSONDecodeError as exc:
        raise FeederFormatError(f"{path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederFormatError(f"{path}: malformed pv_pool entry: {exc!r}") from exc


def save_feeder(f: Feeder, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(f), indent=2) + "\n")


# --------------------------------------------------------------------------
# Time-series profiles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeSeriesProfile:
    """Per-instance multipliers keyed by load or PV id.

    A load key also matches the per-phase loads ``<id>.A`` .. ``<id>.C``
    produced when a three-phase load is split.
    """

    labels: tuple[str, ...]
    load_multipliers: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    pv_multipliers: Mapping[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(set(self.labels)) != len(self.labels):
            raise FeederValidationError("duplicate instance labels in profile")
        n = len(self.labels)
        for kind, table in (("load", self.load_multipliers), ("pv", self.pv_multipliers)):
            for key, vals in table.items():
                if len(vals) != n:
                    raise FeederValidationError(f"{kind}:{key}: wrong number of values")
                if any(not v >= 0 for v in vals):
                    raise FeederValidationError(f"{kind}:{key}: negative multiplier")
                if kind == "pv" and any(v > 1 for v in vals):
                    raise FeederValidationError(f"pv:{key}: multiplier above 1")

    def check_against(self, feeder: Feeder) -> None:
        load_ids = {l.id for l in feeder.loads}
        for key in self.load_multipliers:
            if not any(i == key or i.startswith(key + ".") for i in load_ids):
                raise FeederValidationError(f"profile references unknown load {key!r}")
        pv_ids = {p.id for p in feeder.pvs}
        for key in self.pv_multipliers:
            if key not in pv_ids:
                raise FeederValidationError(f"profile references unknown pv {key!r}")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise KeyError(f"unknown instance label {label!r}") from None

    def load_multiplier(self, load_id: str, k: int) -> float:
        if load_id in self.load_multipliers:
            return self.load_multipliers[load_id][k]
        base = load_id.rsplit(".", 1)[0]
        if base in self.load_multipliers:
            return self.load_multipliers[base][k]
        return 1.0

    def pv_multiplier(self, pv_id: str, k: int) -> float:
        vals = self.pv_multipliers.get(pv_id)
        return 1.0 if vals is None else vals[k]


def load_profile(path: str | Path) -> TimeSeriesProfile:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FeederFormatError(f"{path}: empty profile")
    header, body = rows[0], [r for r in rows[1:] if r]
    loads: dict[str, list[float]] = {}
    pvs: dict[str, list[float]] = {}
    cols: list[list[float]] = []
    for name in header[1:]:
        kind, _, key = name.partition(":")
        if kind == "load":
            cols.append(loads.setdefault(key, []))
        elif kind == "pv":
            cols.append(pvs.setdefault(key, []))
        else:
            raise FeederFormatError(f"{path}: column {name!r} is not load:<id> or pv:<id>")
    labels = []
    for row in body:
        if len(row) != len(header):
            raise FeederFormatError(f"{path}: ragged row {row!r}")
        labels.append(row[0])
        for col, cell in zip(cols, row[1:]):
            try:
                col.append(float(cell))
            except ValueError as exc:
                raise FeederFormatError(f"{path}: {exc}") from exc
    return TimeSeriesProfile(
        tuple(labels),
        {k: tuple(v) for k, v in loads.items()},
        {k: tuple(v) for k, v in pvs.items()},
    )


def save_profile(profile: TimeSeriesProfile, path: str | Path) -> None:
    keys = [f"load:{k}" for k in profile.load_multipliers] + [
        f"pv:{k}" for k in profile.pv_multipliers
    ]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", *keys])
        for i, label in enumerate(profile.labels):
            row = [profile.load_multipliers[k][i] for k in profile.load_multipliers]
            row += [profile.pv_multipliers[k][i] for k in profile.pv_multipliers]
            w.writerow([label, *(repr(v) for v in row)])


def apply_instance(feeder: Feeder, profile: TimeSeriesProfile, t: str) -> Feeder:
    """Scale loads and PV outputs to instance ``t``; the input is left untouched."""
    k = profile.index(t)
    profile.check_against(feeder)
    loads = tuple(
        replace(
            l,
            p_kw=l.p_kw * profile.load_multiplier(l.id, k),
            q_kvar=l.q_kvar * profile.load_multiplier(l.id, k),
        )
        for l in feeder.loads
    )
    pvs = []
    for pv in feeder.pvs:
        p = pv.p_kw * profile.pv_multiplier(pv.id, k)
        q = pv.q_kvar
        cap = math.sqrt(max(pv.s_kva**2 - p**2, 0.0))
        pvs.append(replace(pv, p_kw=p, q_kvar=max(-cap, min(cap, q))))
    return replace(feeder, loads=loads, pvs=tuple(pvs))
