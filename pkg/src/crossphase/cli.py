"""Command-line front end.

Every subcommand prints a human-readable table (or JSON with ``--json``) on
standard output and, with ``--out DIR``, writes a self-describing bundle of
CSV tables, a full-precision JSON document and a run manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, data_path
from .carson import ImpedanceError, build_primitive, decompose, kron_reduce
from .control import (
    FULL,
    PER_PHASE,
    ControlPlan,
    compare_controllers,
    iterative_control,
    lp_min_q,
    prioritized_q_intervention,
    pv_addition_study,
)
from .netmodel import (
    PHASES,
    SCHEMA_VERSION,
    Feeder,
    FeederError,
    apply_instance,
    load_feeder,
    load_profile,
    load_pv_pool,
)
from .sensitivity import (
    SensitivityError,
    build_vqsm,
    decompose_delta,
    perturb,
    phasor_report,
)
from .solver import (
    ConvergenceConfig,
    PowerFlowError,
    PowerFlowResult,
    VoltageLimits,
    solve,
    solve_two_bus,
)

SIGN_NOTE = (
    "Sign convention: PV reactive power is absorption-positive "
    "(q > 0 absorbs VArs and lowers voltage, q < 0 injects)."
)

COMMANDS = (
    "impedance",
    "powerflow",
    "sensitivity",
    "decompose",
    "control",
    "compare",
    "addition-study",
)

REPEATABLE = {"segment", "pv", "perturb"}

STRATEGY_CHOICES = ("greedy", "lp-full", "lp-perphase", "iterative")

DOMAIN_ERRORS = (
    FeederError,
    ImpedanceError,
    PowerFlowError,
    SensitivityError,
    KeyError,
    ValueError,
    OSError,
)


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    command: str
    feeder_path: str
    profile_path: str | None
    instances: tuple[str, ...]
    parameters: dict[str, Any]
    tool_version: str
    input_hash: str
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> dict:
        d = asdict(self)
        d["instances"] = list(self.instances)
        return d


def input_hash(paths: Sequence[str | Path | None], parameters: dict[str, Any]) -> str:
    """SHA-256 over the bytes of every input file and the canonical parameters."""
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            h.update(b"\0none\0")
            continue
        h.update(Path(p).read_bytes())
        h.update(b"\0")
    h.update(json.dumps(parameters, sort_keys=True, default=str).encode())
    return h.hexdigest()


@dataclass
class Table:
    header: list[str]
    rows: list[list[Any]] = field(default_factory=list)


@dataclass
class Bundle:
    """Everything one run writes: CSV tables keyed by file suffix, one JSON
    document, and the manifest."""

    command: str
    manifest: RunManifest
    document: dict
    tables: dict[str, Table]
    label: str = ""


def fmt_csv(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.6g}"
    return value


def to_json(obj: Any) -> Any:
    """Plain-JSON conversion. Complex numbers become [re, im], NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): to_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [to_json(float(obj.real)), to_json(float(obj.imag))]
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(to_json(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _stem(command: str, label: str) -> str:
    return f"{command}_{label}" if label else command


def emit_reports(bundle: Bundle, out_dir: str | Path) -> list[Path]:
    """Write the bundle; names depend only on the command, label and table keys."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    stem = _stem(bundle.command, bundle.label)
    written = []

    def write(path: Path, text: str) -> None:
        try:
            path.write_text(text, newline="")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)

    for key in sorted(bundle.tables):
        table = bundle.tables[key]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.header)
        for row in table.rows:
            w.writerow([fmt_csv(v) for v in row])
        write(out / f"{stem}_{key}.csv", buf.getvalue())
    manifest = bundle.manifest.as_dict()
    write(out / f"{stem}.json", dumps({"manifest": manifest, "results": bundle.document}))
    write(out / f"{stem}_manifest.json", dumps(manifest))
    return written


def render_table(table: Table) -> str:
    cells = [table.header] + [[str(fmt_csv(v)) for v in r] for r in table.rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(table.header))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _limits(text: str) -> VoltageLimits:
    try:
        lo, hi = (float(x) for x in text.split(","))
        return VoltageLimits(lo, hi)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected vmin,vmax in p.u.: {exc}") from None


def _perturbation(text: str) -> tuple[str, float]:
    pid, sep, val = text.rpartition(":")
    if not sep or not pid:
        raise argparse.ArgumentTypeError("expected PV_ID:KVAR, e.g. pvA:+100")
    try:
        return pid, float(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad kVAr value {val!r}") from None


def _common(p: argparse.ArgumentParser, profile: bool = True) -> None:
    p.add_argument("--feeder", required=True, help="feeder JSON path or bundled name")
    if profile:
        p.add_argument("--profile", help="time-series CSV path or bundled name")
        p.add_argument("--instance", help="profile instance label to apply")
    p.add_argument("--tolerance", type=float, default=1e-9, help="p.u. voltage tolerance")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--out", help="write a CSV/JSON/manifest bundle into this directory")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--config", help="JSON file with defaults for any long flag")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="crossphase",
        description="Unbalanced feeder power flow, voltage sensitivities and PV "
        "reactive-power control. " + SIGN_NOTE,
        epilog=SIGN_NOTE,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name: str, help_text: str, **kw) -> argparse.ArgumentParser:
        return sub.add_parser(
            name, help=help_text, description=f"{help_text} {SIGN_NOTE}", epilog=SIGN_NOTE, **kw
        )

    p = add("impedance", "Primitive, earth, mutual and Kron-reduced line impedances (ohm).")
    _common(p, profile=False)
    p.add_argument("--segment", action="append", help="segment id (repeatable; default all)")

    p = add("powerflow", "Solve the feeder and report phase voltages.")
    _common(p)
    p.add_argument("--neutral", choices=("floating", "grounded"), default="floating",
                   help="neutral model for two-bus feeders")

    p = add("sensitivity", "Voltage/reactive-power sensitivity matrix (V per kVAr absorbed).")
    _common(p)
    p.add_argument("--delta-q", type=float, default=100.0,
                   help="perturbation size, kVAr absorbed")
    p.add_argument("--pv", action="append", help="PV id (repeatable; default all)")

    p = add("decompose", "Split a two-bus voltage change into earth-return and mutual parts.")
    _common(p)
    p.add_argument("--perturb", type=_perturbation, action="append", required=True,
                   help="PV_ID:KVAR added absorption, e.g. pvA:+100 (repeatable)")
    p.add_argument("--neutral", choices=("floating", "grounded"), default="floating")

    p = add("control", "Compute PV reactive setpoints that clear voltage violations.")
    _common(p)
    p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="iterative")
    p.add_argument("--partition", choices=("full", "per-phase"), default="full",
                   help="sensitivity partition for the iterative strategy")
    p.add_argument("--limits", type=_limits, default=VoltageLimits(), help="vmin,vmax in p.u.")
    p.add_argument("--step-q", type=float, default=10.0, help="greedy step, kVAr")
    p.add_argument("--max-rounds", type=int, default=500, help="greedy round limit")
    p.add_argument("--max-outer", type=int, default=5, help="iterative outer-round limit")

    p = add("compare", "UPF, per-phase and full-matrix control over profile instances.")
    _common(p)
    p.add_argument("--instances", help="comma-separated labels (default: all)")
    p.add_argument("--limits", type=_limits, default=VoltageLimits())
    p.add_argument("--max-outer", type=int, default=5)

    p = add("addition-study", "Add pool PVs in batches with greedy repair after each step.")
    _common(p)
    p.add_argument("--pool", help="JSON file with a pv_pool list (default: the feeder file)")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--limits", type=_limits, default=VoltageLimits())
    p.add_argument("--step-q", type=float, default=10.0)
    p.add_argument("--max-rounds", type=int, default=500)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    # read --config before parsing so it can supply required flags
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("--config must hold a JSON object")
    # the config supplies values for flags absent from argv
    given = {a.split("=", 1)[0] for a in argv if a.startswith("--")}
    merged = list(argv)
    for key, value in cfg.items():
        flag = "--" + key.replace("_", "-")
        if flag in given or flag == "--config":
            continue
        if isinstance(value, bool):
            if value:
                merged.append(flag)
            continue
        if isinstance(value, list) and key.replace("-", "_") in REPEATABLE:
            for item in value:
                merged += [flag, _config_scalar(item)]
            continue
        merged += [flag, _config_scalar(value)]
    return parser.parse_args(merged)


def _config_path(argv: list[str]) -> str | None:
    for k, a in enumerate(argv):
        if a == "--config":
            if k + 1 >= len(argv):
                raise UsageError("--config needs a path")
            return argv[k + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _config_scalar(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _resolve(name: str | None) -> Path | None:
    if name is None:
        return None
    p = Path(name)
    if p.exists():
        return p
    for candidate in (name, f"{name}.json", f"{name}.csv"):
        bundled = data_path(candidate)
        if bundled.exists():
            return bundled
    raise FileNotFoundError(f"no such file: {name}")


@dataclass
class Context:
    args: argparse.Namespace
    feeder_path: Path
    profile_path: Path | None
    feeder: Feeder
    cfg: ConvergenceConfig

    @property
    def instance(self) -> str:
        return getattr(self.args, "instance", None) or ""

    def at_instance(self) -> Feeder:
        if self.profile_path is None or not self.instance:
            return self.feeder
        return apply_instance(self.feeder, load_profile(self.profile_path), self.instance)

    def manifest(self, parameters: dict, instances: Sequence[str] = (), extra=()) -> RunManifest:
        params = {k: to_json(v) for k, v in parameters.items()}
        params["tolerance"] = self.cfg.tolerance
        params["max_iterations"] = self.cfg.max_iterations
        return RunManifest(
            command=self.args.command,
            feeder_path=str(self.args.feeder),
            profile_path=getattr(self.args, "profile", None),
            instances=tuple(instances) or ((self.instance,) if self.instance else ()),
            parameters=params,
            tool_version=__version__,
            input_hash=input_hash([self.feeder_path, self.profile_path, *extra], params),
        )


def _matrix_rows(labels, z) -> list[list[Any]]:
    return [[labels[i], labels[j], z[i, j].real, z[i, j].imag]
            for i in range(len(labels)) for j in range(len(labels))]


def cmd_impedance(ctx: Context) -> Bundle:
    wanted = ctx.args.segment
    segs = [s for s, _, _ in ctx.feeder.tree]
    if wanted:
        known = {s.id for s in segs}
        missing = sorted(set(wanted) - known)
        if missing:
            raise KeyError(f"unknown segments: {missing}")
        segs = [s for s in segs if s.id in wanted]
    doc: dict = {"units": "ohm", "segments": {}}
    table = Table(["segment", "matrix", "row", "col", "re", "im"])
    for seg in segs:
        prim = build_primitive(seg)
        parts = decompose(prim)
        zk = kron_reduce(prim)
        phases = [prim.labels[i] for i in prim.phase_index]
        mats = {"z_prim": (prim.labels, prim.z), "z_earth": (prim.labels, parts.z_earth),
                "z_mut": (prim.labels, parts.z_mut), "z_kron": (tuple(phases), zk)}
        doc["segments"][seg.id] = {
            "labels": list(prim.labels),
            "length_miles": seg.length_miles,
            **{k: z for k, (_, z) in mats.items()},
            "kron_labels": phases,
        }
        for name, (labels, z) in mats.items():
            for r in _matrix_rows(labels, z):
                table.rows.append([seg.id, name, *r])
    return Bundle("impedance", ctx.manifest({"segments": [s.id for s in segs]}), doc,
                  {"matrices": table})


def _solve(ctx: Context, feeder: Feeder) -> PowerFlowResult:
    neutral = getattr(ctx.args, "neutral", "floating")
    if len(feeder.buses) == 2 and len(feeder.segments) == 1:
        return solve_two_bus(feeder, ctx.cfg, neutral=neutral)
    return solve(feeder, ctx.cfg)


def result_document(res: PowerFlowResult) -> dict:
    buses = {}
    for b, bus in enumerate(res.phasors.buses):
        buses[bus] = {
            ph: {"v": res.phasors.voltages[b, k], "magnitude": abs(res.phasors.voltages[b, k]),
                 "angle_deg": math.degrees(np.angle(res.phasors.voltages[b, k])),
                 "vpu": abs(res.phasors.voltages[b, k]) / res.v_base}
            for k, ph in enumerate(PHASES)
            if not np.isnan(res.phasors.voltages[b, k])
        }
    return {
        "model": res.model,
        "converged": res.converged,
        "iterations": res.iterations,
        "residual_pu": res.residual,
        "v_base": res.v_base,
        "buses": buses,
        "currents": res.phasors.currents,
        "source_kva": res.source_kva,
        "losses_kva": res.losses_kva,
    }


def voltage_table(res: PowerFlowResult) -> Table:
    t = Table(["bus", "phase", "magnitude_v", "angle_deg", "vpu"])
    for b, bus in enumerate(res.phasors.buses):
        for k, ph in enumerate(PHASES):
            v = res.phasors.voltages[b, k]
            if not np.isnan(v):
                t.rows.append([bus, ph, abs(v), math.degrees(np.angle(v)), abs(v) / res.v_base])
    return t


def cmd_powerflow(ctx: Context) -> Bundle:
    res = _solve(ctx, ctx.at_instance())
    return Bundle("powerflow", ctx.manifest({"neutral": ctx.args.neutral}),
                  result_document(res), {"voltages": voltage_table(res)}, ctx.instance)


def cmd_sensitivity(ctx: Context) -> Bundle:
    feeder = ctx.at_instance()
    sm = build_vqsm(feeder, controllable=ctx.args.pv, delta_q=ctx.args.delta_q, cfg=ctx.cfg,
                    label=ctx.instance)
    header = ["node"] + [f"pv:{pid}" for pid in sm.pv_ids]
    table = Table(header, [[f"{b}.{ph}", *row] for (b, ph), row in zip(sm.rows, sm.values)])
    doc = {
        "units": "V per kVAr absorbed",
        "rows": [f"{b}.{ph}" for b, ph in sm.rows],
        "columns": [{"pv": pid, "phase": ph} for pid, ph in sm.columns],
        "delta_q": sm.delta_q,
        "v0": sm.v0,
        "values": sm.values,
    }
    params = {"delta_q": ctx.args.delta_q, "pvs": list(sm.pv_ids)}
    return Bundle("sensitivity", ctx.manifest(params), doc, {"matrix": table}, ctx.instance)


def cmd_decompose(ctx: Context) -> Bundle:
    feeder = ctx.at_instance()
    dq: dict[str, float] = {}
    for pid, val in ctx.args.perturb:
        dq[pid] = dq.get(pid, 0.0) + val
    perturbed = perturb(feeder, dq)
    d = decompose_delta(feeder, perturbed, ctx.cfg, neutral=ctx.args.neutral)
    rep = phasor_report(d, d.base, d.perturbed)
    table = Table(["phase", "vector", "x0", "y0", "x1", "y1"], [list(e) for e in rep.endpoints()])
    doc = rep.as_dict() | {"perturbation_kvar": dq, "neutral": ctx.args.neutral}
    params = {"perturb": dq, "neutral": ctx.args.neutral}
    return Bundle("decompose", ctx.manifest(params), doc, {"endpoints": table}, ctx.instance)


def plan_document(plan: ControlPlan, feeder: Feeder) -> dict:
    return {
        "status": plan.status,
        "feasible": plan.feasible,
        "iterations": plan.iterations,
        "total_q_kvar": plan.total_q,
        "actions": [
            {"pv": a.pv, "phase": feeder.pv(a.pv).phase, "q_kvar": a.q_kvar}
            for a in plan.actions
        ],
        "residual": {
            "count": len(plan.residual),
            "by_phase": plan.residual.counts,
            "max_vpu": plan.residual.max_vpu,
            "min_vpu": plan.residual.min_vpu,
            "violations": [asdict(e) for e in plan.residual.entries],
        },
    }


def _trace_table(trace: list[dict]) -> Table:
    keys: list[str] = []
    for row in trace:
        keys += [k for k in row if k not in keys]
    return Table(keys, [[row.get(k, "") for k in keys] for row in trace])


def cmd_control(ctx: Context) -> Bundle:
    a = ctx.args
    feeder = ctx.at_instance()
    if a.step_q <= 0:
        raise ValueError("--step-q must be > 0")
    if a.strategy == "greedy":
        plan = prioritized_q_intervention(feeder, None, a.limits, a.step_q, a.max_rounds, ctx.cfg)
    elif a.strategy in ("lp-full", "lp-perphase"):
        base = solve(feeder, ctx.cfg)
        sm = build_vqsm(feeder, cfg=ctx.cfg, base=base)
        part = FULL if a.strategy == "lp-full" else PER_PHASE
        plan = lp_min_q(feeder, sm, a.limits, part, ctx.cfg, base=base)
    else:
        part = FULL if a.partition == "full" else PER_PHASE
        plan = iterative_control(feeder, a.limits, part, a.max_outer, ctx.cfg, step_q=a.step_q)
    params = {
        "strategy": a.strategy,
        "partition": a.partition,
        "limits": [a.limits.v_min, a.limits.v_max],
        "step_q": a.step_q,
        "max_rounds": a.max_rounds,
        "max_outer": a.max_outer,
    }
    return Bundle("control", ctx.manifest(params), plan_document(plan, feeder),
                  {"trace": _trace_table(plan.trace)}, ctx.instance)


COMPARE_HEADER = ["instance", "strategy", "violations", "max_vpu", "total_q_kvar",
                  "iterations", "status", "error"]


def cmd_compare(ctx: Context) -> Bundle:
    a = ctx.args
    if ctx.profile_path is None:
        raise UsageError("compare needs --profile")
    profile = load_profile(ctx.profile_path)
    instances = profile.labels if a.instances is None else tuple(
        s for s in a.instances.split(",") if s
    )
    rows = compare_controllers(ctx.feeder, profile, instances, a.limits, ctx.cfg, a.max_outer)
    tables = {"summary": Table(list(COMPARE_HEADER))}
    for r in rows:
        line = [r.instance, r.strategy, r.violations, r.max_vpu, r.total_q, r.iterations,
                r.status, r.error]
        tables["summary"].rows.append(line)
        tables.setdefault(f"instance_{r.instance}", Table(list(COMPARE_HEADER))).rows.append(line)
    doc = {"rows": [asdict(r) for r in rows]}
    params = {"limits": [a.limits.v_min, a.limits.v_max], "max_outer": a.max_outer}
    return Bundle("compare", ctx.manifest(params, instances), doc, tables)


STUDY_HEADER = ["step", "n_added", "stage", "violations_A", "violations_B", "violations_C",
                "max_vpu", "interventions_A", "interventions_B", "interventions_C",
                "total_q_kvar", "new_phases"]


def cmd_addition_study(ctx: Context) -> Bundle:
    a = ctx.args
    pool_path = _resolve(a.pool) if a.pool else ctx.feeder_path
    pool = load_pv_pool(pool_path)
    profile = load_profile(ctx.profile_path) if ctx.profile_path else None
    rep = pv_addition_study(ctx.feeder, pool, profile, ctx.instance or None, a.limits, ctx.cfg,
                            a.batch, a.step_q, a.max_rounds)
    table = Table(list(STUDY_HEADER))
    for r in rep.rows:
        table.rows.append([r.step, r.n_added, r.stage,
                           *(r.violations[ph] for ph in PHASES), r.max_vpu,
                           *(r.interventions[ph] for ph in PHASES), r.total_q, r.new_phases])
    doc = {
        "rows": [asdict(r) for r in rep.rows],
        "final_setpoints": rep.plans[-1].setpoints if rep.plans else {},
        "hosting_capacity_kw": rep.hosting_capacity_kw(),
        "pv_kw_by_step": rep.pv_kw_by_step,
        "error": rep.error,
    }
    params = {"pool": [p.id for p in pool], "batch": a.batch,
              "limits": [a.limits.v_min, a.limits.v_max], "step_q": a.step_q,
              "max_rounds": a.max_rounds}
    extra = [pool_path] if pool_path != ctx.feeder_path else []
    return Bundle("addition-study", ctx.manifest(params, extra=extra), doc, {"steps": table},
                  ctx.instance)


HANDLERS = {
    "impedance": cmd_impedance,
    "powerflow": cmd_powerflow,
    "sensitivity": cmd_sensitivity,
    "decompose": cmd_decompose,
    "control": cmd_control,
    "compare": cmd_compare,
    "addition-study": cmd_addition_study,
}

_PRIMARY_TABLE = {
    "impedance": "matrices",
    "powerflow": "voltages",
    "sensitivity": "matrix",
    "decompose": "endpoints",
    "control": "trace",
    "compare": "summary",
    "addition-study": "steps",
}


def run(args: argparse.Namespace) -> Bundle:
    feeder_path = _resolve(args.feeder)
    profile_path = _resolve(getattr(args, "profile", None))
    if getattr(args, "instance", None) and profile_path is None:
        raise UsageError("--instance needs --profile")
    cfg = ConvergenceConfig(args.tolerance, args.max_iterations)
    ctx = Context(args, feeder_path, profile_path, load_feeder(feeder_path), cfg)
    return HANDLERS[args.command](ctx)


def _error_json(exc: BaseException) -> str:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("residual", "iterations"):
        if hasattr(exc, attr):
            payload[attr] = getattr(exc, attr)
    return json.dumps(to_json(payload), sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = _apply_config(parser, argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        bundle = run(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except DOMAIN_ERRORS as exc:
        sys.stderr.write(_error_json(exc) + "\n")
        return 1
    if args.json:
        sys.stdout.write(dumps(bundle.document))
    else:
        sys.stdout.write(render_table(bundle.tables[_PRIMARY_TABLE[args.command]]))
    if args.out:
        try:
            emit_reports(bundle, args.out)
        except OSError as exc:
            sys.stderr.write(_error_json(exc) + "\n")
            return 1
    return 0
