"""Command-line entry point: ``pvsim run``, ``pvsim compare`` and ``pvsim gen``.

Generator specs use ``kind:key=val,...``, for example
``fault-intensive:n=100,aliases=2`` or ``bursty:ratio=15.4,mean=1000``.
Kinds: bursty, fault-intensive, syscall-intensive, unmap-heavy, random.

Exit codes: 0 success, 2 configuration error, 3 trace or invariant failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .backends import BUGS, BackendKind
from .cost import LatencyProfile, get_profile, load_calibration, nested_delta, path_latency
from .elasticity import overhead_stats, samples_to_csv, stats_to_json
from .errors import EmptySeries, SimError, TraceError, UsageError
from .gates import syscall_counters
from .machine import MachineConfig
from .workloads import (
    REPORT_SCHEMA_VERSION,
    Report,
    TraceOp,
    dumps_trace,
    generate,
    parse_gen_spec,
    read_trace,
    replay,
    write_trace,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRACE = 3

SYSCALL_ORDER = ("runv", "paracell", "paracell_no_depriv", "pvm", "runc")


@dataclass
class ScenarioConfig:
    backends: list[str] = field(default_factory=lambda: ["pager"])
    profile: str | None = None
    calibration: str | None = None
    nested: bool = False
    granularity: str = "4k"
    pcp_batch: int = 32
    pcp_capacity: int = 128
    guest_pages: int = 1 << 16
    host_pages: int = 1 << 20
    cpus: int = 1
    seed: int = 0
    trace: str | None = None
    gen: str | None = None
    report: str | None = None
    csv: str | None = None
    stats: str | None = None
    test_mode: bool = False
    inject_bug: str | None = None

    def machine_config(self) -> MachineConfig:
        return MachineConfig(
            guest_pages=self.guest_pages,
            host_pages=self.host_pages,
            cpus=self.cpus,
            pcp_capacity=self.pcp_capacity,
            pcp_batch=self.pcp_batch,
            bug=self.inject_bug,
        )

    def backend_kinds(self) -> list[BackendKind]:
        kinds = []
        for name in self.backends:
            if self.granularity == "2m" and name in ("ept", "second-stage"):
                name += "-2m"
            kinds.append(BackendKind.parse(name))
        return kinds


SCENARIO_KEYS = set(ScenarioConfig.__dataclass_fields__)


def _split_backends(values: list[str] | None) -> list[str] | None:
    if not values:
        return None
    return [b.strip() for v in values for b in v.split(",") if b.strip()]


def build_config(args: argparse.Namespace) -> ScenarioConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    merged: dict[str, Any] = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(data) - SCENARIO_KEYS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(data)
    flags = {k: v for k, v in vars(args).items() if k in SCENARIO_KEYS and v is not None}
    if "backends" in flags:
        flags["backends"] = _split_backends(flags["backends"])
    merged.update(flags)
    try:
        cfg = ScenarioConfig(**merged)
    except TypeError as exc:
        raise UsageError(f"bad scenario config: {exc}") from None
    if cfg.granularity not in ("4k", "2m"):
        raise UsageError(f"granularity must be 4k or 2m, got {cfg.granularity!r}")
    if cfg.inject_bug is not None and cfg.inject_bug not in BUGS:
        raise UsageError(f"unknown bug {cfg.inject_bug!r}; choose from {list(BUGS)}")
    if cfg.trace and cfg.gen:
        raise UsageError("pass either --trace or --gen, not both")
    if cfg.trace and not Path(cfg.trace).is_file():
        raise UsageError(f"trace file {cfg.trace} does not exist")
    return cfg


def load_ops(cfg: ScenarioConfig) -> list[TraceOp]:
    if cfg.trace:
        return read_trace(cfg.trace)
    kind, params = parse_gen_spec(cfg.gen or "fault-intensive")
    return generate(kind, params, seed=cfg.seed)


def resolve_profile(cfg: ScenarioConfig, kind: BackendKind, calibration) -> LatencyProfile:
    profile = get_profile(cfg.profile or kind.default_profile, calibration)
    return profile.with_nested(cfg.nested)


def _run_backends(cfg: ScenarioConfig, ops: list[TraceOp]) -> list[tuple[Report, LatencyProfile]]:
    calibration = load_calibration(cfg.calibration)
    mc = cfg.machine_config()
    out = []
    for kind in cfg.backend_kinds():
        profile = resolve_profile(cfg, kind, calibration)
        report = replay(ops, kind, profile, config=mc, test_mode=cfg.test_mode, seed=cfg.seed)
        report.config["scenario"] = _scenario_echo(cfg)
        out.append((report, profile))
    return out


def _scenario_echo(cfg: ScenarioConfig) -> dict[str, Any]:
    return {k: getattr(cfg, k) for k in sorted(SCENARIO_KEYS) if k not in ("report", "csv", "stats")}


def _dump(path: str, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _csv_path(base: str, label: str, many: bool) -> str:
    if not many:
        return base
    p = Path(base)
    return str(p.with_name(f"{p.stem}.{label}{p.suffix or '.csv'}"))


def _document(reports: list[Report], cfg: ScenarioConfig, **extra: Any) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "tool_version": __version__,
        "seed": cfg.seed,
        "reports": [r.to_dict() for r in reports],
        **extra,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_run(cfg: ScenarioConfig, out=None) -> int:
    out = out or sys.stdout
    ops = load_ops(cfg)
    results = _run_backends(cfg, ops)
    reports = [r for r, _ in results]
    many = len(reports) > 1
    for report in reports:
        c = report.counters
        print(
            f"{report.backend:<18} profile={report.profile:<18} latency_ns={report.latency_ns:<12} "
            f"secondary_faults={c.secondary_faults} shadow_faults={c.shadow_faults} "
            f"second_stage_faults={c.second_stage_faults} hypercalls={c.hypercalls} "
            f"state={report.state_hash[:12]}",
            file=out,
        )
        if cfg.csv:
            _dump(_csv_path(cfg.csv, report.backend, many), samples_to_csv(report.samples))
        if cfg.stats and report.samples:
            try:
                stats = overhead_stats(report.samples)
            except EmptySeries:
                continue
            _dump(_csv_path(cfg.stats, report.backend, many), stats_to_json(stats))
    if cfg.report:
        _dump(cfg.report, _document(reports, cfg))
    return EXIT_OK


def syscall_table(calibration) -> dict[str, int]:
    table = {}
    for name in SYSCALL_ORDER:
        if name in calibration:
            profile = calibration[name]
            table[name] = path_latency(profile, syscall_counters(profile.syscall_path))
    return table


def cmd_compare(cfg: ScenarioConfig, out=None) -> int:
    out = out or sys.stdout
    if len(cfg.backends) < 2:
        raise UsageError("compare needs at least two backends")
    ops = load_ops(cfg)
    results = _run_backends(cfg, ops)
    calibration = load_calibration(cfg.calibration)
    rows = []
    for report, profile in results:
        bare = path_latency(profile.with_nested(False), report.counters)
        nested = path_latency(profile.with_nested(True), report.counters)
        delta = nested_delta(profile, report.counters)
        rows.append({
            "backend": report.backend,
            "profile": profile.name,
            "latency_ns": report.latency_ns,
            "bare_ns": bare,
            "nested_ns": nested,
            "nested_delta_ns": nested - bare,
            "nested_delta_expected_ns": delta,
            "state_hash": report.state_hash,
            "counters": report.counters.nonzero(),
        })
    names = sorted({k for row in rows for k in row["counters"]})
    header = f"{'counter':<24}" + "".join(f"{row['backend']:>18}" for row in rows)
    print(header, file=out)
    for name in names:
        print(f"{name:<24}" + "".join(f"{row['counters'].get(name, 0):>18}" for row in rows), file=out)
    for key in ("latency_ns", "bare_ns", "nested_ns", "nested_delta_ns"):
        print(f"{key:<24}" + "".join(f"{row[key]:>18}" for row in rows), file=out)
    same_state = len({row["state_hash"] for row in rows}) == 1
    nested_ok = all(row["nested_delta_ns"] == row["nested_delta_expected_ns"] for row in rows)
    table = syscall_table(calibration)
    present = [n for n in SYSCALL_ORDER if n in table]
    ordering_ok = all(table[a] < table[b] for a, b in zip(present, present[1:]))
    print(f"final state identical: {same_state}", file=out)
    print(f"nested delta = (2W + 4F) x world_switch: {nested_ok}", file=out)
    print("syscall latency: " + " < ".join(f"{n}={table[n]}" for n in present)
          + f" ({'holds' if ordering_ok else 'VIOLATED'})", file=out)
    if cfg.report:
        _dump(cfg.report, _document(
            [r for r, _ in results], cfg,
            comparison={
                "rows": rows,
                "final_state_identical": same_state,
                "nested_delta_holds": nested_ok,
                "syscall_latency_ns": table,
                "syscall_ordering_holds": ordering_ok,
            },
        ))
    return EXIT_OK if same_state else EXIT_TRACE


def cmd_gen(args: argparse.Namespace, out=None) -> int:
    out = out or sys.stdout
    kind, params = parse_gen_spec(args.spec)
    ops = generate(kind, params, seed=args.seed)
    if args.out:
        try:
            write_trace(args.out, ops)
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
        print(f"wrote {len(ops)} ops to {args.out}", file=out)
    else:
        out.write(dumps_trace(ops))
    return EXIT_OK


def _scenario_flags(p: argparse.ArgumentParser, *, many: bool) -> None:
    # every default is None so that config-file values survive unless a flag is given
    if many:
        p.add_argument("--backends", action="append", metavar="LIST",
                       help="comma-separated backends (repeatable): ept, ept-2m, shadow, "
                            "shadow-noemu, pager, pager-standalone")
    else:
        p.add_argument("--backend", dest="backends", action="append", metavar="NAME",
                       help="backend to replay on (repeatable or comma-separated)")
    p.add_argument("--config", help="JSON scenario file; flags override its values")
    p.add_argument("--profile", help="latency profile (default: the backend's own system)")
    p.add_argument("--calibration", help="calibration JSON layered over the built-in table")
    p.add_argument("--nested", action="store_true", default=None, help="price as nested virtualization")
    p.add_argument("--granularity", choices=("4k", "2m"), help="second-stage backing granularity")
    p.add_argument("--pcp-batch", type=int)
    p.add_argument("--pcp-capacity", type=int)
    p.add_argument("--guest-pages", type=int)
    p.add_argument("--host-pages", type=int)
    p.add_argument("--cpus", type=int)
    p.add_argument("--seed", type=int)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--trace", help="JSONL trace file")
    src.add_argument("--gen", help="generator spec kind:key=val,...")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write the elasticity sample CSV here")
    p.add_argument("--stats", help="write overhead statistics JSON here")
    p.add_argument("--test-mode", action="store_true", default=None,
                   help="run invariant sweeps and the reference interpreter after every op")
    p.add_argument("--inject-bug", choices=BUGS, help="deliberately break a backend (for testing)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvsim",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _scenario_flags(sub.add_parser("run", help="replay a trace on one or more backends"), many=False)
    _scenario_flags(sub.add_parser("compare", help="side-by-side backend comparison"), many=True)
    gen = sub.add_parser("gen", help="emit a generated trace as JSONL")
    gen.add_argument("spec", help="generator spec kind:key=val,...")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", help="output path (default: stdout)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(args)
        cfg = build_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        return cmd_compare(cfg)
    except TraceError as exc:
        print(f"pvsim: trace failure at op {exc.index}: {exc.cause}", file=sys.stderr)
        return EXIT_TRACE
    except (SimError, OSError, ValueError) as exc:
        print(f"pvsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
