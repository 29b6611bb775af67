"""Trace operations, JSONL trace files, generators and the replay engine."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from . import __version__
from .backends import BackendKind
from .cost import Counters, LatencyProfile, get_profile, path_latency
from .elasticity import ElasticitySample
from .errors import InvalidParams, SimError, TraceError, UsageError
from .gates import Gates
from .machine import Machine, MachineConfig
from .reference import ReferenceMachine

TRACE_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1


# -- trace ops -------------------------------------------------------------------


@dataclass(frozen=True)
class Touch:
    space: int
    gva: int
    access: str  # "read" | "write"
    tag: Any = None
    op = "touch"


@dataclass(frozen=True)
class Mmap:
    space: int
    gva: int
    npages: int
    shared: bool = False
    alias_of: tuple[int, int] | None = None
    op = "mmap"


@dataclass(frozen=True)
class Munmap:
    space: int
    gva: int
    npages: int
    op = "munmap"


@dataclass(frozen=True)
class Fork:
    space: int
    child: int
    op = "fork"


@dataclass(frozen=True)
class NewThread:
    thread: int
    vcpu: int
    op = "new_thread"


@dataclass(frozen=True)
class Syscall:
    thread: int
    nr: int
    op = "syscall"


@dataclass(frozen=True)
class AllocBurst:
    pages: int
    cpu: int = 0
    op = "alloc_burst"


@dataclass(frozen=True)
class FreeBurst:
    pages: int
    cpu: int = 0
    op = "free_burst"


@dataclass(frozen=True)
class InjectVirq:
    vcpu: int
    vector: int
    op = "inject_virq"


@dataclass(frozen=True)
class MigrateThread:
    thread: int
    vcpu: int
    op = "migrate_thread"


@dataclass(frozen=True)
class SamplePoint:
    t: int
    op = "sample"


TraceOp = Union[
    Touch, Mmap, Munmap, Fork, NewThread, Syscall, AllocBurst, FreeBurst,
    InjectVirq, MigrateThread, SamplePoint,
]
OP_TYPES: dict[str, type] = {
    cls.op: cls
    for cls in (Touch, Mmap, Munmap, Fork, NewThread, Syscall, AllocBurst, FreeBurst,
                InjectVirq, MigrateThread, SamplePoint)
}


def op_to_dict(op: TraceOp) -> dict[str, Any]:
    data = {"op": op.op}
    for f in fields(op):
        value = getattr(op, f.name)
        if f.default is not None and value == f.default and f.name in ("shared", "cpu"):
            continue
        if value is None and f.name in ("alias_of", "tag"):
            continue
        data[f.name] = list(value) if isinstance(value, tuple) else value
    return data


def op_from_dict(data: dict[str, Any]) -> TraceOp:
    data = dict(data)
    kind = data.pop("op", None)
    cls = OP_TYPES.get(kind)
    if cls is None:
        raise InvalidParams(f"unknown trace op {kind!r}")
    if data.get("alias_of") is not None:
        data["alias_of"] = tuple(data["alias_of"])
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidParams(f"bad {kind} record: {exc}") from None


def dumps_trace(ops: Iterable[TraceOp]) -> str:
    lines = [json.dumps({"v": TRACE_SCHEMA_VERSION}, separators=(",", ":"))]
    lines += [json.dumps(op_to_dict(op), separators=(",", ":"), sort_keys=True) for op in ops]
    return "\n".join(lines) + "\n"


def write_trace(path: str | Path, ops: Iterable[TraceOp]) -> None:
    Path(path).write_text(dumps_trace(ops))


def iter_trace(lines: Iterable[str]) -> Iterator[TraceOp]:
    it = iter(lines)
    header = None
    for line in it:
        if line.strip():
            header = json.loads(line)
            break
    if not isinstance(header, dict) or header.get("v") != TRACE_SCHEMA_VERSION:
        raise InvalidParams(f"trace header must be {{\"v\": {TRACE_SCHEMA_VERSION}}}, got {header!r}")
    for line in it:
        if line.strip():
            yield op_from_dict(json.loads(line))


def read_trace(path: str | Path) -> list[TraceOp]:
    with open(path) as fh:
        return list(iter_trace(fh))


# -- generators --------------------------------------------------------------------

USER_BASE = 0x1000


def bursty(
    *, ratio: float = 15.4, mean: float = 1000, cycles: int = 10,
    period: int | None = None, jitter: float = 0.1, seed: int = 0,
) -> list[TraceOp]:
    """Kernel alloc/free bursts sampled at a fixed cadence.

    Each cycle holds ``period`` samples at a jittered baseline except the
    last, which is a spike.  The spike height is solved so that
    max/mean over all samples equals ``ratio`` before integer rounding.
    """
    if ratio < 1 or mean <= 0 or cycles <= 0 or not 0 <= jitter < 1:
        raise InvalidParams("bursty needs ratio >= 1, mean > 0, cycles > 0, 0 <= jitter < 1")
    period = period or max(24, math.ceil(ratio) + 8)
    if period <= ratio:
        raise InvalidParams(f"period {period} must exceed ratio {ratio}")
    rng = random.Random(seed)
    base = mean * (period - ratio) / (period - 1)
    levels = []
    for _ in range(cycles):
        levels.append([max(1, round(base * (1 + jitter * rng.uniform(-1, 1))))
                       for _ in range(period - 1)])
    total_base = sum(sum(c) for c in levels)
    peak = round(ratio * total_base / (cycles * (period - ratio)))
    ops: list[TraceOp] = []
    held, t = 0, 0
    for cycle in levels:
        for target in cycle + [peak]:
            if target > held:
                ops.append(AllocBurst(target - held))
            elif target < held:
                ops.append(FreeBurst(held - target))
            held = target
            ops.append(SamplePoint(t))
            t += 1
    return ops


def fault_intensive(*, n: int = 100, aliases: int = 1, cow: float = 0.0, seed: int = 0) -> list[TraceOp]:
    """Fresh anonymous faults, each page reached through ``aliases`` user GVAs.

    With ``cow > 0`` a private region of ``round(cow * n)`` pages is written,
    the process forks and the child writes every page again.
    """
    if n <= 0 or aliases <= 0 or not 0 <= cow <= 1:
        raise InvalidParams("fault-intensive needs n > 0, aliases > 0, 0 <= cow <= 1")
    rng = random.Random(seed)
    ops: list[TraceOp] = []
    starts = [USER_BASE + k * n for k in range(aliases)]
    ops.append(Mmap(0, starts[0], n, shared=aliases > 1))
    for s in starts[1:]:
        ops.append(Mmap(0, s, n, alias_of=(0, starts[0])))
    for i in range(n):
        ops.append(Touch(0, starts[0] + i, "write", rng.randrange(1 << 30)))
        for s in starts[1:]:
            ops.append(Touch(0, s + i, "read"))
    m = round(cow * n)
    if m:
        region = starts[-1] + n
        ops.append(Mmap(0, region, m))
        ops += [Touch(0, region + i, "write", rng.randrange(1 << 30)) for i in range(m)]
        ops.append(Fork(0, 1))
        ops += [Touch(1, region + i, "write", rng.randrange(1 << 30)) for i in range(m)]
    return ops


def syscall_intensive(
    *, n: int = 1000, threads: int = 2, vcpus: int = 1, virq_every: int = 10,
    migrate_every: int = 0, seed: int = 0,
) -> list[TraceOp]:
    if n < 0 or threads <= 0 or vcpus <= 0:
        raise InvalidParams("syscall-intensive needs n >= 0, threads > 0, vcpus > 0")
    rng = random.Random(seed)
    ops: list[TraceOp] = [NewThread(t, t % vcpus) for t in range(threads)]
    for i in range(n):
        ops.append(Syscall(rng.randrange(threads), 39))
        if virq_every and i % virq_every == virq_every - 1:
            ops.append(InjectVirq(rng.randrange(vcpus), 32))
        if migrate_every and i % migrate_every == migrate_every - 1:
            ops.append(MigrateThread(rng.randrange(threads), rng.randrange(vcpus)))
    return ops


def unmap_heavy(*, cycles: int = 50, pages: int = 64, seed: int = 0) -> list[TraceOp]:
    """Map, dirty and unmap a buffer repeatedly (dedup-style churn)."""
    if cycles <= 0 or pages <= 0:
        raise InvalidParams("unmap-heavy needs cycles > 0, pages > 0")
    rng = random.Random(seed)
    ops: list[TraceOp] = []
    for c in range(cycles):
        start = USER_BASE + (c % 2) * pages
        ops.append(Mmap(0, start, pages))
        ops += [Touch(0, start + i, "write", rng.randrange(1 << 30)) for i in range(pages)]
        ops.append(Munmap(0, start, pages))
    return ops


def random_trace(
    *, ops: int = 200, max_pages: int = 1024, max_spaces: int = 4, seed: int = 0
) -> list[TraceOp]:
    """Random valid mix of map/touch/CoW/fork/unmap/burst ops.

    User mappings of every space stay inside ``[0, max_pages)``.
    """
    rng = random.Random(seed)
    regions: dict[int, list[list]] = {0: []}  # space -> [start, npages, shared]
    held = 0
    out: list[TraceOp] = []

    def free_slot(space: int, length: int) -> int | None:
        taken = sorted((r[0], r[0] + r[1]) for r in regions[space])
        for _ in range(8):
            start = rng.randrange(0, max_pages - length + 1)
            if all(e <= start or s >= start + length for s, e in taken):
                return start
        return None

    while len(out) < ops:
        roll = rng.random()
        spaces = list(regions)
        space = rng.choice(spaces)
        if roll < 0.12 or not any(regions.values()):
            length = rng.randint(1, 32)
            start = free_slot(space, length)
            if start is None:
                continue
            shared_srcs = [(s, r) for s in spaces for r in regions[s] if r[2]]
            if shared_srcs and rng.random() < 0.3:
                src_space, src = rng.choice(shared_srcs)
                length = min(length, src[1])
                off = rng.randrange(src[1] - length + 1)
                start = free_slot(space, length)
                if start is None:
                    continue
                out.append(Mmap(space, start, length, alias_of=(src_space, src[0] + off)))
                regions[space].append([start, length, True])
            else:
                shared = rng.random() < 0.25
                out.append(Mmap(space, start, length, shared=shared))
                regions[space].append([start, length, shared])
        elif roll < 0.75:
            if not regions[space]:
                continue
            start, length, _ = rng.choice(regions[space])
            vpn = start + rng.randrange(length)
            if rng.random() < 0.55:
                out.append(Touch(space, vpn, "write", len(out)))
            else:
                out.append(Touch(space, vpn, "read"))
        elif roll < 0.83:
            if not regions[space]:
                continue
            region = rng.choice(regions[space])
            regions[space].remove(region)
            start, length, shared = region
            if length > 2 and rng.random() < 0.3:
                cut = rng.randint(1, length - 1)
                out.append(Munmap(space, start + cut, length - cut))
                regions[space].append([start, cut, shared])
            else:
                out.append(Munmap(space, start, length))
        elif roll < 0.87:
            if len(regions) >= max_spaces:
                continue
            child = max(regions) + 1
            out.append(Fork(space, child))
            regions[child] = [list(r) for r in regions[space]]
        elif roll < 0.94:
            n = rng.randint(1, 24)
            out.append(AllocBurst(n))
            held += n
        else:
            if not held:
                continue
            n = rng.randint(1, held)
            out.append(FreeBurst(n))
            held -= n
    return out


GENERATORS = {
    "bursty": bursty,
    "fault-intensive": fault_intensive,
    "syscall-intensive": syscall_intensive,
    "unmap-heavy": unmap_heavy,
    "random": random_trace,
}


def parse_gen_spec(spec: str) -> tuple[str, dict[str, Any]]:
    """Parse ``kind:key=val,key=val``; values are int, then float, else str."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip().replace("_", "-")
    if kind not in GENERATORS:
        raise InvalidParams(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}")
    params: dict[str, Any] = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, eq, raw = item.partition("=")
        if not eq:
            raise InvalidParams(f"generator parameter {item!r} is not key=value")
        for conv in (int, float):
            try:
                params[key.strip()] = conv(raw)
                break
            except ValueError:
                continue
        else:
            params[key.strip()] = raw
    return kind, params


def generate(kind: str, params: dict[str, Any] | None = None, seed: int = 0) -> list[TraceOp]:
    try:
        fn = GENERATORS[kind]
    except KeyError:
        raise InvalidParams(f"unknown generator {kind!r}") from None
    params = dict(params or {})
    params.setdefault("seed", seed)
    try:
        return fn(**params)
    except TypeError as exc:
        raise InvalidParams(f"{kind}: {exc}") from None


# -- replay ------------------------------------------------------------------------


@dataclass
class Report:
    backend: str
    profile: str
    nested: bool
    counters: Counters
    latency_ns: int
    samples: list[ElasticitySample]
    event_digest: str
    state_hash: str
    ops: int
    config: dict[str, Any] = field(default_factory=dict)
    seed: int | None = None
    version: str = __version__

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tool_version": self.version,
            "seed": self.seed,
            "backend": self.backend,
            "profile": self.profile,
            "nested": self.nested,
            "ops": self.ops,
            "counters": self.counters.as_dict(),
            "secondary_faults": self.counters.secondary_faults,
            "latency_ns": self.latency_ns,
            "event_digest": self.event_digest,
            "state_hash": self.state_hash,
            "samples": [asdict(s) for s in self.samples],
            "config": self.config,
        }


def state_hash(state: dict[tuple[int, int], Any]) -> str:
    h = hashlib.sha256()
    for (space, vpn), tag in sorted(state.items()):
        h.update(f"{space}:{vpn}={tag!r};".encode())
    return h.hexdigest()


def replay(
    trace: Iterable[TraceOp],
    backend: BackendKind | str,
    profile: LatencyProfile | str | None = None,
    *,
    config: MachineConfig | None = None,
    nested: bool | None = None,
    test_mode: bool = False,
    seed: int | None = None,
) -> Report:
    """Drive one backend through ``trace`` and price the result.

    ``profile`` defaults to the backend's native system profile.  In
    ``test_mode`` the full invariant sweep runs after every op and the flat
    reference interpreter runs in lockstep, so every read is cross-checked.
    """
    kind = BackendKind.parse(backend) if isinstance(backend, str) else backend
    if profile is None:
        profile = kind.default_profile
    if isinstance(profile, str):
        profile = get_profile(profile)
    if nested is not None:
        profile = profile.with_nested(nested)
    config = config or MachineConfig()
    machine = Machine(kind, config)
    gates = Gates(config.cpus, syscall_path=profile.syscall_path)
    digest = hashlib.sha256()
    samples: list[ElasticitySample] = []
    ref = ReferenceMachine() if test_mode else None
    n = 0
    for i, op in enumerate(trace):
        n = i + 1
        try:
            seen = _apply(machine, gates, op, samples)
            if ref is not None:
                expected = _apply_reference(ref, op)
                if isinstance(op, Touch) and seen != expected:
                    raise SimError(
                        f"space {op.space} gva {op.gva:#x} reads {seen!r}, reference has {expected!r}"
                    )
                machine.check()
                if not gates.conservation_holds():
                    raise SimError("virq conservation violated")
        except (SimError, KeyError, IndexError) as exc:
            raise TraceError(i, exc) from exc
        digest.update(f"{i}:{op.op};".encode())
    for entry in gates.log:
        digest.update(repr(entry).encode())
    counters = machine.counters + gates.counters
    digest.update(repr(counters.values()).encode())
    try:
        visible = machine.visible_state()
        if ref is not None and visible != ref.visible_state():
            raise SimError("final guest-visible state differs from the reference")
    except SimError as exc:
        raise TraceError(n, exc) from exc
    final = state_hash(visible)
    return Report(
        backend=kind.label,
        profile=profile.name,
        nested=profile.nested,
        counters=counters,
        latency_ns=path_latency(profile, counters),
        samples=samples,
        event_digest=digest.hexdigest(),
        state_hash=final,
        ops=n,
        config={"machine": asdict(config), "backend": asdict(kind)},
        seed=seed,
    )


def _apply(machine: Machine, gates: Gates, op: TraceOp, samples: list[ElasticitySample]) -> Any:
    """Apply one op; a touch returns the value the guest saw."""
    if isinstance(op, Touch):
        if op.access not in ("read", "write"):
            raise UsageError(f"touch access must be read or write, got {op.access!r}")
        machine.space(op.space)
        if machine.spaces[op.space].find(op.gva) is None:
            raise SimError(f"segfault: space {op.space} gva {op.gva:#x} is not mapped")
        return machine.touch(op.space, op.gva, op.access == "write", op.tag)
    elif isinstance(op, Mmap):
        machine.mmap(op.space, op.gva, op.npages, shared=op.shared, alias_of=op.alias_of)
    elif isinstance(op, Munmap):
        machine.munmap(op.space, op.gva, op.npages)
    elif isinstance(op, Fork):
        machine.fork(op.space, op.child)
    elif isinstance(op, AllocBurst):
        machine.alloc_burst(op.pages, op.cpu)
    elif isinstance(op, FreeBurst):
        machine.free_burst(op.pages, op.cpu)
    elif isinstance(op, SamplePoint):
        samples.append(ElasticitySample(op.t, machine.guest_in_use, machine.host_allocated()))
    elif isinstance(op, NewThread):
        gates.add_thread(op.thread, op.vcpu)
    elif isinstance(op, Syscall):
        gates.syscall_round_trip(op.thread, op.nr)
    elif isinstance(op, InjectVirq):
        gates.inject_virq(op.vcpu, op.vector)
    elif isinstance(op, MigrateThread):
        gates.migrate_thread(op.thread, op.vcpu)
    else:
        raise UsageError(f"unknown op {op!r}")
    return None


def _apply_reference(ref: ReferenceMachine, op: TraceOp) -> Any:
    if isinstance(op, Touch):
        return ref.touch(op.space, op.gva, op.access == "write", op.tag)
    if isinstance(op, Mmap):
        ref.mmap(op.space, op.gva, op.npages, op.shared, op.alias_of)
    elif isinstance(op, Munmap):
        ref.munmap(op.space, op.gva, op.npages)
    elif isinstance(op, Fork):
        ref.fork(op.space, op.child)
    return None


def replay_reference(trace: Iterable[TraceOp]) -> dict[tuple[int, int], Any]:
    """Visible state from the flat interpreter (memory ops only)."""
    ref = ReferenceMachine()
    for op in trace:
        _apply_reference(ref, op)
    return ref.visible_state()
