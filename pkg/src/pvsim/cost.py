"""Event counters and latency profiles.

Every simulated event is tallied in :class:`Counters`; a
:class:`LatencyProfile` prices each tally in nanoseconds.  The mapping from
counter to priced primitive lives in ``CHARGES`` so that pricing stays a
plain dot product (linear in the counters).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from operator import attrgetter
from pathlib import Path
from typing import Any, Mapping

from .errors import InvalidParams, UnknownProfile

CALIBRATION_SCHEMA_VERSION = 1


@dataclass(slots=True)
class Counters:
    # memory virtualization
    page_faults: int = 0
    fault_forwards: int = 0
    shadow_faults: int = 0
    second_stage_faults: int = 0
    pt_write_emulations: int = 0
    pager_calls: int = 0
    metadata_user_updates: int = 0
    metadata_dm_updates: int = 0
    hypercalls: int = 0
    pages_bound: int = 0
    pages_unbound: int = 0
    host_pages_released: int = 0
    tlb_flushes: int = 0
    # transitions
    world_switches: int = 0
    pt_switches: int = 0
    gate_switches: int = 0
    privilege_switches: int = 0
    # syscalls
    syscalls: int = 0
    depriv_emulations: int = 0
    mitigations: int = 0
    # interrupts and policy
    virq_deferred: int = 0
    virq_delivered: int = 0
    policy_violations: int = 0

    def __add__(self, other: Counters) -> Counters:
        return Counters(*(a + b for a, b in zip(self.values(), other.values())))

    def __sub__(self, other: Counters) -> Counters:
        return Counters(*(a - b for a, b in zip(self.values(), other.values())))

    def __iadd__(self, other: Counters) -> Counters:
        for name in COUNTER_NAMES:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def values(self) -> tuple[int, ...]:
        return _get_values(self)

    def copy(self) -> Counters:
        return Counters(*_get_values(self))

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    def nonzero(self) -> dict[str, int]:
        return {k: v for k, v in asdict(self).items() if v}

    @property
    def secondary_faults(self) -> int:
        """Host-visible faults used to discover guest memory demand."""
        return self.shadow_faults + self.second_stage_faults

    @classmethod
    def from_dict(cls, data: Mapping[str, int]) -> Counters:
        unknown = set(data) - set(COUNTER_NAMES)
        if unknown:
            raise InvalidParams(f"unknown counters: {sorted(unknown)}")
        return cls(**data)


COUNTER_NAMES: tuple[str, ...] = tuple(f.name for f in fields(Counters))
_get_values = attrgetter(*COUNTER_NAMES)

# counter -> priced primitive; counters absent here are free
CHARGES: dict[str, str] = {
    "page_faults": "fault_base",
    "fault_forwards": "gk_gu_switch",
    "shadow_faults": "shadow_fault",
    "second_stage_faults": "second_stage_fault",
    "pt_write_emulations": "pt_write_emulation",
    "pager_calls": "set_pte",
    "metadata_user_updates": "metadata_user_pte",
    "metadata_dm_updates": "metadata_dm_pte",
    "hypercalls": "hypercall",
    "pages_bound": "amortized_bind",
    "pages_unbound": "amortized_unbind",
    "tlb_flushes": "tlb_flush",
    "world_switches": "world_switch",
    "pt_switches": "pt_switch",
    "gate_switches": "gate_switch",
    "privilege_switches": "privilege_switch",
    "syscalls": "syscall_base",
    "depriv_emulations": "syscall_hook",
    "mitigations": "mitigation_overhead",
}

SYSCALL_PATHS = ("gate", "gate_priv", "pt_switch", "native", "native_mitigated")


@dataclass(frozen=True)
class LatencyProfile:
    """Per-primitive nanosecond costs for one system configuration.

    ``syscall_path`` names the user/kernel transition architecture the
    profile describes; the gates module turns it into round-trip counters.
    """

    name: str
    syscall_path: str = "native"
    syscall_base: int = 0
    gate_switch: int = 0
    syscall_hook: int = 0
    privilege_switch: int = 0
    pt_switch: int = 0
    world_switch: int = 0
    mitigation_overhead: int = 0
    fault_base: int = 0
    gk_gu_switch: int = 0
    set_pte: int = 0
    metadata_user_pte: int = 0
    metadata_dm_pte: int = 0
    amortized_bind: int = 0
    amortized_unbind: int = 0
    hypercall: int = 0
    second_stage_fault: int = 0
    shadow_fault: int = 0
    pt_write_emulation: int = 0
    tlb_flush: int = 0
    scan_block: int = 0
    invalidate_block: int = 0
    nested: bool = False
    nested_exit_extra: int = 2
    nested_second_stage_extra: int = 4
    notes: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, int) and not isinstance(value, bool) and value < 0:
                raise InvalidParams(f"{self.name}.{f.name} must be >= 0, got {value}")
        if self.syscall_path not in SYSCALL_PATHS:
            raise InvalidParams(f"{self.name}: unknown syscall_path {self.syscall_path!r}")

    def cost(self, primitive: str) -> int:
        return getattr(self, primitive)

    def with_nested(self, nested: bool = True) -> LatencyProfile:
        return replace(self, nested=nested)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("name")
        if not data["notes"]:
            data.pop("notes")
        return data


def path_latency(profile: LatencyProfile, counters: Counters) -> int:
    """Price ``counters`` under ``profile`` in nanoseconds.

    With ``profile.nested`` every world switch costs ``1 + nested_exit_extra``
    world switches and every second-stage fault adds
    ``nested_second_stage_extra`` world switches on top of its own cost.
    """
    total = 0
    for counter, primitive in CHARGES.items():
        n = getattr(counters, counter)
        if n:
            total += n * getattr(profile, primitive)
    if profile.nested:
        extra = (
            counters.world_switches * profile.nested_exit_extra
            + counters.second_stage_faults * profile.nested_second_stage_extra
        )
        total += extra * profile.world_switch
    return total


def nested_delta(profile: LatencyProfile, counters: Counters) -> int:
    """Latency added by nesting: ``(2W + 4F) * world_switch`` at default extras."""
    nested = path_latency(profile.with_nested(True), counters)
    bare = path_latency(profile.with_nested(False), counters)
    return nested - bare


# -- calibration files ---------------------------------------------------------


def _parse_calibration(data: Mapping[str, Any], source: str) -> dict[str, LatencyProfile]:
    version = data.get("schema_version")
    if version != CALIBRATION_SCHEMA_VERSION:
        raise InvalidParams(
            f"{source}: schema_version {version!r} unsupported "
            f"(expected {CALIBRATION_SCHEMA_VERSION})"
        )
    profiles = data.get("profiles")
    if not isinstance(profiles, dict) or not profiles:
        raise InvalidParams(f"{source}: 'profiles' must be a non-empty object")
    allowed = {f.name for f in fields(LatencyProfile)} - {"name"}
    out = {}
    for name, values in profiles.items():
        extra = set(values) - allowed
        if extra:
            raise InvalidParams(f"{source}: profile {name!r} has unknown keys {sorted(extra)}")
        out[name] = LatencyProfile(name=name, **values)
    return out


def default_calibration() -> dict[str, LatencyProfile]:
    text = resources.files("pvsim.data").joinpath("calibration.json").read_text()
    return _parse_calibration(json.loads(text), "default calibration")


def load_calibration(path: str | Path | None = None) -> dict[str, LatencyProfile]:
    """Load profiles from a calibration JSON file, layered over the defaults.

    A file may override only some keys of a profile; unspecified keys keep
    their default value.  New profile names are accepted as custom profiles.
    """
    profiles = default_calibration()
    if path is None:
        return profiles
    path = Path(path)
    data = json.loads(path.read_text())
    if data.get("schema_version") != CALIBRATION_SCHEMA_VERSION:
        raise InvalidParams(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
    merged: dict[str, Any] = {}
    for name, values in data.get("profiles", {}).items():
        base = profiles[name].to_dict() if name in profiles else {}
        base.update(values)
        merged[name] = base
    profiles.update(
        _parse_calibration({"schema_version": CALIBRATION_SCHEMA_VERSION, "profiles": merged}, str(path))
    )
    return profiles


def get_profile(
    name: str, calibration: Mapping[str, LatencyProfile] | None = None
) -> LatencyProfile:
    profiles = calibration if calibration is not None else default_calibration()
    try:
        return profiles[name]
    except KeyError:
        raise UnknownProfile(f"unknown profile {name!r}; known: {sorted(profiles)}") from None


# -- anonymous-fault breakdown --------------------------------------------------

@dataclass(frozen=True)
class BreakdownItem:
    component: str
    ns: int
    share: float

    @property
    def percent(self) -> int:
        return round(self.share * 100)


def pager_fault_counters(*, dual_table: bool = True) -> Counters:
    """Counters of one steady-state anonymous fault on the Pager path."""
    return Counters(
        page_faults=1,
        fault_forwards=1,
        pager_calls=1,
        pages_bound=1,
        metadata_user_updates=1 if dual_table else 0,
        metadata_dm_updates=1 if dual_table else 0,
    )


def fault_breakdown(profile: LatencyProfile, *, dual_table: bool = True) -> list[BreakdownItem]:
    """Split one Pager anonymous fault into its priced components.

    Standalone (``dual_table=False``) mode has no metadata maintenance, so
    both metadata components drop to zero.  ``other`` is the fixed
    per-fault remainder (handler body, page clearing) and is always shown.
    """
    c = pager_fault_counters(dual_table=dual_table)
    amounts = {
        "metadata_user_pte": c.metadata_user_updates * profile.metadata_user_pte,
        "metadata_dm_pte": c.metadata_dm_updates * profile.metadata_dm_pte,
        "set_pte": c.pager_calls * profile.set_pte,
        "amortized_bind": c.pages_bound * profile.amortized_bind,
        "gk_gu_switch": c.fault_forwards * profile.gk_gu_switch,
        "other": c.page_faults * profile.fault_base,
    }
    total = sum(amounts.values())
    return [
        BreakdownItem(name, ns, ns / total if total else 0.0) for name, ns in amounts.items()
    ]


def breakdown_total(items: list[BreakdownItem]) -> int:
    return sum(item.ns for item in items)
