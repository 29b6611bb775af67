"""Protection-key domain switching between guest user and guest kernel.

Guest user (GU) and guest kernel (GK) share one address space and are
separated by protection keys.  A ring-3 Syscall Gate and a ring-0
Interrupt Gate are the only places allowed to rewrite a thread's key
register.  Interrupt atomicity inside the syscall gate comes from a
per-vCPU virtual interrupt flag plus a one-instruction interrupt shadow.

Syscall round trips are generators of steps so a scheduler can interleave
interrupt injection and migration attempts between any two steps.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator

from .cost import Counters
from .errors import ContextMissing, MigrationInGate, ProtectionFault, UsageError, WrongDomain


class DomainKey(enum.Enum):
    GU = "GU"
    GK = "GK"
    HOST = "HOST"


class EventSource(enum.Enum):
    SELF_EXCEPTION = "self_exception"
    EXTERNAL_INTERRUPT = "external_interrupt"


class PathTaken(enum.Enum):
    FAST_PATH = "fast_path"
    HOST_PATH = "host_path"


@dataclass(frozen=True)
class GateEvent:
    vector: int
    source: EventSource


PAGE_FAULT = GateEvent(14, EventSource.SELF_EXCEPTION)
TIMER = GateEvent(32, EventSource.EXTERNAL_INTERRUPT)

# wrpkru is allowed only at these code sites
GATE_SITES = frozenset(
    {"syscall_gate.to_kernel", "syscall_gate.to_user", "irq_gate.entry", "irq_gate.exit"}
)


@dataclass
class KeyRegister:
    thread: int
    active_key: DomainKey = DomainKey.GU
    write_sites: list[tuple[str, DomainKey]] = field(default_factory=list)


@dataclass
class Pvcs:
    vcpu: int
    virtual_if: bool = True
    interrupt_shadow: bool = False
    pending_virqs: deque[int] = field(default_factory=deque)
    kernel_ctx: str = ""
    owner_thread: int | None = None

    def masked(self) -> bool:
        return not self.virtual_if or self.interrupt_shadow


@dataclass
class Thread:
    tid: int
    vcpu: int
    keys: KeyRegister
    in_gate: bool = False


class Gates:
    """XGates state for one container: threads, per-vCPU control blocks, event log."""

    def __init__(self, vcpus: int = 1, *, syscall_path: str = "gate") -> None:
        self.syscall_path = syscall_path
        self.pvcs = {v: Pvcs(v, kernel_ctx=f"kctx-vcpu{v}") for v in range(vcpus)}
        self.threads: dict[int, Thread] = {}
        # GK-protected thread-local slots: thread -> vcpu
        self._slots: dict[int, int] = {}
        self.counters = Counters()
        self.log: list[tuple] = []
        self.injected: dict[int, int] = {v: 0 for v in range(vcpus)}
        self.delivered: dict[int, int] = {v: 0 for v in range(vcpus)}

    # -- setup ---------------------------------------------------------------

    def add_thread(self, tid: int, vcpu: int, *, register_slot: bool = True) -> Thread:
        if tid in self.threads:
            raise UsageError(f"thread {tid} exists")
        self._vcpu(vcpu)
        thread = Thread(tid, vcpu, KeyRegister(tid))
        self.threads[tid] = thread
        if register_slot:
            self._slots[tid] = vcpu
        self.pvcs[vcpu].owner_thread = tid
        return thread

    def _vcpu(self, vcpu: int) -> Pvcs:
        try:
            return self.pvcs[vcpu]
        except KeyError:
            raise UsageError(f"no vCPU {vcpu}") from None

    def thread(self, tid: int) -> Thread:
        try:
            return self.threads[tid]
        except KeyError:
            raise UsageError(f"unknown thread {tid}") from None

    # -- key register and isolation ------------------------------------------

    def checked_wrpkru(self, tid: int, key: DomainKey, site: str) -> None:
        """Write the key register; a write outside a gate site is logged as a violation."""
        thread = self.thread(tid)
        thread.keys.active_key = key
        thread.keys.write_sites.append((site, key))
        self.log.append(("wrpkru", tid, key.value, site))
        if site not in GATE_SITES:
            self.counters.policy_violations += 1
            self.log.append(("policy_violation", tid, site))

    def access_check(self, tid: int, page_key: DomainKey, write: bool = False) -> bool:
        """``True`` if allowed; ``False`` is a protection fault."""
        active = self.thread(tid).keys.active_key
        if page_key is DomainKey.HOST:
            return False
        if active is DomainKey.GK:
            return True
        return active is DomainKey.GU and page_key is DomainKey.GU

    def _read_slot(self, thread: Thread) -> Pvcs:
        if thread.keys.active_key is not DomainKey.GK:
            raise ProtectionFault(f"thread {thread.tid} read its vCPU slot outside GK")
        try:
            return self.pvcs[self._slots[thread.tid]]
        except KeyError:
            raise ContextMissing(f"thread {thread.tid} has no registered vCPU slot") from None

    # -- interrupts ----------------------------------------------------------

    def dispatch_event(self, vcpu: int, event: GateEvent) -> tuple[PathTaken, Counters]:
        before = self.counters.copy()
        if event.source is EventSource.SELF_EXCEPTION:
            self.counters.fault_forwards += 1
            path = PathTaken.FAST_PATH
        else:
            self.counters.world_switches += 1
            path = PathTaken.HOST_PATH
        self.log.append(("dispatch", vcpu, event.vector, path.value))
        return path, self.counters - before

    def _deliver(self, vcpu: int, vector: int) -> None:
        self.counters.virq_delivered += 1
        self.delivered[vcpu] += 1
        self.log.append(("virq_delivered", vcpu, vector))
        self.dispatch_event(vcpu, GateEvent(vector, EventSource.EXTERNAL_INTERRUPT))

    def inject_virq(self, vcpu: int, vector: int) -> str:
        pvcs = self._vcpu(vcpu)
        self.injected[vcpu] += 1
        if pvcs.masked():
            pvcs.pending_virqs.append(vector)
            self.counters.virq_deferred += 1
            self.log.append(("virq_deferred", vcpu, vector))
            return "deferred"
        self._deliver(vcpu, vector)
        return "delivered"

    def _drain(self, pvcs: Pvcs) -> None:
        while pvcs.pending_virqs and not pvcs.masked():
            self._deliver(pvcs.vcpu, pvcs.pending_virqs.popleft())

    def set_virtual_if(self, tid: int, enabled: bool) -> None:
        """Emulated cli/sti on the calling thread's vCPU."""
        thread = self.thread(tid)
        if thread.keys.active_key is not DomainKey.GK and not thread.in_gate:
            raise WrongDomain(f"thread {tid} toggled the interrupt flag from GU")
        pvcs = self.pvcs[thread.vcpu]
        pvcs.virtual_if = enabled
        self.log.append(("para_sti" if enabled else "para_cli", pvcs.vcpu, tid))
        if enabled:
            self._drain(pvcs)

    def pending(self, vcpu: int) -> int:
        return len(self.pvcs[vcpu].pending_virqs)

    # -- migration -----------------------------------------------------------

    def migrate_thread(self, tid: int, vcpu: int) -> None:
        thread = self.thread(tid)
        self._vcpu(vcpu)
        if thread.in_gate:
            raise MigrationInGate(f"thread {tid} is inside a gate")
        if thread.vcpu == vcpu:
            return
        thread.vcpu = vcpu
        if tid in self._slots:
            self._slots[tid] = vcpu
        self.pvcs[vcpu].owner_thread = tid
        self.log.append(("migrate", tid, vcpu))

    # -- syscalls ------------------------------------------------------------

    def syscall_steps(self, tid: int, nr: int) -> Iterator[str]:
        """Yield after each step of one Syscall Gate round trip."""
        thread = self.thread(tid)
        if thread.keys.active_key is not DomainKey.GU:
            raise WrongDomain(f"thread {tid} entered the syscall gate from {thread.keys.active_key.value}")
        if tid not in self._slots:
            raise ContextMissing(f"thread {tid} has no registered vCPU slot")
        path = self.syscall_path
        self.counters.syscalls += 1
        if path not in ("gate", "gate_priv"):
            yield from self._non_gate_syscall(thread, nr, path)
            return

        # to_kernel
        thread.in_gate = True
        pvcs = self.pvcs[thread.vcpu]
        pvcs.interrupt_shadow = True
        self.log.append(("save_user_ctx", tid))
        yield "save_user_ctx"
        self.checked_wrpkru(tid, DomainKey.GK, "syscall_gate.to_kernel")
        self.counters.gate_switches += 1
        yield "wrpkru_gk"
        pvcs.virtual_if = False
        pvcs.interrupt_shadow = False
        self.log.append(("para_cli", pvcs.vcpu, tid))
        yield "para_cli"
        ctx = self._read_slot(thread)
        self.log.append(("load_kernel_ctx", tid, ctx.kernel_ctx))
        yield "load_kernel_ctx"
        if path == "gate_priv":
            self.counters.privilege_switches += 2
        else:
            self.counters.depriv_emulations += 1
        self.log.append(("dispatch_syscall", tid, nr))
        yield "dispatch"
        # to_user
        self.log.append(("save_return_state", tid))
        yield "save_return_state"
        self.log.append(("restore_user_ctx", tid))
        yield "restore_user_ctx"
        vcpu = self.pvcs[thread.vcpu]
        vcpu.virtual_if = True
        self.log.append(("para_sti", vcpu.vcpu, tid))
        self._drain(vcpu)
        yield "para_sti"
        self.checked_wrpkru(tid, DomainKey.GU, "syscall_gate.to_user")
        self.counters.gate_switches += 1
        thread.in_gate = False
        self.log.append(("resume", tid))
        yield "resume"

    def _non_gate_syscall(self, thread: Thread, nr: int, path: str) -> Iterator[str]:
        if path == "pt_switch":
            # separate guest user / guest kernel page tables
            self.counters.pt_switches += 2
        elif path == "native_mitigated":
            self.counters.mitigations += 1
        self.log.append(("syscall", thread.tid, nr, path))
        yield "syscall"

    def syscall_round_trip(self, tid: int, nr: int) -> Counters:
        before = self.counters.copy()
        for _ in self.syscall_steps(tid, nr):
            pass
        return self.counters - before

    # -- audits --------------------------------------------------------------

    def conservation_holds(self) -> bool:
        return all(
            self.injected[v] == self.delivered[v] + len(p.pending_virqs)
            for v, p in self.pvcs.items()
        )

    def masked_window_violations(self) -> list[int]:
        """Log indices of virq deliveries that fall inside a cli/sti window."""
        open_windows: set[int] = set()
        bad = []
        for i, entry in enumerate(self.log):
            kind = entry[0]
            if kind == "para_cli":
                open_windows.add(entry[1])
            elif kind == "para_sti":
                open_windows.discard(entry[1])
            elif kind == "virq_delivered" and entry[1] in open_windows:
                bad.append(i)
        return bad


def syscall_counters(syscall_path: str) -> Counters:
    """Counters of one getpid round trip on a fresh gate machine."""
    gates = Gates(1, syscall_path=syscall_path)
    gates.add_thread(0, 0)
    return gates.syscall_round_trip(0, 39)
