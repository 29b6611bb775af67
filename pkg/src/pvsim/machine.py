"""Guest kernel model: address spaces, VMAs, anonymous/CoW faults and fork.

The machine is backend-agnostic.  It keeps the guest's own bookkeeping
(VMAs, page reference counts, shared memory objects) and expresses every
page-table change through the backend hooks, so the same trace exercises
each memory-virtualization scheme through identical guest behaviour.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass, field

from .alloc import GuestAllocator
from .backends import Backend, BackendKind, make_backend
from .cost import Counters
from .errors import InvalidParams, SimError, UsageError


@dataclass
class MachineConfig:
    guest_pages: int = 1 << 16
    host_pages: int = 1 << 20
    space_pages: int = 1 << 20
    dm_base: int = 1 << 19
    cpus: int = 1
    pcp_capacity: int = 128
    pcp_batch: int = 32
    max_order: int = 10
    enforce_pcp_bound: bool = True
    bug: str | None = None

    def __post_init__(self) -> None:
        if self.dm_base + self.guest_pages > self.space_pages:
            raise InvalidParams("direct map does not fit the guest virtual space")
        if self.cpus <= 0:
            raise InvalidParams("need at least one vCPU")

    @property
    def user_limit(self) -> int:
        return self.dm_base


@dataclass
class SharedObject:
    oid: int
    pages: dict[int, int] = field(default_factory=dict)  # offset -> gpa
    vma_refs: int = 0


@dataclass
class Vma:
    start: int
    npages: int
    obj: SharedObject | None = None
    obj_off: int = 0

    @property
    def end(self) -> int:
        return self.start + self.npages


@dataclass
class Space:
    sid: int
    cpu: int
    vmas: list[Vma] = field(default_factory=list)

    def find(self, vpn: int) -> Vma | None:
        i = bisect.bisect_right([v.start for v in self.vmas], vpn) - 1
        if i >= 0 and self.vmas[i].start <= vpn < self.vmas[i].end:
            return self.vmas[i]
        return None


class Machine:
    """One guest running on one backend."""

    def __init__(self, kind: BackendKind, config: MachineConfig | None = None) -> None:
        self.config = config or MachineConfig()
        cfg = self.config
        self.backend: Backend = make_backend(
            kind,
            host_pages=cfg.host_pages,
            dm_base=cfg.dm_base,
            guest_pages=cfg.guest_pages,
            space_pages=cfg.space_pages,
            bug=cfg.bug,
        )
        self.alloc = GuestAllocator(
            cfg.guest_pages,
            cpus=cfg.cpus,
            pcp_capacity=cfg.pcp_capacity,
            pcp_batch=cfg.pcp_batch,
            max_order=cfg.max_order,
            binder=self.backend.binder,
            pcp_bound=0.01 if cfg.enforce_pcp_bound else None,
        )
        self.spaces: dict[int, Space] = {}
        self.refs: dict[int, int] = {}  # gpa -> PTE refs + shared-object hold
        self.burst_pool: dict[int, deque[int]] = {cpu: deque() for cpu in range(cfg.cpus)}
        self._next_oid = 0
        self.create_space(0)

    @property
    def counters(self) -> Counters:
        return self.backend.counters

    # -- spaces --------------------------------------------------------------

    def create_space(self, sid: int) -> Space:
        if sid in self.spaces:
            raise UsageError(f"space {sid} already exists")
        space = Space(sid, sid % self.config.cpus)
        self.spaces[sid] = space
        self.backend.create_space(sid)
        return space

    def space(self, sid: int) -> Space:
        try:
            return self.spaces[sid]
        except KeyError:
            raise UsageError(f"unknown space {sid}") from None

    # -- page lifecycle ------------------------------------------------------

    def _alloc_page(self, cpu: int) -> int:
        page = self.alloc.get_free_pages(cpu, 0)
        # the kernel clears the page through the direct map
        frame = self.backend.kernel_access(page, write=True)
        self.backend.write_frame(frame, None)
        return page

    def _get(self, gpa: int) -> None:
        self.refs[gpa] = self.refs.get(gpa, 0) + 1

    def _put(self, gpa: int, cpu: int) -> None:
        n = self.refs[gpa] - 1
        if n:
            self.refs[gpa] = n
            return
        del self.refs[gpa]
        self.alloc.free_pages(cpu, gpa, 0)
        self.backend.on_free(gpa)

    # -- address-space operations --------------------------------------------

    def mmap(
        self,
        sid: int,
        start: int,
        npages: int,
        *,
        shared: bool = False,
        alias_of: tuple[int, int] | None = None,
    ) -> None:
        space = self.space(sid)
        if npages <= 0 or start < 0 or start + npages > self.config.user_limit:
            raise UsageError(f"bad mapping [{start:#x}, +{npages})")
        for v in space.vmas:
            if v.start < start + npages and start < v.end:
                raise UsageError(f"mapping at {start:#x} overlaps an existing VMA")
        if alias_of is not None:
            src_space, src_start = alias_of
            src = self.space(src_space).find(src_start)
            if src is None or src.obj is None or src_start + npages > src.end:
                raise UsageError("alias source must be a shared mapping covering the range")
            obj, off = src.obj, src.obj_off + (src_start - src.start)
        elif shared:
            obj, off = SharedObject(self._next_oid), 0
            self._next_oid += 1
        else:
            obj, off = None, 0
        if obj is not None:
            obj.vma_refs += 1
        bisect.insort(space.vmas, Vma(start, npages, obj, off), key=lambda v: v.start)

    def munmap(self, sid: int, start: int, npages: int) -> None:
        space = self.space(sid)
        end = start + npages
        for vpn in range(start, end):
            g = self.backend.guest_lookup(sid, vpn)
            if g is not None:
                self.backend.guest_pt_clear(sid, vpn)
                self._put(g[0], space.cpu)
        kept: list[Vma] = []
        for v in space.vmas:
            if v.end <= start or v.start >= end:
                kept.append(v)
                continue
            pieces = []
            if v.start < start:
                pieces.append(Vma(v.start, start - v.start, v.obj, v.obj_off))
            if v.end > end:
                pieces.append(Vma(end, v.end - end, v.obj, v.obj_off + (end - v.start)))
            kept.extend(pieces)
            if v.obj is not None:
                v.obj.vma_refs += len(pieces) - 1
                if v.obj.vma_refs == 0:
                    for g in v.obj.pages.values():
                        self._put(g, space.cpu)
                    v.obj.pages.clear()
        kept.sort(key=lambda v: v.start)
        space.vmas = kept

    def fork(self, sid: int, child: int) -> Counters:
        parent = self.space(sid)
        before = self.counters.copy()
        new = self.create_space(child)
        for v in parent.vmas:
            if v.obj is not None:
                v.obj.vma_refs += 1
            new.vmas.append(Vma(v.start, v.npages, v.obj, v.obj_off))
        writes = []
        for vpn, g, writable in sorted(self.backend.guest_mappings(sid)):
            shared = parent.find(vpn).obj is not None
            writes.append((vpn, g, writable and shared))
            self._get(g)
        self.backend.clone_tables(sid, child, writes)
        return self.counters - before

    # -- faults and accesses -------------------------------------------------

    def handle_user_fault(self, sid: int, vpn: int, access: str) -> Counters:
        """Resolve a guest page fault: ``access`` is ``read``, ``write`` or ``cow``."""
        space = self.space(sid)
        vma = space.find(vpn)
        if vma is None:
            raise SimError(f"segfault: space {sid} gva {vpn:#x} is not mapped")
        before = self.counters.copy()
        self.backend.fault_entry()
        if access == "cow":
            old, _ = self.backend.guest_lookup(sid, vpn)
            if self.refs[old] == 1:
                self.backend.guest_pt_write(sid, vpn, old, True)
            else:
                new = self.alloc.get_free_pages(space.cpu, 0)
                src = self.backend.kernel_access(old, write=False)
                dst = self.backend.kernel_access(new, write=True)
                self.backend.write_frame(dst, self.backend.read_frame(src))
                self._get(new)
                self.backend.guest_pt_write(sid, vpn, new, True)
                self._put(old, space.cpu)
        elif vma.obj is not None:
            off = vma.obj_off + (vpn - vma.start)
            g = vma.obj.pages.get(off)
            if g is None:
                g = self._alloc_page(space.cpu)
                vma.obj.pages[off] = g
                self._get(g)
            self._get(g)
            self.backend.guest_pt_write(sid, vpn, g, True)
        else:
            g = self._alloc_page(space.cpu)
            self._get(g)
            self.backend.guest_pt_write(sid, vpn, g, True)
        return self.counters - before

    def touch(self, sid: int, vpn: int, write: bool, tag: object = None) -> object:
        """User access; returns the value read (or written)."""
        g = self.backend.guest_lookup(sid, vpn)
        if g is None:
            self.handle_user_fault(sid, vpn, "write" if write else "read")
        elif write and not g[1]:
            self.handle_user_fault(sid, vpn, "cow")
        frame = self.backend.user_access(sid, vpn, write)
        if write:
            self.backend.write_frame(frame, tag)
            return tag
        return self.backend.read_frame(frame)

    # -- kernel bursts -------------------------------------------------------

    def alloc_burst(self, pages: int, cpu: int = 0) -> None:
        pool = self.burst_pool[cpu]
        for _ in range(pages):
            pool.append(self._alloc_page(cpu))

    def free_burst(self, pages: int, cpu: int = 0) -> None:
        pool = self.burst_pool[cpu]
        if pages > len(pool):
            raise UsageError(f"free burst of {pages} with {len(pool)} burst pages held")
        for _ in range(pages):
            g = pool.pop()
            self.alloc.free_pages(cpu, g, 0)
            self.backend.on_free(g)

    def reclaim_free(self, gpas: list[int], cpu: int = 0) -> Counters:
        """Return allocated order-0 pages to the guest allocator."""
        before = self.counters.copy()
        for g in gpas:
            self.alloc.free_pages(cpu, g, 0)
            self.backend.on_free(g)
        return self.counters - before

    # -- observation ---------------------------------------------------------

    @property
    def guest_in_use(self) -> int:
        return self.alloc.in_use

    def host_allocated(self) -> int:
        return self.backend.host_allocated()

    def visible_state(self) -> dict[tuple[int, int], object]:
        """Guest-visible content: ``(space, gva) -> tag`` for every mapped page."""
        out = {}
        for sid in sorted(self.spaces):
            for vpn, _, _ in sorted(self.backend.guest_mappings(sid)):
                frame = self.backend.peek(sid, vpn)
                if frame is None:
                    raise SimError(f"space {sid} gva {vpn:#x} mapped but not backed")
                out[(sid, vpn)] = self.backend.read_frame(frame)
        return out

    def check(self) -> None:
        """Test-mode invariant sweep."""
        self.alloc.check_partition()
        counted: dict[int, int] = {}
        for sid in self.spaces:
            for _, g, _ in self.backend.guest_mappings(sid):
                counted[g] = counted.get(g, 0) + 1
        seen_objs = set()
        for space in self.spaces.values():
            for v in space.vmas:
                if v.obj is not None and v.obj.oid not in seen_objs:
                    seen_objs.add(v.obj.oid)
                    for g in v.obj.pages.values():
                        counted[g] = counted.get(g, 0) + 1
        if counted != self.refs:
            raise SimError("page reference counts disagree with mappings")
        allocated = self.alloc.allocated_pages()
        pool = {g for q in self.burst_pool.values() for g in q}
        if set(self.refs) | pool != allocated:
            raise SimError("allocated pages disagree with referenced pages")
        self.backend.check(self.alloc)
