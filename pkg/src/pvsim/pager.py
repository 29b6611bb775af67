"""Intent-driven memory mediation: GPA->HPA bindings and direct shadow installs.

The Pager learns about guest memory demand from allocator events instead of
faults.  Pages crossing the PCP/buddy boundary are (un)bound in batches, an
allocation installs the direct-mapping entry, and guest page-table writes
are redirected here so the shadow entry is written in the same step.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass
from typing import Iterable, Iterator

from .addressing import (
    HUGE_PAGES,
    Install,
    PageEntry,
    PageTableState,
    Remove,
    SetAccessed,
    SetDirty,
    TableRole,
    gpa as gpa_addr,
    hpa as hpa_addr,
)
from .cost import Counters
from .errors import (
    AbsentEntry,
    BadState,
    DoubleRegistration,
    OutOfHostMemory,
    SimError,
    UnboundGpa,
    UsageError,
)


class HostFrameAllocator:
    """Host physical frame pool.

    Hands out the lowest free frame first so runs are reproducible.  Whole
    2MB chunks can be taken for huge second-stage mappings.  Frames above
    the high-water mark are never materialised, so a large pool is cheap.
    """

    def __init__(self, capacity: int) -> None:
        if capacity <= 0:
            raise UsageError("host capacity must be positive")
        self.capacity = capacity
        self._used: set[int] = set()
        self._chunk_used: dict[int, int] = {}
        self._returned: list[int] = []  # min-heap, lazily validated
        self._returned_chunks: list[int] = []
        self._bump = 0

    @property
    def allocated(self) -> int:
        return len(self._used)

    @property
    def free_count(self) -> int:
        return self.capacity - len(self._used)

    def _take(self, frame: int) -> None:
        self._used.add(frame)
        chunk = frame // HUGE_PAGES
        self._chunk_used[chunk] = self._chunk_used.get(chunk, 0) + 1

    def _next_frame(self) -> int:
        while self._returned:
            frame = heapq.heappop(self._returned)
            if frame not in self._used:
                return frame
        frame = self._bump
        self._bump += 1
        return frame

    def alloc(self, n: int = 1) -> list[int]:
        """Allocate ``n`` frames or none at all."""
        if n > self.free_count:
            raise OutOfHostMemory(f"need {n} host pages, {self.free_count} free")
        out = []
        for _ in range(n):
            frame = self._next_frame()
            self._take(frame)
            out.append(frame)
        return out

    def alloc_huge(self) -> int:
        while self._returned_chunks:
            chunk = heapq.heappop(self._returned_chunks)
            if not self._chunk_used.get(chunk):
                break
        else:
            chunk = -(-self._bump // HUGE_PAGES)
            if (chunk + 1) * HUGE_PAGES > self.capacity:
                raise OutOfHostMemory("no fully free 2MB host chunk")
            for frame in range(self._bump, chunk * HUGE_PAGES):
                heapq.heappush(self._returned, frame)
            self._bump = (chunk + 1) * HUGE_PAGES
        base = chunk * HUGE_PAGES
        for frame in range(base, base + HUGE_PAGES):
            self._take(frame)
        return base

    def free(self, frames: Iterable[int]) -> None:
        frames = list(frames)
        if len(set(frames)) != len(frames) or any(f not in self._used for f in frames):
            raise UsageError("host frame double free")
        for frame in frames:
            self._used.remove(frame)
            chunk = frame // HUGE_PAGES
            self._chunk_used[chunk] -= 1
            heapq.heappush(self._returned, frame)
            if not self._chunk_used[chunk]:
                heapq.heappush(self._returned_chunks, chunk)

    def free_huge(self, base: int) -> None:
        self.free(range(base, base + HUGE_PAGES))


class BindState(enum.Enum):
    UNBOUND = "unbound"
    PREBOUND = "prebound"
    BOUND = "bound"


class BindingTable:
    """GPA -> HPA bindings; absent keys are Unbound."""

    def __init__(self) -> None:
        self._map: dict[int, tuple[BindState, int]] = {}
        self._reverse: dict[int, int] = {}

    def state(self, gpa: int) -> BindState:
        rec = self._map.get(gpa)
        return BindState.UNBOUND if rec is None else rec[0]

    def hpa_of(self, gpa: int) -> int | None:
        rec = self._map.get(gpa)
        return None if rec is None else rec[1]

    def gpa_of(self, hpa: int) -> int | None:
        return self._reverse.get(hpa)

    def set(self, gpa: int, state: BindState, hpa: int) -> None:
        old = self._map.get(gpa)
        if old is not None and old[1] != hpa:
            del self._reverse[old[1]]
        owner = self._reverse.get(hpa)
        if owner is not None and owner != gpa:
            raise UsageError(f"hpa {hpa:#x} already bound to gpa {owner:#x}")
        self._map[gpa] = (state, hpa)
        self._reverse[hpa] = gpa

    def drop(self, gpa: int) -> int:
        _, frame = self._map.pop(gpa)
        del self._reverse[frame]
        return frame

    @property
    def host_pages_held(self) -> int:
        return len(self._map)

    def items(self) -> Iterator[tuple[int, BindState, int]]:
        for gpa, (state, frame) in self._map.items():
            yield gpa, state, frame

    def snapshot(self) -> dict[int, tuple[BindState, int]]:
        return dict(self._map)


@dataclass
class DirectMapRegion:
    base: int = 0
    length: int = 0
    registered: bool = False

    def gva_of(self, gpa: int) -> int:
        if not 0 <= gpa < self.length:
            raise UsageError(f"gpa {gpa:#x} outside the direct map")
        return self.base + gpa

    def gpa_of(self, gva: int) -> int | None:
        off = gva - self.base
        return off if 0 <= off < self.length else None


class Pager:
    """Kernel-mode mediator colocated with the guest kernel.

    ``dual_table`` keeps the guest page table alongside the shadow table and
    pays metadata-maintenance costs for it; standalone mode writes only the
    single-stage table and recovers guest-physical addresses by reverse
    lookup through the binding table.
    """

    def __init__(
        self,
        host: HostFrameAllocator,
        *,
        dual_table: bool = True,
        space_pages: int = 1 << 20,
    ) -> None:
        self.host = host
        self.dual_table = dual_table
        self.space_pages = space_pages
        self.bindings = BindingTable()
        self.region = DirectMapRegion()
        self.counters = Counters()
        self.dm_pt = PageTableState(TableRole.DIRECT_MAP_PT, space_pages=space_pages)
        self.dm_spt = PageTableState(TableRole.DIRECT_MAP_SPT, space_pages=space_pages)
        self.guest_pts: dict[int, PageTableState] = {}
        self.spts: dict[int, PageTableState] = {}

    # -- setup ---------------------------------------------------------------

    def register_direct_mapping(self, base: int, length: int) -> None:
        if self.region.registered:
            raise DoubleRegistration("direct mapping already registered")
        if base + length > self.space_pages:
            raise UsageError("direct mapping does not fit the guest virtual space")
        self.region = DirectMapRegion(base, length, True)
        # lifecycle-managed: drop whatever the guest populated at boot
        self.dm_pt.clear()
        self.dm_spt.clear()

    def direct_map_gva(self, gpa: int) -> int:
        return self.region.gva_of(gpa)

    def create_space(self, space: int) -> None:
        if space in self.spts:
            raise UsageError(f"space {space} exists")
        self.spts[space] = PageTableState(TableRole.USER_SPT, space_pages=self.space_pages)
        if self.dual_table:
            self.guest_pts[space] = PageTableState(
                TableRole.GUEST_USER_PT, space_pages=self.space_pages
            )

    # -- host page handoff ---------------------------------------------------

    def bind_batch(self, gpas: list[int]) -> None:
        """Pre-bind a batch of Unbound GPAs to fresh host pages (one hypercall)."""
        for g in gpas:
            if self.bindings.state(g) is not BindState.UNBOUND:
                raise BadState(f"gpa {g:#x} is {self.bindings.state(g).value}, expected unbound")
        frames = self.host.alloc(len(gpas))
        for g, frame in zip(gpas, frames):
            self.bindings.set(g, BindState.PREBOUND, frame)
        self.counters.hypercalls += 1
        self.counters.pages_bound += len(gpas)

    def unbind_batch(self, gpas: list[int]) -> None:
        """Revoke a batch of bindings, drop their direct mappings, return the host pages."""
        for g in gpas:
            if self.bindings.state(g) is BindState.UNBOUND:
                raise BadState(f"gpa {g:#x} is not bound")
        frames = []
        for g in gpas:
            dm = self.region.gva_of(g) if self.region.registered else None
            if dm is not None:
                if self.dual_table:
                    self.dm_pt.update(dm, Remove(), mediated=True)
                self.dm_spt.update(dm, Remove(), mediated=True)
            frames.append(self.bindings.drop(g))
        self.host.free(frames)
        self.counters.tlb_flushes += 1
        self.counters.hypercalls += 1
        self.counters.pages_unbound += len(gpas)
        self.counters.host_pages_released += len(gpas)

    # -- allocator lifecycle -------------------------------------------------

    def pager_on_alloc(self, gpa: int) -> None:
        state = self.bindings.state(gpa)
        if state is BindState.UNBOUND:
            raise BadState(f"allocated gpa {gpa:#x} has no binding")
        frame = self.bindings.hpa_of(gpa)
        self.bindings.set(gpa, BindState.BOUND, frame)
        dm = self.region.gva_of(gpa)
        if dm in self.dm_spt:
            return
        self.dm_spt.update(dm, Install(PageEntry(hpa_addr(frame), user=False)), mediated=True)
        if self.dual_table:
            self.dm_pt.update(dm, Install(PageEntry(gpa_addr(gpa), user=False)), mediated=True)
            self.counters.metadata_dm_updates += 1

    def kernel_access(self, gpa: int, write: bool) -> int:
        """Guest-kernel access through the direct map; always hits."""
        dm = self.region.gva_of(gpa)
        hit = self.dm_spt.lookup(dm)
        if hit is None:
            raise SimError(f"direct-map miss for gpa {gpa:#x} on the Pager path")
        self.dm_spt.update(dm, SetDirty() if write else SetAccessed())
        return hit[0]

    # -- page-table redirection ----------------------------------------------

    def pager_set_pte(self, space: int, gva: int, gpa: int, *, writable: bool = True) -> None:
        """Install ``gva -> gpa`` and its shadow ``gva -> hpa`` in one step."""
        if self.bindings.state(gpa) is not BindState.BOUND:
            raise UnboundGpa(f"space {space} maps gpa {gpa:#x} which is not allocated")
        frame = self.bindings.hpa_of(gpa)
        spt = self.spts[space]
        spt.update(gva, Install(PageEntry(hpa_addr(frame), writable=writable)), mediated=True)
        if self.dual_table:
            # A/D bits live only in the shadow entry
            self.guest_pts[space].update(
                gva, Install(PageEntry(gpa_addr(gpa), writable=writable)), mediated=True
            )
            self.counters.metadata_user_updates += 1
        self.counters.pager_calls += 1

    def pager_clear_pte(self, space: int, gva: int) -> None:
        """Remove both entries; the binding itself stays until the page drains."""
        delta = self.spts[space].update(gva, Remove(), mediated=True)
        if self.dual_table:
            self.guest_pts[space].update(gva, Remove(), mediated=True)
        if delta.previous is None:
            return
        self.counters.pager_calls += 1
        if self.dual_table:
            self.counters.metadata_user_updates += 1
        self.counters.tlb_flushes += 1

    def guest_lookup(self, space: int, gva: int) -> tuple[int, bool] | None:
        """The guest kernel's view of ``gva``: ``(gpa, writable)``."""
        if self.dual_table:
            hit = self.guest_pts[space].lookup(gva)
            return None if hit is None else (hit[0], hit[1].writable)
        hit = self.spts[space].lookup(gva)
        if hit is None:
            return None
        return self.bindings.gpa_of(hit[0]), hit[1].writable

    def user_access(self, space: int, gva: int, write: bool) -> int:
        spt = self.spts[space]
        hit = spt.lookup(gva)
        if hit is None or (write and not hit[1].writable):
            raise SimError(f"shadow miss at space {space} gva {gva:#x} on the Pager path")
        spt.update(gva, SetDirty() if write else SetAccessed())
        return hit[0]

    def read_pte_ad(self, space: int, gva: int) -> tuple[bool, bool]:
        """Accessed/dirty bits, served from the shadow entry only."""
        hit = self.spts[space].lookup(gva)
        if hit is None:
            raise AbsentEntry(f"space {space} gva {gva:#x} not mapped")
        return hit[1].accessed, hit[1].dirty

    # -- test-mode checks ----------------------------------------------------

    def check_coherence(self) -> None:
        """Every shadow entry must agree with the guest mapping and its binding."""
        for space, spt in self.spts.items():
            for vpn, frame, entry in spt.base_items():
                g = self.bindings.gpa_of(frame)
                if g is None or self.bindings.state(g) is not BindState.BOUND:
                    raise SimError(f"space {space} gva {vpn:#x} shadows unbound hpa {frame:#x}")
                if self.dual_table:
                    hit = self.guest_pts[space].lookup(vpn)
                    if hit is None or hit[0] != g or hit[1].writable != entry.writable:
                        raise SimError(f"space {space} gva {vpn:#x}: guest and shadow disagree")
            if self.dual_table and len(self.guest_pts[space]) != len(spt):
                raise SimError(f"space {space}: guest table has entries with no shadow")
        for vpn, frame, _ in self.dm_spt.base_items():
            g = self.region.gpa_of(vpn)
            if g is None or self.bindings.hpa_of(g) != frame:
                raise SimError(f"direct-map gva {vpn:#x} disagrees with binding")
        if self.host.allocated != self.bindings.host_pages_held:
            raise SimError("host pages held do not match bindings")
