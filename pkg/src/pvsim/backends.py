"""Memory-virtualization backends behind one table/fault interface.

Each backend owns the translation structures between guest-visible page
tables and host frames, plus a content store keyed by host frame.  The
guest kernel model (:mod:`pvsim.machine`) drives them through a small set
of hooks:

* ``guest_lookup`` / ``guest_pt_write`` / ``guest_pt_clear`` -- the guest's
  own page-table view and writes to it,
* ``kernel_access`` -- a guest-kernel touch through the direct map,
* ``user_access`` -- a user touch, which is where secondary faults happen,
* ``clone_tables`` -- page-table copying at fork.

Counters accumulate in ``backend.counters``; callers diff snapshots to get
per-operation deltas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

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
from .errors import InvalidParams, SimError
from .pager import BindState, HostFrameAllocator, Pager

BUGS = ("skip_spt_invalidate", "skip_dm_install")


@dataclass(frozen=True)
class BackendKind:
    """Backend selection.

    ``kind`` is ``"second_stage"``, ``"shadow"`` or ``"pager"``.  Only the
    options relevant to a kind are consulted.
    """

    kind: str
    granularity: int = 1  # pages per second-stage entry: 1 or HUGE_PAGES
    nested: bool = False
    pt_write_emulation: bool = True
    ad_sync_faults: bool = False
    dual_table: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("second_stage", "shadow", "pager"):
            raise InvalidParams(f"unknown backend kind {self.kind!r}")
        if self.granularity not in (1, HUGE_PAGES):
            raise InvalidParams("granularity must be 4KB (1) or 2MB (512) pages")

    @classmethod
    def parse(cls, name: str) -> BackendKind:
        """Parse CLI names: ``ept``, ``ept-2m``, ``shadow``, ``pager``, ``pager-standalone``."""
        table = {
            "ept": cls("second_stage"),
            "second-stage": cls("second_stage"),
            "ept-2m": cls("second_stage", granularity=HUGE_PAGES),
            "second-stage-2m": cls("second_stage", granularity=HUGE_PAGES),
            "shadow": cls("shadow"),
            "shadow-noemu": cls("shadow", pt_write_emulation=False),
            "pager": cls("pager"),
            "pager-standalone": cls("pager", dual_table=False),
        }
        try:
            return table[name]
        except KeyError:
            raise InvalidParams(f"unknown backend {name!r}; choose from {sorted(table)}") from None

    @property
    def label(self) -> str:
        if self.kind == "second_stage":
            return "ept-2m" if self.granularity == HUGE_PAGES else "ept"
        if self.kind == "shadow":
            return "shadow" if self.pt_write_emulation else "shadow-noemu"
        return "pager" if self.dual_table else "pager-standalone"

    @property
    def default_profile(self) -> str:
        return {"second_stage": "runv", "shadow": "pvm", "pager": "paracell"}[self.kind]


class Backend:
    """Shared plumbing: counters, host pool, content store, guest tables."""

    kind: BackendKind
    binder = None

    def __init__(
        self,
        kind: BackendKind,
        *,
        host_pages: int,
        dm_base: int,
        guest_pages: int,
        space_pages: int,
        bug: str | None = None,
    ) -> None:
        if bug is not None and bug not in BUGS:
            raise InvalidParams(f"unknown injected bug {bug!r}; known: {BUGS}")
        self.kind = kind
        self.bug = bug
        self.counters = Counters()
        self.host = HostFrameAllocator(host_pages)
        self.dm_base = dm_base
        self.guest_pages = guest_pages
        self.space_pages = space_pages
        self.memory: dict[int, object] = {}
        self.guest_pts: dict[int, PageTableState] = {}

    # -- spaces and guest view ----------------------------------------------

    def create_space(self, space: int) -> None:
        self.guest_pts[space] = PageTableState(
            TableRole.GUEST_USER_PT, space_pages=self.space_pages
        )

    def guest_lookup(self, space: int, vpn: int) -> tuple[int, bool] | None:
        hit = self.guest_pts[space].lookup(vpn)
        return None if hit is None else (hit[0], hit[1].writable)

    def guest_mappings(self, space: int) -> Iterable[tuple[int, int, bool]]:
        for vpn, frame, entry in self.guest_pts[space].base_items():
            yield vpn, frame, entry.writable

    def _guest_install(self, space: int, vpn: int, gpa: int, writable: bool) -> None:
        delta = self.guest_pts[space].update(
            vpn, Install(PageEntry(gpa_addr(gpa), writable=writable)), mediated=True
        )
        if delta.tlb_flush_required:
            self.counters.tlb_flushes += 1

    def _guest_remove(self, space: int, vpn: int) -> bool:
        delta = self.guest_pts[space].update(vpn, Remove(), mediated=True)
        if delta.tlb_flush_required:
            self.counters.tlb_flushes += 1
        return delta.previous is not None

    # -- hooks ---------------------------------------------------------------

    def fault_entry(self) -> None:
        """Charge delivery of one guest page fault to the guest kernel."""
        self.counters.page_faults += 1
        self.counters.fault_forwards += 1

    def guest_pt_write(self, space: int, vpn: int, gpa: int, writable: bool = True) -> None:
        raise NotImplementedError

    def guest_pt_clear(self, space: int, vpn: int) -> None:
        raise NotImplementedError

    def clone_tables(self, parent: int, child: int, writes: list[tuple[int, int, bool]]) -> None:
        """Apply fork-time writes: ``(vpn, gpa, writable)`` for parent downgrade and child copy.

        Private pages are write-protected in the parent; every entry is
        copied into the child with the same permissions.
        """
        raise NotImplementedError

    def kernel_access(self, gpa: int, write: bool) -> int:
        raise NotImplementedError

    def user_access(self, space: int, vpn: int, write: bool) -> int:
        raise NotImplementedError

    def peek(self, space: int, vpn: int) -> int | None:
        """Host frame backing a guest-mapped page, without side effects."""
        raise NotImplementedError

    def on_free(self, gpa: int) -> None:
        """Guest allocator released ``gpa`` (host backing policy hook)."""

    def host_allocated(self) -> int:
        return self.host.allocated

    def check(self, allocator) -> None:
        """Backend-specific test-mode invariants."""

    # -- content -------------------------------------------------------------

    def write_frame(self, frame: int, tag: object) -> None:
        self.memory[frame] = tag

    def read_frame(self, frame: int) -> object:
        return self.memory.get(frame)


class SecondStageBackend(Backend):
    """Two-stage translation: guest-private tables plus a GPA->HPA stage.

    The second stage fills on demand; a 2MB granularity backs the whole
    aligned chunk on the first touch of any page in it.  Host backing is
    never returned when the guest frees memory.
    """

    def __init__(self, kind: BackendKind, **kw) -> None:
        super().__init__(kind, **kw)
        self.stage2 = PageTableState(TableRole.SECOND_STAGE, space_pages=self.guest_pages)

    def _resolve(self, gpa: int) -> int:
        hit = self.stage2.lookup(gpa)
        if hit is not None:
            return hit[0]
        self.counters.second_stage_faults += 1
        if self.kind.granularity == HUGE_PAGES:
            head = gpa - gpa % HUGE_PAGES
            base = self.host.alloc_huge()
            self.stage2.update(head, Install(PageEntry(hpa_addr(base), huge=True)))
            return base + (gpa - head)
        frame = self.host.alloc(1)[0]
        self.stage2.update(gpa, Install(PageEntry(hpa_addr(frame))))
        return frame

    def guest_pt_write(self, space, vpn, gpa, writable=True):
        self._guest_install(space, vpn, gpa, writable)

    def guest_pt_clear(self, space, vpn):
        self._guest_remove(space, vpn)

    def clone_tables(self, parent, child, writes):
        downgraded = False
        for vpn, gpa, writable in writes:
            hit = self.guest_pts[parent].lookup(vpn)
            if hit[1].writable and not writable:
                self.guest_pts[parent].update(
                    vpn, Install(PageEntry(gpa_addr(gpa), writable=False)), mediated=True
                )
                downgraded = True
            self.guest_pts[child].update(
                vpn, Install(PageEntry(gpa_addr(gpa), writable=writable)), mediated=True
            )
        if downgraded:
            self.counters.tlb_flushes += 1

    def kernel_access(self, gpa, write):
        return self._resolve(gpa)

    def user_access(self, space, vpn, write):
        hit = self.guest_pts[space].lookup(vpn)
        if hit is None:
            raise SimError(f"user access to unmapped gva {vpn:#x}")
        self.guest_pts[space].update(vpn, SetDirty() if write else SetAccessed(), mediated=True)
        return self._resolve(hit[0])

    def peek(self, space, vpn):
        hit = self.guest_pts[space].lookup(vpn)
        if hit is None:
            return None
        s2 = self.stage2.lookup(hit[0])
        return None if s2 is None else s2[0]


class ShadowBackend(Backend):
    """Shadow paging: write-protected guest tables mirrored into host-owned SPTs.

    SPT entries are filled lazily by shadow faults.  Guest page-table writes
    are trapped and emulated (when ``pt_write_emulation``) and zap the
    corresponding shadow entry.  Fork writes go straight to the guest table
    and the child SPT starts empty.
    """

    PT_SWITCHES_PER_FAULT = 3

    def __init__(self, kind: BackendKind, **kw) -> None:
        super().__init__(kind, **kw)
        self.spts: dict[int, PageTableState] = {}
        self.dm_spt = PageTableState(TableRole.DIRECT_MAP_SPT, space_pages=self.space_pages)
        # memslot: GPA -> HPA backing, filled on first shadow fault
        self.memslot = PageTableState(TableRole.SECOND_STAGE, space_pages=self.guest_pages)

    def create_space(self, space):
        self.guest_pts[space] = PageTableState(
            TableRole.GUEST_USER_PT, write_protected=True, space_pages=self.space_pages
        )
        self.spts[space] = PageTableState(TableRole.USER_SPT, space_pages=self.space_pages)

    def fault_entry(self):
        super().fault_entry()
        self.counters.world_switches += 1
        self.counters.pt_switches += self.PT_SWITCHES_PER_FAULT

    def _shadow_fault(self) -> None:
        self.counters.shadow_faults += 1
        self.counters.world_switches += 1

    def _back(self, gpa: int) -> int:
        hit = self.memslot.lookup(gpa)
        if hit is not None:
            return hit[0]
        frame = self.host.alloc(1)[0]
        self.memslot.update(gpa, Install(PageEntry(hpa_addr(frame))))
        return frame

    def _zap(self, space: int, vpn: int) -> None:
        if self.bug == "skip_spt_invalidate":
            return
        delta = self.spts[space].update(vpn, Remove())
        if delta.tlb_flush_required:
            self.counters.tlb_flushes += 1

    def _emulate(self) -> None:
        if self.kind.pt_write_emulation:
            self.counters.pt_write_emulations += 1
            self.counters.world_switches += 1

    def guest_pt_write(self, space, vpn, gpa, writable=True):
        self._emulate()
        had = self.guest_pts[space].lookup(vpn) is not None
        self._guest_install(space, vpn, gpa, writable)
        if had:
            self._zap(space, vpn)

    def guest_pt_clear(self, space, vpn):
        self._emulate()
        if self._guest_remove(space, vpn):
            self._zap(space, vpn)

    def clone_tables(self, parent, child, writes):
        downgraded = False
        pspt = self.spts[parent]
        for vpn, gpa, writable in writes:
            hit = self.guest_pts[parent].lookup(vpn)
            if hit[1].writable and not writable:
                self.guest_pts[parent].update(
                    vpn, Install(PageEntry(gpa_addr(gpa), writable=False)), mediated=True
                )
                downgraded = True
                shadow = pspt.lookup(vpn)
                if shadow is not None and self.bug != "skip_spt_invalidate":
                    frame, e = shadow
                    pspt.update(
                        vpn,
                        Install(PageEntry(hpa_addr(frame), writable=False, accessed=e.accessed,
                                          dirty=e.dirty)),
                    )
            self.guest_pts[child].update(
                vpn, Install(PageEntry(gpa_addr(gpa), writable=writable)), mediated=True
            )
        if downgraded:
            self.counters.tlb_flushes += 1

    def kernel_access(self, gpa, write):
        dm = self.dm_base + gpa
        hit = self.dm_spt.lookup(dm)
        if hit is None:
            self._shadow_fault()
            frame = self._back(gpa)
            self.dm_spt.update(dm, Install(PageEntry(hpa_addr(frame), user=False)))
            return frame
        return hit[0]

    def user_access(self, space, vpn, write):
        spt = self.spts[space]
        hit = spt.lookup(vpn)
        if hit is not None and (hit[1].writable or not write):
            spt.update(vpn, SetDirty() if write else SetAccessed())
            return hit[0]
        guest = self.guest_pts[space].lookup(vpn)
        if guest is None:
            raise SimError(f"user access to unmapped gva {vpn:#x}")
        self._shadow_fault()
        frame = self._back(guest[0])
        writable = guest[1].writable
        if self.kind.ad_sync_faults and not write:
            # map read-only until the first write so dirtiness is observed
            writable = False
        entry = PageEntry(hpa_addr(frame), writable=writable, accessed=True, dirty=write)
        spt.update(vpn, Install(entry))
        return frame

    def peek(self, space, vpn):
        hit = self.spts[space].lookup(vpn)
        if hit is not None:
            return hit[0]
        guest = self.guest_pts[space].lookup(vpn)
        if guest is None:
            return None
        back = self.memslot.lookup(guest[0])
        return None if back is None else back[0]

    def check(self, allocator):
        for space, spt in self.spts.items():
            gpt = self.guest_pts[space]
            for vpn, frame, entry in spt.base_items():
                guest = gpt.lookup(vpn)
                if guest is None:
                    raise SimError(f"space {space} gva {vpn:#x}: shadow entry without guest entry")
                back = self.memslot.lookup(guest[0])
                if back is None or back[0] != frame:
                    raise SimError(f"space {space} gva {vpn:#x}: stale shadow frame")
                if entry.writable and not guest[1].writable:
                    raise SimError(f"space {space} gva {vpn:#x}: shadow more permissive than guest")


class PagerBackend(Backend):
    """Single-stage translation driven by allocator intent."""

    def __init__(self, kind: BackendKind, **kw) -> None:
        super().__init__(kind, **kw)
        self.pager = Pager(self.host, dual_table=kind.dual_table, space_pages=self.space_pages)
        self.pager.counters = self.counters
        self.pager.register_direct_mapping(self.dm_base, self.guest_pages)
        self.binder = self.pager
        if self.bug == "skip_dm_install":
            self.binder = _SkipDmInstall(self.pager)

    def create_space(self, space):
        self.pager.create_space(space)
        if self.kind.dual_table:
            self.guest_pts[space] = self.pager.guest_pts[space]

    def guest_lookup(self, space, vpn):
        return self.pager.guest_lookup(space, vpn)

    def guest_mappings(self, space):
        for vpn, frame, entry in self.pager.spts[space].base_items():
            yield vpn, self.pager.bindings.gpa_of(frame), entry.writable

    def guest_pt_write(self, space, vpn, gpa, writable=True):
        replacing = self.pager.spts[space].lookup(vpn) is not None
        self.pager.pager_set_pte(space, vpn, gpa, writable=writable)
        if replacing:
            self.counters.tlb_flushes += 1

    def guest_pt_clear(self, space, vpn):
        self.pager.pager_clear_pte(space, vpn)

    def clone_tables(self, parent, child, writes):
        downgraded = False
        for vpn, gpa, writable in writes:
            if self.pager.guest_lookup(parent, vpn)[1] and not writable:
                self.pager.pager_set_pte(parent, vpn, gpa, writable=False)
                downgraded = True
            self.pager.pager_set_pte(child, vpn, gpa, writable=writable)
        if downgraded:
            self.counters.tlb_flushes += 1

    def kernel_access(self, gpa, write):
        return self.pager.kernel_access(gpa, write)

    def user_access(self, space, vpn, write):
        return self.pager.user_access(space, vpn, write)

    def peek(self, space, vpn):
        hit = self.pager.spts[space].lookup(vpn)
        return None if hit is None else hit[0]

    def host_allocated(self):
        return self.pager.bindings.host_pages_held

    def check(self, allocator):
        self.pager.check_coherence()
        held = {gpa: state for gpa, state, _ in self.pager.bindings.items()}
        pcp = allocator.pcp_page_set()
        allocated = allocator.allocated_pages()
        stray = held.keys() - pcp - allocated
        if stray:
            raise SimError(f"buddy-free gpa {min(stray):#x} still bound")
        missing = pcp - held.keys()
        if missing:
            raise SimError(f"PCP gpa {min(missing):#x} is unbound")
        for page in allocated:
            if held.get(page) is not BindState.BOUND:
                raise SimError(f"allocated gpa {page:#x} is not bound")
        slack = self.host_allocated() - allocator.in_use
        if slack > allocator.pcp_capacity_total:
            raise SimError(f"host holds {slack} pages beyond guest use")


class _SkipDmInstall:
    """Binder wrapper that forgets direct-map installs (fault injection)."""

    def __init__(self, pager: Pager) -> None:
        self._pager = pager

    def bind_batch(self, gpas):
        self._pager.bind_batch(gpas)

    def unbind_batch(self, gpas):
        self._pager.unbind_batch(gpas)

    def pager_on_alloc(self, gpa):
        self._pager.bindings.set(gpa, BindState.BOUND, self._pager.bindings.hpa_of(gpa))


def make_backend(kind: BackendKind, **kw) -> Backend:
    cls = {
        "second_stage": SecondStageBackend,
        "shadow": ShadowBackend,
        "pager": PagerBackend,
    }[kind.kind]
    return cls(kind, **kw)
