"""Address kinds, page entries and flat page-table state.

Tables are sparse ``dict`` maps rather than radix trees; walk depth only
matters to the cost model.  A huge entry covers ``HUGE_PAGES`` consecutive
base pages and is stored apart from base entries so lookups stay O(1).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator, Union

from .errors import InvalidEntry, UsageError

PAGE_SIZE = 4096
HUGE_PAGES = 512
HUGE_SIZE = PAGE_SIZE * HUGE_PAGES
DEFAULT_SPACE_PAGES = 1 << 20


class Kind(enum.Enum):
    GVA = "gva"
    GPA = "gpa"
    HPA = "hpa"


@dataclass(frozen=True, slots=True)
class PageAddr:
    kind: Kind
    page_number: int

    def __post_init__(self) -> None:
        if self.page_number < 0:
            raise UsageError(f"negative page number {self.page_number}")

    def offset(self, delta: int) -> PageAddr:
        return PageAddr(self.kind, self.page_number + delta)

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.page_number:#x}"


def gva(n: int) -> PageAddr:
    return PageAddr(Kind.GVA, n)


def gpa(n: int) -> PageAddr:
    return PageAddr(Kind.GPA, n)


def hpa(n: int) -> PageAddr:
    return PageAddr(Kind.HPA, n)


@dataclass(frozen=True, slots=True)
class PageEntry:
    frame: PageAddr
    present: bool = True
    writable: bool = True
    user: bool = True
    accessed: bool = False
    dirty: bool = False
    huge: bool = False

    def __post_init__(self) -> None:
        if self.huge and self.frame.page_number % HUGE_PAGES:
            raise UsageError(f"huge entry frame {self.frame} is not 2MB aligned")
        if (self.accessed or self.dirty) and not self.present:
            raise UsageError("accessed/dirty set on a non-present entry")


class TableRole(enum.Enum):
    GUEST_USER_PT = "guest_user_pt"
    DIRECT_MAP_PT = "direct_map_pt"
    USER_SPT = "user_spt"
    DIRECT_MAP_SPT = "direct_map_spt"
    SECOND_STAGE = "second_stage"

    @property
    def key_kind(self) -> Kind:
        return Kind.GPA if self is TableRole.SECOND_STAGE else Kind.GVA


# update_entry actions
@dataclass(frozen=True, slots=True)
class Install:
    entry: PageEntry


@dataclass(frozen=True, slots=True)
class Remove:
    pass


@dataclass(frozen=True, slots=True)
class SetAccessed:
    pass


@dataclass(frozen=True, slots=True)
class SetDirty:
    pass


Action = Union[Install, Remove, SetAccessed, SetDirty]


@dataclass(frozen=True, slots=True)
class EntryDelta:
    previous: PageEntry | None
    current: PageEntry | None
    tlb_flush_required: bool = False


class PageTableState:
    """One address space's view in a given translation role."""

    def __init__(
        self,
        role: TableRole,
        *,
        write_protected: bool = False,
        space_pages: int = DEFAULT_SPACE_PAGES,
    ) -> None:
        self.role = role
        self.write_protected = write_protected
        self.space_pages = space_pages
        self._base: dict[int, PageEntry] = {}
        self._huge: dict[int, PageEntry] = {}

    def _key(self, vpage: PageAddr) -> int:
        if vpage.kind is not self.role.key_kind:
            raise UsageError(
                f"{self.role.value} is keyed by {self.role.key_kind.value}, got {vpage}"
            )
        if vpage.page_number >= self.space_pages:
            raise UsageError(f"{vpage} outside a {self.space_pages}-page space")
        return vpage.page_number

    # -- lookups -------------------------------------------------------------

    def lookup(self, vpn: int) -> tuple[int, PageEntry] | None:
        """Raw-integer lookup used on hot paths after kinds are checked."""
        entry = self._base.get(vpn)
        if entry is not None:
            return entry.frame.page_number, entry
        if self._huge:
            head = vpn - vpn % HUGE_PAGES
            entry = self._huge.get(head)
            if entry is not None:
                return entry.frame.page_number + (vpn - head), entry
        return None

    def translate(self, vpage: PageAddr) -> tuple[PageAddr, PageEntry] | None:
        """Return the frame covering ``vpage`` and its entry, or ``None``.

        Pure lookup: no accessed/dirty bits are touched.
        """
        hit = self.lookup(self._key(vpage))
        if hit is None:
            return None
        frame, entry = hit
        return PageAddr(entry.frame.kind, frame), entry

    def __contains__(self, vpn: int) -> bool:
        return self.lookup(vpn) is not None

    def __len__(self) -> int:
        return len(self._base) + len(self._huge)

    def items(self) -> Iterator[tuple[int, PageEntry]]:
        """Yield ``(vpn, entry)`` for base entries then huge heads."""
        yield from self._base.items()
        yield from self._huge.items()

    def base_items(self) -> Iterator[tuple[int, int, PageEntry]]:
        """Yield ``(vpn, frame, entry)`` with huge entries expanded."""
        for vpn, entry in self._base.items():
            yield vpn, entry.frame.page_number, entry
        for head, entry in self._huge.items():
            base = entry.frame.page_number
            for i in range(HUGE_PAGES):
                yield head + i, base + i, entry

    def snapshot(self) -> dict[int, tuple[int, PageEntry]]:
        return {vpn: (frame, e) for vpn, frame, e in self.base_items()}

    # -- mutation ------------------------------------------------------------

    def update_entry(
        self, vpage: PageAddr, action: Action, *, mediated: bool = False
    ) -> EntryDelta:
        """Apply one mutation and report whether a TLB flush is owed.

        Writes to a write-protected table must come through a backend
        (``mediated=True``) which has already charged the emulation cost.
        """
        return self.update(self._key(vpage), action, mediated=mediated)

    def update(self, vpn: int, action: Action, *, mediated: bool = False) -> EntryDelta:
        if isinstance(action, Install):
            if self.write_protected and not mediated:
                raise UsageError(f"unmediated write to write-protected {self.role.value}")
            return self._install(vpn, action.entry)
        if isinstance(action, Remove):
            if self.write_protected and not mediated:
                raise UsageError(f"unmediated write to write-protected {self.role.value}")
            return self._remove(vpn)
        hit = self.lookup(vpn)
        if hit is None or not hit[1].present:
            raise InvalidEntry(f"{self.role.value}: no present entry at {vpn:#x}")
        entry = hit[1]
        if isinstance(action, SetAccessed):
            dirty = entry.dirty
        elif isinstance(action, SetDirty):
            dirty = True
        else:
            raise UsageError(f"unknown action {action!r}")
        if entry.accessed and entry.dirty == dirty:
            return EntryDelta(entry, entry)
        new = PageEntry(entry.frame, True, entry.writable, entry.user, True, dirty, entry.huge)
        if entry.huge:
            self._huge[vpn - vpn % HUGE_PAGES] = new
        else:
            self._base[vpn] = new
        return EntryDelta(entry, new)

    def _install(self, vpn: int, entry: PageEntry) -> EntryDelta:
        if entry.frame.kind is self.role.key_kind:
            raise UsageError(f"{self.role.value} cannot map to {entry.frame}")
        if vpn >= self.space_pages:
            raise UsageError(f"page {vpn:#x} outside a {self.space_pages}-page space")
        if entry.huge:
            if vpn % HUGE_PAGES:
                raise UsageError(f"huge entry at unaligned vpn {vpn:#x}")
            if any(vpn + i in self._base for i in range(HUGE_PAGES)):
                raise UsageError(f"huge entry at {vpn:#x} overlaps base entries")
            prev = self._huge.get(vpn)
            self._huge[vpn] = entry
            return EntryDelta(prev, entry, tlb_flush_required=prev is not None)
        head = vpn - vpn % HUGE_PAGES
        if head in self._huge:
            raise UsageError(f"base entry at {vpn:#x} overlaps a huge entry")
        prev = self._base.get(vpn)
        self._base[vpn] = entry
        return EntryDelta(prev, entry, tlb_flush_required=prev is not None and prev.present)

    def _remove(self, vpn: int) -> EntryDelta:
        prev = self._base.pop(vpn, None)
        if prev is None and vpn % HUGE_PAGES == 0:
            prev = self._huge.pop(vpn, None)
        if prev is None:
            return EntryDelta(None, None)
        return EntryDelta(prev, None, tlb_flush_required=prev.present)

    def clear(self) -> None:
        self._base.clear()
        self._huge.clear()
