"""Flat reference interpreter with no virtualization layers.

Pages are plain Python objects held directly by address spaces; there are
no physical addresses, allocators or translation tables.  Replaying a trace
here gives the guest-visible content every backend must reproduce.
"""

from __future__ import annotations


class _Page:
    __slots__ = ("tag",)

    def __init__(self, tag: object = None) -> None:
        self.tag = tag


class _Region:
    __slots__ = ("start", "npages", "shared", "off")

    def __init__(self, start: int, npages: int, shared: dict | None, off: int) -> None:
        self.start, self.npages, self.shared, self.off = start, npages, shared, off


class ReferenceMachine:
    def __init__(self) -> None:
        # space -> gva -> [page, writable]
        self.ptes: dict[int, dict[int, list]] = {0: {}}
        self.regions: dict[int, list[_Region]] = {0: []}

    def _region(self, sid: int, vpn: int) -> _Region:
        for r in self.regions[sid]:
            if r.start <= vpn < r.start + r.npages:
                return r
        raise KeyError(f"space {sid} gva {vpn:#x} unmapped")

    def _refcount(self, page: _Page) -> int:
        return sum(
            1 for table in self.ptes.values() for pte in table.values() if pte[0] is page
        )

    def new_space(self, sid: int) -> None:
        self.ptes[sid] = {}
        self.regions[sid] = []

    def mmap(self, sid, start, npages, shared=False, alias_of=None):
        if alias_of is not None:
            src_sid, src_start = alias_of
            src = self._region(src_sid, src_start)
            region = _Region(start, npages, src.shared, src.off + src_start - src.start)
        else:
            region = _Region(start, npages, {} if shared else None, 0)
        self.regions[sid].append(region)

    def munmap(self, sid, start, npages):
        end = start + npages
        table = self.ptes[sid]
        for vpn in range(start, end):
            table.pop(vpn, None)
        kept = []
        for r in self.regions[sid]:
            r_end = r.start + r.npages
            if r_end <= start or r.start >= end:
                kept.append(r)
                continue
            if r.start < start:
                kept.append(_Region(r.start, start - r.start, r.shared, r.off))
            if r_end > end:
                kept.append(_Region(end, r_end - end, r.shared, r.off + end - r.start))
        self.regions[sid] = kept

    def fork(self, sid, child):
        self.new_space(child)
        self.regions[child] = [_Region(r.start, r.npages, r.shared, r.off) for r in self.regions[sid]]
        for vpn, pte in self.ptes[sid].items():
            shared = self._region(sid, vpn).shared is not None
            if not shared:
                pte[1] = False
            self.ptes[child][vpn] = [pte[0], shared]

    def touch(self, sid, vpn, write, tag=None):
        table = self.ptes[sid]
        pte = table.get(vpn)
        if pte is None:
            region = self._region(sid, vpn)
            if region.shared is not None:
                off = region.off + vpn - region.start
                page = region.shared.setdefault(off, _Page())
            else:
                page = _Page()
            pte = table[vpn] = [page, True]
        elif write and not pte[1]:
            if self._refcount(pte[0]) > 1:
                pte[0] = _Page(pte[0].tag)
            pte[1] = True
        if write:
            pte[0].tag = tag
        return pte[0].tag

    def visible_state(self) -> dict[tuple[int, int], object]:
        return {
            (sid, vpn): pte[0].tag
            for sid in sorted(self.ptes)
            for vpn, pte in sorted(self.ptes[sid].items())
        }
