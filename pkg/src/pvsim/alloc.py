"""Guest physical page allocator: buddy system plus per-CPU page lists.

The PCP/buddy boundary is where host pages change hands.  A ``binder``
(the Pager, or ``None`` for backends that discover memory by faulting) is
told about every batch that crosses it and about every page handed out.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

from .errors import DoubleFree, InvalidParams, OutOfGuestMemory, OutOfHostMemory, UsageError


class Binder(Protocol):
    def bind_batch(self, gpas: list[int]) -> None: ...

    def unbind_batch(self, gpas: list[int]) -> None: ...

    def pager_on_alloc(self, gpa: int) -> None: ...


class BuddyAllocator:
    """Power-of-two block allocator over ``[0, total_pages)``.

    Free lists are min-heaps with lazy deletion so the lowest-addressed
    block of an order is always handed out first.
    """

    def __init__(self, total_pages: int, max_order: int = 10) -> None:
        if total_pages <= 0:
            raise InvalidParams("guest memory must have at least one page")
        self.total_pages = total_pages
        self.max_order = max_order
        self.free_lists: list[set[int]] = [set() for _ in range(max_order + 1)]
        self._heaps: list[list[int]] = [[] for _ in range(max_order + 1)]
        self.free_pages = 0
        start = 0
        while start < total_pages:
            order = max_order
            while order and (start % (1 << order) or start + (1 << order) > total_pages):
                order -= 1
            self._push(start, order)
            start += 1 << order

    def _push(self, start: int, order: int) -> None:
        self.free_lists[order].add(start)
        heapq.heappush(self._heaps[order], start)
        self.free_pages += 1 << order

    def _pop(self, order: int) -> int | None:
        heap, free = self._heaps[order], self.free_lists[order]
        while heap:
            start = heapq.heappop(heap)
            if start in free:
                free.remove(start)
                self.free_pages -= 1 << order
                return start
        return None

    def _discard(self, start: int, order: int) -> None:
        self.free_lists[order].remove(start)
        self.free_pages -= 1 << order

    def alloc(self, order: int) -> int:
        if not 0 <= order <= self.max_order:
            raise UsageError(f"order {order} outside 0..{self.max_order}")
        for k in range(order, self.max_order + 1):
            start = self._pop(k)
            if start is None:
                continue
            # split down, returning upper halves to their free lists
            while k > order:
                k -= 1
                self._push(start + (1 << k), k)
            return start
        raise OutOfGuestMemory(f"no free block of order {order}")

    def free(self, start: int, order: int) -> None:
        if start % (1 << order):
            raise UsageError(f"block {start:#x} not aligned to order {order}")
        while order < self.max_order:
            buddy = start ^ (1 << order)
            if buddy not in self.free_lists[order]:
                break
            self._discard(buddy, order)
            start = min(start, buddy)
            order += 1
        self._push(start, order)

    def free_page_set(self) -> set[int]:
        out: set[int] = set()
        for order, starts in enumerate(self.free_lists):
            for s in starts:
                out.update(range(s, s + (1 << order)))
        return out

    def state(self) -> tuple[frozenset[int], ...]:
        return tuple(frozenset(s) for s in self.free_lists)


@dataclass
class PcpList:
    cpu: int
    capacity: int = 128
    batch: int = 32
    pages: deque[int] = field(default_factory=deque)

    def __len__(self) -> int:
        return len(self.pages)


@dataclass(frozen=True)
class BatchEvent:
    kind: str  # "refill" | "drain"
    cpu: int
    pages: tuple[int, ...]


class GuestAllocator:
    """Buddy allocator fronted by one PCP list per vCPU."""

    def __init__(
        self,
        total_pages: int,
        *,
        cpus: int = 1,
        pcp_capacity: int = 128,
        pcp_batch: int = 32,
        max_order: int = 10,
        binder: Binder | None = None,
        pcp_bound: float | None = 0.01,
    ) -> None:
        if pcp_batch <= 0 or pcp_capacity < pcp_batch:
            raise InvalidParams("need 0 < pcp_batch <= pcp_capacity")
        if pcp_bound is not None and cpus * pcp_capacity > pcp_bound * total_pages:
            raise InvalidParams(
                f"PCP lists hold {cpus * pcp_capacity} pages, over "
                f"{pcp_bound:.0%} of {total_pages} guest pages"
            )
        self.buddy = BuddyAllocator(total_pages, max_order)
        self.pcp = {cpu: PcpList(cpu, pcp_capacity, pcp_batch) for cpu in range(cpus)}
        self.binder = binder
        self.allocated: dict[int, int] = {}  # block head -> order
        self.in_use = 0
        self.events: list[BatchEvent] = []

    @property
    def total_pages(self) -> int:
        return self.buddy.total_pages

    @property
    def pcp_capacity_total(self) -> int:
        return sum(p.capacity for p in self.pcp.values())

    @property
    def pcp_pages(self) -> int:
        return sum(len(p) for p in self.pcp.values())

    def _list(self, cpu: int) -> PcpList:
        try:
            return self.pcp[cpu]
        except KeyError:
            raise UsageError(f"no vCPU {cpu}") from None

    # -- PCP boundary --------------------------------------------------------

    def pcp_refill(self, cpu: int, count: int | None = None) -> BatchEvent:
        """Move up to ``count`` order-0 pages buddy -> PCP as one bound batch."""
        pcp = self._list(cpu)
        count = min(pcp.batch if count is None else count, self.buddy.free_pages)
        if count <= 0:
            raise OutOfGuestMemory("buddy allocator exhausted")
        pages = [self.buddy.alloc(0) for _ in range(count)]
        if self.binder is not None:
            try:
                self.binder.bind_batch(pages)
            except OutOfHostMemory:
                for p in pages:
                    self.buddy.free(p, 0)
                raise
        pcp.pages.extend(pages)
        event = BatchEvent("refill", cpu, tuple(pages))
        self.events.append(event)
        return event

    def pcp_drain(self, cpu: int, count: int | None = None) -> BatchEvent:
        """Move the ``count`` coldest PCP pages back to buddy as one unbound batch."""
        pcp = self._list(cpu)
        count = pcp.batch if count is None else count
        if count > len(pcp):
            raise UsageError(f"drain {count} from a PCP list holding {len(pcp)}")
        pages = [pcp.pages.pop() for _ in range(count)]
        if pages and self.binder is not None:
            self.binder.unbind_batch(pages)
        for p in pages:
            self.buddy.free(p, 0)
        event = BatchEvent("drain", cpu, tuple(pages))
        if pages:
            self.events.append(event)
        return event

    def drain_all(self) -> None:
        for cpu, pcp in self.pcp.items():
            while len(pcp):
                self.pcp_drain(cpu, min(pcp.batch, len(pcp)))

    # -- allocation API ------------------------------------------------------

    def get_free_pages(self, cpu: int, order: int = 0) -> int:
        if order == 0:
            pcp = self._list(cpu)
            if not pcp.pages:
                self.pcp_refill(cpu)
            page = pcp.pages.popleft()
            if self.binder is not None:
                self.binder.pager_on_alloc(page)
            self.allocated[page] = 0
            self.in_use += 1
            return page
        # higher orders bypass the PCP and bind immediately
        start = self.buddy.alloc(order)
        pages = list(range(start, start + (1 << order)))
        if self.binder is not None:
            try:
                self.binder.bind_batch(pages)
            except OutOfHostMemory:
                self.buddy.free(start, order)
                raise
            for p in pages:
                self.binder.pager_on_alloc(p)
        self.allocated[start] = order
        self.in_use += 1 << order
        return start

    def free_pages(self, cpu: int, gpa: int, order: int = 0) -> None:
        if self.allocated.get(gpa) != order:
            raise DoubleFree(f"gpa {gpa:#x} (order {order}) is not allocated")
        del self.allocated[gpa]
        self.in_use -= 1 << order
        if order == 0:
            pcp = self._list(cpu)
            pcp.pages.appendleft(gpa)
            if len(pcp) > pcp.capacity:
                self.pcp_drain(cpu, pcp.batch)
            return
        pages = list(range(gpa, gpa + (1 << order)))
        if self.binder is not None:
            self.binder.unbind_batch(pages)
        self.buddy.free(gpa, order)

    def allocated_pages(self) -> set[int]:
        out: set[int] = set()
        for head, order in self.allocated.items():
            out.update(range(head, head + (1 << order)))
        return out

    def pcp_page_set(self) -> set[int]:
        return {p for pcp in self.pcp.values() for p in pcp.pages}

    def check_partition(self) -> None:
        """Every page is in exactly one of buddy-free, PCP, allocated."""
        free = self.buddy.free_page_set()
        pcp = self.pcp_page_set()
        alloc = self.allocated_pages()
        if len(free) + len(pcp) + len(alloc) != self.total_pages:
            raise UsageError("allocator partition does not cover guest memory exactly")
        if free & pcp or free & alloc or pcp & alloc:
            raise UsageError("allocator partition overlaps")
        if self.pcp_pages != sum(len(set(p.pages)) for p in self.pcp.values()):
            raise UsageError("duplicate page in a PCP list")
        for pcp_list in self.pcp.values():
            if len(pcp_list) > pcp_list.capacity:
                raise UsageError(f"PCP list of cpu {pcp_list.cpu} over capacity")
