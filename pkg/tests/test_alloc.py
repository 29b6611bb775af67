import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvsim.alloc import BuddyAllocator, GuestAllocator
from pvsim.errors import DoubleFree, InvalidParams, OutOfGuestMemory, OutOfHostMemory
from pvsim.pager import BindState, HostFrameAllocator, Pager


class RecordingBinder:
    def __init__(self):
        self.binds: list[list[int]] = []
        self.unbinds: list[list[int]] = []
        self.on_alloc: list[int] = []

    def bind_batch(self, gpas):
        self.binds.append(list(gpas))

    def unbind_batch(self, gpas):
        self.unbinds.append(list(gpas))

    def pager_on_alloc(self, gpa):
        self.on_alloc.append(gpa)

    @property
    def hypercalls(self):
        return len(self.binds) + len(self.unbinds)


def make(total=1 << 14, **kw):
    binder = kw.pop("binder", RecordingBinder())
    return GuestAllocator(total, binder=binder, **kw), binder


def buddy_invariants(b: BuddyAllocator) -> None:
    seen: set[int] = set()
    for order, starts in enumerate(b.free_lists):
        for s in starts:
            assert s % (1 << order) == 0
            block = set(range(s, s + (1 << order)))
            assert not block & seen
            seen |= block
            if order < b.max_order:
                assert (s ^ (1 << order)) not in starts, "uncoalesced buddies"
    assert len(seen) == b.free_pages


# -- buddy ----------------------------------------------------------------------------


def test_split_order5_block_for_order3():
    b = BuddyAllocator(32, max_order=5)
    assert b.free_lists[5] == {0}
    start = b.alloc(3)
    assert start == 0
    assert b.free_lists[4] == {16} and b.free_lists[3] == {8}
    assert b.free_pages == 24
    b.free(start, 3)
    assert b.free_lists[5] == {0} and b.free_pages == 32


def test_buddy_exhaustion():
    b = BuddyAllocator(4, max_order=2)
    b.alloc(2)
    with pytest.raises(OutOfGuestMemory):
        b.alloc(0)


def test_buddy_non_power_of_two_size():
    b = BuddyAllocator(1000, max_order=10)
    buddy_invariants(b)
    assert b.free_pages == 1000


@settings(max_examples=120, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 4), st.integers(0, 1 << 16)), max_size=60))
def test_buddy_matches_bitmap_allocator(ops):
    """Free lists cover exactly the pages a 64-page bitmap reference marks free."""
    b = BuddyAllocator(64, max_order=5)
    bitmap = [False] * 64  # True = allocated
    live: list[tuple[int, int]] = []
    for is_alloc, order, pick in ops:
        if is_alloc or not live:
            # the bitmap decides feasibility: some aligned run of 2^order free pages?
            size = 1 << order
            feasible = any(
                not any(bitmap[s:s + size]) for s in range(0, 64, size)
            )
            if not feasible:
                with pytest.raises(OutOfGuestMemory):
                    b.alloc(order)
                continue
            start = b.alloc(order)
            assert start % size == 0
            assert not any(bitmap[start:start + size])
            bitmap[start:start + size] = [True] * size
            live.append((start, order))
        else:
            start, order = live.pop(pick % len(live))
            b.free(start, order)
            bitmap[start:start + (1 << order)] = [False] * (1 << order)
        assert b.free_page_set() == {i for i in range(64) if not bitmap[i]}
        buddy_invariants(b)


# -- PCP front end --------------------------------------------------------------------


def test_pcp_hit_needs_no_hypercall():
    a, binder = make(pcp_batch=4, pcp_capacity=8)
    first = a.get_free_pages(0)
    assert binder.hypercalls == 1 and len(binder.binds[0]) == 4
    free_before = a.buddy.free_pages
    second = a.get_free_pages(0)
    assert second != first
    assert binder.hypercalls == 1
    assert a.buddy.free_pages == free_before


def test_refill_serves_first_page_of_batch():
    a, binder = make(pcp_batch=4, pcp_capacity=8)
    page = a.get_free_pages(0)
    assert page == binder.binds[0][0]
    assert binder.on_alloc == [page]


def test_free_below_capacity_needs_no_hypercall():
    a, binder = make(pcp_batch=4, pcp_capacity=8)
    p = a.get_free_pages(0)
    before = binder.hypercalls
    a.free_pages(0, p)
    assert binder.hypercalls == before


def test_free_over_capacity_drains_one_batch():
    a, binder = make(pcp_batch=4, pcp_capacity=8)
    pages = [a.get_free_pages(0) for _ in range(12)]
    for p in pages:
        a.free_pages(0, p)
    assert len(binder.unbinds) == 1 and len(binder.unbinds[0]) == 4
    assert a.pcp_pages <= 8
    a.check_partition()


def test_alloc_free_cycle_restores_buddy():
    a, binder = make(pcp_batch=8, pcp_capacity=64)
    initial = a.buddy.state()
    pages = [a.get_free_pages(0) for _ in range(50)]
    for p in pages:
        a.free_pages(0, p)
    a.drain_all()
    assert a.buddy.state() == initial
    assert sum(map(len, binder.binds)) == sum(map(len, binder.unbinds))


def test_double_free():
    a, _ = make()
    p = a.get_free_pages(0)
    a.free_pages(0, p)
    with pytest.raises(DoubleFree):
        a.free_pages(0, p)
    with pytest.raises(DoubleFree):
        a.free_pages(0, 12345)


def test_refill_then_drain_is_inverse():
    host = HostFrameAllocator(1024)
    pager = Pager(host)
    a = GuestAllocator(1 << 14, pcp_capacity=8, pcp_batch=4, binder=pager)
    before = pager.bindings.snapshot()
    a.pcp_refill(0, 4)
    a.pcp_drain(0, 4)
    assert pager.bindings.snapshot() == before
    assert pager.counters.hypercalls == 2


def test_refill_on_empty_buddy():
    a, _ = make(total=200, pcp_batch=1, pcp_capacity=2)
    for _ in range(200):
        a.get_free_pages(0)
    before = list(a.pcp[0].pages)
    with pytest.raises(OutOfGuestMemory):
        a.pcp_refill(0)
    assert list(a.pcp[0].pages) == before
    with pytest.raises(OutOfGuestMemory):
        a.get_free_pages(0)


def test_refill_is_atomic_on_host_exhaustion():
    host = HostFrameAllocator(2)
    pager = Pager(host)
    pager.register_direct_mapping(1 << 16, 1 << 14)
    a = GuestAllocator(1 << 14, pcp_capacity=8, pcp_batch=3, binder=pager)
    state = a.buddy.state()
    with pytest.raises(OutOfHostMemory):
        a.get_free_pages(0)
    assert a.buddy.state() == state
    assert pager.bindings.host_pages_held == 0 and host.allocated == 0


@pytest.mark.parametrize("n", [1, 31, 32, 33, 1000])
def test_bind_hypercalls_are_amortized(n):
    a, binder = make(pcp_batch=32, pcp_capacity=128)
    for _ in range(n):
        a.get_free_pages(0)
    assert len(binder.binds) <= math.ceil(n / 32) + 1


def test_high_order_bypasses_pcp():
    a, binder = make()
    start = a.get_free_pages(0, order=3)
    assert start % 8 == 0 and binder.binds == [list(range(start, start + 8))]
    assert a.pcp_pages == 0
    a.free_pages(0, start, order=3)
    assert binder.unbinds == [list(range(start, start + 8))]
    a.check_partition()


def test_pcp_bound_enforced():
    with pytest.raises(InvalidParams):
        GuestAllocator(1000, pcp_capacity=128)
    GuestAllocator(1000, pcp_capacity=128, pcp_bound=None)
    with pytest.raises(InvalidParams):
        GuestAllocator(1 << 14, pcp_capacity=8, pcp_batch=16)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 1 << 16)), max_size=120))
def test_partition_and_binding_alignment(ops):
    """Buddy-free pages are unbound, PCP pages pre-bound or bound, allocated pages bound."""
    pager = Pager(HostFrameAllocator(1 << 14))
    pager.register_direct_mapping(1 << 16, 4096)
    a = GuestAllocator(4096, cpus=2, pcp_capacity=16, pcp_batch=4, binder=pager)
    live: list[tuple[int, int, int]] = []
    for kind, cpu, pick in ops:
        cpu %= 2
        if kind < 2 or not live:
            order = 0 if kind == 0 else pick % 3
            live.append((cpu, a.get_free_pages(cpu, order), order))
        else:
            c, g, order = live.pop(pick % len(live))
            a.free_pages(cpu, g, order)
        a.check_partition()
        for p in a.buddy.free_page_set():
            assert pager.bindings.state(p) is BindState.UNBOUND
        for p in a.pcp_page_set():
            assert pager.bindings.state(p) is not BindState.UNBOUND
        for p in a.allocated_pages():
            assert pager.bindings.state(p) is BindState.BOUND
        assert pager.bindings.host_pages_held == a.pcp_pages + a.in_use
