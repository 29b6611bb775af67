import pytest

from pvsim.backends import BackendKind
from pvsim.elasticity import cover
from pvsim.errors import DoubleFree, InvalidParams, SimError
from pvsim.machine import Machine, MachineConfig

CFG = MachineConfig(guest_pages=1 << 14)
ALL = ["ept", "ept-2m", "shadow", "shadow-noemu", "pager", "pager-standalone"]


def machine(name, **kw):
    cfg = MachineConfig(**{**CFG.__dict__, **kw})
    return Machine(BackendKind.parse(name), cfg)


def test_backend_kind_parsing():
    assert BackendKind.parse("ept-2m").granularity == 512
    assert BackendKind.parse("shadow-noemu").pt_write_emulation is False
    assert BackendKind.parse("pager-standalone").dual_table is False
    assert BackendKind.parse("shadow").default_profile == "pvm"
    with pytest.raises(SimError):
        BackendKind.parse("xen")


def test_unknown_bug_is_rejected():
    with pytest.raises(InvalidParams):
        machine("pager", bug="bogus")


# -- anonymous fault path -------------------------------------------------------------


def fresh_fault(name):
    m = machine(name)
    m.mmap(0, 0x10, 1)
    m.touch(0, 0x10, write=False)  # warm the PCP so the pager refill is not counted
    m.mmap(0, 0x20, 1)
    before = m.counters.copy()
    m.touch(0, 0x20, write=True, tag="x")
    return m.counters - before


def test_shadow_fresh_fault_costs_two_shadow_faults():
    d = fresh_fault("shadow")
    assert d.shadow_faults == 2
    assert d.pt_write_emulations == 1
    assert d.pt_switches == 3
    # forward + two shadow faults + one emulated PT write
    assert d.world_switches == 4
    assert d.second_stage_faults == 0


def test_pager_fresh_fault_has_no_secondary_fault():
    d = fresh_fault("pager")
    assert d.secondary_faults == 0
    assert d.world_switches == 0 and d.hypercalls == 0
    assert d.pager_calls == 1


def test_second_stage_fresh_fault():
    d = fresh_fault("ept")
    assert d.second_stage_faults == 1 and d.shadow_faults == 0
    assert d.world_switches == 0


def test_second_stage_aliases_share_one_fault():
    m = machine("ept")
    m.mmap(0, 0x10, 1, shared=True)
    m.mmap(0, 0x40, 1, alias_of=(0, 0x10))
    m.touch(0, 0x10, write=True, tag=1)
    assert m.touch(0, 0x40, write=False) == 1
    assert m.counters.second_stage_faults == 1


def test_shadow_alias_costs_one_more_shadow_fault():
    m = machine("shadow")
    m.mmap(0, 0x10, 1, shared=True)
    m.mmap(0, 0x40, 1, alias_of=(0, 0x10))
    m.touch(0, 0x10, write=True, tag=1)
    assert m.counters.shadow_faults == 2
    m.touch(0, 0x40, write=False)
    assert m.counters.shadow_faults == 3


def test_second_stage_2m_backs_whole_chunks():
    m = machine("ept-2m")
    touched = [5, 512 + 7, 1024 + 300]
    for g in touched:
        m.backend.kernel_access(g, write=True)
    assert m.counters.second_stage_faults == len(cover(touched, 512)) == 3
    assert m.host_allocated() == 3 * 512


# -- page-table writes ----------------------------------------------------------------


def pt_write_delta(name):
    m = machine(name)
    m.mmap(0, 0x10, 1)
    m.touch(0, 0x10, write=True, tag=1)
    g, _ = m.backend.guest_lookup(0, 0x10)
    before = m.counters.copy()
    m.backend.guest_pt_write(0, 0x11, g, True)
    return m.counters - before


def test_pt_write_costs():
    shadow = pt_write_delta("shadow")
    assert shadow.pt_write_emulations == 1 and shadow.world_switches == 1
    pager = pt_write_delta("pager")
    assert pager.pager_calls == 1 and pager.world_switches == 0
    assert pt_write_delta("ept").nonzero() == {}
    assert pt_write_delta("shadow-noemu").world_switches == 0


# -- fork and CoW ---------------------------------------------------------------------


def test_pager_fork_writes_every_pte():
    m = machine("pager")
    m.mmap(0, 0x10, 10)
    for i in range(10):
        m.touch(0, 0x10 + i, write=True, tag=i)
    d = m.fork(0, 1)
    assert d.pager_calls >= 10


@pytest.mark.parametrize("name", ALL)
def test_cow_isolates_parent_and_child(name):
    m = machine(name)
    m.mmap(0, 0x10, 4)
    for i in range(4):
        m.touch(0, 0x10 + i, write=True, tag=("parent", i))
    m.fork(0, 1)
    m.touch(1, 0x11, write=True, tag="child")
    assert m.touch(0, 0x11, write=False) == ("parent", 1)
    assert m.touch(1, 0x11, write=False) == "child"
    assert m.touch(1, 0x12, write=False) == ("parent", 2)
    m.check()


def test_shadow_child_faults_once_per_touched_page():
    m = machine("shadow")
    m.mmap(0, 0x10, 8)
    for i in range(8):
        m.touch(0, 0x10 + i, write=True, tag=i)
    m.fork(0, 1)
    before = m.counters.shadow_faults
    k = 5
    for i in range(k):
        m.touch(1, 0x10 + i, write=False)
    assert m.counters.shadow_faults - before == k


# -- reclamation through the free path ------------------------------------------------


def alloc_free(name, n=1000):
    m = machine(name)
    baseline = m.host_allocated()
    m.alloc_burst(n)
    gpas = list(m.burst_pool[0])
    m.burst_pool[0].clear()
    d = m.reclaim_free(gpas)
    m.alloc.drain_all()
    return m, baseline, d


def test_pager_returns_host_pages_after_drain():
    m, baseline, _ = alloc_free("pager")
    assert m.host_allocated() == baseline == 0


def test_second_stage_keeps_host_backing():
    m, _, d = alloc_free("ept")
    assert d.host_pages_released == 0
    assert m.host_allocated() == 1000


def test_reclaim_of_unallocated_page():
    m = machine("pager")
    with pytest.raises(DoubleFree):
        m.reclaim_free([77])


# -- bug injection --------------------------------------------------------------------


def test_skip_spt_invalidate_is_caught_by_check():
    m = machine("shadow", bug="skip_spt_invalidate")
    m.mmap(0, 0x10, 1)
    m.touch(0, 0x10, write=True, tag="old")
    m.munmap(0, 0x10, 1)
    # the shadow entry outlives its guest entry
    with pytest.raises(SimError, match="shadow entry without guest entry"):
        m.check()


def test_skip_dm_install_breaks_kernel_access():
    m = machine("pager", bug="skip_dm_install")
    m.mmap(0, 0x10, 1)
    with pytest.raises(SimError):
        m.touch(0, 0x10, write=True, tag=1)
