"""Acceptance suite: one group per criterion, summarized as PASS/FAIL lines at the end."""

import math
import random

import pytest

from pvsim.alloc import GuestAllocator
from pvsim.cost import breakdown_total, fault_breakdown, get_profile, nested_delta, path_latency
from pvsim.elasticity import (
    Balloon,
    PagerFreePath,
    reclamation_ops,
    waste_at_granularity,
)
from pvsim.errors import ProtectionFault
from pvsim.gates import DomainKey, Gates, syscall_counters
from pvsim.machine import Machine, MachineConfig
from pvsim.backends import BackendKind
from pvsim.pager import HostFrameAllocator, Pager
from pvsim.workloads import (
    bursty,
    fault_intensive,
    random_trace,
    replay,
    replay_reference,
    state_hash,
    syscall_intensive,
)
from test_gates import run_interleaving

SMALL = MachineConfig(guest_pages=1 << 15, cpus=2)


# -- 1. secondary-fault counts --------------------------------------------------------


@pytest.mark.criterion(1)
@pytest.mark.parametrize("f", [1, 100, 10_000])
def test_fault_counts(f):
    trace = fault_intensive(n=f, aliases=1)
    assert replay(trace, "shadow").counters.shadow_faults == 2 * f
    assert replay(trace, "pager").counters.secondary_faults == 0
    assert replay(trace, "ept").counters.second_stage_faults == f


# -- 2. syscall table -----------------------------------------------------------------

SYSCALL_NS = {"paracell": 107, "paracell_no_depriv": 256, "pvm": 320, "runv": 96, "runc": 404}


def getpid_ns(name):
    p = get_profile(name)
    return path_latency(p, syscall_counters(p.syscall_path))


@pytest.mark.criterion(2)
def test_syscall_table_exact():
    assert {name: getpid_ns(name) for name in SYSCALL_NS} == SYSCALL_NS


@pytest.mark.criterion(2)
def test_syscall_ordering():
    order = ["runv", "paracell", "paracell_no_depriv", "pvm", "runc"]
    assert all(getpid_ns(a) < getpid_ns(b) for a, b in zip(order, order[1:]))


# -- 3. fault breakdown ---------------------------------------------------------------


@pytest.mark.criterion(3)
def test_fault_breakdown():
    items = {i.component: i for i in fault_breakdown(get_profile("paracell"))}
    assert breakdown_total(items.values()) == 3991
    shares = [items[k].ns / 3991 * 100 for k in ("metadata_user_pte", "metadata_dm_pte", "set_pte", "amortized_bind")]
    for got, want in zip(shares, (19, 12, 7, 4)):
        assert abs(got - want) <= 1
    assert items["other"].ns == 682
    standalone = fault_breakdown(get_profile("paracell"), dual_table=False)
    assert 3991 - breakdown_total(standalone) == 771 + 466


# -- 4. nested amplification ----------------------------------------------------------


def mixed_traces():
    yield fault_intensive(n=200, aliases=2, cow=0.3, seed=1)
    yield syscall_intensive(n=200, threads=3, vcpus=2, virq_every=7, migrate_every=13)
    yield bursty(mean=200, cycles=2, seed=2)
    for seed in range(20):
        yield random_trace(ops=150, seed=seed)


@pytest.mark.criterion(4)
@pytest.mark.parametrize("backend", ["ept", "ept-2m", "shadow", "pager"])
def test_nested_delta_on_traces(backend):
    for trace in mixed_traces():
        bare = replay(trace, backend, config=SMALL, nested=False)
        nested = replay(trace, backend, config=SMALL, nested=True)
        c = bare.counters
        w = get_profile(BackendKind.parse(backend).default_profile).world_switch
        assert nested.latency_ns - bare.latency_ns == (2 * c.world_switches + 4 * c.second_stage_faults) * w
        assert nested.latency_ns - bare.latency_ns == nested_delta(get_profile(bare.profile), c)


# -- 5. functional equivalence --------------------------------------------------------


def equivalence_trace(seed):
    rng = random.Random(seed)
    ops = 600 if seed % 100 == 0 else rng.randint(10, 80)
    return random_trace(ops=ops, max_pages=1024, seed=seed)


@pytest.mark.criterion(5)
def test_equivalence_1000_traces():
    mismatches = []
    for seed in range(1000):
        trace = equivalence_trace(seed)
        expected = state_hash(replay_reference(trace))
        for backend in ("ept", "shadow", "pager"):
            if replay(trace, backend, config=SMALL).state_hash != expected:
                mismatches.append((seed, backend))
    assert mismatches == []


@pytest.mark.criterion(5)
def test_equivalence_lockstep_subset():
    # every read checked against the reference plus the full invariant sweep after each op
    for seed in range(0, 1000, 100):
        trace = equivalence_trace(seed + 1)
        for backend in ("ept", "shadow", "pager"):
            replay(trace, backend, config=SMALL, test_mode=True)


# -- 6. PCP batching ------------------------------------------------------------------


def pager_allocator(batch, capacity):
    pager = Pager(HostFrameAllocator(1 << 16))
    pager.register_direct_mapping(1 << 17, 1 << 16)
    return GuestAllocator(1 << 16, pcp_batch=batch, pcp_capacity=capacity, binder=pager), pager


@pytest.mark.criterion(6)
@pytest.mark.parametrize("batch", [1, 8, 32])
@pytest.mark.parametrize("n", [1, 31, 32, 33, 500, 4096])
def test_alloc_free_hypercall_bound(n, batch):
    a, pager = pager_allocator(batch, 4 * batch)
    pages = [a.get_free_pages(0) for _ in range(n)]
    for p in pages:
        a.free_pages(0, p)
    assert pager.counters.hypercalls <= 2 * math.ceil(n / batch) + 2


@pytest.mark.criterion(6)
def test_no_hypercall_inside_pcp_boundary():
    rng = random.Random(6)
    a, pager = pager_allocator(8, 32)
    live = []
    for _ in range(5000):
        pcp = a.pcp[0]
        before = pager.counters.hypercalls
        if rng.random() < 0.5 or not live:
            crosses = len(pcp) == 0
            live.append(a.get_free_pages(0))
        else:
            crosses = len(pcp) + 1 > pcp.capacity
            a.free_pages(0, live.pop(rng.randrange(len(live))))
        if not crosses:
            assert pager.counters.hypercalls == before


@pytest.mark.criterion(6)
@pytest.mark.parametrize("seed", range(2))
def test_pager_overhead_bounded_during_bursty(seed):
    cfg = MachineConfig(cpus=1)
    assert cfg.cpus * cfg.pcp_capacity < cfg.guest_pages / 100
    r = replay(bursty(mean=150, seed=seed), "pager", config=cfg)
    assert r.samples
    for s in r.samples:
        assert s.host_allocated - s.guest_in_use_4k <= cfg.cpus * cfg.pcp_capacity


# -- 7. reclamation -------------------------------------------------------------------

PAGES_8G = 8 * (1 << 30) // 4096


@pytest.mark.criterion(7)
def test_balloon_counts():
    assert reclamation_ops(Balloon(1), range(PAGES_8G)).ops == 2_097_152
    one_in_use = (p for p in range(PAGES_8G) if p % 512 != 17)
    assert reclamation_ops(Balloon(512), one_in_use).host_pages_released == 0


@pytest.mark.criterion(7)
@pytest.mark.parametrize("batch", [8, 32])
def test_pager_free_path_releases_everything(batch):
    n = 64 * batch
    m = Machine(BackendKind.parse("pager"), MachineConfig(pcp_batch=batch, pcp_capacity=4 * batch))
    m.alloc_burst(n)
    freed = list(m.burst_pool[0])
    hypercalls = m.counters.hypercalls
    m.free_burst(n)
    m.alloc.drain_all()
    drains = m.counters.hypercalls - hypercalls
    assert m.host_allocated() == 0
    assert reclamation_ops(PagerFreePath(), freed).host_pages_released == n
    assert reclamation_ops(Balloon(1), freed).ops / drains >= batch


# -- 8. gate properties ---------------------------------------------------------------


@pytest.mark.criterion(8)
def test_gate_interleavings_10k():
    rng = random.Random(8)
    for seed in range(10_000):
        vcpus, threads, hostile = rng.randint(1, 3), rng.randint(1, 4), rng.random() < 0.3
        g = run_interleaving(seed, vcpus=vcpus, threads=threads, length=30, hostile=hostile)
        assert g.masked_window_violations() == []
        assert g.conservation_holds()
        assert (g.counters.policy_violations >= 1) if hostile else (g.counters.policy_violations == 0)
        if not hostile:
            for tid in g.threads:
                assert not g.access_check(tid, DomainKey.GK)
                with pytest.raises(ProtectionFault):
                    g._read_slot(g.threads[tid])


@pytest.mark.criterion(8)
def test_gate_switch_counts_per_profile():
    for name, pt in (("paracell", 0), ("pvm", 2)):
        g = Gates(1, syscall_path=get_profile(name).syscall_path)
        g.add_thread(0, 0)
        d = g.syscall_round_trip(0, 39)
        assert d.world_switches == 0 and d.pt_switches == pt


# -- 9. elasticity --------------------------------------------------------------------


def chunk_cover_oracle(touched, g, space):
    waste = 0
    for base in range(0, space, g):
        hit = sum(1 for p in range(base, base + g) if p in touched)
        if hit:
            waste += g - hit
    return waste


@pytest.mark.criterion(9)
def test_waste_oracle_500_sets():
    rng = random.Random(9)
    space = 1 << 14
    for _ in range(500):
        touched = set(rng.sample(range(space), rng.randint(0, 300)))
        assert waste_at_granularity(touched, 512) == chunk_cover_oracle(touched, 512, space)
        assert waste_at_granularity(touched, 1) == 0


@pytest.mark.criterion(9)
@pytest.mark.parametrize("seed", range(3))
def test_bursty_peak_to_average(seed):
    r = replay(bursty(ratio=15.4, mean=100, seed=seed), "pager", config=SMALL)
    used = [s.guest_in_use_4k for s in r.samples]
    assert max(used) / (sum(used) / len(used)) == pytest.approx(15.4, rel=0.05)
