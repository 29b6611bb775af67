import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvsim.cost import get_profile
from pvsim.elasticity import (
    Balloon,
    BlockUnplug,
    ElasticitySample,
    MetadataScan,
    PagerFreePath,
    cover,
    overhead_stats,
    reclamation_latency,
    reclamation_ops,
    samples_to_csv,
    stats_to_json,
    waste_at_granularity,
)
from pvsim.errors import EmptySeries, InvalidParams


def waste_oracle(touched: set[int], g: int) -> int:
    """Walk every chunk and count untouched pages in touched chunks."""
    if not touched:
        return 0
    waste = 0
    for chunk in range(max(touched) // g + 1):
        pages = range(chunk * g, (chunk + 1) * g)
        hit = sum(p in touched for p in pages)
        if hit:
            waste += g - hit
    return waste


# -- overhead -------------------------------------------------------------------------


def test_one_page_in_a_huge_chunk():
    s = ElasticitySample(0, 1, 512)
    assert s.overhead == 511
    assert waste_at_granularity([0]) == 511


def test_ten_sparse_pages():
    touched = [i * 512 + 3 for i in range(10)]
    assert waste_at_granularity(touched) == 5110


def test_aligned_chunk_has_no_waste():
    assert waste_at_granularity(range(512, 1024)) == 0


def test_base_granularity_has_no_waste():
    assert waste_at_granularity([1, 5, 99], 1) == 0
    with pytest.raises(InvalidParams):
        waste_at_granularity([1], 0)


@settings(max_examples=150, deadline=None)
@given(st.sets(st.integers(0, (1 << 12) - 1), max_size=200), st.sampled_from([1, 2, 8, 64, 512]))
def test_waste_matches_oracle(touched, g):
    assert waste_at_granularity(touched, g) == waste_oracle(touched, g)


@settings(max_examples=100, deadline=None)
@given(st.sets(st.integers(0, 1 << 14), max_size=100), st.integers(0, 1 << 14))
def test_waste_cover_monotone(touched, extra):
    assert cover(touched, 512) <= cover(touched | {extra}, 512)
    assert waste_at_granularity(touched, 512) >= 0


def test_stats():
    samples = [ElasticitySample(0, 0, 10), ElasticitySample(1, 10, 10), ElasticitySample(2, 10, 30)]
    stats = overhead_stats(samples, threshold=1.0)
    assert stats.excluded_zero_in_use == 1 and stats.samples == 2
    assert stats.mean == 1.0 and stats.max == 2.0 and stats.fraction_above == 0.5
    assert '"excluded_zero_in_use": 1' in stats_to_json(stats)


def test_stats_empty():
    with pytest.raises(EmptySeries):
        overhead_stats([])
    with pytest.raises(EmptySeries):
        overhead_stats([ElasticitySample(0, 0, 5)])


def test_negative_sample_rejected():
    with pytest.raises(InvalidParams):
        ElasticitySample(0, -1, 0)


def test_csv_header_and_blank_overhead():
    text = samples_to_csv([ElasticitySample(0, 0, 4), ElasticitySample(1, 2, 4)])
    lines = text.splitlines()
    assert lines[0] == "t,guest_in_use_4k,host_allocated,overhead"
    assert lines[1] == "0,0,4," and lines[2] == "1,2,4,1.0"


# -- reclamation ----------------------------------------------------------------------


def test_balloon_4k_on_8gb():
    freed = range(8 * (1 << 18))  # 8 GiB of 4 KiB pages
    r = reclamation_ops(Balloon(1), freed)
    assert r.ops == r.host_pages_released == 2_097_152


def test_balloon_2m_with_one_in_use_page_per_chunk():
    freed = [p for p in range(512 * 8) if p % 512 != 0]
    r = reclamation_ops(Balloon(512), freed)
    assert r.ops == 0 and r.host_pages_released == 0
    assert reclamation_ops(BlockUnplug(), freed).host_pages_released == 0


def test_pager_free_path_releases_everything():
    freed = random.Random(0).sample(range(1 << 14), 1000)
    r = reclamation_ops(PagerFreePath(), freed)
    assert r.host_pages_released == 1000 and r.ops == 0


def test_metadata_scan_counts():
    freed = list(range(512)) + [600, 700]
    r = reclamation_ops(MetadataScan(), freed)
    assert r.scanned_blocks == 2 and r.host_pages_released == 512 and r.ops == 3
    p = get_profile("paracell")
    assert reclamation_latency(MetadataScan(), r, p) == 2 * p.scan_block + p.invalidate_block


def test_latency_models():
    p = get_profile("pvm")
    r = reclamation_ops(Balloon(1), range(10))
    assert reclamation_latency(Balloon(1), r, p) == 10 * (p.world_switch + p.hypercall)
    assert reclamation_latency(PagerFreePath(), reclamation_ops(PagerFreePath(), [1]), p) == 0
    with pytest.raises(InvalidParams):
        reclamation_ops(Balloon(0), [1])
