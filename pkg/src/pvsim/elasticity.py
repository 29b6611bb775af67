"""Memory-overhead statistics, huge-page waste and reclamation models."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from typing import Iterable, Union

from .addressing import HUGE_PAGES
from .cost import LatencyProfile
from .errors import EmptySeries, InvalidParams


@dataclass
class ElasticitySample:
    t: int
    guest_in_use_4k: int
    host_allocated: int

    def __post_init__(self) -> None:
        if self.host_allocated < 0 or self.guest_in_use_4k < 0:
            raise InvalidParams("sample page counts must be non-negative")

    @property
    def overhead(self) -> float | None:
        """Extra host memory relative to in-use memory; ``None`` when nothing is in use."""
        if not self.guest_in_use_4k:
            return None
        return (self.host_allocated - self.guest_in_use_4k) / self.guest_in_use_4k


@dataclass(frozen=True)
class OverheadStats:
    mean: float
    median: float
    max: float
    threshold: float
    fraction_above: float
    samples: int
    excluded_zero_in_use: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "threshold": self.threshold,
            "fraction_above": self.fraction_above,
            "samples": self.samples,
            "excluded_zero_in_use": self.excluded_zero_in_use,
        }


def overhead_stats(samples: Iterable[ElasticitySample], threshold: float = 0.0) -> OverheadStats:
    """Aggregate overhead over samples; zero-in-use samples are counted but excluded."""
    samples = list(samples)
    if not samples:
        raise EmptySeries("no samples")
    values = [s.overhead for s in samples if s.overhead is not None]
    excluded = len(samples) - len(values)
    if not values:
        raise EmptySeries(f"all {excluded} samples have zero pages in use")
    return OverheadStats(
        mean=statistics.fmean(values),
        median=statistics.median(values),
        max=max(values),
        threshold=threshold,
        fraction_above=sum(v > threshold for v in values) / len(values),
        samples=len(values),
        excluded_zero_in_use=excluded,
    )


def samples_to_csv(samples: Iterable[ElasticitySample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "guest_in_use_4k", "host_allocated", "overhead"])
    for s in samples:
        ov = s.overhead
        writer.writerow([s.t, s.guest_in_use_4k, s.host_allocated, "" if ov is None else repr(ov)])
    return buf.getvalue()


def stats_to_json(stats: OverheadStats) -> str:
    return json.dumps(stats.to_dict(), indent=2, sort_keys=True)


# -- huge-page waste ---------------------------------------------------------------


def cover(touched: Iterable[int], granularity: int) -> set[int]:
    """Indices of ``granularity``-page chunks containing at least one touched page."""
    return {p // granularity for p in touched}


def waste_at_granularity(touched: Iterable[int], granularity: int = HUGE_PAGES) -> int:
    """Pages backed beyond the touched set when memory is handed out in chunks."""
    if granularity <= 0:
        raise InvalidParams("granularity must be positive")
    touched = set(touched)
    if granularity == 1:
        return 0
    return len(cover(touched, granularity)) * granularity - len(touched)


# -- reclamation -------------------------------------------------------------------


@dataclass(frozen=True)
class Balloon:
    granularity: int = 1  # pages per balloon operation


@dataclass(frozen=True)
class BlockUnplug:
    block_size: int = HUGE_PAGES


@dataclass(frozen=True)
class MetadataScan:
    block_size: int = HUGE_PAGES


@dataclass(frozen=True)
class PagerFreePath:
    pass


ReclamationModel = Union[Balloon, BlockUnplug, MetadataScan, PagerFreePath]


@dataclass(frozen=True)
class ReclamationResult:
    ops: int
    host_pages_released: int
    scanned_blocks: int = 0


def _full_blocks(freed: set[int], size: int) -> tuple[int, int]:
    """(blocks with any freed page, blocks entirely freed)."""
    counts: dict[int, int] = {}
    for p in freed:
        counts[p // size] = counts.get(p // size, 0) + 1
    return len(counts), sum(1 for c in counts.values() if c == size)


def reclamation_ops(model: ReclamationModel, freed: Iterable[int]) -> ReclamationResult:
    """Host operations needed to give ``freed`` guest pages back, and pages released."""
    freed = set(freed)
    if isinstance(model, PagerFreePath):
        # unbinding already happened at PCP drain and was counted there
        return ReclamationResult(0, len(freed))
    if isinstance(model, Balloon):
        size = model.granularity
    elif isinstance(model, (BlockUnplug, MetadataScan)):
        size = model.block_size
    else:
        raise InvalidParams(f"unknown reclamation model {model!r}")
    if size <= 0:
        raise InvalidParams("block size must be positive")
    if size == 1 and not isinstance(model, MetadataScan):
        return ReclamationResult(len(freed), len(freed))
    touched, full = _full_blocks(freed, size)
    if isinstance(model, MetadataScan):
        return ReclamationResult(touched + full, full * size, scanned_blocks=touched)
    return ReclamationResult(full, full * size)


def reclamation_latency(
    model: ReclamationModel, result: ReclamationResult, profile: LatencyProfile
) -> int:
    """Modeled host-side cost of one reclamation pass, in ns."""
    if isinstance(model, PagerFreePath):
        return 0
    if isinstance(model, MetadataScan):
        invalidations = result.ops - result.scanned_blocks
        return result.scanned_blocks * profile.scan_block + invalidations * profile.invalidate_block
    # balloon inflation and block unplug each cost a guest/host round trip per op
    return result.ops * (profile.world_switch + profile.hypercall)
