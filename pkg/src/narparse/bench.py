"""Wall-clock latency benchmarking with per-length-bucket percentiles.

Each example is decoded `warmup` times untimed, then `reps` times with the
timer around the whole decode call (encode, length prediction, decoding,
and ranking); the per-example latency is the median of the reps.  Examples
are grouped into target-length buckets and summarized with nearest-rank
percentiles, which stay well defined at small sample counts.  Timing runs
in a single thread and does no allocation-heavy work inside the timed
region.
"""

import math
import time
from dataclasses import dataclass
from typing import Sequence

from .data import Example
from .decoding import DecodeConfig, decode_ar, decode_nar
from .model import NAR, Model

DEFAULT_EDGES = (10, 20, 30, 40)


def nearest_rank(values: Sequence[float], p: float) -> float:
    """The p-th percentile as the smallest value with rank >= p% (no interpolation)."""
    if not values:
        raise ValueError("no values")
    if not 0 < p <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    ordered = sorted(values)
    idx = max(1, math.ceil(p / 100 * len(ordered)))
    return float(ordered[idx - 1])


def bucket_edges_label(lo: int | None, hi: int | None) -> str:
    if lo is None:
        return f"<{hi}"
    if hi is None:
        return f">={lo}"
    return f"{lo}-{hi}"


@dataclass(frozen=True)
class LatencyBucket:
    range: str
    n: int
    median_ms: float
    p90_ms: float
    p99_ms: float

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("bucket must contain at least one sample")
        if not self.median_ms <= self.p90_ms <= self.p99_ms:
            raise ValueError("percentiles must be non-decreasing")


@dataclass(frozen=True)
class BenchReport:
    mode: str
    params: int
    overall_median_ms: float
    buckets: tuple[LatencyBucket, ...]
    forward_counts: dict

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "params": self.params,
            "overall_median_ms": self.overall_median_ms,
            "buckets": [
                {
                    "range": b.range,
                    "n": b.n,
                    "median_ms": b.median_ms,
                    "p90_ms": b.p90_ms,
                    "p99_ms": b.p99_ms,
                }
                for b in self.buckets
            ],
            "forward_counts": dict(self.forward_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        buckets = tuple(
            LatencyBucket(
                range=b["range"],
                n=b["n"],
                median_ms=b["median_ms"],
                p90_ms=b["p90_ms"],
                p99_ms=b["p99_ms"],
            )
            for b in d["buckets"]
        )
        return cls(
            mode=d["mode"],
            params=d["params"],
            overall_median_ms=d["overall_median_ms"],
            buckets=buckets,
            forward_counts=dict(d["forward_counts"]),
        )


def bucket_by_length(
    timings: Sequence[tuple[int, float]],
    edges: Sequence[int] = DEFAULT_EDGES,
) -> list[LatencyBucket]:
    """Group (target_length, latency_ms) pairs into left-closed buckets.

    A length equal to an edge falls in the bucket starting at that edge;
    empty buckets are omitted.
    """
    if list(edges) != sorted(edges):
        raise ValueError("edges must be sorted")
    bounds = [(None, edges[0])]
    bounds += [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]
    bounds.append((edges[-1], None))
    out = []
    for lo, hi in bounds:
        vals = [
            ms
            for length, ms in timings
            if (lo is None or length >= lo) and (hi is None or length < hi)
        ]
        if not vals:
            continue
        out.append(
            LatencyBucket(
                range=bucket_edges_label(lo, hi),
                n=len(vals),
                median_ms=nearest_rank(vals, 50),
                p90_ms=nearest_rank(vals, 90),
                p99_ms=nearest_rank(vals, 99),
            )
        )
    return out


def bench_latency(
    model: Model,
    dataset: Sequence[Example],
    cfg: DecodeConfig = DecodeConfig(),
    warmup: int = 5,
    reps: int = 20,
) -> BenchReport:
    """Measure decode latency per example; bucket by target token length."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    decode = decode_nar if model.config.variant == NAR else decode_ar
    timings: list[tuple[int, float]] = []
    passes: list[int] = []
    for ex in dataset:
        src = ex.source
        for _ in range(warmup):
            decode(model, src, cfg)
        samples = []
        result = None
        for _ in range(reps):
            t0 = time.perf_counter()
            result = decode(model, src, cfg)
            samples.append((time.perf_counter() - t0) * 1000.0)
        timings.append((len(ex.target), nearest_rank(samples, 50)))
        passes.append(result.decoder_passes)
    all_ms = [ms for _, ms in timings]
    counts = sorted(passes)
    return BenchReport(
        mode=model.config.variant,
        params=model.count_parameters(),
        overall_median_ms=nearest_rank(all_ms, 50),
        buckets=tuple(bucket_by_length(timings)),
        forward_counts={
            "min": counts[0],
            "median": nearest_rank(counts, 50),
            "max": counts[-1],
        },
    )
