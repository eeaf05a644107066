"""Channel allocation under the conservative guard-band rule.

``N_C`` classical channels block the next ``N_C - 1`` slots, leaving
``N - 2 N_C + 1`` for QKD.  Counts are clamped to the physical ``[0, N]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .traffic import TrafficParams, TrafficTrace, trend


@dataclass(frozen=True)
class WdmConfig:
    n_channels: int = 80
    key_rate_dku_per_day: float = 1.0

    def __post_init__(self):
        if int(self.n_channels) != self.n_channels or self.n_channels < 1:
            raise ValueError(f"n_channels must be a positive integer, got {self.n_channels}")
        if not self.key_rate_dku_per_day > 0:
            raise ValueError("key_rate_dku_per_day must be > 0")

    @property
    def key_rate_dku_per_hour(self) -> float:
        return self.key_rate_dku_per_day / 24.0


@dataclass(frozen=True)
class ChannelAllocation:
    n_classical: int
    n_quantum: int
    overflow: bool

    @property
    def n_guard(self) -> int:
        return max(0, self.n_classical - 1) if self.n_quantum > 0 else 0


def classical_channels(load: float, n: int) -> tuple[int, bool]:
    if not (math.isfinite(load) and load >= 0):
        raise ValueError(f"load must be finite and >= 0, got {load}")
    need = math.ceil(load)
    return min(need, n), need > n


def quantum_channels(n: int, n_classical: int) -> int:
    if not 0 <= n_classical <= n:
        raise ValueError(f"n_classical must be in [0, {n}], got {n_classical}")
    return max(0, min(n, n - 2 * n_classical + 1))


def allocate(load: float, n: int) -> ChannelAllocation:
    nc, over = classical_channels(load, n)
    return ChannelAllocation(nc, quantum_channels(n, nc), over)


def allocate_array(load: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized allocation: ``(n_classical, n_quantum, overflow)``."""
    load = np.asarray(load, dtype=float)
    if not np.all(np.isfinite(load)) or np.any(load < 0):
        raise ValueError("load must be finite and >= 0")
    need = np.ceil(load)
    overflow = need > n
    nc = np.minimum(need, n).astype(np.int64)
    nq = np.clip(n - 2 * nc + 1, 0, n)
    return nc, nq, overflow


def quantum_bounds(params: TrafficParams, n: int, t_hours, x) -> tuple:
    """Raw (unclamped) ceiling-sandwich bounds on the QKD channel count for
    a given fGn value ``x``."""
    mid = n - 2.0 * params.p * trend(t_hours, params.alpha, params.period_hours) * np.exp(params.sigma * np.asarray(x, dtype=float))
    if np.ndim(mid) == 0:
        mid = float(mid)
    return mid - 1.0, mid + 1.0


def expected_quantum(params: TrafficParams, n: int, t_hours) -> tuple:
    mid = n - 2.0 * params.p * trend(t_hours, params.alpha, params.period_hours) * params.noise_mean
    return mid - 1.0, mid + 1.0


@dataclass(frozen=True)
class AvailabilityStats:
    n_channels: int
    mean_quantum_channels: float
    utilization_percent: float
    quantum_histogram: np.ndarray = field(repr=False)
    classical_histogram: np.ndarray = field(repr=False)
    outage_fraction: float
    overflow_fraction: float
    clamp_fraction: float
    n_samples: int

    def as_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "mean_quantum_channels": self.mean_quantum_channels,
            "utilization_percent": self.utilization_percent,
            "outage_fraction": self.outage_fraction,
            "overflow_fraction": self.overflow_fraction,
            "clamp_fraction": self.clamp_fraction,
            "n_samples": self.n_samples,
        }


@dataclass(frozen=True)
class AllocationCounts:
    """Mergeable per-trace tallies behind ``AvailabilityStats``."""

    quantum: np.ndarray
    classical: np.ndarray
    overflow: int
    clamped: int

    @property
    def n_samples(self) -> int:
        return int(self.quantum.sum())

    def __add__(self, other: "AllocationCounts") -> "AllocationCounts":
        return AllocationCounts(
            self.quantum + other.quantum,
            self.classical + other.classical,
            self.overflow + other.overflow,
            self.clamped + other.clamped,
        )


def allocation_counts(load: np.ndarray, n: int) -> AllocationCounts:
    nc, nq, overflow = allocate_array(load, n)
    raw = n - 2 * nc + 1
    return AllocationCounts(
        quantum=np.bincount(nq, minlength=n + 1),
        classical=np.bincount(nc, minlength=n + 1),
        overflow=int(overflow.sum()),
        clamped=int(np.sum((raw < 0) | (raw > n))),
    )


def stats_from_counts(counts: AllocationCounts, n: int) -> AvailabilityStats:
    total = counts.n_samples
    if total == 0:
        raise ValueError("trace must be non-empty")
    k = np.arange(n + 1)
    # integer numerator keeps the mean independent of how traces were pooled
    mean_q = int(k @ counts.quantum) / total
    return AvailabilityStats(
        n_channels=n,
        mean_quantum_channels=mean_q,
        utilization_percent=100.0 * mean_q / n,
        quantum_histogram=np.column_stack([k, counts.quantum / total]),
        classical_histogram=np.column_stack([k, counts.classical / total]),
        outage_fraction=counts.quantum[0] / total,
        overflow_fraction=counts.overflow / total,
        clamp_fraction=counts.clamped / total,
        n_samples=total,
    )


def availability_stats(traces, config: WdmConfig) -> AvailabilityStats:
    """Time-averaged allocation statistics over one trace or several
    (pooled with equal weight per sample)."""
    if isinstance(traces, TrafficTrace):
        traces = [traces]
    n = config.n_channels
    counts = [allocation_counts(tr.load, n) for tr in traces]
    if not counts:
        raise ValueError("trace must be non-empty")
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    return stats_from_counts(total, n)
