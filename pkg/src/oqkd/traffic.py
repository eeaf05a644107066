"""Classical traffic model: diurnal trend times lognormal fGn bursts.

All rates are normalized to channel units (R/C), so a load of 12.3 means
12.3 channels' worth of classical demand.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import fgn

HOURS_PER_DAY = 24.0
DEFAULT_HURST = 0.8


class Category(enum.Enum):
    CAT1 = 1
    CAT2 = 2
    CAT3 = 3


# (p/N, alpha, sigma) per traffic category.
CATEGORY_TABLE = {
    Category.CAT1: (0.5, 0.875, 0.3),
    Category.CAT2: (0.2, 0.15, 0.08),
    Category.CAT3: (0.2, 0.6, 0.8),
}


@dataclass(frozen=True)
class TrafficParams:
    p: float
    alpha: float
    sigma: float
    hurst: float = DEFAULT_HURST
    period_hours: float = HOURS_PER_DAY
    r0: float | None = None
    channel_capacity: float | None = None

    def __post_init__(self):
        if not self.p >= 0:
            raise ValueError(f"p must be >= 0, got {self.p}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.period_hours > 0:
            raise ValueError(f"period_hours must be > 0, got {self.period_hours}")
        fgn.check_hurst(self.hurst)
        for name in ("r0", "channel_capacity"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.r0 is not None and self.channel_capacity is not None:
            if not math.isclose(self.p, self.r0 / self.channel_capacity, rel_tol=1e-9):
                raise ValueError("p must equal r0 / channel_capacity")

    @property
    def noise_mean(self) -> float:
        """E[exp(sigma X)] for standard normal X."""
        return math.exp(0.5 * self.sigma**2)


def category_preset(category: Category | int, n_channels: int, hurst: float = DEFAULT_HURST) -> TrafficParams:
    if n_channels < 1:
        raise ValueError(f"n_channels must be >= 1, got {n_channels}")
    ratio, alpha, sigma = CATEGORY_TABLE[Category(category)]
    return TrafficParams(p=ratio * n_channels, alpha=alpha, sigma=sigma, hurst=hurst)


def trend(t_hours, alpha: float, period_hours: float = HOURS_PER_DAY):
    """Diurnal modulation ``1 - alpha sin^2(pi t / T)``; accepts arrays."""
    s = np.sin(np.pi * np.asarray(t_hours, dtype=float) / period_hours)
    out = 1.0 - alpha * s * s
    return float(out) if out.ndim == 0 else out


def mean_rate(params: TrafficParams, t_hours):
    return params.p * trend(t_hours, params.alpha, params.period_hours) * params.noise_mean


def var_rate(params: TrafficParams, t_hours):
    s2 = params.sigma**2
    base = params.p * trend(t_hours, params.alpha, params.period_hours)
    return base * base * math.exp(s2) * math.expm1(s2)


def daily_mean_trend(alpha: float) -> float:
    return 1.0 - 0.5 * alpha


@dataclass(frozen=True)
class TrafficTrace:
    dt_hours: float
    start_phase_hours: float
    trend: np.ndarray = field(repr=False)
    fgn: np.ndarray = field(repr=False)
    noise: np.ndarray = field(repr=False)
    load: np.ndarray = field(repr=False)
    seed: int = 0

    def __len__(self) -> int:
        return self.load.size

    @property
    def t_hours(self) -> np.ndarray:
        return self.start_phase_hours + self.dt_hours * np.arange(self.load.size)


def n_steps(duration_hours: float, dt_hours: float) -> int:
    if not dt_hours > 0:
        raise ValueError(f"dt_hours must be > 0, got {dt_hours}")
    if not duration_hours >= dt_hours:
        raise ValueError(f"duration_hours must be >= dt_hours, got {duration_hours}")
    # guard against 7*24/(1/60) landing a hair above an integer
    return math.ceil(round(duration_hours / dt_hours, 9))


def synthesize(
    params: TrafficParams,
    duration_hours: float,
    dt_hours: float = 1.0 / 60.0,
    start_phase_hours: float = 0.0,
    seed: int = 0,
) -> TrafficTrace:
    n = n_steps(duration_hours, dt_hours)
    if not 0.0 <= start_phase_hours < params.period_hours:
        raise ValueError("start_phase_hours must lie in [0, period_hours)")
    t = start_phase_hours + dt_hours * np.arange(n)
    m = trend(t, params.alpha, params.period_hours)
    x = fgn.generate(params.hurst, n, seed).samples
    nu = np.exp(params.sigma * x)
    load = params.p * m * nu
    for a in (m, nu, load):
        a.setflags(write=False)
    return TrafficTrace(
        dt_hours=dt_hours,
        start_phase_hours=start_phase_hours,
        trend=m,
        fgn=x,
        noise=nu,
        load=load,
        seed=int(seed),
    )
