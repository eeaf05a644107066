"""First-passage time to buffer depletion: ensembles, densities, Bihill fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid
from scipy.optimize import minimize

from . import fgn
from .buffer import BufferParams, available_increments
from .seeding import derive_seed, map_indexed
from .traffic import HOURS_PER_DAY, n_steps, trend


@dataclass(frozen=True)
class FptEnsemble:
    samples_hours: np.ndarray = field(repr=False)
    censored: np.ndarray = field(repr=False)
    master_seed: int
    params: BufferParams
    max_span_hours: float
    dt_hours: float

    @property
    def observed(self) -> np.ndarray:
        return self.samples_hours[~self.censored]

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean())


def first_passage(params: BufferParams, x: np.ndarray, dt_hours: float) -> int:
    """Number of steps until the Available-state level first reaches zero,
    or -1 if it never does within ``x.size`` steps."""
    path = np.cumsum(np.concatenate([[float(params.b0_dku)], available_increments(params, x, dt_hours)]))
    hit = path[1:] <= 0.0
    k = int(np.argmax(hit))
    return k + 1 if hit[k] else -1


def _trial(params: BufferParams, n: int, dt_hours: float, master_seed: int, index: int) -> int:
    x = fgn.generate(params.traffic.hurst, n, derive_seed(master_seed, index)).samples
    return first_passage(params, x, dt_hours)


def run_ensemble(
    params: BufferParams,
    trials: int,
    max_span_hours: float,
    dt_hours: float = 1.0 / 60.0,
    master_seed: int = 0,
    workers: int = 1,
) -> FptEnsemble:
    """Monte-Carlo first-passage ensemble.

    Trial ``i`` uses ``derive_seed(master_seed, i)``, so the result does not
    depend on ``workers``.  Trials that survive ``max_span_hours`` are
    censored and carry the span as their value.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n = n_steps(max_span_hours, dt_hours)
    steps = map_indexed(partial(_trial, params, n, dt_hours, int(master_seed)), trials, workers)
    steps = np.asarray(steps)
    censored = steps < 0
    samples = np.where(censored, max_span_hours, steps * dt_hours)
    return FptEnsemble(samples, censored, int(master_seed), params, float(max_span_hours), dt_hours)


# -- empirical density -------------------------------------------------------


def freedman_diaconis_bins(samples: np.ndarray, lo: float, hi: float, max_bins: int = 2000) -> int:
    x = np.asarray(samples, dtype=float)
    x = x[(x >= lo) & (x <= hi)]
    iqr = np.subtract(*np.percentile(x, [75, 25])) if x.size else 0.0
    if iqr <= 0:
        return 1
    width = 2.0 * iqr / x.size ** (1.0 / 3.0)
    return int(min(max_bins, max(1, math.ceil((hi - lo) / width))))


def histogram_density(samples, n_bins: int | None = None, range: tuple[float, float] | None = None) -> np.ndarray:
    """Histogram estimate of the PDF as ``(bin_center, density)`` rows.

    Densities are normalized by the total sample count, so they integrate
    to the fraction of samples inside ``range``.
    """
    x = np.asarray(samples, dtype=float)
    if range is None:
        if x.size == 0:
            raise ValueError("empty sample")
        range = (0.0, float(x.max()))
    lo, hi = map(float, range)
    if not hi > lo:
        raise ValueError(f"empty range ({lo}, {hi})")
    inside = (x >= lo) & (x <= hi)
    if inside.sum() < 2:
        raise ValueError("need at least 2 samples inside the range")
    if n_bins is None:
        n_bins = freedman_diaconis_bins(x, lo, hi)
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    density = counts / (x.size * np.diff(edges))
    return np.column_stack([0.5 * (edges[:-1] + edges[1:]), density])


# -- Bihill model ------------------------------------------------------------


@dataclass(frozen=True)
class BihillParams:
    k_norm: float
    a1: float
    m1: float
    a2: float
    m2: float
    residual: float = 0.0
    n_points: int = 0
    restarts_used: int = 0
    model: str = "composite_bihill"

    def __post_init__(self):
        for name in ("k_norm", "a1", "m1", "a2", "m2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    def as_dict(self) -> dict:
        return {
            "model": self.model,
            "k_norm": self.k_norm,
            "a1": self.a1,
            "m1": self.m1,
            "a2": self.a2,
            "m2": self.m2,
            "residual": self.residual,
            "n_points": self.n_points,
            "restarts_used": self.restarts_used,
        }


def bihill(t, p: BihillParams):
    """Rise-then-decay transition ``1 / ((1 + (a1/t)^m1) (1 + (t/a2)^m2))``."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("bihill is defined for t > 0 only")
    out = _bihill_raw(t, p.a1, p.m1, p.a2, p.m2)
    return float(out) if out.ndim == 0 else out


def _bihill_raw(t, a1, m1, a2, m2):
    # exp/log form avoids overflow of (a1/t)^m1 for tiny t
    rise = np.exp(-np.logaddexp(0.0, m1 * np.log(a1 / t)))
    decay = np.exp(-np.logaddexp(0.0, m2 * np.log(t / a2)))
    return rise * decay


def composite_density(t, p: BihillParams, alpha: float, period_hours: float = HOURS_PER_DAY):
    return p.k_norm * trend(t, alpha, period_hours) * bihill(t, p)


class FitError(RuntimeError):
    def __init__(self, message: str, best: BihillParams):
        super().__init__(message)
        self.best = best


def _mass(t: np.ndarray, f: np.ndarray) -> float:
    if t.size < 2:
        return float(f.sum())
    # bin-width weights: half-way points between centers, end bins mirrored
    mids = 0.5 * (t[1:] + t[:-1])
    lo = max(0.0, t[0] - (mids[0] - t[0]))
    hi = t[-1] + (t[-1] - mids[-1])
    widths = np.diff(np.concatenate([[lo], mids, [hi]]))
    return float(np.sum(f * widths))


def _support_grid(hi: float) -> np.ndarray:
    lin = np.linspace(0.0, hi, 8001)[1:]
    geo = np.geomspace(hi * 1e-7, hi, 2001)
    return np.unique(np.concatenate([geo, lin]))


def _weighted_quantile(t: np.ndarray, w: np.ndarray, q: float) -> float:
    c = np.cumsum(np.clip(w, 0, None))
    if c[-1] <= 0:
        return float(np.quantile(t, q))
    return float(np.interp(q * c[-1], c, t))


def fit_bihill(
    density,
    alpha: float,
    period_hours: float = HOURS_PER_DAY,
    span_hours: float | None = None,
    restarts: int = 5,
    seed: int = 0,
    maxiter: int = 4000,
    callback=None,
) -> BihillParams:
    """Least-squares fit of ``K m(t) H(t)`` to ``(t, f)`` density points.

    The shape parameters are optimized in log space by Nelder-Mead, with
    ``a2 = a1 + exp(.)`` so the rise knot always precedes the decay knot.
    ``K`` normalizes the model to the data's mass on ``(0, span]``.  The
    first run starts from quantile-based knots; later runs restart from
    jittered copies of the best point so far.
    """
    pts = np.asarray(density, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("density must be an array of (t, f) rows")
    pts = pts[np.argsort(pts[:, 0])]
    t, f = pts[:, 0], pts[:, 1]
    if t.size < 8:
        raise ValueError(f"need at least 8 density points, got {t.size}")
    if np.any(t <= 0):
        raise ValueError("density abscissae must be > 0")
    mode = int(np.argmax(f))
    if mode == 0 or mode == t.size - 1:
        raise ValueError("need density points on both sides of the mode")
    if span_hours is None:
        span_hours = float(t[-1] + 0.5 * (t[-1] - t[-2]))
    mass = _mass(t, f)
    if not mass > 0:
        raise ValueError("density has no mass")
    grid = _support_grid(span_hours)
    m_grid = trend(grid, alpha, period_hours)
    m_pts = trend(t, alpha, period_hours)

    def unpack(z):
        a1 = math.exp(z[0])
        return a1, math.exp(z[1]), a1 + math.exp(z[2]), math.exp(z[3])

    def k_of(a1, m1, a2, m2):
        integral = trapezoid(m_grid * _bihill_raw(grid, a1, m1, a2, m2), grid)
        return mass / integral if integral > 0 else math.inf

    def objective(z):
        shape = unpack(z)
        k = k_of(*shape)
        if not math.isfinite(k):
            return 1e300
        r = f - k * m_pts * _bihill_raw(t, *shape)
        return float(r @ r)

    a1 = max(_weighted_quantile(t, f, 0.25), 1e-9)
    a2 = max(_weighted_quantile(t, f, 0.90), a1 * 1.01)
    z0 = np.log([a1, 2.0, a2 - a1, 2.0])
    lo_t, hi_t = math.log(t[0] * 1e-3), math.log(span_hours * 1e3)
    bounds = [(lo_t, hi_t), (math.log(0.05), math.log(60.0)), (lo_t, hi_t), (math.log(0.05), math.log(60.0))]
    lower, upper = np.array(bounds).T
    z0 = np.clip(z0, lower, upper)

    rng = np.random.default_rng(seed)
    best_z, best_val = z0, objective(z0)
    converged = False
    used = 0
    for r in range(restarts):
        start = z0 if r == 0 else np.clip(best_z + rng.normal(0.0, 0.3, size=4), lower, upper)
        res = minimize(
            objective, start, method="Nelder-Mead", bounds=bounds, callback=callback,
            options={"maxiter": maxiter, "xatol": 1e-9, "fatol": 1e-15 * max(1.0, float(f @ f)), "adaptive": True},
        )
        used += 1
        converged |= bool(res.success)
        if res.fun < best_val:
            best_z, best_val = res.x, float(res.fun)
    shape = unpack(best_z)
    out = BihillParams(
        k_norm=k_of(*shape), a1=shape[0], m1=shape[1], a2=shape[2], m2=shape[3],
        residual=best_val, n_points=int(t.size), restarts_used=used,
        model="composite_bihill" if alpha > 0 else "bihill",
    )
    if not converged:
        raise FitError(f"Nelder-Mead did not converge in {restarts} restarts", out)
    return out


# -- tails -------------------------------------------------------------------


@dataclass(frozen=True)
class TailReport:
    n: int
    mean: float
    median: float
    skewness: float
    mean_over_median: float
    p99_over_p50: float
    heavy_tail: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def tail_stats(ens, min_samples: int = 100) -> TailReport:
    x = ens.observed if isinstance(ens, FptEnsemble) else np.asarray(ens, dtype=float)
    if x.size < min_samples:
        raise ValueError(f"need at least {min_samples} non-censored samples, got {x.size}")
    p50, p99 = np.percentile(x, [50, 99])
    skew = float(stats.skew(x)) if np.ptp(x) > 0 else 0.0
    ratio = float(p99 / p50)
    return TailReport(
        n=int(x.size),
        mean=float(x.mean()),
        median=float(p50),
        skewness=skew,
        mean_over_median=float(x.mean() / p50),
        p99_over_p50=ratio,
        heavy_tail=bool(ratio > 3 or skew > 1),
    )


def with_b0(params: BufferParams, b0: float) -> BufferParams:
    return replace(params, b0_dku=b0)
