"""Quantum key buffer: Available/Recovery dynamics, variance, horizon, recovery.

Units: buffer levels in DKU (one channel-day of key), times in hours, rates
in DKU/h.  The per-channel key rate is ``WdmConfig.key_rate_dku_per_hour``.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import bisect

from . import fgn
from .traffic import TrafficParams, daily_mean_trend, n_steps, trend
from .wdm import WdmConfig, allocate_array

log = logging.getLogger(__name__)

DEFAULT_QUADRATURE_BUDGET = 10**8


class ConsumptionMode(enum.Enum):
    INSTANT_BALANCE = "instant-balance"
    CONSTANT_MEAN = "constant-mean"
    FIXED = "fixed"


class ChannelModel(enum.Enum):
    DISCRETE = "discrete"
    CONTINUOUS_LOWER = "cont-lower"
    CONTINUOUS_UPPER = "cont-upper"

    @property
    def offset(self) -> float:
        """Constant added to ``N - 2 p m nu`` by this model."""
        return {"discrete": 0.0, "cont-lower": -1.0, "cont-upper": 1.0}[self.value]


class BufferState(enum.Enum):
    AVAILABLE = "AVAILABLE"
    RECOVERY = "RECOVERY"


class Transition(enum.Enum):
    DEPLETED = "Depleted"
    RECOVERED = "Recovered"


class SaturationError(ValueError):
    """Recovery is impossible in the quasi-static approximation."""


class QuadratureBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class BufferParams:
    b0_dku: float
    traffic: TrafficParams
    config: WdmConfig = field(default_factory=WdmConfig)
    consumption_mode: ConsumptionMode = ConsumptionMode.INSTANT_BALANCE
    fixed_rate_dku_per_hour: float = 0.0
    channel_model: ChannelModel = ChannelModel.CONTINUOUS_UPPER
    start_phase_hours: float = 0.0

    def __post_init__(self):
        if not self.b0_dku >= 0:
            raise ValueError(f"b0_dku must be >= 0, got {self.b0_dku}")
        if not self.fixed_rate_dku_per_hour >= 0:
            raise ValueError("fixed consumption rate must be >= 0")

    @property
    def key_rate(self) -> float:
        return self.config.key_rate_dku_per_hour

    def modulation(self, t_hours):
        """K(t) = 2 p C_Q m(t), in DKU/h."""
        tr = self.traffic
        return 2.0 * tr.p * self.key_rate * trend(t_hours, tr.alpha, tr.period_hours)


def _balance_rate(params: BufferParams, m):
    tr = params.traffic
    ref = params.config.n_channels + params.channel_model.offset
    return params.key_rate * (ref - 2.0 * tr.p * m * tr.noise_mean)


def consumption_profile(params: BufferParams, t_hours) -> tuple[np.ndarray, np.ndarray]:
    """Consumption rates at the given times and a mask of samples where the
    balancing rate went negative and was clamped to zero."""
    t = np.asarray(t_hours, dtype=float)
    mode = params.consumption_mode
    if mode is ConsumptionMode.FIXED:
        return np.full(t.shape, params.fixed_rate_dku_per_hour), np.zeros(t.shape, bool)
    tr = params.traffic
    if mode is ConsumptionMode.INSTANT_BALANCE:
        raw = _balance_rate(params, trend(t, tr.alpha, tr.period_hours))
    else:
        raw = np.full(t.shape, _balance_rate(params, daily_mean_trend(tr.alpha)))
    raw = np.asarray(raw, dtype=float)
    saturated = raw < 0
    return np.where(saturated, 0.0, raw), saturated


def consumption_rate(params: BufferParams, t_hours: float) -> float:
    rate, saturated = consumption_profile(params, t_hours)
    if saturated.any():
        log.info("consumption clamped to 0 at t=%.4g h (saturated regime)", t_hours)
    return float(rate)


def quantum_channel_series(params: BufferParams, t_hours: np.ndarray, x: np.ndarray, clamp: bool = True) -> np.ndarray:
    """QKD channel count per sample for the buffer's channel model.

    The discrete model applies the guard-band allocation; the continuous
    models use the raw ceiling bounds, floored at zero when ``clamp``.
    """
    tr = params.traffic
    load = tr.p * trend(t_hours, tr.alpha, tr.period_hours) * np.exp(tr.sigma * x)
    n = params.config.n_channels
    if params.channel_model is ChannelModel.DISCRETE:
        return allocate_array(load, n)[1].astype(float)
    nq = n + params.channel_model.offset - 2.0 * load
    return np.maximum(nq, 0.0) if clamp else nq


@dataclass(frozen=True)
class BufferTrace:
    dt_hours: float
    start_hours: float
    b0_dku: float
    levels_dku: np.ndarray = field(repr=False)
    available: np.ndarray = field(repr=False)
    n_quantum: np.ndarray = field(repr=False)
    consumption: np.ndarray = field(repr=False)
    transitions: list = field(default_factory=list)
    saturated_steps: int = 0

    def __len__(self) -> int:
        return self.levels_dku.size

    @property
    def t_hours(self) -> np.ndarray:
        return self.start_hours + self.dt_hours * np.arange(self.levels_dku.size)

    @property
    def states(self) -> list[BufferState]:
        return [BufferState.AVAILABLE if a else BufferState.RECOVERY for a in self.available]


_CHUNK = 4096


def _first(mask: np.ndarray) -> int:
    i = int(np.argmax(mask))
    return i if mask[i] else -1


def simulate_buffer(
    params: BufferParams,
    duration_hours: float,
    dt_hours: float = 1.0 / 60.0,
    seed: int = 0,
    absorbing: bool = True,
) -> BufferTrace:
    """Explicit-Euler buffer evolution driven by one traffic realization.

    Row ``i`` holds the level at ``t_i`` and the channel count and
    consumption applied over ``[t_i, t_i + dt)``.  Continuous channel
    models are used unclamped while Available (the linear balance model)
    and floored at zero during Recovery, where only generation acts.  With
    ``absorbing=False`` the state machine and zero floor are disabled and
    the raw path is returned (for moment checks).
    """
    n = n_steps(duration_hours, dt_hours)
    if absorbing and not params.b0_dku > 0:
        raise ValueError("b0_dku must be > 0 to simulate the buffer")
    t = params.start_phase_hours + dt_hours * np.arange(n)
    x = fgn.generate(params.traffic.hurst, n, seed).samples
    nq = quantum_channel_series(params, t, x, clamp=False)
    gen = nq * params.key_rate
    gen_rec = np.maximum(gen, 0.0)
    cons, saturated = consumption_profile(params, t)
    b0 = float(params.b0_dku)

    if not absorbing:
        levels = np.cumsum(np.concatenate([[b0], dt_hours * (gen[:-1] - cons[:-1])]))
        available = np.ones(n, bool)
        return BufferTrace(dt_hours, params.start_phase_hours, b0, levels, available, nq, cons, [], int(saturated.sum()))

    levels = np.empty(n)
    available = np.empty(n, bool)
    levels[0], available[0] = b0, True
    transitions = []
    i, level, avail = 0, b0, True
    while i < n - 1:
        end = min(n - 1, i + _CHUNK)
        rate = gen[i:end] - cons[i:end] if avail else gen_rec[i:end]
        path = np.cumsum(np.concatenate([[level], dt_hours * rate]))[1:]
        k = _first(path <= 0.0) if avail else _first(path >= b0)
        if k < 0:
            levels[i + 1 : end + 1] = path
            available[i + 1 : end + 1] = avail
            i, level = end, path[-1]
            continue
        j = i + 1 + k
        levels[i + 1 : j] = path[:k]
        available[i + 1 : j] = avail
        level = 0.0 if avail else b0
        avail = not avail
        levels[j], available[j] = level, avail
        transitions.append((float(t[j]), Transition.RECOVERED if avail else Transition.DEPLETED))
        i = j
    cons = np.where(available, cons, 0.0)
    nq = np.where(available, nq, np.maximum(nq, 0.0))
    return BufferTrace(dt_hours, params.start_phase_hours, b0, levels, available, nq, cons, transitions, int(saturated.sum()))


def available_increments(params: BufferParams, x: np.ndarray, dt_hours: float) -> np.ndarray:
    """Per-step level change in the Available state for fGn values ``x``."""
    t = params.start_phase_hours + dt_hours * np.arange(x.size)
    gen = quantum_channel_series(params, t, x, clamp=False) * params.key_rate
    cons, _ = consumption_profile(params, t)
    return dt_hours * (gen - cons)


# -- variance quadrature -----------------------------------------------------


def _lag_kernel(params: BufferParams, n: int) -> np.ndarray:
    """exp(sigma^2 gamma_H(k)) - 1 for k = 0 .. n-1."""
    s2 = params.traffic.sigma ** 2
    return np.expm1(s2 * fgn.autocov_array(params.traffic.hurst, n))


class _VarianceRows:
    """Row contributions ``r_i = K_i (g_0 K_i + 2 sum_{j<i} K_j g_{i-j})``."""

    def __init__(self, params: BufferParams, dt_hours: float, n: int):
        self.k = params.modulation(params.start_phase_hours + dt_hours * np.arange(n))
        self.g_rev = _lag_kernel(params, n)[::-1].copy()
        self.n = n
        self.scale = math.exp(params.traffic.sigma ** 2) * dt_hours * dt_hours

    def row(self, i: int) -> float:
        k = self.k
        # g_rev[n-1-d] == g_d, so g_rev[n-i : n-1] runs over lags i..1
        cross = np.sum(k[:i] * self.g_rev[self.n - 1 - i : self.n - 1]) if i else 0.0
        return k[i] * (self.g_rev[-1] * k[i] + 2.0 * cross)

    def rows(self, lo: int, hi: int) -> np.ndarray:
        return np.array([self.row(i) for i in range(lo, hi)])


def variance_steps(params: BufferParams, dt_hours: float, n: int,
                   budget: int = DEFAULT_QUADRATURE_BUDGET, workers: int = 1) -> np.ndarray:
    """Buffer deviation variance at ``t_k = k dt`` for ``k = 0..n`` (DKU^2)."""
    if n * n > budget:
        raise QuadratureBudgetError(
            f"{n} grid steps need {n * n:.3g} kernel terms (budget {budget:.3g}); use a coarser grid or a shorter span"
        )
    out = np.zeros(n + 1)
    if n == 0 or params.traffic.sigma == 0 or params.traffic.p == 0:
        return out
    rows = _VarianceRows(params, dt_hours, n)
    if workers > 1 and n > 2048:
        edges = np.linspace(0, n, 4 * workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda ab: rows.rows(*ab), zip(edges[:-1], edges[1:])))
        r = np.concatenate(parts)
    else:
        r = rows.rows(0, n)
    out[1:] = rows.scale * np.cumsum(r)
    return out


def buffer_variance(params: BufferParams, t_grid_hours, dt_hours: float | None = None,
                    budget: int = DEFAULT_QUADRATURE_BUDGET, workers: int = 1) -> np.ndarray:
    """Variance of the zero-floor buffer at the requested times.

    Times must be non-negative multiples of the step ``dt_hours`` (inferred
    from the grid spacing when omitted); the double sum runs over lags in
    steps.
    """
    t = np.asarray(t_grid_hours, dtype=float)
    if t.ndim != 1 or t.size == 0 or t[0] < 0 or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid_hours must be increasing and start at >= 0")
    if dt_hours is None:
        steps = np.diff(np.concatenate([[0.0], t])) if t[0] > 0 else np.diff(t)
        if steps.size == 0:
            raise ValueError("cannot infer dt from a single time 0")
        dt_hours = float(steps[-1])
    idx = np.rint(t / dt_hours)
    if np.any(np.abs(idx * dt_hours - t) > 1e-9 * max(1.0, t[-1])):
        raise ValueError("grid times must be integer multiples of dt_hours")
    full = variance_steps(params, dt_hours, int(idx[-1]), budget, workers)
    return full[idx.astype(int)]


def mean_steps(params: BufferParams, dt_hours: float, n: int) -> np.ndarray:
    """Expected floor-free level at ``t_k = k dt``, ``k = 0..n``."""
    t = params.start_phase_hours + dt_hours * np.arange(n)
    tr = params.traffic
    ref = params.config.n_channels + params.channel_model.offset
    gen = params.key_rate * (ref - 2.0 * tr.p * trend(t, tr.alpha, tr.period_hours) * tr.noise_mean)
    cons, _ = consumption_profile(params, t)
    return params.b0_dku + np.concatenate([[0.0], np.cumsum(dt_hours * (gen - cons))])


@dataclass(frozen=True)
class HorizonResult:
    t0_hours: float
    variance_curve: np.ndarray = field(repr=False)
    exceeds_span: bool = False
    span_hours: float = math.inf

    def as_dict(self) -> dict:
        return {
            "t0_hours": self.t0_hours,
            "exceeds_span": self.exceeds_span,
            "span_hours": self.span_hours,
            "variance_at_t0": float(np.interp(self.t0_hours, *self.variance_curve.T)) if self.variance_curve.size else 0.0,
        }


def reliability_horizon(
    params: BufferParams,
    dt_hours: float = 1.0 / 60.0,
    max_span_hours: float = 6 * 24.0,
    budget: int = DEFAULT_QUADRATURE_BUDGET,
) -> HorizonResult:
    """First time the 3-sigma lower excursion of the buffer reaches zero.

    The grid is scanned until ``mean - 3 sd`` turns non-positive, then the
    root is refined by bisection on the piecewise-linear interpolants of
    mean and variance.
    """
    b0 = params.b0_dku
    if b0 == 0:
        return HorizonResult(0.0, np.zeros((1, 2)), False, max_span_hours)
    n_span = n_steps(max_span_hours, dt_hours)
    det = params.traffic.sigma == 0 or params.traffic.p == 0
    rows = None if det else _VarianceRows(params, dt_hours, n_span)
    mean = mean_steps(params, dt_hours, n_span)
    var = [0.0]
    acc = 0.0
    hit = -1
    for i in range(n_span):
        if rows is not None:
            if (i + 1) ** 2 > budget:
                raise QuadratureBudgetError(
                    f"horizon search passed {i} steps (budget {budget:.3g} terms); use a coarser grid"
                )
            acc += rows.row(i)
            var.append(rows.scale * acc)
        else:
            var.append(0.0)
        if mean[i + 1] - 3.0 * math.sqrt(var[-1]) <= 0.0:
            hit = i + 1
            break
    var = np.asarray(var)
    curve = np.column_stack([dt_hours * np.arange(var.size), var])
    if hit < 0:
        return HorizonResult(max_span_hours, curve, True, max_span_hours)

    m0, m1 = mean[hit - 1], mean[hit]
    v0, v1 = var[hit - 1], var[hit]

    def excess(u):
        return (m0 + u * (m1 - m0)) - 3.0 * math.sqrt(max(0.0, v0 + u * (v1 - v0)))

    if excess(0.0) <= 0.0:
        u = 0.0
    else:
        u = bisect(excess, 0.0, 1.0, xtol=1e-15, rtol=1e-10, maxiter=200)
    t0 = dt_hours * (hit - 1 + u)
    return HorizonResult(t0, curve, False, max_span_hours)


# -- recovery ----------------------------------------------------------------


def recovery_time(params: BufferParams, t_prime_hours: float, offset: float) -> float:
    """Quasi-static recovery time with ``N + offset`` reference channels."""
    tr = params.traffic
    m = trend(t_prime_hours, tr.alpha, tr.period_hours)
    denom = params.key_rate * (params.config.n_channels + offset - 2.0 * tr.p * m * tr.noise_mean)
    if params.b0_dku == 0:
        return 0.0
    if denom <= 0:
        raise SaturationError(f"no net key generation at t'={t_prime_hours:.4g} h (N{offset:+g} bound)")
    return params.b0_dku / denom


@dataclass(frozen=True)
class RecoveryResult:
    # tau_lower uses the N-1 (lower) channel bound and is the longer time.
    tau_lower_hours: float
    tau_upper_hours: float
    t_prime_hours: float

    def as_dict(self) -> dict:
        return {
            "tau_lower_hours": self.tau_lower_hours,
            "tau_upper_hours": self.tau_upper_hours,
            "t_prime_hours": self.t_prime_hours,
        }


def expected_recovery(params: BufferParams, t_prime_hours: float) -> RecoveryResult:
    return RecoveryResult(
        tau_lower_hours=recovery_time(params, t_prime_hours, -1.0),
        tau_upper_hours=recovery_time(params, t_prime_hours, +1.0),
        t_prime_hours=float(t_prime_hours),
    )


# -- cycle statistics --------------------------------------------------------


@dataclass(frozen=True)
class CycleStats:
    availability_fraction: float
    n_depletions: int
    n_recoveries: int
    mean_time_between_depletions_hours: float
    mean_recovery_hours: float
    depletions_per_day: float
    outage_product: float
    partial: bool
    recovery_durations: tuple = field(default=(), repr=False)
    depletion_times: tuple = field(default=(), repr=False)

    def as_dict(self) -> dict:
        return {
            "availability_fraction": self.availability_fraction,
            "n_depletions": self.n_depletions,
            "n_recoveries": self.n_recoveries,
            "mean_time_between_depletions_hours": self.mean_time_between_depletions_hours,
            "mean_recovery_hours": self.mean_recovery_hours,
            "depletions_per_day": self.depletions_per_day,
            "outage_product": self.outage_product,
            "partial": self.partial,
        }


def cycle_stats(trace: BufferTrace) -> CycleStats:
    """Availability and outage figures of merit from a simulated trace.

    ``partial`` is set when no complete Depleted -> Recovered cycle was
    observed; rates are then based on what was seen.
    """
    total = trace.dt_hours * len(trace)
    avail = float(np.mean(trace.available))
    depl = [t for t, d in trace.transitions if d is Transition.DEPLETED]
    durations = []
    pending = None
    for t, d in trace.transitions:
        if d is Transition.DEPLETED:
            pending = t
        elif pending is not None:
            durations.append(t - pending)
            pending = None
    per_day = len(depl) / (total / 24.0)
    mean_rec = float(np.mean(durations)) if durations else 0.0
    return CycleStats(
        availability_fraction=avail,
        n_depletions=len(depl),
        n_recoveries=len(durations),
        mean_time_between_depletions_hours=total / len(depl) if depl else math.inf,
        mean_recovery_hours=mean_rec,
        depletions_per_day=per_day,
        outage_product=per_day * mean_rec,
        partial=not durations,
        recovery_durations=tuple(durations),
        depletion_times=tuple(depl),
    )
