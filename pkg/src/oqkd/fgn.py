"""Fractional Gaussian noise: exact autocovariance, generation, and QA.

Samples are standardized (unit marginal variance) and one lag equals one
simulation grid step.  Generation uses circulant embedding of the
autocovariance (Davies-Harte) and falls back to the exact sequential
Durbin-Levinson recursion when the embedded spectrum is not
non-negative.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "FgnMethod",
    "FgnSequence",
    "ValidationReport",
    "autocov",
    "autocov_array",
    "check_hurst",
    "generate",
    "validate",
]

# Relative magnitude below which negative embedded eigenvalues are treated
# as round-off and clipped to zero.
CLIP_RTOL = 1e-12


class FgnMethod(enum.Enum):
    CIRCULANT_EMBEDDING = "circulant_embedding"
    HOSKING = "hosking"


def check_hurst(h: float) -> float:
    h = float(h)
    if not (0.5 <= h < 1.0):
        raise ValueError(f"hurst must be in [0.5, 1), got {h}")
    return h


def autocov(h: float, lag: int) -> float:
    """Autocovariance of unit-variance fGn at an integer lag.

    ``gamma(k) = 0.5 * (|k+1|^2H - 2|k|^2H + |k-1|^2H)``; symmetric in ``k``
    and exactly 1 at ``k = 0``.
    """
    k = abs(int(lag))
    if k == 0:
        return 1.0
    two_h = 2.0 * h
    return 0.5 * ((k + 1) ** two_h - 2.0 * k ** two_h + (k - 1) ** two_h)


def autocov_array(h: float, n_lags: int) -> np.ndarray:
    """Vectorized ``autocov`` for lags ``0 .. n_lags - 1``."""
    k = np.arange(n_lags, dtype=float)
    two_h = 2.0 * h
    out = 0.5 * ((k + 1.0) ** two_h - 2.0 * k ** two_h + np.abs(k - 1.0) ** two_h)
    if n_lags:
        out[0] = 1.0
    return out


@dataclass(frozen=True)
class FgnSequence:
    samples: np.ndarray
    hurst: float
    seed: int
    method: FgnMethod

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D array")
        self.samples.setflags(write=False)

    def __len__(self) -> int:
        return self.samples.size


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


@lru_cache(maxsize=32)
def _embedding_sqrt_eigs(h: float, m: int) -> np.ndarray | None:
    """sqrt(eigenvalues / 2m) of the circulant embedding of size 2m, or
    None when the embedding is not non-negative definite."""
    gamma = autocov_array(h, m + 1)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eigs = np.fft.fft(row).real
    lo = eigs.min()
    if lo < 0:
        if -lo >= CLIP_RTOL * eigs.max():
            return None
        eigs = np.clip(eigs, 0.0, None)
    out = np.sqrt(eigs / row.size)
    out.setflags(write=False)
    return out


def _circulant(h: float, n: int, rng: np.random.Generator) -> np.ndarray | None:
    m = _next_pow2(max(n, 2))
    scale = _embedding_sqrt_eigs(h, m)
    if scale is None:
        return None
    z = rng.standard_normal(2 * m) + 1j * rng.standard_normal(2 * m)
    return np.fft.fft(scale * z).real[:n]


def _hosking(h: float, n: int, rng: np.random.Generator) -> np.ndarray:
    # Durbin-Levinson: exact conditional mean/variance, O(n^2).
    gamma = autocov_array(h, n + 1)
    z = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = z[0]
    phi = np.zeros(0)
    v = 1.0
    for k in range(1, n):
        # update partial autocorrelation coefficients for order k
        kappa = (gamma[k] - phi @ gamma[k - 1:0:-1]) / v if k > 1 else gamma[1]
        phi = np.concatenate([phi - kappa * phi[::-1], [kappa]])
        v *= 1.0 - kappa * kappa
        x[k] = phi @ x[k - 1::-1] + np.sqrt(v) * z[k]
    return x


def generate(h: float, n: int, seed: int, method: FgnMethod | None = None) -> FgnSequence:
    """Draw ``n`` unit-variance fGn samples.

    Identical ``(h, n, seed)`` gives bit-identical output.  ``method`` forces
    an algorithm; by default circulant embedding is tried first.
    """
    h = check_hurst(h)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    samples = None
    used = FgnMethod.HOSKING
    if method in (None, FgnMethod.CIRCULANT_EMBEDDING):
        samples = _circulant(h, n, rng)
        if samples is not None:
            used = FgnMethod.CIRCULANT_EMBEDDING
        elif method is FgnMethod.CIRCULANT_EMBEDDING:
            raise ValueError("circulant embedding is not non-negative definite")
    if samples is None:
        samples = _hosking(h, n, rng)
    return FgnSequence(samples=samples, hurst=h, seed=int(seed), method=used)


@dataclass(frozen=True)
class ValidationReport:
    mean: float
    variance: float
    autocorrelations: np.ndarray = field(repr=False)
    hurst_estimate: float
    block_sizes: np.ndarray = field(repr=False)
    block_variances: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {
            "mean": self.mean,
            "variance": self.variance,
            "hurst_estimate": self.hurst_estimate,
            "autocorrelation": {str(k): float(v) for k, v in enumerate(self.autocorrelations)},
        }


def aggregated_variance_hurst(x: np.ndarray, min_blocks: int = 64) -> tuple[float, np.ndarray, np.ndarray]:
    """Aggregated-variance Hurst estimate over dyadic block sizes.

    The variance of block means scales as ``m^(2H-2)``; H is recovered from
    the least-squares log-log slope.  Block sizes stop once fewer than
    ``min_blocks`` blocks remain.
    """
    n = x.size
    sizes, variances = [], []
    m = 1
    while n // m >= min_blocks:
        k = n // m
        means = x[: k * m].reshape(k, m).mean(axis=1)
        sizes.append(m)
        variances.append(means.var(ddof=1))
        m *= 2
    sizes = np.asarray(sizes, dtype=float)
    variances = np.asarray(variances)
    if sizes.size < 3 or np.any(variances <= 0):
        raise ValueError("not enough usable block sizes for a Hurst estimate")
    slope = np.polyfit(np.log(sizes), np.log(variances), 1)[0]
    return 1.0 + slope / 2.0, sizes, variances


def validate(seq: FgnSequence | np.ndarray, max_lag: int) -> ValidationReport:
    x = np.asarray(seq.samples if isinstance(seq, FgnSequence) else seq, dtype=float)
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    need = 10 * max_lag
    if x.size < need:
        raise ValueError(f"sequence too short: need at least {need} samples, got {x.size}")
    var = x.var()
    if not var > 0:
        raise ValueError("degenerate sequence: zero sample variance")
    xc = x - x.mean()
    n = x.size
    acf = np.array([xc[: n - k] @ xc[k:] / n for k in range(max_lag + 1)]) / var
    hurst, sizes, variances = aggregated_variance_hurst(x)
    return ValidationReport(
        mean=float(x.mean()),
        variance=float(var),
        autocorrelations=acf,
        hurst_estimate=float(hurst),
        block_sizes=sizes,
        block_variances=variances,
    )
