import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from oqkd import fpt, traffic
from oqkd.buffer import BufferParams, ConsumptionMode
from oqkd.fpt import BihillParams
from oqkd.traffic import TrafficParams

DT = 1 / 60


def preset(cat, b0=1.0):
    return BufferParams(b0, traffic.category_preset(cat, 80))


def synthetic_density(p, t, alpha=0.0, noise=0.01, seed=0):
    f = fpt.composite_density(t, p, alpha)
    rng = np.random.default_rng(seed)
    return np.column_stack([t, f * (1 + noise * rng.standard_normal(t.size))])


TRUE = BihillParams(k_norm=1.0, a1=2.0, m1=3.0, a2=10.0, m2=2.0)


def normalized_truth(span):
    k = 1.0 / integrate.quad(lambda s: fpt.bihill(s, TRUE), 0, span, limit=200)[0]
    return BihillParams(k, TRUE.a1, TRUE.m1, TRUE.a2, TRUE.m2)


class TestEnsemble:
    def test_no_drift_all_censored(self):
        params = BufferParams(1.0, TrafficParams(16, 0.0, 0.0))
        ens = fpt.run_ensemble(params, 20, 24.0)
        assert ens.censored.all()
        assert np.all(ens.samples_hours == 24.0)

    def test_deterministic_drain(self):
        params = BufferParams(
            1.5, TrafficParams(16, 0.0, 0.0),
            consumption_mode=ConsumptionMode.FIXED, fixed_rate_dku_per_hour=5.0,
        )
        gen = (81 - 32) / 24
        ens = fpt.run_ensemble(params, 30, 24.0)
        assert not ens.censored.any()
        assert np.all(np.abs(ens.samples_hours - 1.5 / (5.0 - gen)) <= DT)

    def test_worker_count_irrelevant(self):
        params = preset(1)
        a = fpt.run_ensemble(params, 10_000, 24.0, master_seed=5, workers=1)
        b = fpt.run_ensemble(params, 10_000, 24.0, master_seed=5, workers=8)
        assert np.array_equal(a.samples_hours, b.samples_hours)
        assert np.array_equal(a.censored, b.censored)

    def test_censoring_monotone_in_b0(self):
        low = fpt.run_ensemble(preset(3, 0.5), 300, 72.0, master_seed=2)
        high = fpt.run_ensemble(preset(3, 1.0), 300, 72.0, master_seed=2)
        assert np.all(high.samples_hours >= low.samples_hours)
        assert high.censored.sum() >= low.censored.sum()

    def test_rejects_no_trials(self):
        with pytest.raises(ValueError):
            fpt.run_ensemble(preset(1), 0, 24.0)


class TestHistogram:
    def test_identical_samples(self):
        dens = fpt.histogram_density(np.full(1000, 0.73), 10, (0.0, 2.0))
        nonzero = dens[dens[:, 1] > 0]
        assert len(nonzero) == 1
        assert nonzero[0, 1] == pytest.approx(1 / 0.2)

    def test_uniform(self):
        x = np.random.default_rng(0).uniform(0, 1, 20_000)
        dens = fpt.histogram_density(x, 10, (0.0, 1.0))
        per_bin = x.size / 10
        assert np.all(np.abs(dens[:, 1] - 1) < 4 / math.sqrt(per_bin))

    @given(
        x=st.lists(st.floats(0.01, 500), min_size=2, max_size=300),
        bins=st.one_of(st.none(), st.integers(1, 80)),
    )
    @settings(max_examples=60)
    def test_integrates_to_one(self, x, bins):
        dens = fpt.histogram_density(np.array(x), bins)
        width = dens[1, 0] - dens[0, 0] if len(dens) > 1 else 2 * dens[0, 0]
        assert dens[:, 1].sum() * width == pytest.approx(1.0, rel=1e-9)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            fpt.histogram_density(np.array([1.0]), 5, (0.0, 2.0))


class TestBihill:
    def test_quarter_at_knot(self):
        p = BihillParams(1.0, 3.0, 2.5, 3.0, 2.5)
        assert fpt.bihill(3.0, p) == pytest.approx(0.25)
        assert fpt.composite_density(3.0, BihillParams(0.7, 3.0, 2.5, 3.0, 2.5), 0.0) == pytest.approx(0.7 / 4)

    def test_limits(self):
        assert fpt.bihill(1e-12, TRUE) < 1e-30
        assert fpt.bihill(1e12, TRUE) < 1e-20

    def test_domain(self):
        with pytest.raises(ValueError):
            fpt.bihill(0.0, TRUE)

    @given(
        a1=st.floats(0.01, 100), m1=st.floats(0.1, 20), gap=st.floats(0.0, 100), m2=st.floats(0.1, 20),
    )
    @settings(max_examples=200)
    def test_unimodal(self, a1, m1, gap, m2):
        p = BihillParams(1.0, a1, m1, a1 + gap, m2)
        t = np.geomspace(1e-4, 1e5, 10_000)
        h = fpt.bihill(t, p)
        d = np.diff(h)
        # differences at round-off level on the plateau carry no sign information
        s = np.sign(d[np.abs(d) > 1e-12 * h.max()])
        assert np.count_nonzero(s[1:] != s[:-1]) <= 1

    def test_pure_when_flat(self):
        t = np.linspace(0.5, 30, 40)
        assert np.allclose(fpt.composite_density(t, TRUE, 0.0), fpt.bihill(t, TRUE))


class TestFit:
    def test_round_trip(self):
        span = 40.125
        truth = normalized_truth(span)
        t = np.linspace(0.25, 40, 80)
        fit = fpt.fit_bihill(synthetic_density(truth, t), 0.0, span_hours=span)
        for name in ("a1", "m1", "a2", "m2"):
            assert getattr(fit, name) == pytest.approx(getattr(truth, name), rel=0.10)
        assert fit.model == "bihill"
        assert fit.n_points == 80 and fit.restarts_used == 5

    def test_round_trip_with_trend(self):
        span = 48.0
        shape = BihillParams(1.0, 3.0, 2.5, 14.0, 2.0)
        m = lambda s: traffic.trend(s, 0.6)
        k = 1.0 / integrate.quad(lambda s: m(s) * fpt.bihill(s, shape), 0, span, limit=200)[0]
        truth = BihillParams(k, 3.0, 2.5, 14.0, 2.0)
        t = np.linspace(0.3, 47.7, 80)
        fit = fpt.fit_bihill(synthetic_density(truth, t, alpha=0.6, seed=1), 0.6, span_hours=span)
        assert fit.model == "composite_bihill"
        for name in ("a1", "m1", "a2", "m2"):
            assert getattr(fit, name) == pytest.approx(getattr(truth, name), rel=0.10)

    def test_normalization(self):
        ens = fpt.run_ensemble(preset(3, 2.0), 800, 21 * 24.0, master_seed=1)
        dens = fpt.histogram_density(ens.samples_hours[~ens.censored], 252, (0.0, ens.max_span_hours))
        target = dens[:, 1].sum() * (dens[1, 0] - dens[0, 0])
        fit = fpt.fit_bihill(dens, 0.6, span_hours=ens.max_span_hours)
        integral = integrate.quad(
            lambda s: fpt.composite_density(s, fit, 0.6), 0, ens.max_span_hours, limit=500, points=[fit.a1, fit.a2]
        )[0]
        assert integral == pytest.approx(target, abs=1e-3)

    def test_noise_only(self):
        rng = np.random.default_rng(4)
        t = np.linspace(0.5, 50, 60)
        f = rng.uniform(0, 1, t.size)
        f[0], f[-1], f[30] = 0.1, 0.1, 2.0
        try:
            fit = fpt.fit_bihill(np.column_stack([t, f]), 0.3)
        except fpt.FitError as exc:
            fit = exc.best
        assert math.isfinite(fit.residual) and fit.residual > 0

    def test_objective_never_increases(self):
        span = 40.125
        truth = normalized_truth(span)
        t = np.linspace(0.25, 40, 80)
        seen = []

        def record(intermediate_result):
            seen.append(intermediate_result.fun)

        fit = fpt.fit_bihill(synthetic_density(truth, t), 0.0, span_hours=span, restarts=1, callback=record)
        assert len(seen) > 10
        assert all(b <= a for a, b in zip(seen, seen[1:]))
        assert fit.residual <= seen[0]

    def test_restarts_never_worse(self):
        truth = normalized_truth(40.125)
        data = synthetic_density(truth, np.linspace(0.25, 40, 80), noise=0.05)
        one = fpt.fit_bihill(data, 0.0, restarts=1)
        five = fpt.fit_bihill(data, 0.0, restarts=5)
        assert five.residual <= one.residual

    @pytest.mark.parametrize("rows", [5, 7])
    def test_too_few_points(self, rows):
        t = np.linspace(1, 10, rows)
        with pytest.raises(ValueError, match="at least 8"):
            fpt.fit_bihill(np.column_stack([t, np.exp(-t)]), 0.0)

    def test_mode_at_edge(self):
        t = np.linspace(1, 10, 20)
        with pytest.raises(ValueError, match="both sides"):
            fpt.fit_bihill(np.column_stack([t, np.exp(-t)]), 0.0)

    def test_report_fields(self):
        assert list(TRUE.as_dict()) == ["model", "k_norm", "a1", "m1", "a2", "m2", "residual", "n_points", "restarts_used"]


class TestTails:
    def test_exponential(self):
        x = np.random.default_rng(9).exponential(1.0, 200_000)
        rep = fpt.tail_stats(x)
        assert rep.skewness == pytest.approx(2.0, abs=0.1)
        assert rep.p99_over_p50 == pytest.approx(math.log(100) / math.log(2), rel=0.02)
        assert rep.heavy_tail

    def test_constant(self):
        rep = fpt.tail_stats(np.full(500, 3.0))
        assert rep.skewness == 0.0
        assert rep.p99_over_p50 == 1.0 and rep.mean_over_median == 1.0
        assert not rep.heavy_tail

    def test_minimum_samples(self):
        with pytest.raises(ValueError, match="at least 100"):
            fpt.tail_stats(np.ones(99))

    def test_cat3_ensemble_heavy(self):
        ens = fpt.run_ensemble(preset(3), 600, 14 * 24.0, master_seed=3)
        assert fpt.tail_stats(ens).heavy_tail
