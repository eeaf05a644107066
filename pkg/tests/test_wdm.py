import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oqkd import traffic, wdm
from oqkd.traffic import TrafficParams


def reference_quantum(n, nc):
    # guard-band rule re-derived: each classical channel after the first
    # removes itself plus one guard slot
    raw = n - 2 * nc + 1
    return min(n, max(0, raw))


class TestClassical:
    @pytest.mark.parametrize(
        "load,expected",
        [(10.2, (11, False)), (11.0, (11, False)), (95.3, (80, True)), (0.0, (0, False)), (80.0, (80, False))],
    )
    def test_examples(self, load, expected):
        assert wdm.classical_channels(load, 80) == expected

    @pytest.mark.parametrize("load", [-0.1, math.nan, math.inf])
    def test_rejects_bad_load(self, load):
        with pytest.raises(ValueError):
            wdm.classical_channels(load, 80)


class TestQuantum:
    @pytest.mark.parametrize("nc,expected", [(11, 59), (41, 0), (0, 80), (40, 1)])
    def test_examples(self, nc, expected):
        assert wdm.quantum_channels(80, nc) == expected

    def test_exhaustive_against_rederivation(self):
        for n in range(1, 101):
            for nc in range(n + 1):
                assert wdm.quantum_channels(n, nc) == reference_quantum(n, nc)

    def test_monotone(self):
        for n in range(1, 201):
            q = [wdm.quantum_channels(n, nc) for nc in range(n + 1)]
            assert all(a >= b for a, b in zip(q, q[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            wdm.quantum_channels(80, 81)

    def test_overflow_allocation(self):
        alloc = wdm.allocate(95.3, 80)
        assert alloc == wdm.ChannelAllocation(80, 0, True)

    @given(load=st.floats(0, 200), n=st.integers(1, 160))
    def test_array_matches_scalar(self, load, n):
        nc, nq, over = wdm.allocate_array(np.array([load]), n)
        alloc = wdm.allocate(load, n)
        assert (nc[0], nq[0], bool(over[0])) == (alloc.n_classical, alloc.n_quantum, alloc.overflow)


class TestBounds:
    def test_no_load(self):
        assert wdm.quantum_bounds(TrafficParams(0, 0.3, 0.3), 80, 5.0, 1.2) == (79.0, 81.0)

    def test_flat(self):
        assert wdm.quantum_bounds(TrafficParams(20, 0, 0), 80, 0.0, 0.0) == (39.0, 41.0)

    def test_sandwich(self):
        rng = np.random.default_rng(123)
        n = 80
        p = rng.uniform(0, 40, 10**5)
        m = rng.uniform(0.1, 1.0, 10**5)
        nu = np.exp(rng.normal(0, 0.5, 10**5))
        load = p * m * nu
        keep = load <= n
        exact = n - 2 * np.ceil(load[keep]) + 1
        mid = n - 2 * load[keep]
        assert np.all(mid - 1 <= exact) and np.all(exact <= mid + 1)

    def test_expected_cat2(self):
        params = traffic.category_preset(2, 80)
        # t where the trend equals its daily mean 1 - alpha / 2
        t = 24 / math.pi * math.asin(math.sqrt(0.5))
        assert traffic.trend(t, params.alpha) == pytest.approx(0.925)
        lo, hi = wdm.expected_quantum(params, 80, t)
        assert hi == pytest.approx(81 - 32 * 0.925 * math.exp(0.0032), rel=1e-12)
        assert hi == pytest.approx(51.30, abs=0.01)
        assert hi - lo == pytest.approx(2.0)

    @given(t=st.floats(0, 48), x=st.floats(-3, 3))
    def test_expected_equals_bounds_without_noise(self, t, x):
        params = TrafficParams(16, 0.6, 0.0)
        assert wdm.expected_quantum(params, 80, t) == pytest.approx(wdm.quantum_bounds(params, 80, t, x))


class TestAvailability:
    def test_pointwise_relationship(self):
        tr = traffic.synthesize(traffic.category_preset(1, 80), 48, seed=4)
        nc, nq, _ = wdm.allocate_array(tr.load, 80)
        assert np.array_equal(nq, np.maximum(0, np.minimum(80, 80 - 2 * nc + 1)))

    def test_stats_consistent(self):
        tr = traffic.synthesize(traffic.category_preset(3, 80), 72, seed=2)
        stats = wdm.availability_stats(tr, wdm.WdmConfig())
        nc, nq, over = wdm.allocate_array(tr.load, 80)
        assert stats.mean_quantum_channels == pytest.approx(nq.mean(), rel=1e-12)
        assert stats.utilization_percent == pytest.approx(100 * nq.mean() / 80)
        assert stats.quantum_histogram[:, 1].sum() == pytest.approx(1.0)
        assert stats.classical_histogram[:, 1].sum() == pytest.approx(1.0)
        assert stats.outage_fraction == pytest.approx(np.mean(nq == 0))
        assert stats.overflow_fraction == pytest.approx(over.mean())
        assert stats.n_samples == len(tr)

    def test_clamp_counted_only_outside_range(self):
        load = np.array([0.0, 0.0, 10.5, 45.0, 100.0])
        counts = wdm.allocation_counts(load, 80)
        # N_C = 0 gives 81 and N_C >= 41 gives negatives
        assert counts.clamped == 4
        assert counts.overflow == 1

    def test_pooling_is_order_free(self):
        params = traffic.category_preset(1, 80)
        traces = [traffic.synthesize(params, 24, seed=s) for s in range(4)]
        a = wdm.availability_stats(traces, wdm.WdmConfig())
        b = wdm.availability_stats(traces[::-1], wdm.WdmConfig())
        assert a.mean_quantum_channels == b.mean_quantum_channels
        assert np.array_equal(a.quantum_histogram, b.quantum_histogram)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            wdm.availability_stats([], wdm.WdmConfig())

    @pytest.mark.parametrize("cat,target", [(1, 36.22), (2, 50.25), (3, 51.81)])
    def test_table_short_run(self, cat, target):
        # short version of the full reproduction in the acceptance suite
        params = traffic.category_preset(cat, 80)
        traces = [traffic.synthesize(params, 20 * 24, seed=s) for s in range(3)]
        stats = wdm.availability_stats(traces, wdm.WdmConfig())
        assert abs(stats.mean_quantum_channels - target) < 3.0

    @pytest.mark.parametrize("kwargs", [dict(n_channels=0), dict(n_channels=2.5), dict(key_rate_dku_per_day=0)])
    def test_config_invalid(self, kwargs):
        with pytest.raises(ValueError):
            wdm.WdmConfig(**kwargs)
