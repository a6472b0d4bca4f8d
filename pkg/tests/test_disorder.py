import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from xxzloc.disorder import (DistributionSpec, MCEstimate, dynloc_expectation, event_probability, frac_moment_scan,
                             omega_matrix, reduce_samples, run_samples, sample_omega, single_config_probability,
                             wegner_scan)
from xxzloc.lattice import PreconditionError, Region
from xxzloc.operators import ModelParams, ParamError


class TestSampling:
    def test_bit_exact_repeat(self):
        lam = Region.chain(9)
        a = sample_omega(lam, None, 42, 7).omega
        b = sample_omega(lam, None, 42, 7).omega
        assert a == b

    def test_streams_and_seeds_differ(self):
        lam = Region.chain(5)
        base = sample_omega(lam, None, 1, 0).omega
        assert sample_omega(lam, None, 1, 1).omega != base
        assert sample_omega(lam, None, 2, 0).omega != base

    def test_site_value_independent_of_region(self):
        # the value on a site depends only on (seed, stream, site)
        big = sample_omega(Region.chain(10), None, 3, 5).omega
        small = sample_omega(Region([2, 7]), None, 3, 5).omega
        assert small[2] == big[2] and small[7] == big[7]

    def test_uniform_mean(self):
        vals = omega_matrix(Region.chain(100), None, 0, range(1000)).ravel()
        assert abs(vals.mean() - 0.5) < 0.003
        assert vals.min() >= 0 and vals.max() <= 1

    def test_matrix_matches_single_draws(self):
        lam = Region([0, 3, 4])
        mat = omega_matrix(lam, None, 9, [4, 5])
        for row, s in zip(mat, [4, 5]):
            assert np.array_equal(row, sample_omega(lam, None, 9, s).on(lam))


class TestCustomDensity:
    def test_cdf_inverse(self):
        d = DistributionSpec("custom_density", [0.0, 0.5, 1.0], [2.0, 1.0, 0.5])
        u = np.linspace(0, 1, 101)
        assert np.allclose(d.cdf(d.ppf(u)), u, atol=1e-12)

    def test_mean_matches_quadrature(self):
        xs, ps = [0.0, 0.3, 1.0], [1.0, 3.0, 0.5]
        d = DistributionSpec("custom_density", xs, ps)
        norm = integrate.quad(lambda x: np.interp(x, xs, ps), 0, 1, points=[0.3])[0]
        mean = integrate.quad(lambda x: x * np.interp(x, xs, ps), 0, 1, points=[0.3])[0] / norm
        assert d.mean == pytest.approx(mean, abs=1e-12)
        vals = omega_matrix(Region.chain(50), d, 0, range(400)).ravel()
        assert abs(vals.mean() - mean) < 4 * math.sqrt(1 / 12 / vals.size) * 2

    def test_rejects_bad_support(self):
        with pytest.raises((ParamError, PreconditionError)):
            DistributionSpec("custom_density", [0.0, 0.8], [1.0, 1.0])
        with pytest.raises((ParamError, PreconditionError)):
            DistributionSpec("custom_density", [0.0, 1.0], [1.0, -1.0])
        with pytest.raises((ParamError, PreconditionError)):
            # zero on [0.6, 1]: the support misses 1
            DistributionSpec("custom_density", [0.0, 0.5, 0.6, 1.0], [1.0, 0.0, 0.0, 0.0])

    def test_round_trip_dict(self):
        d = DistributionSpec("custom_density", [0.0, 1.0], [1.0, 2.0])
        assert DistributionSpec(**d.to_dict()).to_dict() == d.to_dict()


class TestReduction:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.randoms())
    def test_order_independent(self, vals, rnd):
        shuffled = list(vals)
        rnd.shuffle(shuffled)
        a, b = reduce_samples(vals, 0), reduce_samples(shuffled, 0)
        assert a.mean == b.mean
        assert a.standard_error == pytest.approx(b.standard_error, rel=1e-9, abs=1e-12)

    def test_matches_numpy(self):
        vals = np.random.default_rng(0).random(100)
        e = reduce_samples(vals, 0)
        assert e.mean == pytest.approx(vals.mean(), rel=1e-15)
        assert e.standard_error == pytest.approx(vals.std(ddof=1) / 10, rel=1e-12)

    def test_ci_and_empty(self):
        e = MCEstimate(1.0, 0.1, 10, 0)
        assert e.ci() == pytest.approx((1 - 0.196, 1 + 0.196))
        with pytest.raises(PreconditionError):
            reduce_samples([], 0)

    def test_pool_preserves_order(self):
        assert run_samples(abs, 7, workers=2) == [0, 1, 2, 3, 4, 5, 6]


class TestFractionalMoments:
    lam = Region.chain(8)
    p = ModelParams(8.0, 10.0)

    def test_infinite_rho_row_is_zero(self):
        lam = Region([0, 1, 2, 6, 7])
        _, ests = frac_moment_scan(lam, self.p, [1], [1, 5], 10, 0, fit=False)
        assert ests[1].mean == 0.0 and ests[1].flagged_sample_count == 0

    def test_deterministic_across_workers(self):
        _, a = frac_moment_scan(self.lam, self.p, [4], [1, 2], 12, 3, workers=1, fit=False)
        _, b = frac_moment_scan(self.lam, self.p, [4], [1, 2], 12, 3, workers=2, fit=False)
        assert [e.mean for e in a] == [e.mean for e in b]

    def test_decays_in_r(self):
        prof, ests = frac_moment_scan(self.lam, self.p, [4], [1, 2, 3], 30, 0)
        means = [e.mean for e in ests]
        assert means[0] > means[1] > means[2] > 0
        assert prof.rate > 0

    def test_stronger_disorder_does_not_increase_moment(self):
        _, weak = frac_moment_scan(self.lam, ModelParams(8.0, 1.0), [4], [3], 60, 0, fit=False)
        _, strong = frac_moment_scan(self.lam, ModelParams(8.0, 10.0), [4], [3], 60, 0, fit=False)
        assert strong[0].mean <= weak[0].mean + 2 * (strong[0].standard_error + weak[0].standard_error)

    def test_lambda_scaling_at_distance_zero(self):
        # HS moment at r = 0 scales roughly like lambda^-s when lambda doubles
        _, a = frac_moment_scan(self.lam, ModelParams(8.0, 10.0), [4], [0], 200, 0, dressing="hs_Q", fit=False)
        _, b = frac_moment_scan(self.lam, ModelParams(8.0, 20.0), [4], [0], 200, 0, dressing="hs_Q", fit=False)
        ratio = b[0].mean / a[0].mean
        assert 0.6 < ratio < 1.0


class TestEvents:
    def test_single_config_closed_form(self):
        assert single_config_probability(0.5) == 0.125
        est = event_probability(Region.chain(2), 1, 2, ModelParams(2.0, 1.0), 20000, 0)
        assert abs(est.mean - 0.125) < 4 * est.standard_error + 1e-3

    def test_threshold_unreachable_gives_one(self):
        # k g / lam >= N means every N-site configuration qualifies
        est = event_probability(Region.chain(6), 1, 2, ModelParams(2.0, 0.1), 200, 0)
        assert est.mean == 1.0

    def test_probability_bounded(self):
        est = event_probability(Region.chain(8), 1, 3, ModelParams(2.0, 4.0), 500, 1)
        assert 0 <= est.mean <= 1

    def test_bad_inputs(self):
        with pytest.raises(PreconditionError):
            event_probability(Region.chain(4), 1, 5, ModelParams(2.0), 10, 0)
        with pytest.raises(PreconditionError):
            event_probability(Region.chain(4), 0, 2, ModelParams(2.0), 10, 0)


class TestWegner:
    lam = Region.chain(6)

    def test_nested_windows_monotone_and_zero_width(self):
        tab = wegner_scan(self.lam, self.lam.sites, 1, 1.2, [0.0, 0.02, 0.08], [2.0], 200, 0, delta=8.0)
        p = [tab.estimates[(w, 2.0)].mean for w in (0.0, 0.02, 0.08)]
        assert p[0] == 0.0 and p[0] <= p[1] <= p[2] <= 1

    def test_window_must_stay_in_band(self):
        with pytest.raises(PreconditionError):
            wegner_scan(self.lam, self.lam.sites, 1, 0.85, [0.1], [1.0], 10, 0, delta=2.0)


class TestDynloc:
    def test_bounded_by_count_and_zero_beyond_component(self):
        lam = Region.chain(6)
        prof, ests, count = dynloc_expectation(lam, ModelParams(8.0, 10.0), [3], [1, 2, 6], 20, 0, fit=False)
        assert ests[2].mean == 0.0
        assert all(e.mean <= count.mean + 1e-12 for e in ests)
        assert prof is None
