import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avoinv.grf_fft import CorrelationSpec, GridSpec
from avoinv.model import (
    DEFAULT_NOISE,
    AVOObservation,
    DepthConfig,
    ForwardCoefficients,
    LatentState,
    MeanTrend,
    NoiseSpec,
    PriorConfig,
    ReservoirState,
    SaturationTransformer,
    SyntheticForward,
    adjusted_noise,
    covariates,
    log_likelihood,
    make_synthetic_problem,
    prior_log_constant,
    prior_log_density,
    sample_prior,
    sample_training_set,
    synthetic_forward,
    to_latent,
    to_reservoir,
)

from test_grf_fft import dense_torus_covariance

finite = st.floats(-30, 30, allow_nan=False)


def dense_avo_loglik(y, pred, noise):
    """2N x 2N Gaussian log-density with a Kronecker-structured covariance."""
    n = y.R0.size
    e = np.concatenate([y.R0 - pred.R0, y.G - pred.G])
    C = np.kron(noise.matrix, np.eye(n))
    sign, logdet = np.linalg.slogdet(2 * np.pi * C)
    return -0.5 * e @ np.linalg.solve(C, e) - 0.5 * logdet


class TestTransforms:
    def test_symmetric_point(self):
        r = to_reservoir(LatentState([0.0], [0.0], [0.0]))
        for s in (r.S_g, r.S_o, r.S_b):
            assert s[0] == pytest.approx(1 / 3, abs=1e-15)
        assert r.V_clay[0] == 0.5

    def test_large_logit_no_overflow(self):
        with np.errstate(over="raise"):
            r = to_reservoir(LatentState([50.0, 800.0], [0.0, -800.0], [900.0, -900.0]))
        assert abs(r.S_g[0] - 1) < 1e-15
        assert r.S_g[1] == 1.0 and np.isfinite(r.V_clay).all()

    @settings(max_examples=60, deadline=None)
    @given(arrays(float, (3, 7), elements=finite))
    def test_simplex(self, x):
        r = to_reservoir(LatentState.from_array(x))
        assert np.max(np.abs(r.S_g + r.S_o + r.S_b - 1)) < 1e-12
        assert all(np.all((q > 0) & (q < 1)) for q in (r.S_g, r.S_o, r.S_b))

    @settings(max_examples=60, deadline=None)
    @given(arrays(float, (2, 7), elements=finite), arrays(float, 7, elements=st.floats(-30, 12)))
    def test_round_trip(self, sat, clay):
        # V_clay close to 1 cannot carry 1 - V to relative precision, so large
        # positive clay logits lose digits; the saturation logits do not
        x = np.vstack([sat, clay])
        back = to_latent(to_reservoir(LatentState.from_array(x)))
        np.testing.assert_allclose(back.to_array(), x, rtol=0, atol=1e-10)

    def test_clay_round_trip_precision_limit(self):
        back = to_latent(to_reservoir(LatentState([0.0], [0.0], [26.0])))
        assert abs(back.x_clay[0] - 26.0) > 1e-10
        assert abs(back.x_clay[0] - 26.0) < 1e-3

    def test_round_trip_moderate(self, rng):
        x = rng.uniform(-10, 10, size=(3, 200))
        back = to_latent(to_reservoir(LatentState.from_array(x)))
        np.testing.assert_allclose(back.to_array(), x, atol=1e-10)

    def test_to_latent_examples(self):
        lat = to_latent(ReservoirState(np.array([1 / 3]), np.array([1 / 3]), np.array([1 / 3]), np.array([0.5])))
        assert lat.x_g[0] == pytest.approx(0, abs=1e-15)
        assert lat.x_o[0] == pytest.approx(0, abs=1e-15)
        assert lat.x_clay[0] == 0

    @pytest.mark.parametrize("bad", [0.0, 1.0])
    def test_to_latent_rejects_boundary(self, bad):
        with pytest.raises(ValueError):
            to_latent(ReservoirState(np.array([0.5]), np.array([0.25]), np.array([0.25]), np.array([bad])))

    def test_transformer_estimator(self, rng):
        X = rng.normal(size=(20, 3))
        t = SaturationTransformer().fit(X)
        R = t.transform(X)
        assert R.shape == (20, 4)
        np.testing.assert_allclose(t.inverse_transform(R), X, atol=1e-10)
        with pytest.raises(ValueError):
            t.transform(X[:, :2])

    def test_latent_fields_must_match(self):
        with pytest.raises(ValueError):
            LatentState([0.0, 1.0], [0.0], [0.0])


class TestSyntheticForward:
    def test_hand_evaluation(self):
        r0, g = synthetic_forward(0.0, 0.0, 0.0, 0.5)
        third = 1 / 3
        assert r0 == pytest.approx(0.02 - 0.12 * third - 0.06 * third + 0.08 * 0.25 + 0.05 * third * 0.5, abs=1e-15)
        assert g == pytest.approx(-0.05 + 0.2 * third + 0.1 * third - 0.12 * 0.5 - 0.08 * third * 0.5
                                  - 0.1 * third**2, abs=1e-15)
        assert r0 == pytest.approx(-0.011666666666666667, abs=1e-15)

    def test_tanh_term_vanishes_at_mid_depth(self):
        c = ForwardCoefficients((0, 0, 0, 0, 0, 1.0), (0,) * 6)
        assert synthetic_forward(1.3, -2.0, 0.4, 0.5, c) == (0.0, 0.0)

    def test_constant_configuration(self):
        c = ForwardCoefficients((0.7, 0, 0, 0, 0, 0), (-0.2, 0, 0, 0, 0, 0))
        assert synthetic_forward(3.0, -1.0, 2.0, 0.1, c) == (0.7, -0.2)

    def test_vectorised_matches_scalar(self, rng):
        X = np.column_stack([rng.normal(0, 3, (50, 3)), rng.uniform(0, 1, 50)])
        f = SyntheticForward()
        np.testing.assert_allclose(f(X), f.evaluate_pointwise(X), rtol=0, atol=1e-15)

    def test_coefficient_length_checked(self):
        with pytest.raises(ValueError):
            ForwardCoefficients((1.0,), (1.0,))


class TestLikelihood:
    def test_perfect_fit_one_cell(self):
        y = AVOObservation([0.1], [0.2])
        val = log_likelihood(y, y, DEFAULT_NOISE)
        assert DEFAULT_NOISE.det == pytest.approx(5.76e-5, rel=1e-12)
        assert val == pytest.approx(-math.log(2 * math.pi) - 0.5 * math.log(5.76e-5), abs=1e-12)

    def test_standard_normal_quadratic(self):
        noise = NoiseSpec(1.0, 1.0, 0.0)
        val = log_likelihood(AVOObservation([1.0], [0.0]), AVOObservation([0.0], [0.0]), noise)
        assert val + math.log(2 * math.pi) == pytest.approx(-0.5, abs=1e-15)

    def test_dense_oracle(self, rng):
        n = 12
        y = AVOObservation(rng.normal(size=n), rng.normal(size=n))
        p = AVOObservation(rng.normal(size=n), rng.normal(size=n))
        noise = NoiseSpec(0.7, 1.9, 0.35)
        assert abs(log_likelihood(y, p, noise) - dense_avo_loglik(y, p, noise)) < 1e-8

    def test_decomposes_over_cells(self, rng):
        n = 30
        y = AVOObservation(rng.normal(size=n), rng.normal(size=n))
        p = AVOObservation(rng.normal(size=n), rng.normal(size=n))
        total = log_likelihood(y, p, DEFAULT_NOISE)
        parts = sum(log_likelihood(AVOObservation([y.R0[i]], [y.G[i]]), AVOObservation([p.R0[i]], [p.G[i]]),
                                   DEFAULT_NOISE) for i in range(n))
        assert abs(total - parts) < 1e-9

    def test_rejects_singular_noise(self):
        y = AVOObservation([0.0], [0.0])
        with pytest.raises(ValueError):
            log_likelihood(y, y, NoiseSpec(1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            NoiseSpec(1.0, 1.0, 1.5)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            log_likelihood(AVOObservation([0.0], [0.0]), AVOObservation([0.0, 1.0], [0.0, 1.0]), DEFAULT_NOISE)


class TestAdjustedNoise:
    def test_zero_residuals_identity(self):
        out = adjusted_noise(DEFAULT_NOISE, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(out.matrix, DEFAULT_NOISE.matrix, atol=1e-15)

    def test_hand_example(self):
        base = NoiseSpec(1.0, 2.0, 0.0)
        out = adjusted_noise(base, [1.0, -1.0], [1.0, 1.0])
        np.testing.assert_allclose(out.matrix, [[2.0, 0.0], [0.0, 3.0]], atol=1e-15)

    def test_perfectly_correlated(self):
        c = 0.3
        out = adjusted_noise(DEFAULT_NOISE, [c, c], [c, c])
        np.testing.assert_allclose(out.matrix - DEFAULT_NOISE.matrix, c * c, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, (2, 9), elements=st.floats(-1, 1)))
    def test_never_decreases_variances(self, r):
        out = adjusted_noise(DEFAULT_NOISE, r[0], r[1])
        assert out.var_r0 >= DEFAULT_NOISE.var_r0 and out.var_g >= DEFAULT_NOISE.var_g
        assert out.is_positive_definite

    def test_short_or_mismatched(self):
        with pytest.raises(ValueError):
            adjusted_noise(DEFAULT_NOISE, [1.0], [1.0])
        with pytest.raises(ValueError):
            adjusted_noise(DEFAULT_NOISE, [1.0, 2.0], [1.0])


def _prior(grid, sigma=(1.0, 0.8, 1.2), rng_=(2.0, 1.5, 2.5)):
    depth = DepthConfig().build(grid)
    return PriorConfig(sigma, rng_).build(grid, depth)


class TestPrior:
    def test_zero_at_means(self):
        grid = GridSpec(5, 6)
        prior = _prior(grid)
        assert prior_log_density(prior.mean_state, prior, prior.build_bases()) == 0.0

    def test_dense_oracle(self, rng):
        grid = GridSpec(5, 6)
        prior = _prior(grid)
        bases = prior.build_bases()
        x = LatentState.from_array(prior.means + rng.normal(size=(3, grid.size)))
        got = prior_log_density(x, prior, bases) + prior_log_constant(bases)
        want = 0.0
        for k, c in enumerate(prior.correlations):
            C = dense_torus_covariance(grid, c)
            v = x.to_array()[k] - prior.means[k]
            want += -0.5 * v @ np.linalg.solve(C, v) - 0.5 * np.linalg.slogdet(2 * np.pi * C)[1]
        assert abs(got - want) < 1e-8

    def test_scaling_one_field_quadruples_its_term(self, rng):
        grid = GridSpec(5, 6)
        prior = _prior(grid)
        bases = prior.build_bases()
        dev = np.zeros((3, 30))
        dev[1] = rng.normal(size=30)
        q1 = prior_log_density(LatentState.from_array(prior.means + dev), prior, bases)
        q2 = prior_log_density(LatentState.from_array(prior.means + 2 * dev), prior, bases)
        assert q2 == pytest.approx(4 * q1, rel=1e-12)

    def test_tiny_sigma_returns_means(self, rng):
        grid = GridSpec(5, 6)
        prior = _prior(grid, sigma=(1e-12,) * 3)
        s = sample_prior(prior, prior.build_bases(), rng)
        np.testing.assert_allclose(s.to_array(), prior.means, atol=1e-10)

    def test_monte_carlo_moments_and_independence(self):
        grid = GridSpec(5, 6)
        prior = _prior(grid)
        bases = prior.build_bases()
        g = np.random.default_rng(7)
        draws = np.stack([sample_prior(prior, bases, g).to_array() for _ in range(10000)])
        se = np.array([c.sigma for c in prior.correlations])[:, None] / 100.0
        assert np.all(np.abs(draws.mean(0) - prior.means) < 3.5 * se)
        for a, b in ((0, 1), (0, 2), (1, 2)):
            r = np.corrcoef(draws[:, a, 5], draws[:, b, 5])[0, 1]
            assert abs(r) < 0.04


class TestDepthAndTrend:
    def test_ramp_in_bounds(self):
        d = DepthConfig(1000.0, 1100.0, 0.3).build(GridSpec(6, 7))
        n = d.normalized()
        assert n.min() >= 0 and n.max() <= 1
        assert n[0] == 0 and n[-1] == 1

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            DepthConfig(10.0, 5.0).build(GridSpec(2, 2))

    def test_default_trends(self):
        mu = PriorConfig().means(np.array([0.0, 1.0]))
        np.testing.assert_allclose(mu, [[1.0, -3.0], [0.5, -2.5], [-1.0, -1.0]])

    def test_trend_interpolates_and_clamps(self):
        t = MeanTrend(((1.0, 2.0), (0.0, 0.0)))
        np.testing.assert_allclose(t([-1.0, 0.25, 2.0]), [0.0, 0.5, 2.0])


class TestSyntheticProblem:
    def test_noiseless_data_equal_forward(self):
        grid = GridSpec(6, 6)
        cfg = PriorConfig(effective_range=(2.0, 2.0, 2.0))
        p = make_synthetic_problem(grid, DepthConfig(), cfg, NoiseSpec(0.0, 0.0, 0.0), np.random.default_rng(1))
        clean = SyntheticForward()(covariates(p.truth, p.depth.normalized()))
        assert np.array_equal(p.data.R0, clean[:, 0]) and np.array_equal(p.data.G, clean[:, 1])

    def test_deterministic(self):
        a = make_synthetic_problem(GridSpec(10, 10), DepthConfig(), PriorConfig(), DEFAULT_NOISE,
                                   np.random.default_rng(5))
        b = make_synthetic_problem(GridSpec(10, 10), DepthConfig(), PriorConfig(), DEFAULT_NOISE,
                                   np.random.default_rng(5))
        assert np.array_equal(a.truth.to_array(), b.truth.to_array())
        assert np.array_equal(a.data.R0, b.data.R0) and np.array_equal(a.data.G, b.data.G)

    def test_residual_variances(self):
        grid = GridSpec(40, 40)
        p = make_synthetic_problem(grid, DepthConfig(), PriorConfig(), DEFAULT_NOISE, np.random.default_rng(2))
        clean = SyntheticForward()(covariates(p.truth, p.depth.normalized()))
        e = np.column_stack([p.data.R0 - clean[:, 0], p.data.G - clean[:, 1]])
        C = np.cov(e.T)
        n = grid.size
        # variance of a sample variance is about 2 sigma^4 / n
        assert abs(C[0, 0] - 0.003) < 4 * 0.003 * math.sqrt(2 / n)
        assert abs(C[1, 1] - 0.03) < 4 * 0.03 * math.sqrt(2 / n)
        assert abs(np.corrcoef(e.T)[0, 1] + 0.6) < 0.06

    def test_training_set_shapes(self, rng):
        X, Y = sample_training_set(500, PriorConfig(), SyntheticForward(), rng)
        assert X.shape == (500, 4) and Y.shape == (500, 2)
        assert X[:, 3].min() >= 0 and X[:, 3].max() <= 1
        np.testing.assert_allclose(Y, SyntheticForward()(X))
