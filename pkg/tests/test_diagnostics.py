import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avoinv.diagnostics import (
    ConstantSeriesError,
    acf,
    ess,
    mean_ess,
    mse,
    posterior_maps,
    sample_correlation,
    series_stats,
    ternary_extract,
    write_map_csv,
    write_pgm,
    write_ternary_csv,
)
from avoinv.grf_fft import GridSpec
from avoinv.model import saturations


def ar1(phi, m, seed):
    g = np.random.default_rng(seed)
    e = g.standard_normal(m)
    x = np.empty(m)
    x[0] = e[0] / np.sqrt(1 - phi * phi)
    for t in range(1, m):
        x[t] = phi * x[t - 1] + e[t]
    return x


class TestCorrelationMse:
    def test_identities(self, rng):
        f = rng.normal(size=50)
        assert sample_correlation(f, f) == 1.0
        assert sample_correlation(f, -f) == -1.0
        assert sample_correlation([1, 2, 3], [2, 4, 6]) == 1.0
        assert mse(f, f) == 0.0

    def test_mse_hand_and_symmetry(self, rng):
        assert mse([0, 0], [1, -1]) == 1.0
        a, b = rng.normal(size=20), rng.normal(size=20)
        assert mse(a, b) == mse(b, a)

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_correlation([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            sample_correlation([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, 12, elements=st.floats(-100, 100)), st.floats(0.1, 10), st.floats(-5, 5))
    def test_correlation_bounded_and_affine_invariant(self, f, a, b):
        if np.ptp(f) < 1e-3:
            return
        g = np.cos(f)
        if np.ptp(g) < 1e-6:
            return
        c = sample_correlation(f, g)
        assert -1 <= c <= 1
        assert sample_correlation(a * f + b, g) == pytest.approx(c, abs=1e-9)


class TestAcf:
    def test_lag_zero_and_white_noise(self, rng):
        x = rng.normal(size=4000)
        r = acf(x, 50)
        assert r[0] == 1.0
        assert np.all(np.abs(r[1:]) < 3 / np.sqrt(4000))

    def test_alternating(self):
        x = (-1.0) ** np.arange(1000)
        r = acf(x, 3)
        assert r[1] == pytest.approx(-1.0, abs=2e-3)
        assert r[2] == pytest.approx(1.0, abs=3e-3)

    def test_matches_direct_biased_estimator(self, rng):
        x = rng.normal(size=200)
        d = x - x.mean()
        direct = np.array([d[:200 - k] @ d[k:] for k in range(20)]) / (d @ d)
        np.testing.assert_allclose(acf(x, 19), direct, atol=1e-12)

    def test_constant_and_bad_lag(self):
        with pytest.raises(ConstantSeriesError):
            acf(np.ones(20))
        with pytest.raises(ValueError):
            acf(np.arange(5.0), 5)


class TestEss:
    def test_white_noise(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        assert 0.9 <= ess(x) / x.size <= 1.1

    def test_ar1(self):
        m, phi = 100_000, 0.9
        rel = ess(ar1(phi, m, 1)) / m
        assert abs(rel / ((1 - phi) / (1 + phi)) - 1) < 0.25

    def test_affine_invariant_and_bounded(self, rng):
        x = ar1(0.5, 2000, 2)
        assert ess(3 * x - 7) == pytest.approx(ess(x), rel=1e-10)
        alt = (-1.0) ** np.arange(500) + 1e-3 * rng.normal(size=500)
        assert 0 < ess(alt) <= 500

    def test_short_and_constant(self):
        with pytest.raises(ValueError):
            ess(np.arange(5.0))
        with pytest.raises(ConstantSeriesError):
            ess(np.zeros(50))

    def test_series_stats(self, rng):
        x = rng.normal(size=300)
        s = series_stats(x, 10)
        assert s.acf.size == 11 and s.mean == pytest.approx(x.mean()) and s.variance == pytest.approx(x.var())


class TestMeanEss:
    def test_iid_chain(self):
        s = np.random.default_rng(3).normal(size=(2000, 3, 4))
        r = mean_ess(s)
        assert 0.85 < r.value / 2000 < 1.15 and not r.flagged

    def test_constant_coordinates_flagged(self, rng):
        s = rng.normal(size=(100, 3, 2))
        s[:, 1, 0] = 4.0
        r = mean_ess(s)
        assert r.flagged and r.n_constant == 1
        assert np.isnan(r.per_coordinate[2])
        assert r.value == pytest.approx(np.nanmean(r.per_coordinate))

    def test_all_constant(self):
        r = mean_ess(np.ones((20, 3, 2)))
        assert r.n_constant == 6 and np.isnan(r.value)

    def test_permutation_invariant(self, rng):
        s = np.cumsum(rng.normal(size=(300, 3, 5)), axis=0) * 0.1 + rng.normal(size=(300, 3, 5))
        perm = rng.permutation(5)
        assert mean_ess(s).value == pytest.approx(mean_ess(s[:, ::-1, perm]).value, rel=1e-12)


class TestMaps:
    def test_single_sample(self, rng):
        s = rng.normal(size=(1, 3, 6))
        mean, unc = posterior_maps(s, "S_g")
        np.testing.assert_array_equal(unc, 0.0)
        np.testing.assert_allclose(mean, saturations(*s[0])[0])

    def test_two_samples_quantile_rule(self, rng):
        s = rng.normal(size=(2, 3, 5))
        q = np.stack([saturations(*s[k])[3] for k in range(2)])
        a, b = q.min(0), q.max(0)
        _, unc = posterior_maps(s, "V_clay")
        np.testing.assert_allclose(unc, 0.8 * (b - a), atol=1e-15)

    def test_ranges(self, rng):
        s = rng.normal(scale=3, size=(40, 3, 8))
        for qn in ("S_g", "S_o", "S_b", "V_clay"):
            mean, unc = posterior_maps(s, qn)
            assert np.all((mean > 0) & (mean < 1)) and np.all(unc >= 0)
        with pytest.raises(KeyError):
            posterior_maps(s, "porosity")

    def test_ternary(self, rng):
        s = rng.normal(size=(25, 3, 4))
        t = ternary_extract(s, 2)
        assert t.shape == (25, 3)
        assert np.max(np.abs(t.sum(1) - 1)) < 1e-12
        with pytest.raises(IndexError):
            ternary_extract(s, 4)

    def test_ternary_mean_under_prior(self):
        g = np.random.default_rng(5)
        mu = np.array([0.5, -0.2, 0.0])
        s = mu[None, :, None] + g.normal(size=(20000, 3, 1))
        t = ternary_extract(s, 0)
        ref = np.column_stack(saturations(*(mu[:, None] + g.normal(size=(3, 200000))))[:3])
        se = t.std(0) / np.sqrt(20000)
        assert np.all(np.abs(t.mean(0) - ref.mean(0)) < 4 * se)


class TestWriters:
    def test_map_csv(self, tmp_path):
        grid = GridSpec(2, 3)
        write_map_csv(tmp_path / "m.csv", grid, np.arange(6.0) / 7)
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["i", "j", "value"] and len(rows) == 7
        assert rows[4][:2] == ["1", "0"] and float(rows[4][2]) == 3 / 7

    def test_pgm(self, tmp_path):
        grid = GridSpec(2, 3)
        write_pgm(tmp_path / "m.pgm", grid, [0.0, 0.5, 1.0, 0.25, 0.75, 1.0])
        raw = (tmp_path / "m.pgm").read_bytes()
        lines = raw.split(b"\n", 4)
        assert lines[0] == b"P5" and lines[1].startswith(b"# min=0.0 max=1.0")
        assert lines[2] == b"3 2" and lines[3] == b"255"
        assert list(lines[4]) == [0, 128, 255, 64, 191, 255]

    def test_pgm_constant(self, tmp_path):
        write_pgm(tmp_path / "c.pgm", GridSpec(1, 2), [0.3, 0.3])
        assert (tmp_path / "c.pgm").read_bytes().endswith(b"\x00\x00")

    def test_ternary_csv(self, tmp_path):
        write_ternary_csv(tmp_path / "t.csv", [[0.2, 0.3, 0.5]])
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows == [["sample_index", "S_g", "S_o", "S_b"], ["0", "0.2", "0.3", "0.5"]]
