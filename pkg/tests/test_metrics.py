import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sdelab.metrics import (
    MetricReport,
    ks_1d,
    ks_2samp,
    ks_2samp_critical,
    median_bandwidth,
    mmd_rbf,
    mmd_rbf_mixture,
    moments,
    wasserstein1_1d,
)
from sdelab.mixture import GaussianMixture


def test_constant_samples_have_zero_covariance():
    mean, cov = moments(np.full((10, 3), 2.5))
    np.testing.assert_array_equal(mean, 2.5)
    np.testing.assert_array_equal(cov, 0.0)
    with pytest.raises(ValueError):
        moments(np.zeros((1, 2)))


def test_standard_normal_mean_clt_bound():
    x = np.random.default_rng(0).standard_normal((100_000, 3))
    mean, cov = moments(x)
    assert np.all(np.abs(mean) < 3 / np.sqrt(x.shape[0]))
    np.testing.assert_allclose(cov, np.eye(3), atol=0.02)


def test_moments_affine_identity():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 3))
    A, b = rng.normal(size=(2, 3)), rng.normal(size=2)
    m, c = moments(x)
    m2, c2 = moments(x @ A.T + b)
    np.testing.assert_allclose(m2, A @ m + b, atol=1e-12)
    np.testing.assert_allclose(c2, A @ c @ A.T, atol=1e-12)


def test_mmd_identical_sets():
    x = np.random.default_rng(2).normal(size=(400, 2))
    assert mmd_rbf(x, x, 1.0, unbiased=False) == pytest.approx(0.0, abs=1e-12)
    # the unbiased statistic drops the diagonal, so it sits O(1/n) below zero
    assert -5.0 / x.shape[0] < mmd_rbf(x, x, 1.0) < 0.0
    assert mmd_rbf(x, x, 1.0, floor=True) == 0.0


def test_mmd_separated_gaussians():
    rng = np.random.default_rng(3)
    a, b = rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)
    assert mmd_rbf(a, b, 1.0) > 0.1


def test_mmd_matches_direct_u_statistic():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(300, 2)), rng.normal(0.3, 1.0, size=(250, 2))
    k = lambda u, v: np.exp(-np.sum((u[:, None] - v[None]) ** 2, -1) / (2 * 0.7**2))
    kaa, kbb = k(a, a), k(b, b)
    want = (
        (kaa.sum() - np.trace(kaa)) / (300 * 299)
        + (kbb.sum() - np.trace(kbb)) / (250 * 249)
        - 2 * k(a, b).mean()
    )
    assert mmd_rbf(a, b, 0.7) == pytest.approx(want, rel=1e-10)


def test_mmd_chunking_is_exact():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(5000, 1)), rng.normal(size=(300, 1))
    full = mmd_rbf(a, b, 0.5)
    k = lambda u, v: np.exp(-((u - v.T) ** 2) / 0.5)
    direct = (k(a, a).sum() - a.shape[0]) / (5000 * 4999) + (k(b, b).sum() - 300) / (300 * 299) - 2 * k(a, b).mean()
    assert full == pytest.approx(direct, rel=1e-9)


def test_mmd_argument_checks():
    with pytest.raises(ValueError):
        mmd_rbf(np.zeros((5, 1)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        mmd_rbf(np.zeros((5, 1)), np.zeros((5, 1)), bandwidth=0.0)


def test_median_bandwidth():
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(x, x[:0]) == pytest.approx(2.0)
    assert median_bandwidth(np.zeros((4, 1)), np.zeros((4, 1))) == 1.0


def test_mixture_reference_closed_form():
    # N(5, 1) samples against N(0, 1): MMD^2 = 2 h / sqrt(h^2 + 2) (1 - exp(-25 / (2 (h^2 + 2))))
    h = 1.0
    x = np.random.default_rng(6).normal(5, 1, size=(4000, 1))
    want = 2 * h / np.sqrt(h * h + 2) * (1 - np.exp(-25 / (2 * (h * h + 2))))
    got = mmd_rbf_mixture(x, GaussianMixture([1.0], [[0.0]], [1.0]), h)
    assert got == pytest.approx(want, abs=0.01)


def test_mixture_reference_agrees_with_sample_reference():
    gmm = GaussianMixture([0.3, 0.7], [[-1.0, 0.5], [1.0, 0.0]], [[0.5, 1.0], [0.2, 0.3]])
    rng = np.random.default_rng(7)
    a = gmm.sample(1500, rng)
    vals = np.array([mmd_rbf(a, gmm.sample(1500, rng), 0.7) for _ in range(30)])
    exact = mmd_rbf_mixture(a, gmm, 0.7)
    assert abs(vals.mean() - exact) < 3 * vals.std(ddof=1) / np.sqrt(vals.size)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=60), rng.normal(0.5, 1, size=40)
    pa, pb = rng.permutation(a), rng.permutation(b)
    assert mmd_rbf(pa, pb, 0.8) == pytest.approx(mmd_rbf(a, b, 0.8), rel=1e-12, abs=1e-15)
    assert ks_1d(pa, stats.norm.cdf) == ks_1d(a, stats.norm.cdf)
    assert ks_2samp(pa, pb) == ks_2samp(a, b)
    assert wasserstein1_1d(pa, pb) == pytest.approx(wasserstein1_1d(a, b), rel=1e-12)


def test_ks_matches_scipy():
    x = np.random.default_rng(8).normal(size=2000)
    d, p = ks_1d(x, stats.norm.cdf)
    ref = stats.kstest(x, "norm", method="asymp")
    assert d == pytest.approx(ref.statistic, rel=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-6)
    y = np.random.default_rng(9).normal(0.1, 1, size=1500)
    d2, p2 = ks_2samp(x, y)
    ref2 = stats.ks_2samp(x, y, method="asymp")
    assert d2 == pytest.approx(ref2.statistic, rel=1e-12)
    # scipy's asymptotic two-sample p uses a finite-n distribution; compare with the limit law
    assert p2 == pytest.approx(stats.kstwobign.sf(np.sqrt(2000 * 1500 / 3500) * d2), rel=1e-9)


def test_ks_calibration():
    passes = 0
    for seed in range(100):
        x = np.random.default_rng(seed).normal(size=1000)
        passes += ks_1d(x, stats.norm.cdf)[1] > 0.01
    assert passes >= 98


def test_ks_point_mass():
    assert ks_1d(np.zeros(100), stats.norm.cdf)[0] >= 0.5


def test_two_sample_critical_value():
    assert ks_2samp_critical(10_000, 10_000) == pytest.approx(1.6276236 * np.sqrt(2e-4), rel=1e-7)
    # the asymptotic distribution gives the same quantile
    c = stats.kstwobign.isf(0.01)
    assert ks_2samp_critical(400, 900) == pytest.approx(c * np.sqrt(1300 / 360_000), rel=1e-3)


def test_w1_shifted_gaussians():
    rng = np.random.default_rng(10)
    a, b = rng.normal(0, 1, 10_000), rng.normal(1, 1, 10_000)
    assert wasserstein1_1d(a, b) == pytest.approx(1.0, abs=0.05)
    assert wasserstein1_1d(a, stats.norm(1, 1).cdf) == pytest.approx(1.0, abs=0.05)


def test_w1_cdf_matches_large_reference_sample():
    a = np.random.default_rng(11).normal(size=3000)
    ref = stats.norm.ppf((np.arange(200_000) + 0.5) / 200_000)
    assert wasserstein1_1d(a, stats.norm.cdf) == pytest.approx(wasserstein1_1d(a, ref), abs=1e-4)


def test_statistics_shrink_with_sample_size():
    rng = np.random.default_rng(12)
    small, large = rng.normal(size=1000), rng.normal(size=10_000)
    assert ks_1d(large, stats.norm.cdf)[0] < ks_1d(small, stats.norm.cdf)[0]
    assert wasserstein1_1d(large, stats.norm.cdf) < wasserstein1_1d(small, stats.norm.cdf)


def test_metric_report_serialization():
    rep = MetricReport({"ks": 0.01, "mean": np.array([0.1, 0.2])}, {"samples": 100}, "bimodal_1d", seed=3)
    d = json.loads(rep.to_json())
    assert d["values"]["mean"] == [0.1, 0.2]
    assert d["counts"] == {"samples": 100}
    scalar = MetricReport({"ks": 0.01, "w1": 0.25}, {"samples": 100}, "ref", seed=1)
    assert scalar.csv_header() == "reference,seed,ks,w1,n_samples"
    assert scalar.csv_row() == "ref,1,0.01,0.25,100"
    with pytest.raises(ValueError):
        MetricReport({"ks": float("nan")}, {"samples": 1}, "ref")
    with pytest.raises(ValueError):
        MetricReport({"ks": 0.1}, {"samples": 0}, "ref")
