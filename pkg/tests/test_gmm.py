"""Mixture oracle: scores vs finite differences, posterior moments vs
quadrature, Bayes labels vs direct density evaluation, sampling statistics."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from diffuselab import gmm
from diffuselab.errors import ConfigurationError, DomainError, UnsupportedDimensionError
from diffuselab.sde import DiffusionSchedule, NoisySample, denoise_onestep


def _random_points(canonical, sch, n, rng):
    t = rng.uniform(0.0, 1.0, size=n)
    x0 = gmm.sample_dataset(canonical, n, rng).x
    mc = np.asarray(sch.mean_coeff(t))[:, None]
    sig = np.asarray(sch.sigma(t))[:, None]
    x = mc * x0 + sig * rng.standard_normal((n, 2))
    return x, t


def test_weights_must_sum_to_one():
    with pytest.raises(ConfigurationError):
        gmm.GaussianMixture([0.6, 0.5], [[0, 0], [1, 1]], [np.eye(2)] * 2)


def test_covariance_must_be_spd():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues -1, 3
    with pytest.raises(ConfigurationError):
        gmm.GaussianMixture([1.0], [[0, 0]], [bad])
    asym = np.array([[1.0, 0.2], [0.0, 1.0]])
    with pytest.raises(ConfigurationError):
        gmm.GaussianMixture([1.0], [[0, 0]], [asym])


def test_single_component_score_closed_form(ve):
    g = gmm.GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    t = ve.time_for_sigma(1.0)
    s = gmm.marginal_score(g, ve, np.array([2.0, 0.0]), t)
    assert s == pytest.approx([-1.0, 0.0], abs=1e-12)


def test_symmetric_mixture_score_vanishes_on_axis(ve):
    g = gmm.GaussianMixture(
        [0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [0.25 * np.eye(2)] * 2
    )
    for y in (-1.0, 0.0, 0.4, 2.0):
        s = gmm.marginal_score(g, ve, np.array([0.0, y]), 0.5)
        assert abs(s[0]) < 1e-13


def test_score_matches_finite_differences(canonical, ve, vp):
    """Central-difference check of the score over 1000 random (x, t)."""
    rng = np.random.default_rng(10)
    for sch in (ve, vp):
        x, t = _random_points(canonical, sch, 500, rng)
        s = gmm.marginal_score(canonical, sch, x, t)
        h = (1e-5 * (1.0 + np.linalg.norm(x, axis=1)))[:, None]
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1.0
            fp = gmm.log_marginal(canonical, sch, x + h * e, t)
            fm = gmm.log_marginal(canonical, sch, x - h * e, t)
            fd = (fp - fm) / (2.0 * h[:, 0])
            assert np.max(np.abs(fd - s[:, i])) < 1e-5


def test_posterior_moments_psd_and_symmetric(canonical, ve):
    rng = np.random.default_rng(11)
    x, t = _random_points(canonical, ve, 300, rng)
    _, _, cov = gmm.posterior_moments_arrays(canonical, ve, x, t)
    assert np.max(np.abs(cov - np.swapaxes(cov, 1, 2))) < 1e-10
    assert np.min(np.linalg.eigvalsh(cov)) > -1e-10


def test_tweedie_identity(canonical, ve, vp, analytic_score):
    """Posterior mean equals the one-step denoiser output at the exact score."""
    from diffuselab.scores import AnalyticMixtureScore

    rng = np.random.default_rng(12)
    for sch in (ve, vp):
        score = AnalyticMixtureScore(canonical, sch)
        x, t = _random_points(canonical, sch, 100, rng)
        for i in range(100):
            pm = gmm.posterior_moments(canonical, sch, x[i], t[i])
            den = denoise_onestep(sch, score, NoisySample(x[i], float(t[i])))
            assert np.max(np.abs(pm.mean - den.x_hat)) < 1e-8


def test_single_component_posterior_conjugate(ve):
    g = gmm.GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    t = ve.time_for_sigma(1.0)
    pm = gmm.posterior_moments(g, ve, np.array([2.0, 0.0]), t)
    assert pm.responsibility == pytest.approx([1.0])
    assert pm.covariance == pytest.approx(0.5 * np.eye(2), abs=1e-12)


def test_vp_late_time_posterior_matches_prior(vp):
    """As sigma dominates, the posterior collapses to the scaled prior."""
    g = gmm.GaussianMixture([1.0], [[1.0, 2.0]], [0.25 * np.eye(2)])
    t = 1.0
    mc = float(vp.mean_coeff(t))
    s2 = float(vp.sigma(t)) ** 2
    pm = gmm.posterior_moments(g, vp, np.array([0.3, -0.4]), t)
    p = mc**2 * 0.25
    expected = np.eye(2) * (p * s2 / (p + s2))
    assert pm.covariance == pytest.approx(expected, abs=1e-12)


def test_posterior_matches_quadrature(canonical, ve):
    """Grid quadrature referee for the closed-form posterior moments."""
    x = np.array([0.5, 0.5])
    t = ve.time_for_sigma(1.0)
    pm = gmm.posterior_moments(canonical, ve, x, t)
    q_mean = gmm.quadrature_expectation(canonical, ve, x, t, "mean")
    q_outer = gmm.quadrature_expectation(canonical, ve, x, t, "outer")
    assert np.max(np.abs(q_mean - pm.mean)) < 1e-4
    q_cov = q_outer - np.outer(q_mean, q_mean)
    assert np.max(np.abs(q_cov - pm.covariance)) < 1e-4


def test_quadrature_single_component_conjugate(ve):
    g = gmm.GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    t = ve.time_for_sigma(1.0)
    q = gmm.quadrature_expectation(g, ve, np.array([2.0, 0.0]), t, "mean")
    assert q == pytest.approx([1.0, 0.0], abs=1e-6)


def test_quadrature_grid_refinement(canonical, ve):
    x = np.array([-0.3, 0.9])
    t = ve.time_for_sigma(0.7)
    coarse = gmm.quadrature_expectation(canonical, ve, x, t, "mean", n_points=200)
    fine = gmm.quadrature_expectation(canonical, ve, x, t, "mean", n_points=400)
    assert np.max(np.abs(coarse - fine)) < 1e-4


def test_quadrature_rejects_high_dimension(ve):
    g = gmm.GaussianMixture([1.0], [np.zeros(4)], [np.eye(4)])
    with pytest.raises(UnsupportedDimensionError):
        gmm.quadrature_expectation(g, ve, np.zeros(4), 0.5)
    with pytest.raises(DomainError):
        gmm.quadrature_expectation(g, ve, np.zeros(4), 0.5, integrand="cube")


def test_bayes_separated_components(ve):
    g = gmm.GaussianMixture(
        [0.5, 0.5], [[-4.0, 0.0], [4.0, 0.0]], [0.25 * np.eye(2)] * 2, [0, 1]
    )  # 16 component stdevs apart
    label, post = gmm.bayes_classify(g, np.array([-4.0, 0.0]))
    assert label == 0
    assert post[0] >= 0.999


def test_bayes_tie_breaks_low(ve):
    g = gmm.GaussianMixture(
        [0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [0.25 * np.eye(2)] * 2, [0, 1]
    )
    label, post = gmm.bayes_classify(g, np.array([0.0, 0.3]))
    assert post == pytest.approx([0.5, 0.5], abs=1e-12)
    assert label == 0


def test_bayes_matches_direct_densities(canonical):
    """Brute-force referee via scipy multivariate normal densities."""
    rng = np.random.default_rng(13)
    xs = rng.normal(scale=3.0, size=(200, 2))
    _, post = gmm.bayes_classify(canonical, xs)
    dens = np.stack(
        [
            canonical.weights[k]
            * multivariate_normal.pdf(xs, canonical.means[k], canonical.covariances[k])
            for k in range(3)
        ],
        axis=1,
    )
    ref = dens / dens.sum(axis=1, keepdims=True)
    assert np.max(np.abs(post - ref)) < 1e-12


def test_bayes_requires_labels(ve):
    g = gmm.GaussianMixture([1.0], [[0.0, 0.0]], [np.eye(2)])
    with pytest.raises(ConfigurationError):
        gmm.bayes_classify(g, np.zeros(2))


def test_sample_dataset_frequencies(canonical):
    ds = gmm.sample_dataset(canonical, 100_000, np.random.default_rng(14))
    freq = np.bincount(ds.y, minlength=3) / len(ds)
    assert np.max(np.abs(freq - canonical.weights)) < 0.01


def test_sample_dataset_deterministic(canonical):
    a = gmm.sample_dataset(canonical, 1, np.random.default_rng(3))
    b = gmm.sample_dataset(canonical, 1, np.random.default_rng(3))
    assert np.array_equal(a.x, b.x) and a.y[0] == b.y[0]


def test_sample_dataset_degenerate_weights():
    g = gmm.GaussianMixture(
        [1.0, 0.0, 0.0],
        [[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]],
        [0.25 * np.eye(2)] * 3,
        [0, 1, 2],
    )
    ds = gmm.sample_dataset(g, 500, np.random.default_rng(15))
    assert np.all(ds.y == 0)
    with pytest.raises(DomainError):
        gmm.sample_dataset(g, 0, np.random.default_rng(0))


def test_sample_dataset_stratified(canonical):
    ds = gmm.sample_dataset_stratified(canonical, 100, np.random.default_rng(16))
    assert np.bincount(ds.y).tolist() == [100, 100, 100]


def test_fixture_round_trip(tmp_path, canonical):
    path = tmp_path / "fix.json"
    gmm.save_fixture(canonical, path)
    back = gmm.load_fixture(path)
    assert np.array_equal(back.weights, canonical.weights)
    assert np.array_equal(back.means, canonical.means)
    assert np.array_equal(back.covariances, canonical.covariances)
    assert np.array_equal(back.class_of_component, canonical.class_of_component)


def test_class_conditional_score_is_restricted_mixture_score(canonical, ve):
    sub = gmm.GaussianMixture([1.0], [canonical.means[1]], [canonical.covariances[1]], [0])
    x = np.array([1.2, -0.3])
    got = gmm.class_conditional_score(canonical, ve, x, 0.4, 1)
    want = gmm.marginal_score(sub, ve, x, 0.4)
    assert got == pytest.approx(want, abs=1e-12)


def test_dataset_container(canonical):
    ds = gmm.sample_dataset(canonical, 10, np.random.default_rng(17))
    ex = ds[3]
    assert isinstance(ex, gmm.LabeledExample)
    assert np.array_equal(ex.x0, ds.x[3])
    assert len(ds[2:5]) == 3
