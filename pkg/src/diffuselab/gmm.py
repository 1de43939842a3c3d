"""Exact Gaussian-mixture ground truth.

Everything the rest of the package treats as an oracle lives here: analytic
marginal scores under a diffusion schedule, exact posterior moments of the
perturbed mean given a noisy observation, Bayes-optimal labels, dataset
synthesis, and a brute-force grid quadrature used only to referee the
closed forms.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import ConfigurationError, DomainError, UnsupportedDimensionError
from .sde import DiffusionSchedule, _check_time

FIXTURE_SCHEMA_VERSION = 1


class GaussianMixture:
    """Immutable mixture of Gaussians, optionally with one class per component."""

    def __init__(self, weights, means, covariances, class_of_component=None, name=""):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.covariances = np.asarray(covariances, dtype=np.float64)
        self.class_of_component = (
            None if class_of_component is None else np.asarray(class_of_component, dtype=np.int64)
        )
        self.name = name

        K, d = self.means.shape
        if self.weights.shape != (K,) or self.covariances.shape != (K, d, d):
            raise ConfigurationError("mixture arrays have inconsistent shapes")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ConfigurationError("weights must be a probability vector (sum within 1e-12)")
        if np.max(np.abs(self.covariances - np.swapaxes(self.covariances, 1, 2))) > 1e-12:
            raise ConfigurationError("covariances must be symmetric")

        evals, evecs = np.linalg.eigh(self.covariances)
        if np.min(evals) <= 0:
            raise ConfigurationError("covariances must be positive definite")
        self._evals = evals  # (K, d)
        self._evecs = evecs  # (K, d, d), columns are eigenvectors
        self._chol = np.linalg.cholesky(self.covariances)
        with np.errstate(divide="ignore"):
            self._logw = np.where(self.weights > 0, np.log(self.weights), -np.inf)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_classes(self) -> int:
        if self.class_of_component is None:
            raise ConfigurationError(f"mixture {self.name!r} carries no class labels")
        return int(self.class_of_component.max()) + 1

    def data_scale(self) -> float:
        """Rough diameter of the support, used to sanity-check schedules."""
        spread = np.linalg.norm(self.means - self.means.mean(axis=0), axis=1).max()
        return float(2.0 * (spread + 3.0 * np.sqrt(self._evals.max())))


@dataclass
class PosteriorMoments:
    """Mixture posterior of the perturbed mean m given a noisy observation."""

    responsibility: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        if abs(self.responsibility.sum() - 1.0) > 1e-9:
            raise ConfigurationError("responsibilities must sum to 1")
        asym = np.max(np.abs(self.covariance - self.covariance.T))
        if asym > 1e-10:
            raise ConfigurationError(f"posterior covariance asymmetry {asym:.2e}")
        if np.min(np.linalg.eigvalsh(self.covariance)) < -1e-10:
            raise ConfigurationError("posterior covariance has a significantly negative eigenvalue")


@dataclass
class LabeledExample:
    x0: np.ndarray
    y: int


class LabeledDataset(Sequence):
    """Array-backed sequence of labeled points."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ConfigurationError("x and y lengths differ")

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return LabeledDataset(self.x[i], self.y[i])
        return LabeledExample(x0=self.x[i], y=int(self.y[i]))

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx])


# -- shared plumbing --------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _mc_s2(schedule: DiffusionSchedule, t, batch: int):
    t = _check_time(t)
    mc = np.broadcast_to(np.asarray(schedule.mean_coeff(t), dtype=np.float64), (batch,))
    sig = np.broadcast_to(np.asarray(schedule.sigma(t), dtype=np.float64), (batch,))
    return np.ascontiguousarray(mc), np.ascontiguousarray(sig**2)


def _component_logl_scores(gmm, schedule, x, t):
    xb, squeeze = _as_batch(x)
    mc, s2 = _mc_s2(schedule, t, xb.shape[0])
    logl, comp_score = kernels.component_logpdf_scores(
        xb, mc, s2, gmm.means, gmm._evecs, gmm._evals, gmm._logw
    )
    return xb, squeeze, logl, comp_score


# -- public operations ------------------------------------------------------


def log_marginal(gmm: GaussianMixture, schedule: DiffusionSchedule, x, t):
    """log p_t(x) under the diffused mixture."""
    _, squeeze, logl, _ = _component_logl_scores(gmm, schedule, x, t)
    out = logsumexp(logl, axis=1)
    return float(out[0]) if squeeze else out


def marginal_score(gmm: GaussianMixture, schedule: DiffusionSchedule, x, t):
    """Closed-form score of the diffused mixture, grad_x log p_t(x).

    Accepts a single point (d,) or a batch (B, d); ``t`` may be a scalar or a
    per-row array.
    """
    _, squeeze, logl, comp_score = _component_logl_scores(gmm, schedule, x, t)
    resp = np.exp(logl - logsumexp(logl, axis=1, keepdims=True))
    score = np.einsum("bk,bkd->bd", resp, comp_score)
    return score[0] if squeeze else score


def posterior_moments(gmm: GaussianMixture, schedule: DiffusionSchedule, x, t) -> PosteriorMoments:
    """Exact posterior moments of the perturbed mean m given x at time t."""
    resp, mean, cov = posterior_moments_arrays(gmm, schedule, np.asarray(x)[None, :], t)
    return PosteriorMoments(responsibility=resp[0], mean=mean[0], covariance=cov[0])


def posterior_moments_arrays(gmm, schedule, x, t):
    """Batched posterior moments: returns (resp (B,K), mean (B,d), cov (B,d,d))."""
    xb, _ = _as_batch(x)
    mc, s2 = _mc_s2(schedule, t, xb.shape[0])
    logl, pm, pc = kernels.posterior_component_stats(
        xb, mc, s2, gmm.means, gmm._evecs, gmm._evals, gmm._logw
    )
    resp = np.exp(logl - logsumexp(logl, axis=1, keepdims=True))
    mean = np.einsum("bk,bkd->bd", resp, pm)
    dm = pm - mean[:, None, :]
    cov = np.einsum("bk,bkil->bil", resp, pc) + np.einsum("bk,bki,bkl->bil", resp, dm, dm)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return resp, mean, cov


def _aggregate_class_logl(gmm: GaussianMixture, logl: np.ndarray) -> np.ndarray:
    C = gmm.n_classes
    out = np.full((logl.shape[0], C), -np.inf)
    for c in range(C):
        mask = gmm.class_of_component == c
        if np.any(mask):
            out[:, c] = logsumexp(logl[:, mask], axis=1)
    return out - logsumexp(out, axis=1, keepdims=True)


def class_log_posteriors(gmm: GaussianMixture, schedule: DiffusionSchedule, x, t):
    """log p(y | x, t) for every class under the diffused mixture."""
    if gmm.class_of_component is None:
        raise ConfigurationError("class posteriors need a labeled mixture")
    _, squeeze, logl, _ = _component_logl_scores(gmm, schedule, x, t)
    out = _aggregate_class_logl(gmm, logl)
    return out[0] if squeeze else out


def class_conditional_score(gmm: GaussianMixture, schedule: DiffusionSchedule, x, t, y: int):
    """Closed-form grad_x log p_t(x | y): score of the class-restricted mixture."""
    if gmm.class_of_component is None:
        raise ConfigurationError("conditional scores need a labeled mixture")
    mask = gmm.class_of_component == y
    if not np.any(mask):
        raise ConfigurationError(f"mixture has no component of class {y}")
    _, squeeze, logl, comp_score = _component_logl_scores(gmm, schedule, x, t)
    logl = logl[:, mask]
    resp = np.exp(logl - logsumexp(logl, axis=1, keepdims=True))
    score = np.einsum("bk,bkd->bd", resp, comp_score[:, mask, :])
    return score[0] if squeeze else score


def _clean_class_log_posteriors(gmm, x):
    if gmm.class_of_component is None:
        raise ConfigurationError("Bayes classification needs a labeled mixture")
    xb, squeeze = _as_batch(x)
    B = xb.shape[0]
    logl, _ = kernels.component_logpdf_scores(
        xb, np.ones(B), np.zeros(B), gmm.means, gmm._evecs, gmm._evals, gmm._logw
    )
    out = _aggregate_class_logl(gmm, logl)
    return out[0] if squeeze else out


def bayes_classify(gmm: GaussianMixture, x):
    """Bayes-optimal label and class posterior under the clean mixture.

    Ties break toward the lowest label index. Accepts (d,) or (B, d).
    """
    logpost = _clean_class_log_posteriors(gmm, x)
    post = np.exp(logpost)
    label = np.argmax(post, axis=-1)  # argmax takes the first maximum on ties
    if post.ndim == 1:
        return int(label), post
    return label.astype(np.int64), post


def sample_dataset(gmm: GaussianMixture, n: int, rng: np.random.Generator) -> LabeledDataset:
    """Draw n i.i.d. labeled examples from the mixture.

    Unlabeled mixtures fall back to the component index as the label.
    """
    if n < 1:
        raise DomainError("need n >= 1")
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    eps = rng.standard_normal((n, gmm.dim))
    x = gmm.means[comp] + np.einsum("nij,nj->ni", gmm._chol[comp], eps)
    if gmm.class_of_component is None:
        y = comp
    else:
        y = gmm.class_of_component[comp]
    return LabeledDataset(x, y)


def sample_dataset_stratified(gmm: GaussianMixture, n_per_class: int,
                              rng: np.random.Generator) -> LabeledDataset:
    """Class-balanced draws: n_per_class points from each class-conditional mixture.

    Balanced evaluation sets make 1/C the exact ceiling for any
    label-independent predictor, which is what chance-level referees assume.
    """
    C = gmm.n_classes
    xs, ys = [], []
    for c in range(C):
        mask = gmm.class_of_component == c
        w = gmm.weights[mask] / gmm.weights[mask].sum()
        idx = np.flatnonzero(mask)
        comp = idx[rng.choice(idx.size, size=n_per_class, p=w)]
        eps = rng.standard_normal((n_per_class, gmm.dim))
        xs.append(gmm.means[comp] + np.einsum("nij,nj->ni", gmm._chol[comp], eps))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(xs, axis=0), np.concatenate(ys))


def quadrature_expectation(gmm: GaussianMixture, schedule: DiffusionSchedule, x, t: float,
                           integrand: str = "mean", half_width: float = 8.0,
                           n_points: int | None = None):
    """Brute-force grid estimate of E[h(m) | x] at time t.

    This is the independent referee for the closed-form posterior: it never
    shares code with the analytic path beyond component density evaluation.

    Args:
        integrand: "mean" for h(m) = m, "outer" for h(m) = m m^T.
        half_width: grid spans [-half_width, half_width] per axis.
        n_points: grid points per axis (default 400 for d <= 2, 100 for d = 3).
    """
    d = gmm.dim
    if d > 3:
        raise UnsupportedDimensionError(f"grid quadrature supports d <= 3, mixture has d={d}")
    if integrand not in ("mean", "outer"):
        raise DomainError(f"unknown integrand tag {integrand!r}")
    if n_points is None:
        n_points = 400 if d <= 2 else 100

    x = np.asarray(x, dtype=np.float64)
    t = float(_check_time(t))
    mc = float(schedule.mean_coeff(t))
    s2 = float(schedule.sigma(t)) ** 2

    axes = [np.linspace(-half_width, half_width, n_points)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)

    # log p(m): the mixture pushed through the mean map (noise-free kernels call)
    G = grid.shape[0]
    log_terms = np.empty(G)
    chunk = 1 << 18
    for lo in range(0, G, chunk):
        g = grid[lo : lo + chunk]
        logl, _ = kernels.component_logpdf_scores(
            g,
            np.full(g.shape[0], mc),
            np.zeros(g.shape[0]),
            gmm.means,
            gmm._evecs,
            gmm._evals,
            gmm._logw,
        )
        log_pm = logsumexp(logl, axis=1)
        log_lik = -0.5 * (np.sum((x[None, :] - g) ** 2, axis=1) / s2 + d * np.log(2 * np.pi * s2))
        log_terms[lo : lo + chunk] = log_pm + log_lik

    w = np.exp(log_terms - log_terms.max())
    w /= w.sum()
    if integrand == "mean":
        return w @ grid
    return np.einsum("g,gi,gj->ij", w, grid, grid)


# -- fixtures ----------------------------------------------------------------


def save_fixture(gmm: GaussianMixture, path) -> None:
    doc = {
        "schema_version": FIXTURE_SCHEMA_VERSION,
        "name": gmm.name,
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "covariances": gmm.covariances.tolist(),
        "classes": None if gmm.class_of_component is None else gmm.class_of_component.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def _from_doc(doc) -> GaussianMixture:
    if doc.get("schema_version") != FIXTURE_SCHEMA_VERSION:
        raise ConfigurationError(
            f"fixture schema_version {doc.get('schema_version')!r} != {FIXTURE_SCHEMA_VERSION}"
        )
    return GaussianMixture(
        weights=doc["weights"],
        means=doc["means"],
        covariances=doc["covariances"],
        class_of_component=doc.get("classes"),
        name=doc.get("name", ""),
    )


def load_fixture(path) -> GaussianMixture:
    with open(path) as f:
        return _from_doc(json.load(f))


def _packaged_fixture(fname: str) -> GaussianMixture:
    text = resources.files("diffuselab.fixtures").joinpath(fname).read_text()
    return _from_doc(json.loads(text))


def canonical_fixture() -> GaussianMixture:
    """The pinned 2D three-component benchmark mixture."""
    return _packaged_fixture("canonical.json")


def two_class_fixture() -> GaussianMixture:
    """Symmetric two-component, two-class mixture for certification referees."""
    return _packaged_fixture("two_class.json")


def near_ood_fixture() -> GaussianMixture:
    """Overlapping, label-disjoint mixture used as the near-OOD source."""
    return _packaged_fixture("near_ood.json")
