"""Pure-numpy implementation of the mixture kernels.

Both backends share one parameterization. A mixture component k with clean
mean mu_k and covariance eigendecomposition Sigma_k = U_k diag(lam_k) U_k^T
has, at mean coefficient ``mc`` and noise variance ``s2 = sigma(t)^2``:

* marginal component   N(x | mc mu_k, U_k diag(mc^2 lam_k + s2) U_k^T)
* posterior of the perturbed mean m given x and component k: Gaussian with
  mean  mc mu_k + U_k diag(p / v) U_k^T (x - mc mu_k)
  cov   U_k diag(p s2 / v) U_k^T
  where p = mc^2 lam_k and v = p + s2.

All outputs are float64; log-domain arithmetic keeps three decades of sigma
well conditioned.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def component_logpdf_scores(x, mc, s2, mu, evecs, evals, logw):
    """Per-component weighted log densities and score vectors.

    Args:
        x: (B, d) evaluation points.
        mc, s2: (B,) mean coefficient and noise variance per row.
        mu: (K, d) component means; evecs (K, d, d), evals (K, d) spectral
            factors of the clean covariances; logw (K,) log weights.

    Returns:
        logl: (B, K) log(w_k N_k(x)).
        comp_score: (B, K, d) gradient of log N_k at x.
    """
    x = np.asarray(x, dtype=np.float64)
    B, d = x.shape
    mc = np.asarray(mc, dtype=np.float64).reshape(B)
    s2 = np.asarray(s2, dtype=np.float64).reshape(B)

    # z[b,k,:] = U_k^T (x_b - mc_b mu_k)
    diff = x[:, None, :] - mc[:, None, None] * mu[None, :, :]
    z = np.einsum("kij,bki->bkj", evecs, diff)
    v = mc[:, None, None] ** 2 * evals[None, :, :] + s2[:, None, None]  # (B,K,d)

    logl = logw[None, :] - 0.5 * np.sum(z * z / v + np.log(2.0 * np.pi * v), axis=2)
    comp_score = -np.einsum("kij,bkj->bki", evecs, z / v)
    return logl, comp_score


def posterior_component_stats(x, mc, s2, mu, evecs, evals, logw):
    """Per-component posterior moments of the perturbed mean m given x.

    Returns:
        logl: (B, K) as in :func:`component_logpdf_scores`.
        post_mean: (B, K, d) per-component posterior means.
        post_cov: (B, K, d, d) per-component posterior covariances.
    """
    x = np.asarray(x, dtype=np.float64)
    B, d = x.shape
    mc = np.asarray(mc, dtype=np.float64).reshape(B)
    s2 = np.asarray(s2, dtype=np.float64).reshape(B)

    diff = x[:, None, :] - mc[:, None, None] * mu[None, :, :]
    z = np.einsum("kij,bki->bkj", evecs, diff)
    p = mc[:, None, None] ** 2 * evals[None, :, :]
    v = p + s2[:, None, None]

    logl = logw[None, :] - 0.5 * np.sum(z * z / v + np.log(2.0 * np.pi * v), axis=2)
    post_mean = mc[:, None, None] * mu[None, :, :] + np.einsum(
        "kij,bkj->bki", evecs, p / v * z
    )
    cvals = p * s2[:, None, None] / v  # (B,K,d) posterior eigenvalues
    post_cov = np.einsum("kij,bkj,klj->bkil", evecs, cvals, evecs)
    return logl, post_mean, post_cov
