# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled mixture kernels.

Same contract as ``diffuselab.kernels.reference``; tight C loops over the
batch and component axes pay off at the small batch sizes that dominate
finite-difference Jacobian sweeps and per-chain sampler steps.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, M_PI

cnp.import_array()

NAME = "compiled"


def component_logpdf_scores(x, mc, s2, mu, evecs, evals, logw):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    mc_a = np.ascontiguousarray(np.reshape(mc, B), dtype=np.float64)
    s2_a = np.ascontiguousarray(np.reshape(s2, B), dtype=np.float64)
    mu_a = np.ascontiguousarray(mu, dtype=np.float64)
    U_a = np.ascontiguousarray(evecs, dtype=np.float64)
    lam_a = np.ascontiguousarray(evals, dtype=np.float64)
    lw_a = np.ascontiguousarray(logw, dtype=np.float64)
    cdef Py_ssize_t K = mu_a.shape[0]

    logl = np.empty((B, K), dtype=np.float64)
    comp_score = np.empty((B, K, d), dtype=np.float64)

    cdef const double[:, ::1] xv = x
    cdef const double[::1] mcv = mc_a
    cdef const double[::1] s2v = s2_a
    cdef const double[:, ::1] muv = mu_a
    cdef const double[:, :, ::1] Uv = U_a
    cdef const double[:, ::1] lamv = lam_a
    cdef const double[::1] lwv = lw_a
    cdef double[:, ::1] lv = logl
    cdef double[:, :, ::1] sv = comp_score

    cdef Py_ssize_t b, k, i, j
    cdef double mcb, s2b, acc, zj, vj, q
    cdef double z[8]
    cdef double w[8]
    cdef double log2pi = log(2.0 * M_PI)

    for b in range(B):
        mcb = mcv[b]
        s2b = s2v[b]
        for k in range(K):
            acc = 0.0
            for j in range(d):
                zj = 0.0
                for i in range(d):
                    zj += Uv[k, i, j] * (xv[b, i] - mcb * muv[k, i])
                vj = mcb * mcb * lamv[k, j] + s2b
                z[j] = zj
                w[j] = zj / vj
                acc += zj * zj / vj + log(vj) + log2pi
            lv[b, k] = lwv[k] - 0.5 * acc
            for i in range(d):
                q = 0.0
                for j in range(d):
                    q += Uv[k, i, j] * w[j]
                sv[b, k, i] = -q
    return logl, comp_score


def posterior_component_stats(x, mc, s2, mu, evecs, evals, logw):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    mc_a = np.ascontiguousarray(np.reshape(mc, B), dtype=np.float64)
    s2_a = np.ascontiguousarray(np.reshape(s2, B), dtype=np.float64)
    mu_a = np.ascontiguousarray(mu, dtype=np.float64)
    U_a = np.ascontiguousarray(evecs, dtype=np.float64)
    lam_a = np.ascontiguousarray(evals, dtype=np.float64)
    lw_a = np.ascontiguousarray(logw, dtype=np.float64)
    cdef Py_ssize_t K = mu_a.shape[0]

    logl = np.empty((B, K), dtype=np.float64)
    post_mean = np.empty((B, K, d), dtype=np.float64)
    post_cov = np.empty((B, K, d, d), dtype=np.float64)

    cdef const double[:, ::1] xv = x
    cdef const double[::1] mcv = mc_a
    cdef const double[::1] s2v = s2_a
    cdef const double[:, ::1] muv = mu_a
    cdef const double[:, :, ::1] Uv = U_a
    cdef const double[:, ::1] lamv = lam_a
    cdef const double[::1] lwv = lw_a
    cdef double[:, ::1] lv = logl
    cdef double[:, :, ::1] mv = post_mean
    cdef double[:, :, :, ::1] cv = post_cov

    cdef Py_ssize_t b, k, i, j, l
    cdef double mcb, s2b, acc, zj, vj, pj, q
    cdef double gain[8]
    cdef double cval[8]
    cdef double z[8]
    cdef double log2pi = log(2.0 * M_PI)

    for b in range(B):
        mcb = mcv[b]
        s2b = s2v[b]
        for k in range(K):
            acc = 0.0
            for j in range(d):
                zj = 0.0
                for i in range(d):
                    zj += Uv[k, i, j] * (xv[b, i] - mcb * muv[k, i])
                pj = mcb * mcb * lamv[k, j]
                vj = pj + s2b
                z[j] = zj
                gain[j] = pj / vj * zj
                cval[j] = pj * s2b / vj
                acc += zj * zj / vj + log(vj) + log2pi
            lv[b, k] = lwv[k] - 0.5 * acc
            for i in range(d):
                q = 0.0
                for j in range(d):
                    q += Uv[k, i, j] * gain[j]
                mv[b, k, i] = mcb * muv[k, i] + q
                for l in range(d):
                    q = 0.0
                    for j in range(d):
                        q += Uv[k, i, j] * cval[j] * Uv[k, l, j]
                    cv[b, k, i, l] = q
    return logl, post_mean, post_cov
