"""Mixture kernel backend selection.

The hot inner loops (per-component log densities, scores, posterior moments)
exist twice: a Cython extension (``diffuselab.kernels._core``) and a pure
numpy reference (``diffuselab.kernels.reference``). The compiled backend is
used when importable; set ``DIFFUSELAB_KERNELS=numpy`` or ``compiled`` to
force a choice. ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os

from . import reference

_choice = os.environ.get("DIFFUSELAB_KERNELS", "auto").lower()

if _choice not in ("auto", "compiled", "numpy"):
    raise ValueError(f"DIFFUSELAB_KERNELS must be auto|compiled|numpy, got {_choice!r}")

_backend = None
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _backend
    except ImportError:
        if _choice == "compiled":
            raise
        _backend = None
if _backend is None:
    _backend = reference

ACTIVE_BACKEND = _backend.NAME

# Compiled loops use fixed-size scratch; anything wider falls back to numpy.
_COMPILED_MAX_DIM = 8


def component_logpdf_scores(x, mc, s2, mu, evecs, evals, logw):
    if _backend is not reference and x.shape[1] > _COMPILED_MAX_DIM:
        return reference.component_logpdf_scores(x, mc, s2, mu, evecs, evals, logw)
    return _backend.component_logpdf_scores(x, mc, s2, mu, evecs, evals, logw)


def posterior_component_stats(x, mc, s2, mu, evecs, evals, logw):
    if _backend is not reference and x.shape[1] > _COMPILED_MAX_DIM:
        return reference.posterior_component_stats(x, mc, s2, mu, evecs, evals, logw)
    return _backend.posterior_component_stats(x, mc, s2, mu, evecs, evals, logw)


def get_backend(name: str):
    """Return a backend module by name ('numpy' or 'compiled')."""
    if name == "numpy":
        return reference
    if name == "compiled":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")
