"""Experiment configuration: a strict JSON schema with stable hashing.

The resolved config (defaults deep-merged with the file and CLI overrides)
is hashed and the hash is embedded in every artifact, so any output can be
traced to the exact settings that produced it. Unknown keys anywhere in the
tree are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from . import gmm as gmm_mod
from .errors import ConfigurationError
from .evaluation import paper_time_grid
from .sde import DiffusionSchedule

CONFIG_SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "fixture": "canonical",
    "schedule": {
        "kind": "ve",
        "sigma_min": 0.01,
        "sigma_max": 10.0,
        "beta_min": 0.1,
        "beta_max": 20.0,
    },
    "data": {"n_train": 250, "n_test": 2000},
    "score": {
        "kind": "analytic",  # analytic | train | checkpoint
        "steps": 20000,
        "batch_size": 256,
        "lr": 1e-3,
        "train_on": "mixture",  # mixture | dataset
        "checkpoint": None,
        "init_seed": 0,
    },
    "classifier": {
        "kind": "baseline",  # baseline | diffaug | bayes (plain heads)
        "steps": 8000,
        "batch_size": 128,
        "lr": 1e-3,
        "checkpoint": None,
        "init_seed": 0,
    },
    "guidance_classifier": {
        "kind": "noisy",  # noisy | da | bayes-time
        "steps": 4000,
        "batch_size": 128,
        "lr": 1e-3,
        "checkpoint": None,
        "init_seed": 0,
    },
    "diffaug": {
        "t_range": [0.0, 1.0],
        "combine_weight": 0.5,
        "use_x0_scale": True,
        "samples_per_example": 1,
    },
    "ensemble": {"times": "paper-grid", "draws_per_time": 1, "use_x0_scale": True},
    "guidance": {
        "lambda_s": 1.0,
        "scale_placement": "on-classifier-gradient",
        "classifier_kind": "noisy",
        "target_class": 0,
    },
    "sampling": {"n_steps": 1000, "n_corrector": 1, "snr": 0.16, "n_samples": 10000},
    "certify": {"sigma_ts": [0.25, 0.5, 1.0], "n0": 100, "n": 10000, "alpha": 1e-3, "n_examples": 20},
    "ood": {"mode": "clean", "t": 0.3, "out_fixture": "near_ood", "translate": None},
    "entropy": {"t_grid": "paper-grid", "draws": 1},
    "shift": {"kinds": ["additive-noise", "rotation", "translation", "scaling"], "severities": [1, 2, 3, 4, 5]},
    "prdc": {"k": 5, "generated": None, "n_real": 2000},
    "theorem1": {"n_points": 200, "tolerance": 1e-4},
    "gradient": {"n_points": 100, "t": 0.35},
    "svd": {"n_points": 10, "t": 0.5},
    "seeds": [0],
    "output": "runs/out",
}


def _merge_strict(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigurationError(f"expected an object at {path or 'top level'}")
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigurationError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and defaults[key]:
            out[key] = _merge_strict(defaults[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(user: dict | None = None, overrides=None, seed: int | None = None,
                   output: str | None = None) -> dict:
    """Merge defaults, a user config, and dotted-path overrides into one tree."""
    cfg = _merge_strict(DEFAULT_CONFIG, user or {})
    if cfg["schema_version"] != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(
            f"config schema_version {cfg['schema_version']} != {CONFIG_SCHEMA_VERSION}"
        )
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"unknown config path: {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"unknown config key: {key}")
        node[parts[-1]] = value
    if seed is not None:
        cfg["seeds"] = [int(seed)]
    if output is not None:
        cfg["output"] = str(output)
    return cfg


def load_config(path=None, overrides=None, seed=None, output=None) -> dict:
    user = None
    if path is not None:
        with open(path) as f:
            user = json.load(f)
    return resolve_config(user, overrides, seed, output)


def config_hash(cfg: dict) -> str:
    """Stable hash of everything that determines results (the output path doesn't)."""
    body = {k: v for k, v in cfg.items() if k != "output"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


# -- factories -----------------------------------------------------------------

_PACKAGED_FIXTURES = {
    "canonical": gmm_mod.canonical_fixture,
    "two_class": gmm_mod.two_class_fixture,
    "near_ood": gmm_mod.near_ood_fixture,
}


def build_fixture(name_or_path: str) -> gmm_mod.GaussianMixture:
    if name_or_path in _PACKAGED_FIXTURES:
        return _PACKAGED_FIXTURES[name_or_path]()
    if Path(name_or_path).exists():
        return gmm_mod.load_fixture(name_or_path)
    raise ConfigurationError(
        f"fixture {name_or_path!r} is neither packaged ({sorted(_PACKAGED_FIXTURES)}) nor a file"
    )


def build_schedule(cfg: dict) -> DiffusionSchedule:
    s = cfg["schedule"]
    return DiffusionSchedule(
        kind=s["kind"],
        sigma_min=s["sigma_min"],
        sigma_max=s["sigma_max"],
        beta_min=s["beta_min"],
        beta_max=s["beta_max"],
    )


def resolve_time_grid(value, step: int = 50, t_max: int = 450):
    if value == "paper-grid":
        return paper_time_grid(step=step, t_max=t_max)
    return tuple(float(t) for t in value)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent substream keyed by (seed, *keys); order-free derivation."""
    return np.random.default_rng([int(seed), *[int(k) & 0x7FFFFFFF for k in keys]])
