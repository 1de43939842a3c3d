"""Classifier heads used across training, evaluation, and guidance.

Network-backed variants:

* ``PlainClassifier``      p(y | x)           -- data-scale inputs
* ``TimeConditionalClassifier`` p(y | x, t)   -- noisy guidance classifier
* ``DenoisingAugmentedClassifier`` p(y | x, x_hat, t) -- noisy plus denoised
  inputs presented simultaneously

Analytic referees:

* ``BayesClassifier``      exact clean-data posterior (the accuracy referee)
* ``BayesTimeClassifier``  exact noisy posterior p(y | x, t) with closed-form
  input gradients (the guidance-exactness oracle)
"""

from __future__ import annotations

import numpy as np

from . import gmm as gmm_mod
from .errors import ConfigurationError
from .nnet import MLP, Checkpoint, NetworkSpec, log_softmax, softmax, time_embedding
from .sde import DiffusionSchedule


def _as_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _logp_upstream(logits, y):
    """d log p(y) / d logits = onehot(y) - softmax(logits)."""
    p = softmax(logits)
    up = -p
    up[np.arange(up.shape[0]), y] += 1.0
    return up


class PlainClassifier:
    kind = "plain"

    def __init__(self, net: MLP):
        if net.spec.output_kind != "logits" or [n for n, _ in net.spec.input_blocks] != ["x"]:
            raise ConfigurationError("plain classifier needs a single 'x' block and a logits head")
        self.net = net

    @property
    def n_classes(self) -> int:
        return self.net.spec.output_dim

    def logits(self, x):
        return self.net.forward(np.asarray(x, dtype=np.float64))

    def log_probs(self, x):
        return log_softmax(self.logits(x))

    def predict_proba(self, x):
        return softmax(self.logits(x))

    def predict(self, x):
        return np.argmax(self.log_probs(x), axis=-1)

    def grad_log_prob(self, x, y):
        """Gradient of log p(y | x) with respect to x."""
        xb, squeeze = _as_rows(x)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        logits, cache = self.net.forward(xb, want_cache=True)
        _, (gx,) = self.net.backward(cache, _logp_upstream(np.atleast_2d(logits), yb))
        return gx[0] if squeeze else gx


class TimeConditionalClassifier:
    kind = "time"

    def __init__(self, net: MLP, schedule: DiffusionSchedule):
        names = [n for n, _ in net.spec.input_blocks]
        if net.spec.output_kind != "logits" or names != ["x", "temb"]:
            raise ConfigurationError("time classifier needs blocks (x, temb) and a logits head")
        self.net = net
        self.schedule = schedule
        self._temb_width = dict(net.spec.input_blocks)["temb"]

    @property
    def n_classes(self) -> int:
        return self.net.spec.output_dim

    def _blocks(self, x, t):
        xb, squeeze = _as_rows(x)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        return (xb, time_embedding(tt, self._temb_width)), squeeze

    def logits(self, x, t):
        blocks, squeeze = self._blocks(x, t)
        out = self.net.forward(blocks)
        return out[0] if squeeze else out

    def log_probs(self, x, t):
        return log_softmax(self.logits(x, t))

    def predict_proba(self, x, t):
        return softmax(self.logits(x, t))

    def grad_log_prob(self, x, t, y):
        """Gradient of log p(y | x, t) with respect to x."""
        blocks, squeeze = self._blocks(x, t)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        logits, cache = self.net.forward(blocks, want_cache=True)
        _, (gx, _) = self.net.backward(cache, _logp_upstream(np.atleast_2d(logits), yb))
        return gx[0] if squeeze else gx


class DenoisingAugmentedClassifier:
    kind = "da"

    def __init__(self, net: MLP, schedule: DiffusionSchedule):
        names = [n for n, _ in net.spec.input_blocks]
        if net.spec.output_kind != "logits" or names != ["x", "xhat", "temb"]:
            raise ConfigurationError("DA classifier needs blocks (x, xhat, temb) and a logits head")
        self.net = net
        self.schedule = schedule
        self._temb_width = dict(net.spec.input_blocks)["temb"]

    @property
    def n_classes(self) -> int:
        return self.net.spec.output_dim

    def _blocks(self, x, x_hat, t, zero_block=None):
        xb, squeeze = _as_rows(x)
        hb, _ = _as_rows(x_hat)
        if zero_block == "noisy":
            xb = np.zeros_like(xb)
        elif zero_block == "denoised":
            hb = np.zeros_like(hb)
        elif zero_block is not None:
            raise ConfigurationError(f"unknown zero_block {zero_block!r}")
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        return (xb, hb, time_embedding(tt, self._temb_width)), squeeze

    def logits(self, x, x_hat, t, zero_block=None):
        blocks, squeeze = self._blocks(x, x_hat, t, zero_block)
        out = self.net.forward(blocks)
        return out[0] if squeeze else out

    def log_probs(self, x, x_hat, t, zero_block=None):
        return log_softmax(self.logits(x, x_hat, t, zero_block))

    def predict_proba(self, x, x_hat, t, zero_block=None):
        return softmax(self.logits(x, x_hat, t, zero_block))

    def grad_log_prob(self, x, x_hat, t, y):
        """Partial gradients of log p(y | x, x_hat, t) w.r.t. both image blocks."""
        blocks, squeeze = self._blocks(x, x_hat, t)
        yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
        logits, cache = self.net.forward(blocks, want_cache=True)
        _, (gx, gh, _) = self.net.backward(cache, _logp_upstream(np.atleast_2d(logits), yb))
        if squeeze:
            return gx[0], gh[0]
        return gx, gh


class BayesClassifier:
    """Exact posterior argmax under the clean mixture; ties go to the lowest label."""

    kind = "bayes"

    def __init__(self, gmm: gmm_mod.GaussianMixture):
        self.gmm = gmm

    @property
    def n_classes(self) -> int:
        return self.gmm.n_classes

    def predict_proba(self, x):
        _, post = gmm_mod.bayes_classify(self.gmm, x)
        return post

    def log_probs(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self.predict_proba(x))

    def predict(self, x):
        label, _ = gmm_mod.bayes_classify(self.gmm, x)
        return label


class BayesTimeClassifier:
    """Exact p(y | x, t) under the diffused mixture, with closed-form gradients."""

    kind = "bayes-time"

    def __init__(self, gmm: gmm_mod.GaussianMixture, schedule: DiffusionSchedule):
        self.gmm = gmm
        self.schedule = schedule

    @property
    def n_classes(self) -> int:
        return self.gmm.n_classes

    def log_probs(self, x, t):
        return gmm_mod.class_log_posteriors(self.gmm, self.schedule, x, t)

    def predict_proba(self, x, t):
        return np.exp(self.log_probs(x, t))

    def grad_log_prob(self, x, t, y):
        """grad_x log p(y | x, t) = class-conditional score minus marginal score."""
        y = int(y) if np.ndim(y) == 0 else y
        if np.ndim(y) == 0:
            cond = gmm_mod.class_conditional_score(self.gmm, self.schedule, x, t, y)
        else:
            xb, _ = _as_rows(x)
            cond = np.empty_like(xb)
            for c in np.unique(np.asarray(y)):
                rows = np.asarray(y) == c
                cond[rows] = gmm_mod.class_conditional_score(
                    self.gmm, self.schedule, xb[rows], np.broadcast_to(t, (xb.shape[0],))[rows], int(c)
                )
        return cond - gmm_mod.marginal_score(self.gmm, self.schedule, x, t)


def default_classifier_spec(kind: str, dim: int = 2, n_classes: int = 3,
                            temb_width: int = 32, init_seed: int = 0) -> NetworkSpec:
    """2x64 tanh logits heads for each classifier variant."""
    blocks = {
        "plain": (("x", dim),),
        "time": (("x", dim), ("temb", temb_width)),
        "da": (("x", dim), ("xhat", dim), ("temb", temb_width)),
    }
    if kind not in blocks:
        raise ConfigurationError(f"unknown classifier kind {kind!r}")
    return NetworkSpec(
        input_blocks=blocks[kind],
        hidden=(64, 64),
        output_kind="logits",
        output_dim=n_classes,
        activation="tanh",
        init_seed=init_seed,
    )


def classifier_from_checkpoint(ckpt: Checkpoint, schedule: DiffusionSchedule | None = None):
    """Rebuild the right classifier wrapper from a checkpoint's block names."""
    names = [n for n, _ in ckpt.spec.input_blocks]
    net = ckpt.build()
    if names == ["x"]:
        return PlainClassifier(net)
    if names == ["x", "temb"]:
        return TimeConditionalClassifier(net, schedule)
    if names == ["x", "xhat", "temb"]:
        return DenoisingAugmentedClassifier(net, schedule)
    raise ConfigurationError(f"unrecognized classifier blocks {names}")
