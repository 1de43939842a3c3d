"""Training objectives: score matching, classifier training with and without
diffuse-and-denoise augmentation, and both guidance-classifier variants.

Every trainer is deterministic given its generator: batches, diffusion times,
and noise are the only stochastic inputs, and all of them come from the
caller's stream. Augmentations are drawn fresh at every step, never cached.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .classifiers import (
    DenoisingAugmentedClassifier,
    PlainClassifier,
    TimeConditionalClassifier,
    default_classifier_spec,
)
from .errors import ConfigurationError, TrainingDiverged
from .gmm import LabeledDataset, LabeledExample
from .nnet import (
    Adam,
    AdamState,
    Checkpoint,
    MLP,
    NetworkSpec,
    cross_entropy,
    loss_trace_digest,
    time_embedding,
)
from .scores import LearnedScore, default_score_spec
from .sde import DiffusionSchedule, denoise_onestep_batch, forward_diffuse_batch

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 500


@dataclass(frozen=True)
class DiffAugConfig:
    """Knobs of the diffuse-and-denoise augmentation."""

    t_range: tuple = (0.0, 1.0)
    combine_weight: float = 0.5
    use_x0_scale: bool = True
    samples_per_example: int = 1

    def __post_init__(self):
        lo, hi = self.t_range
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigurationError(f"need 0 <= t_lo < t_hi <= 1, got {self.t_range}")
        if not 0.0 <= self.combine_weight <= 1.0:
            raise ConfigurationError("combine_weight must lie in [0, 1]")
        if self.samples_per_example < 1:
            raise ConfigurationError("samples_per_example must be >= 1")


class _DivergenceGuard:
    """Aborts a run when the loss exceeds 10x its initial value for too long."""

    def __init__(self):
        self.initial = None
        self.bad_streak = 0

    def check(self, loss: float, trace):
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss}", loss_trace=trace)
        if self.initial is None:
            self.initial = max(loss, 1e-12)
            return
        if loss > DIVERGENCE_FACTOR * self.initial:
            self.bad_streak += 1
            if self.bad_streak >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(
                    f"loss {loss:.3g} stayed above {DIVERGENCE_FACTOR}x initial "
                    f"({self.initial:.3g}) for {DIVERGENCE_PATIENCE} steps",
                    loss_trace=trace,
                )
        else:
            self.bad_streak = 0


def _clean_batch_source(dataset):
    """Batch sampler over a finite dataset, or fresh mixture draws when given
    a GaussianMixture (the infinite-data limit)."""
    from .gmm import GaussianMixture, sample_dataset

    if isinstance(dataset, GaussianMixture):
        dim = dataset.dim

        def draw(rng, batch_size):
            ds = sample_dataset(dataset, batch_size, rng)
            return ds.x, ds.y

        return draw, dim
    x_all = dataset.x if isinstance(dataset, LabeledDataset) else np.asarray(dataset, dtype=np.float64)
    y_all = dataset.y if isinstance(dataset, LabeledDataset) else None

    def draw(rng, batch_size):
        idx = rng.integers(0, x_all.shape[0], size=batch_size)
        return x_all[idx], None if y_all is None else y_all[idx]

    return draw, x_all.shape[1]


def make_diffaug(example: LabeledExample, schedule: DiffusionSchedule, score,
                 config: DiffAugConfig, rng: np.random.Generator) -> LabeledExample:
    """Diffuse one example to a random time, denoise once, keep the label."""
    aug = make_diffaug_batch(example.x0[None, :], schedule, score, config, rng)
    return LabeledExample(x0=aug[0], y=example.y)


def make_diffaug_batch(x0: np.ndarray, schedule: DiffusionSchedule, score,
                       config: DiffAugConfig, rng: np.random.Generator,
                       t_fixed: float | None = None) -> np.ndarray:
    """Vectorized diffuse-and-denoise: fresh t and noise per row.

    ``t_fixed`` pins every row to one diffusion time (used by time sweeps and
    test-time ensembling); otherwise t ~ U(t_range) per row.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    if t_fixed is None:
        lo, hi = config.t_range
        t = rng.uniform(lo, hi, size=B)
    else:
        t = np.full(B, float(t_fixed))
    x = forward_diffuse_batch(schedule, x0, t, rng)
    x_hat, x0_scale = denoise_onestep_batch(schedule, score, x, t)
    return x0_scale if config.use_x0_scale else x_hat


def _run_adam(steps: int, net: MLP, step_fn, lr: float, trace_every: int,
              cosine_decay: bool = False, final_lr_frac: float = 0.01):
    state = AdamState.zeros(net.params.size)
    guard = _DivergenceGuard()
    trace = []
    t0 = time.monotonic()
    for step in range(steps):
        loss_parts, grad = step_fn(net, step)
        guard.check(loss_parts["loss"], trace)
        if cosine_decay:
            frac = final_lr_frac + (1 - final_lr_frac) * 0.5 * (1 + np.cos(np.pi * step / steps))
        else:
            frac = 1.0
        new_params, state = Adam(lr=lr * frac).update(net.params, grad, state)
        net = MLP(net.spec, new_params)
        if step % trace_every == 0 or step == steps - 1:
            trace.append({"step": step, **loss_parts, "wall_s": time.monotonic() - t0})
    return net, trace


def train_score(dataset, schedule: DiffusionSchedule, spec: NetworkSpec | None = None,
                steps: int = 20000, batch_size: int = 256, lr: float = 1e-3,
                rng: np.random.Generator | None = None, trace_every: int = 50):
    """Denoising score matching with sigma^2 weighting.

    Minimizes E ||sigma(t) s(x, t) + eps||^2 over t ~ U(0, 1),
    x = mean_coeff(t) x0 + sigma(t) eps. ``dataset`` may be a finite sample
    or a GaussianMixture, in which case every step draws fresh clean data.

    Returns (LearnedScore, trace).
    """
    draw, d = _clean_batch_source(dataset)
    spec = spec if spec is not None else default_score_spec(dim=d)
    rng = np.random.default_rng(0) if rng is None else rng
    net = MLP(spec)
    temb_width = dict(spec.input_blocks)["temb"]

    def step_fn(net, step):
        x0, _ = draw(rng, batch_size)
        t = rng.uniform(0.0, 1.0, size=batch_size)
        eps = rng.standard_normal((batch_size, d))
        sig = np.asarray(schedule.sigma(t))
        x = np.asarray(schedule.mean_coeff(t))[:, None] * x0 + sig[:, None] * eps
        blocks = (x, time_embedding(t, temb_width))
        # network head r = sigma * s, so sigma^2-weighted DSM reads ||r + eps||^2
        r, cache = net.forward(blocks, want_cache=True)
        resid = r + eps
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        grad, _ = net.backward(cache, 2.0 * resid / batch_size)
        return {"loss": loss}, grad

    net, trace = _run_adam(steps, net, step_fn, lr, trace_every, cosine_decay=True)
    return LearnedScore(net, schedule), trace


def train_classifier(dataset: LabeledDataset, schedule: DiffusionSchedule, score=None,
                     config: DiffAugConfig | None = None, spec: NetworkSpec | None = None,
                     steps: int = 3000, batch_size: int = 128, lr: float = 1e-3,
                     rng: np.random.Generator | None = None, trace_every: int = 50):
    """Plain cross-entropy classifier, optionally mixed with augmented batches.

    With ``config`` given, each step minimizes
    ``w * L_clean + (1 - w) * L_augmented`` on the same batch with fresh
    augmentation draws; ``config=None`` (or w = 1) is the clean baseline.

    Returns (PlainClassifier, trace).
    """
    n_classes = int(dataset.y.max()) + 1
    spec = spec if spec is not None else default_classifier_spec("plain", dataset.x.shape[1], n_classes)
    rng = np.random.default_rng(0) if rng is None else rng
    net = MLP(spec)
    if config is not None and config.combine_weight < 1.0 and score is None:
        raise ConfigurationError("augmented training needs a score model")

    def step_fn(net, step):
        idx = rng.integers(0, len(dataset), size=batch_size)
        x0, y = dataset.x[idx], dataset.y[idx]
        logits, cache = net.forward(x0, want_cache=True)
        loss_orig, dlogits = cross_entropy(logits, y)
        grad_orig, _ = net.backward(cache, dlogits)
        if config is None or config.combine_weight >= 1.0:
            return {"loss": loss_orig, "loss_orig": loss_orig, "loss_aug": 0.0}, grad_orig

        w = config.combine_weight
        reps = config.samples_per_example
        aug_losses, grad_aug = [], 0.0
        for _ in range(reps):
            x_aug = make_diffaug_batch(x0, schedule, score, config, rng)
            logits_a, cache_a = net.forward(x_aug, want_cache=True)
            loss_a, dlogits_a = cross_entropy(logits_a, y)
            g_a, _ = net.backward(cache_a, dlogits_a)
            aug_losses.append(loss_a)
            grad_aug = grad_aug + g_a
        loss_aug = float(np.mean(aug_losses))
        grad = w * grad_orig + (1.0 - w) * grad_aug / reps
        total = w * loss_orig + (1.0 - w) * loss_aug
        return {"loss": total, "loss_orig": loss_orig, "loss_aug": loss_aug}, grad

    net, trace = _run_adam(steps, net, step_fn, lr, trace_every)
    return PlainClassifier(net), trace


def train_noisy_guidance(dataset: LabeledDataset, schedule: DiffusionSchedule,
                         spec: NetworkSpec | None = None, steps: int = 4000,
                         batch_size: int = 128, lr: float = 1e-3,
                         rng: np.random.Generator | None = None, trace_every: int = 50):
    """Time-conditional classifier on noisy inputs: E[-log p(y | x, t)], t ~ U(0,1)."""
    n_classes = int(dataset.y.max()) + 1
    spec = spec if spec is not None else default_classifier_spec("time", dataset.x.shape[1], n_classes)
    rng = np.random.default_rng(0) if rng is None else rng
    net = MLP(spec)
    temb_width = dict(spec.input_blocks)["temb"]

    def step_fn(net, step):
        idx = rng.integers(0, len(dataset), size=batch_size)
        x0, y = dataset.x[idx], dataset.y[idx]
        t = rng.uniform(0.0, 1.0, size=batch_size)
        x = forward_diffuse_batch(schedule, x0, t, rng)
        logits, cache = net.forward((x, time_embedding(t, temb_width)), want_cache=True)
        loss, dlogits = cross_entropy(logits, y)
        grad, _ = net.backward(cache, dlogits)
        return {"loss": loss}, grad

    net, trace = _run_adam(steps, net, step_fn, lr, trace_every)
    return TimeConditionalClassifier(net, schedule), trace


def train_da_guidance(dataset: LabeledDataset, schedule: DiffusionSchedule, score,
                      spec: NetworkSpec | None = None, steps: int = 4000,
                      batch_size: int = 128, lr: float = 1e-3, use_x0_scale: bool = True,
                      rng: np.random.Generator | None = None, trace_every: int = 50):
    """Denoising-augmented guidance classifier: E[-log p(y | x, x_hat, t)].

    The score model only produces inputs; its parameters receive no updates.
    """
    n_classes = int(dataset.y.max()) + 1
    spec = spec if spec is not None else default_classifier_spec("da", dataset.x.shape[1], n_classes)
    rng = np.random.default_rng(0) if rng is None else rng
    net = MLP(spec)
    temb_width = dict(spec.input_blocks)["temb"]

    def step_fn(net, step):
        idx = rng.integers(0, len(dataset), size=batch_size)
        x0, y = dataset.x[idx], dataset.y[idx]
        t = rng.uniform(0.0, 1.0, size=batch_size)
        x = forward_diffuse_batch(schedule, x0, t, rng)
        x_hat, x0_scale = denoise_onestep_batch(schedule, score, x, t)
        h = x0_scale if use_x0_scale else x_hat
        logits, cache = net.forward((x, h, time_embedding(t, temb_width)), want_cache=True)
        loss, dlogits = cross_entropy(logits, y)
        grad, _ = net.backward(cache, dlogits)
        return {"loss": loss}, grad

    net, trace = _run_adam(steps, net, step_fn, lr, trace_every)
    return DenoisingAugmentedClassifier(net, schedule), trace


def entropy_curve(classifier: PlainClassifier, dataset: LabeledDataset,
                  schedule: DiffusionSchedule, score, t_grid,
                  rng: np.random.Generator, draws: int = 1,
                  use_x0_scale: bool = True):
    """Mean prediction entropy on diffuse-and-denoise draws, per grid time.

    Returns a list of (t, mean entropy) pairs in grid order; the grid must be
    sorted ascending.
    """
    t_grid = [float(t) for t in t_grid]
    if t_grid != sorted(t_grid):
        raise ConfigurationError("t_grid must be sorted ascending")
    cfg = DiffAugConfig(use_x0_scale=use_x0_scale)
    out = []
    for t in t_grid:
        ent = []
        for _ in range(draws):
            aug = make_diffaug_batch(dataset.x, schedule, score, cfg, rng, t_fixed=t)
            p = classifier.predict_proba(aug)
            ent.append(float(np.mean(prediction_entropy(p))))
        out.append((t, float(np.mean(ent))))
    return out


def prediction_entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) per row, with 0 log 0 = 0."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def checkpoint_of(model, config_hash: str = "", extra_meta: dict | None = None,
                  trace=None) -> Checkpoint:
    """Wrap a trained model's network in a serializable checkpoint."""
    net = model.net
    meta = {
        "config_hash": config_hash,
        "kind": model.kind,
        "steps": None if trace is None else int(trace[-1]["step"]) + 1,
        "loss_digest": None if trace is None else loss_trace_digest([r["loss"] for r in trace]),
    }
    if extra_meta:
        meta.update(extra_meta)
    return Checkpoint(spec=net.spec, parameters=net.params.copy(), training_meta=meta)
