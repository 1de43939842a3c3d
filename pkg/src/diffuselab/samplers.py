"""Reverse-diffusion samplers: Euler-Maruyama predictor and Langevin corrector.

All steppers operate on (B, d) batches; chains never interact (corrector step
sizes are per-chain), so a batched run equals B independent trajectories
driven by one stream in a fixed draw order.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericalError
from .sde import DiffusionSchedule, NoisySample

_T_CLAMP_EPS = 1e-12


def _em_update(schedule, score, x, t, dt, eps):
    g = float(schedule.diffusion(t))
    drift = schedule.drift(x, t) - g * g * np.asarray(score(x, t))
    return x + drift * dt + g * np.sqrt(-dt) * eps


def _flow_update(schedule, score, x, t, dt):
    # probability-flow drift: noiseless, half diffusion weight on the score
    g = float(schedule.diffusion(t))
    drift = schedule.drift(x, t) - 0.5 * g * g * np.asarray(score(x, t))
    return x + drift * dt


def reverse_sde_step(schedule: DiffusionSchedule, score, state: NoisySample, dt: float,
                     rng: np.random.Generator) -> NoisySample:
    """One Euler-Maruyama step of the reverse SDE (dt < 0).

    The final step of a trajectory -- any step that reaches or would cross
    t = 0 -- is clamped to end exactly at 0 and applied as a noiseless
    probability-flow update; the result carries ``clamped=True``.
    """
    if dt >= 0:
        raise DomainError(f"reverse step needs dt < 0, got {dt}")
    t = state.t
    t_new = t + dt
    if t_new <= _T_CLAMP_EPS:
        x_new = _flow_update(schedule, score, state.x, t, -t)
        return NoisySample(x=x_new, t=0.0, origin_index=state.origin_index, clamped=True)
    eps = rng.standard_normal(state.x.shape)
    x_new = _em_update(schedule, score, state.x, t, dt, eps)
    if not np.all(np.isfinite(x_new)):
        raise NumericalError(f"reverse step from t={t} produced non-finite state")
    return NoisySample(x=x_new, t=t_new, origin_index=state.origin_index)


def langevin_correct(schedule, score, x, t, n_steps: int, snr: float, rng) -> np.ndarray:
    """SNR-calibrated Langevin corrector steps at fixed t.

    The step size is a scalar per iteration, set from batch-averaged gradient
    and noise norms; a state-dependent per-chain step would bias the
    stationary distribution.
    """
    for _ in range(n_steps):
        s = np.asarray(score(x, t))
        z = rng.standard_normal(x.shape)
        grad_norm = np.linalg.norm(s, axis=-1).mean()
        noise_norm = np.linalg.norm(z, axis=-1).mean()
        step = 2.0 * (snr * noise_norm / grad_norm) ** 2 if grad_norm > 0 else 0.0
        x = x + step * s + np.sqrt(2.0 * step) * z
    return x


def terminal_prior_draw(schedule: DiffusionSchedule, n: int, dim: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw chain initializations from the t=1 reference distribution."""
    z = rng.standard_normal((n, dim))
    if schedule.kind == "ve":
        return z * schedule.sigma_max
    return z


def pc_sample(schedule: DiffusionSchedule, score, n_steps: int, n_corrector: int, snr: float,
              rng: np.random.Generator, n_samples: int = 1, dim: int | None = None,
              x_init: np.ndarray | None = None, t_start: float = 1.0) -> np.ndarray:
    """Predictor-corrector reverse sampling to t = 0.

    Predictor: Euler-Maruyama on the reverse SDE. Corrector: ``n_corrector``
    Langevin steps per time node; ``n_corrector=0`` consumes no corrector
    randomness, so the trajectory matches plain Euler-Maruyama draw for draw.
    The final interval lands exactly on t = 0 with a noiseless
    probability-flow update.

    Returns terminal states of shape (n_samples, d).
    """
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    if n_corrector < 0:
        raise DomainError("n_corrector must be >= 0")
    if snr < 0:
        raise DomainError("snr must be >= 0")

    if x_init is not None:
        x = np.array(x_init, dtype=np.float64, ndmin=2)
    else:
        if dim is None:
            dim = getattr(score, "dim", None)
            if dim is None:
                raise DomainError("pass dim= or x_init= when the score model has no .dim")
        x = terminal_prior_draw(schedule, n_samples, dim, rng)

    times = np.linspace(t_start, 0.0, n_steps + 1)
    for i in range(n_steps):
        t, t_next = times[i], times[i + 1]
        if n_corrector and snr > 0:
            x = langevin_correct(schedule, score, x, t, n_corrector, snr, rng)
        elif n_corrector:
            rng.standard_normal((n_corrector,) + x.shape)  # keep the draw order of snr>0 runs
        dt = t_next - t
        if i == n_steps - 1:
            x = _flow_update(schedule, score, x, t, -t)
        else:
            eps = rng.standard_normal(x.shape)
            x = _em_update(schedule, score, x, t, dt, eps)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"sampler diverged at step {i} (t={t:.4f})")
    return x
