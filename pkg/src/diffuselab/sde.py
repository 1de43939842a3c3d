"""Forward diffusion schedules and one-step denoising.

Two schedule families are supported on the internal continuous time axis
t in [0, 1]:

* ``ve`` -- variance exploding: the state keeps its mean and accumulates
  noise with a geometrically growing standard deviation.
* ``vp`` -- variance preserving: the mean decays by ``mean_coeff(t)`` while
  the marginal variance approaches one (linear beta ramp).

Both define the perturbation kernel
``p_t(x | x0) = Normal(mean_coeff(t) * x0, sigma(t)^2 * I)`` in closed form,
which is all downstream code relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError

MEAN_COEFF_FLOOR = 1e-8


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"diffusion time must lie in [0, 1], got {t!r}")
    return t


@dataclass(frozen=True)
class DiffusionSchedule:
    """Closed-form noise schedule for the forward SDE dx = f dt + g dw.

    ``sigma(t)`` is the marginal perturbation stdev and ``mean_coeff(t)`` the
    mean decay factor (identically 1 for the VE family). Integer grid times
    0..999 from discrete-time configs map to t = i / 999.
    """

    kind: str
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    beta_min: float = 0.1
    beta_max: float = 20.0

    def __post_init__(self):
        if self.kind not in ("ve", "vp"):
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "ve" and not 0.0 < self.sigma_min < self.sigma_max:
            raise DomainError("VE schedule needs 0 < sigma_min < sigma_max")
        if self.kind == "vp" and not 0.0 < self.beta_min < self.beta_max:
            raise DomainError("VP schedule needs 0 < beta_min < beta_max")

    # -- scalar schedule functions (vectorized over t) ---------------------

    def sigma(self, t):
        t = _check_time(t)
        if self.kind == "ve":
            return self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        return np.sqrt(-np.expm1(-self._beta_integral(t)))

    def mean_coeff(self, t):
        t = _check_time(t)
        if self.kind == "ve":
            return np.ones_like(t)
        return np.exp(-0.5 * self._beta_integral(t))

    def beta(self, t):
        t = _check_time(t)
        if self.kind != "vp":
            raise DomainError("beta(t) is only defined for VP schedules")
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def _beta_integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def drift(self, x, t):
        """Forward drift f(x, t); zero for VE, -beta(t) x / 2 for VP."""
        t = _check_time(t)
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "ve":
            return np.zeros_like(x)
        return -0.5 * np.asarray(self.beta(t))[..., None] * x if x.ndim > 1 else -0.5 * self.beta(t) * x

    def diffusion(self, t):
        """Noise amplitude g(t) with g(t)^2 = d sigma^2/dt (+ mean-decay term for VP)."""
        t = _check_time(t)
        if self.kind == "ve":
            return self.sigma(t) * math.sqrt(2.0 * math.log(self.sigma_max / self.sigma_min))
        return np.sqrt(self.beta(t))

    def time_for_sigma(self, target: float) -> float:
        """Invert sigma(t) = target (VE) or sigma(t)/mean_coeff(t) = target (VP).

        For VP the inversion is on the noise-to-signal ratio, which is the
        quantity matched when smoothing a data-scale input.
        """
        if self.kind == "ve":
            if not self.sigma_min <= target <= self.sigma_max:
                raise DomainError(
                    f"sigma {target} outside attainable range "
                    f"[{self.sigma_min}, {self.sigma_max}]"
                )
            return math.log(target / self.sigma_min) / math.log(self.sigma_max / self.sigma_min)
        # VP: sigma/mc = sqrt(exp(B(t)) - 1), strictly increasing in t.
        lo, hi = 0.0, 1.0
        ratio = lambda t: math.sqrt(math.expm1(self._beta_integral(t)))
        if not ratio(0.0) <= target <= ratio(1.0):
            raise DomainError(f"noise ratio {target} outside [0, {ratio(1.0):.4g}]")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if ratio(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


@dataclass
class NoisySample:
    """State x at diffusion time t, optionally tagged with its clean origin."""

    x: np.ndarray
    t: float
    origin_index: int | None = None
    clamped: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        _check_time(self.t)
        if not np.all(np.isfinite(self.x)):
            raise NumericalError("noisy sample has non-finite coordinates")


@dataclass
class DenoisedSample:
    """One-step denoised estimate: x_hat on mean scale, x0_scale on data scale."""

    x_hat: np.ndarray
    x0_scale: np.ndarray
    t: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x_hat)) and np.all(np.isfinite(self.x0_scale))):
            raise NumericalError("denoised sample has non-finite coordinates")


def forward_diffuse(schedule: DiffusionSchedule, x0, t: float, rng: np.random.Generator,
                    origin_index: int | None = None) -> NoisySample:
    """Draw x ~ p_t(x | x0) = N(mean_coeff(t) x0, sigma(t)^2 I)."""
    t = float(_check_time(t))
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    x = schedule.mean_coeff(t) * x0 + schedule.sigma(t) * eps
    return NoisySample(x=x, t=t, origin_index=origin_index)


def forward_diffuse_batch(schedule: DiffusionSchedule, x0: np.ndarray, t: np.ndarray,
                          rng: np.random.Generator) -> np.ndarray:
    """Vectorized perturbation: x0 (B, d), t (B,) -> (B, d)."""
    t = _check_time(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    mc = np.asarray(schedule.mean_coeff(t))[:, None]
    sig = np.asarray(schedule.sigma(t))[:, None]
    return mc * x0 + sig * eps


def denoise_onestep(schedule: DiffusionSchedule, score, sample: NoisySample) -> DenoisedSample:
    """Single reverse step x_hat = x + sigma(t)^2 * score(x, t).

    ``x_hat`` estimates the perturbed-mean m_t; dividing by ``mean_coeff(t)``
    recovers the data-scale estimate (a no-op for VE).
    """
    t = sample.t
    s2 = float(schedule.sigma(t)) ** 2
    x_hat = sample.x + s2 * np.asarray(score(sample.x, t))
    mc = float(schedule.mean_coeff(t))
    if mc < MEAN_COEFF_FLOOR:
        raise NumericalError(
            f"mean_coeff(t)={mc:.3e} below {MEAN_COEFF_FLOOR}; refusing data-scale division"
        )
    return DenoisedSample(x_hat=x_hat, x0_scale=x_hat / mc, t=t)


def denoise_onestep_batch(schedule: DiffusionSchedule, score, x: np.ndarray,
                          t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized one-step denoiser for x (B, d) and per-row times t (B,).

    Returns (x_hat, x0_scale), both (B, d).
    """
    t = _check_time(t)
    x = np.asarray(x, dtype=np.float64)
    s2 = np.asarray(schedule.sigma(t)) ** 2
    x_hat = x + s2[:, None] * np.asarray(score(x, t))
    mc = np.asarray(schedule.mean_coeff(t))
    if np.any(mc < MEAN_COEFF_FLOOR):
        raise NumericalError("mean_coeff below floor in batch denoise")
    return x_hat, x_hat / mc[:, None]
