"""Score-function models s(x, t).

Two interchangeable implementations: the exact mixture score (the oracle
limit of a perfectly trained network) and a trained dense network. Both are
callable as ``score(x, t)`` with x of shape (d,) or (B, d) and t a scalar or
per-row array, and both expose the vector-Jacobian product through the
one-step denoiser x_hat(x) = x + sigma^2(t) s(x, t), which is what gradient
analysis and classifier guidance backpropagate through.
"""

from __future__ import annotations

import numpy as np

from . import gmm as gmm_mod
from .nnet import MLP, Checkpoint, NetworkSpec, time_embedding
from .sde import DiffusionSchedule


class AnalyticMixtureScore:
    """Exact score of a Gaussian mixture diffused under a schedule."""

    kind = "analytic"

    def __init__(self, gmm: gmm_mod.GaussianMixture, schedule: DiffusionSchedule):
        self.gmm = gmm
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def __call__(self, x, t):
        return gmm_mod.marginal_score(self.gmm, self.schedule, x, t)

    def denoiser_jacobian(self, x, t):
        """d x_hat / d x, exactly the posterior covariance over sigma^2."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        xb = x[None, :] if squeeze else x
        _, _, cov = gmm_mod.posterior_moments_arrays(self.gmm, self.schedule, xb, t)
        s2 = np.asarray(self.schedule.sigma(t), dtype=np.float64) ** 2
        jac = cov / np.reshape(s2, (-1, 1, 1)) if np.ndim(s2) else cov / s2
        return jac[0] if squeeze else jac

    def denoiser_vjp(self, x, t, v):
        """(d x_hat / d x)^T v; symmetric for the exact score."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        xb = x[None, :] if squeeze else x
        vb = np.asarray(v, dtype=np.float64)
        vb = vb[None, :] if vb.ndim == 1 else vb
        jac = self.denoiser_jacobian(xb, t)
        out = np.einsum("bij,bj->bi", jac, vb)
        return out[0] if squeeze else out


class LearnedScore:
    """Dense-network score head with sinusoidal time features.

    The network predicts the scaled residual r(x, t) (the negated noise at
    the optimum), and the score is r(x, t) / sigma(t); keeping the network
    output O(1) across three decades of sigma is what makes the small-sigma
    regime learnable.
    """

    kind = "learned"
    SIGMA_FLOOR = 1e-12

    def __init__(self, net: MLP, schedule: DiffusionSchedule):
        self.net = net
        self.schedule = schedule
        blocks = dict(net.spec.input_blocks)
        if set(blocks) != {"x", "temb"} or net.spec.output_kind != "regression":
            raise ValueError("score network needs input blocks (x, temb) and a regression head")
        self._temb_width = blocks["temb"]

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, schedule: DiffusionSchedule) -> "LearnedScore":
        return cls(ckpt.build(), schedule)

    @property
    def dim(self) -> int:
        return dict(self.net.spec.input_blocks)["x"]

    def _blocks(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        xb = x[None, :] if squeeze else x
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
        return xb, time_embedding(tt, self._temb_width), squeeze

    def _sigma_cols(self, t, n):
        sig = np.broadcast_to(np.asarray(self.schedule.sigma(t), dtype=np.float64), (n,))
        return np.maximum(sig, self.SIGMA_FLOOR)[:, None]

    def residual(self, x, t):
        """Raw network output r(x, t) = sigma(t) * score."""
        xb, temb, squeeze = self._blocks(x, t)
        out = self.net.forward((xb, temb))
        return out[0] if squeeze else out

    def __call__(self, x, t):
        xb, temb, squeeze = self._blocks(x, t)
        out = self.net.forward((xb, temb)) / self._sigma_cols(t, xb.shape[0])
        return out[0] if squeeze else out

    def denoiser_vjp(self, x, t, v):
        """(d x_hat / d x)^T v = v + sigma(t) (d r/d x)^T v via one reverse pass."""
        xb, temb, squeeze = self._blocks(x, t)
        vb = np.asarray(v, dtype=np.float64)
        vb = vb[None, :] if vb.ndim == 1 else vb
        grads = self.net.input_vjp((xb, temb), vb)
        sig = np.broadcast_to(np.asarray(self.schedule.sigma(t), dtype=np.float64), (xb.shape[0],))
        out = vb + sig[:, None] * grads[0]
        return out[0] if squeeze else out


def default_score_spec(dim: int = 2, temb_width: int = 32, init_seed: int = 0) -> NetworkSpec:
    """3x128 tanh regression net on (x, time embedding)."""
    return NetworkSpec(
        input_blocks=(("x", dim), ("temb", temb_width)),
        hidden=(128, 128, 128),
        output_kind="regression",
        output_dim=dim,
        activation="tanh",
        init_seed=init_seed,
    )
