"""diffuselab: a 2D numerical laboratory for diffuse-and-denoise augmentation.

Exact Gaussian-mixture oracles referee every moving part: analytic scores,
one-step denoising, the Jacobian/posterior-covariance identity, test-time
ensembling, denoised-smoothing certification, and classifier-guided reverse
diffusion.
"""

from .kernels import ACTIVE_BACKEND

__version__ = "0.1.0"

__all__ = ["ACTIVE_BACKEND", "__version__"]
