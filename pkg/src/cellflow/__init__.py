"""cellflow: growth-aware stochastic trajectory inference between snapshots.

Learns continuous drift/diffusion/growth dynamics in a geometry-regularized
latent space from time-stamped population snapshots, with optional spatial
neighborhood conditioning, a built-in synthetic data simulator, and an
evaluation harness.
"""

__version__ = "0.1.0"

from ._kernels import USE_NUMBA

__all__ = ["USE_NUMBA", "__version__"]
