"""Personalised federated learning via local MAP estimation with a learnable
input-convex prior, plus the numerical machinery to certify its convergence
behaviour at desk scale.
"""

from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
