"""Implicit differentiable planning on 2D grids.

Value-iteration-style planner layers whose forward pass solves a Bellman
fixed point with pluggable solvers, and whose backward pass solves the
linear adjoint fixed point at the equilibrium instead of backpropagating
through the forward iterations. An explicitly unrolled mode is kept as the
reference backward path.
"""

from .solvers import (
    DivergenceError,
    EquilibriumResult,
    SolverConfig,
    anderson,
    forward_iterate,
    relative_residual,
    solve,
)
from .tensor_ad import GradientTape, Tensor, backward, channel_max, conv2d, finite_diff, pointwise

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GradientTape",
    "conv2d",
    "channel_max",
    "pointwise",
    "backward",
    "finite_diff",
    "SolverConfig",
    "EquilibriumResult",
    "DivergenceError",
    "relative_residual",
    "forward_iterate",
    "anderson",
    "solve",
    "__version__",
]
