"""Generic fixed-point solvers for v = g(v).

The same two solvers serve both the nonlinear forward system (value
iteration to an equilibrium) and the linear adjoint system of the implicit
backward pass: plain forward iteration and Anderson acceleration. Both stop
on a relative-residual threshold or an iteration cap, whichever comes
first; setting ``tol=0`` reproduces a fixed-iteration-count protocol
exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor_ad import ShapeMismatchError, Tensor

__all__ = [
    "SolverConfig",
    "EquilibriumResult",
    "DivergenceError",
    "relative_residual",
    "forward_iterate",
    "anderson",
    "solve",
    "default_forward_config",
    "default_backward_config",
]

log = logging.getLogger(__name__)

RESIDUAL_EPS = 1e-8


class DivergenceError(RuntimeError):
    """An iterate went NaN/Inf; carries the residual trace up to the fault."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class SolverConfig:
    kind: str = "forward_iteration"  # or "anderson"
    max_iter: int = 100
    tol: float = 1e-4  # relative-residual stop; 0 forces exactly max_iter steps
    memory: int = 5  # Anderson history length
    relaxation: float = 1.0  # Anderson mixing weight on g-values
    ridge: float = 1e-4  # Tikhonov term in the Anderson least squares

    def __post_init__(self):
        if self.kind not in ("forward_iteration", "anderson"):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not (0.0 < self.relaxation <= 1.0):
            raise ValueError("relaxation must lie in (0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")


def default_forward_config(max_iter: int = 80) -> SolverConfig:
    return SolverConfig(kind="forward_iteration", max_iter=max_iter, tol=1e-4)


def default_backward_config(max_iter: int = 15) -> SolverConfig:
    return SolverConfig(kind="anderson", max_iter=max_iter, tol=1e-6)


@dataclass
class EquilibriumResult:
    solution: Tensor
    residual_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def relative_residual(v: Tensor, fv: Tensor) -> float:
    """||fv - v||_2 / (||v||_2 + 1e-8)."""
    if v.shape != fv.shape:
        raise ShapeMismatchError(f"relative_residual: shapes {v.shape} != {fv.shape}")
    num = float(np.linalg.norm(fv.array - v.array))
    den = float(np.linalg.norm(v.array)) + RESIDUAL_EPS
    return num / den


def _check_finite(arr: np.ndarray, trace: list[float], solver: str) -> None:
    if not np.isfinite(arr).all():
        raise DivergenceError(
            f"{solver}: non-finite iterate after {len(trace)} iterations", trace
        )


def forward_iterate(g: Callable[[Tensor], Tensor], v0: Tensor, cfg: SolverConfig) -> EquilibriumResult:
    """Plain fixed-point iteration v <- g(v)."""
    v = v0
    trace: list[float] = []
    converged = False
    for _ in range(cfg.max_iter):
        fv = g(v)
        _check_finite(fv.array, trace, "forward_iterate")
        res = relative_residual(v, fv)
        trace.append(res)
        v = fv
        if res <= cfg.tol:
            converged = True
            break
    return EquilibriumResult(v, trace, len(trace), converged)


def anderson(g: Callable[[Tensor], Tensor], v0: Tensor, cfg: SolverConfig) -> EquilibriumResult:
    """Anderson acceleration with bounded memory.

    Keeps the last ``memory`` iterates/values, solves the ridge-regularized
    least-squares problem for mixing weights that sum to one (via the
    bordered normal equations), and mixes with relaxation ``beta``:
    v_next = beta * sum_i a_i g(v_i) + (1 - beta) * sum_i a_i v_i.
    A singular least-squares system falls back to a plain forward step.
    """
    shape = v0.shape
    v = v0
    xs: list[np.ndarray] = []
    fs: list[np.ndarray] = []
    rs: list[np.ndarray] = []
    trace: list[float] = []
    converged = False
    beta = cfg.relaxation

    for _ in range(cfg.max_iter):
        fv = g(v)
        _check_finite(fv.array, trace, "anderson")
        res = relative_residual(v, fv)
        trace.append(res)
        if res <= cfg.tol:
            v = fv
            converged = True
            break

        xs.append(v.array.reshape(-1))
        fs.append(fv.array.reshape(-1))
        rs.append(fs[-1] - xs[-1])
        if len(xs) > cfg.memory:
            xs.pop(0)
            fs.pop(0)
            rs.pop(0)

        n = len(xs)
        if n == 1:
            alphas = np.array([1.0])
        else:
            r_mat = np.stack(rs, axis=1)  # (dim, n)
            h = np.zeros((n + 1, n + 1))
            h[0, 1:] = 1.0
            h[1:, 0] = 1.0
            h[1:, 1:] = r_mat.T @ r_mat + cfg.ridge * np.eye(n)
            rhs = np.zeros(n + 1)
            rhs[0] = 1.0
            try:
                alphas = np.linalg.solve(h, rhs)[1:]
            except np.linalg.LinAlgError:
                alphas = None
            if alphas is not None and not np.isfinite(alphas).all():
                alphas = None
            if alphas is None:
                log.debug("anderson: singular mixing system, plain step at iter %d", len(trace))
                v = fv
                continue

        if n == 1:
            fa = fs[0]
            xa = xs[0]
        else:
            fa = np.stack(fs, axis=1) @ alphas
            xa = np.stack(xs, axis=1) @ alphas
        nxt = fa if beta == 1.0 else beta * fa + (1.0 - beta) * xa
        v = Tensor(nxt.reshape(shape))

    return EquilibriumResult(v, trace, len(trace), converged)


def solve(g: Callable[[Tensor], Tensor], v0: Tensor, cfg: SolverConfig) -> EquilibriumResult:
    if cfg.kind == "anderson":
        return anderson(g, v0, cfg)
    return forward_iterate(g, v0, cfg)
