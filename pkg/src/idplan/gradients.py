"""Backward passes for fixed-point planners.

``implicit_backward`` solves the linear adjoint system
w = w @ (df/dv at v*) + dL/dv* by fixed-point iteration, where each
application of the Jacobian is one VJP replay of a single taped step
recorded at the equilibrium; substituting the solved w back through the
same tape yields cotangents for every parameter and for the injected
input. ``explicit_backward`` is the fully unrolled alternative: one
reverse replay over a tape holding every forward step, with weight-tied
parameter contributions accumulating across steps. ``grad_check`` compares
the two against each other and against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .solvers import EquilibriumResult, SolverConfig, solve
from .tensor_ad import GradientTape, Tensor

__all__ = [
    "TapedStep",
    "ImplicitBackwardResult",
    "implicit_backward",
    "explicit_backward",
    "GradCheckReport",
    "grad_check",
]


@dataclass
class TapedStep:
    """One taped application of a step operator at a fixed input point.

    ``v_name`` is the leaf holding the value-map input; remaining leaves are
    parameters and injected inputs.
    """

    tape: GradientTape
    v_name: str
    output: Tensor


@dataclass
class ImplicitBackwardResult:
    grads: dict[str, np.ndarray]  # every step-tape leaf except the value input
    w: Tensor  # solved adjoint vector
    adjoint: EquilibriumResult
    solve_replays: int  # VJP replays consumed by the adjoint solve
    total_replays: int  # + the final substitution replay


def implicit_backward(step: TapedStep, loss_cotangent, backward_cfg: SolverConfig) -> ImplicitBackwardResult:
    """Solve the adjoint fixed point seeded by dL/dv*, then substitute.

    Each adjoint iteration replays the taped step's VJP once; the replay
    count therefore tracks the backward solver's iterations and is
    independent of how many forward iterations produced the equilibrium.
    Divergence of the adjoint solve (a symptom of a poorly solved
    equilibrium) propagates as an error carrying the residual trace.
    """
    tape = step.tape
    out_node = step.output.node
    s = loss_cotangent.array if isinstance(loss_cotangent, Tensor) else np.asarray(loss_cotangent, dtype=np.float64)
    replays = [0]

    def apply_adjoint(wt: Tensor) -> Tensor:
        replays[0] += 1
        grads = tape.backward(wt.array, output=out_node)
        return Tensor(grads[step.v_name] + s)

    adj = solve(apply_adjoint, Tensor(s), backward_cfg)
    solve_replays = replays[0]
    final = tape.backward(adj.solution.array, output=out_node)
    grads = {name: g for name, g in final.items() if name != step.v_name}
    return ImplicitBackwardResult(
        grads=grads,
        w=adj.solution,
        adjoint=adj,
        solve_replays=solve_replays,
        total_replays=solve_replays + 1,
    )


def explicit_backward(tape: GradientTape, seed=1.0) -> dict[str, np.ndarray]:
    """Reverse replay over a fully taped forward pass (all steps + loss head).

    Weight-tied parameters receive the sum of their per-step contributions
    automatically, since every step consumed the same leaf.
    """
    seed_arr = np.asarray(seed, dtype=np.float64)
    return tape.backward(seed_arr)


def tensor_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """Max absolute difference over the larger of the two tensor scales.

    ``floor`` guards tensors whose true gradient is (numerically) zero —
    e.g. GRU update-gate parameters at an exact fixed point — where a
    per-tensor scale would amplify pure noise into a spurious mismatch.
    """
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def _grad_scale(*grad_dicts: dict[str, np.ndarray]) -> float:
    return max(
        (np.abs(g).max(initial=0.0) for d in grad_dicts for g in d.values()),
        default=0.0,
    )


@dataclass
class GradCheckReport:
    implicit_vs_explicit: dict[str, float]
    implicit_vs_fd: dict[str, float]
    explicit_vs_fd: dict[str, float]
    tie_cells: int
    pair_tol: float
    fd_tol: float
    loss: float = 0.0
    excluded: bool = False  # max ties detected at the equilibrium

    @property
    def max_pair_err(self) -> float:
        return max(self.implicit_vs_explicit.values(), default=0.0)

    @property
    def max_fd_err(self) -> float:
        errs = list(self.implicit_vs_fd.values()) + list(self.explicit_vs_fd.values())
        return max(errs, default=0.0)

    @property
    def passed(self) -> bool:
        if self.excluded:
            return True
        return self.max_pair_err < self.pair_tol and self.max_fd_err < self.fd_tol


def count_max_ties(q: np.ndarray, tol: float = 1e-12) -> int:
    """Cells whose per-cell max over channels is attained more than once."""
    top = q.max(axis=0)
    return int(((q >= top[None] - tol).sum(axis=0) > 1).sum())


def grad_check(
    spec,
    params,
    sample,
    pair_tol: float = 1e-4,
    fd_tol: float = 1e-3,
    k_explicit: int = 200,
    fd_step: float = 1e-5,
    fd_params: tuple[str, ...] | None = None,
) -> GradCheckReport:
    """Compare implicit, unrolled, and finite-difference gradients on one sample.

    Uses a tightly solved equilibrium for the implicit route and
    ``k_explicit`` unrolled steps for the explicit one. Cells where the
    channel max is tied (within 1e-12) make the subgradient convention
    visible, so a sample containing any is marked excluded rather than
    judged. Intended for small maps only; finite differences evaluate the
    full pipeline twice per parameter element.
    """
    import dataclasses

    from . import planners, training

    tight = SolverConfig(kind="forward_iteration", max_iter=4 * k_explicit, tol=1e-10)
    tight_bwd = SolverConfig(kind="anderson", max_iter=200, tol=1e-10)
    spec_imp = dataclasses.replace(
        spec, differentiation="implicit", forward_cfg=tight, backward_cfg=tight_bwd
    )
    spec_exp = dataclasses.replace(spec, differentiation="explicit", k_layer=k_explicit)

    obs = Tensor(training.observation(sample.grid))
    loss_imp, gi, _ = training.loss_and_grads(spec_imp, params, sample)
    _, ge, _ = training.loss_and_grads(spec_exp, params, sample)

    fp = planners.solve_forward(spec_imp, params, obs)
    q_star = fp.reward.array + _conv_q(fp, params)
    ties = count_max_ties(q_star) if spec.kind == "vin" else 0

    names = list(gi.keys())
    fd_names = list(fd_params) if fd_params is not None else names
    gf: dict[str, np.ndarray] = {}
    for name in fd_names:
        base = params.named()[name]

        def loss_at(t: Tensor, _name=name) -> float:
            trial = dataclasses.replace(params, **{_name: t})
            val, _, _ = training.loss_and_grads(spec_imp, trial, sample, need_grads=False)
            return val

        from .tensor_ad import finite_diff

        gf[name] = finite_diff(loss_at, base, fd_step).array

    floor = 1e-6 * _grad_scale(gi, ge)
    report = GradCheckReport(
        implicit_vs_explicit={n: tensor_rel_err(gi[n], ge[n], floor) for n in names},
        implicit_vs_fd={n: tensor_rel_err(gi[n], gf[n], floor) for n in fd_names},
        explicit_vs_fd={n: tensor_rel_err(ge[n], gf[n], floor) for n in fd_names},
        tie_cells=ties,
        pair_tol=pair_tol,
        fd_tol=fd_tol,
        loss=loss_imp,
        excluded=ties > 0,
    )
    return report


def _conv_q(fp, params) -> np.ndarray:
    from .tensor_ad import conv2d, reshape

    v3 = fp.v_star if fp.v_star.ndim == 3 else reshape(fp.v_star, (1,) + fp.v_star.shape)
    return conv2d(v3, params.trans_w).array
