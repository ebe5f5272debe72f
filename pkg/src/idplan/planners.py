"""Bellman-style planner layers on 2D grids.

Two weight-tied step operators — a convolutional max-backup step and a
convolutional GRU step — plus the reward mapper that turns an
occupancy/goal observation into a per-action reward map, and the policy
head that reads action logits off the solved value map. The forward pass
either solves the step operator to a fixed point (implicit mode, no taping
of intermediate iterates, one extra taped step at the equilibrium) or
applies a fixed number of fully taped steps (explicit mode).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .gradients import TapedStep
from .solvers import (
    EquilibriumResult,
    SolverConfig,
    default_backward_config,
    default_forward_config,
    relative_residual,
    solve,
)
from .tensor_ad import GradientTape, Tensor, channel_max, conv2d, pointwise, reshape

__all__ = [
    "NUM_ACTIONS",
    "PlannerSpec",
    "VinParams",
    "ConvGruParams",
    "ForwardPass",
    "init_params",
    "reward_map",
    "vin_step",
    "convgru_step",
    "policy_logits",
    "solve_forward",
    "forward_logits",
    "attach_head",
]

NUM_ACTIONS = 4

MAPPER_NAMES = ("mapper_w1", "mapper_b1", "mapper_w2", "mapper_b2")
HEAD_NAMES = ("trans_w", "policy_w", "policy_b")
GRU_GATE_NAMES = (
    "update_wv", "update_wr", "update_b",
    "reset_wv", "reset_wr", "reset_b",
    "cand_wv", "cand_wr", "cand_b",
)

# Per-action sum of the (nonnegative) transition kernel at init. Below 1 the
# value backup is a contraction, so untrained forward and adjoint solves
# converge; close to 1 the value signal still reaches distant cells instead
# of decaying geometrically within a few hops.
INIT_KERNEL_GAIN = 0.95


@dataclass(frozen=True)
class PlannerSpec:
    kind: str = "vin"  # "vin" | "convgppn"
    differentiation: str = "implicit"  # "implicit" | "explicit"
    map_size: int = 15
    channels: int = 40  # hidden width of the reward mapper
    kernel: int = 3
    latent: int = 1  # value-map channels (convgppn only; vin is single-channel)
    k_layer: int = 30  # explicit mode: number of unrolled steps
    forward_cfg: SolverConfig = field(default_factory=default_forward_config)
    backward_cfg: SolverConfig = field(default_factory=default_backward_config)
    mapper_nonlinearity: bool = False

    def __post_init__(self):
        if self.kind not in ("vin", "convgppn"):
            raise ValueError(f"unknown planner kind {self.kind!r}")
        if self.differentiation not in ("implicit", "explicit"):
            raise ValueError(f"unknown differentiation mode {self.differentiation!r}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.map_size < 3:
            raise ValueError("map_size must be >= 3")
        if self.kind == "vin" and self.latent != 1:
            raise ValueError("vin carries a single-channel value map")
        if self.differentiation == "explicit" and self.k_layer < 1:
            raise ValueError("explicit mode requires k_layer >= 1")

    def value_shape(self) -> tuple[int, ...]:
        m = self.map_size
        return (m, m) if self.latent == 1 else (self.latent, m, m)


@dataclass
class VinParams:
    mapper_w1: Tensor
    mapper_b1: Tensor
    mapper_w2: Tensor
    mapper_b2: Tensor
    trans_w: Tensor  # (A, latent, F, F), bias-free transition kernel
    policy_w: Tensor
    policy_b: Tensor

    step_names = ("trans_w",)

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def bound_copy(self, tape: GradientTape, names=None) -> "VinParams":
        return _bind(self, tape, names)


@dataclass
class ConvGruParams:
    mapper_w1: Tensor
    mapper_b1: Tensor
    mapper_w2: Tensor
    mapper_b2: Tensor
    trans_w: Tensor  # policy head reuses the max-backup form on v*
    policy_w: Tensor
    policy_b: Tensor
    update_wv: Tensor
    update_wr: Tensor
    update_b: Tensor
    reset_wv: Tensor
    reset_wr: Tensor
    reset_b: Tensor
    cand_wv: Tensor
    cand_wr: Tensor
    cand_b: Tensor

    step_names = GRU_GATE_NAMES

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def bound_copy(self, tape: GradientTape, names=None) -> "ConvGruParams":
        return _bind(self, tape, names)


def _bind(params, tape: GradientTape, names=None):
    """Copy of a param struct with the listed tensors watched on ``tape``."""
    wanted = set(params.named() if names is None else names)
    bound = {
        name: (tape.watch(t, name) if name in wanted else t)
        for name, t in params.named().items()
    }
    return type(params)(**bound)


def init_params(spec: PlannerSpec, rng: np.random.Generator):
    """Random parameters scaled so untrained fixed-point solves converge."""
    f, h, lat, a = spec.kernel, spec.channels, spec.latent, NUM_ACTIONS

    def normal(shape, scale):
        return Tensor(rng.normal(0.0, scale, shape))

    def zeros(shape):
        return Tensor(np.zeros(shape))

    def contraction_kernel(shape):
        # Nonnegative entries propagate value coherently; random signs mostly
        # cancel under convolution and stall early training.
        raw = np.abs(rng.normal(0.0, 1.0, shape))
        flat = raw.reshape(shape[0], -1)
        flat *= (INIT_KERNEL_GAIN / flat.sum(axis=1, keepdims=True))
        return Tensor(flat.reshape(shape))

    # Near-identity policy head: logits start out reading the action values
    # directly, so the cross-entropy signal reaches the planner core at once.
    policy_w = np.eye(a)[:, :, None, None] + rng.normal(0.0, 0.1, (a, a, 1, 1))

    common = dict(
        mapper_w1=normal((h, 2, f, f), 1.0 / np.sqrt(2 * f * f)),
        mapper_b1=zeros((h,)),
        mapper_w2=normal((a, h, 1, 1), 1.0 / np.sqrt(h)),
        mapper_b2=zeros((a,)),
        trans_w=contraction_kernel((a, lat, f, f)),
        policy_w=Tensor(policy_w),
        policy_b=zeros((a,)),
    )
    if spec.kind == "vin":
        return VinParams(**common)
    gates = {}
    for gate in ("update", "reset", "cand"):
        gates[f"{gate}_wv"] = normal((lat, lat, f, f), 1.0 / np.sqrt(lat * f * f))
        gates[f"{gate}_wr"] = normal((lat, a, f, f), 1.0 / np.sqrt(a * f * f))
        gates[f"{gate}_b"] = zeros((lat,))
    return ConvGruParams(**common, **gates)


def reward_map(obs: Tensor, params, tape: GradientTape | None = None, *, nonlinearity: bool = False) -> Tensor:
    """Observation (2,m,m) -> per-action reward map (A,m,m).

    Channel 0 is occupancy (1 = obstacle), channel 1 the goal one-hot. Two
    convolutions; purely linear unless ``nonlinearity`` inserts a tanh
    between them.
    """
    hidden = conv2d(obs, params.mapper_w1, params.mapper_b1, tape)
    if nonlinearity:
        hidden = pointwise("tanh", hidden, tape=tape)
    return conv2d(hidden, params.mapper_w2, params.mapper_b2, tape)


def _as_3d(v: Tensor, tape: GradientTape | None) -> Tensor:
    return v if v.ndim == 3 else reshape(v, (1,) + v.shape, tape)


def vin_step(v: Tensor, r: Tensor, params, tape: GradientTape | None = None) -> Tensor:
    """One max-backup: max_a [ R_a + conv(V; W_a) ], value map stays (m,m)."""
    v3 = _as_3d(v, tape)
    q = pointwise("add", conv2d(v3, params.trans_w, None, tape), r, tape)
    out, _ = channel_max(q, tape)
    return out


def convgru_step(v: Tensor, r: Tensor, params, tape: GradientTape | None = None) -> Tensor:
    """One convolutional GRU update with the reward map injected at every gate."""
    squeeze = v.ndim == 2
    v3 = _as_3d(v, tape)

    def gate(wv, wr, b, activation):
        pre = pointwise("add", conv2d(v3, wv, None, tape), conv2d(r, wr, b, tape), tape)
        return pointwise(activation, pre, tape=tape)

    z = gate(params.update_wv, params.update_wr, params.update_b, "sigmoid")
    rr = gate(params.reset_wv, params.reset_wr, params.reset_b, "sigmoid")
    gated = pointwise("mul", rr, v3, tape)
    cand_pre = pointwise(
        "add", conv2d(gated, params.cand_wv, None, tape), conv2d(r, params.cand_wr, params.cand_b, tape), tape
    )
    cand = pointwise("tanh", cand_pre, tape=tape)
    keep = pointwise("sub", Tensor(np.ones(z.shape)), z, tape)
    out = pointwise(
        "add", pointwise("mul", keep, v3, tape), pointwise("mul", z, cand, tape), tape
    )
    return reshape(out, v.shape, tape) if squeeze else out


def step_fn(kind: str):
    return vin_step if kind == "vin" else convgru_step


def policy_logits(v_star: Tensor, r: Tensor, params, tape: GradientTape | None = None) -> Tensor:
    """Action logits (A,m,m) from the solved value map.

    Recomputes the action values Q*_a = R_a + conv(v*; W_a) and applies a
    1x1 policy convolution.
    """
    v3 = _as_3d(v_star, tape)
    q = pointwise("add", conv2d(v3, params.trans_w, None, tape), r, tape)
    return conv2d(q, params.policy_w, params.policy_b, tape)


@dataclass
class ForwardPass:
    spec: PlannerSpec
    params: object
    obs: Tensor
    reward: Tensor  # unbound value of the reward map
    equilibrium: EquilibriumResult
    v_star: Tensor  # unbound value of the final iterate
    mapper_tape: GradientTape | None
    step: TapedStep | None  # implicit mode: one taped application at v*
    tape: GradientTape | None  # explicit mode: the full unrolled tape
    bound_params: object | None = None  # explicit mode: tape-bound param struct
    bound_reward: Tensor | None = None
    bound_v: Tensor | None = None


def solve_forward(spec: PlannerSpec, params, obs: Tensor) -> ForwardPass:
    """Run the planner forward pass in the spec's differentiation mode.

    Implicit: solve v = f(v, R) with the configured solver, taping nothing,
    then record exactly one extra taped step at the equilibrium for later
    VJP replays. Explicit: apply exactly ``k_layer`` taped steps from zeros.
    """
    fn = step_fn(spec.kind)
    v0 = Tensor(np.zeros(spec.value_shape()))

    if spec.differentiation == "implicit":
        mapper_tape = GradientTape()
        pm = params.bound_copy(mapper_tape, MAPPER_NAMES)
        r_taped = reward_map(obs, pm, mapper_tape, nonlinearity=spec.mapper_nonlinearity)
        r_val = Tensor(r_taped.array)

        eq = solve(lambda v: fn(v, r_val, params, None), v0, spec.forward_cfg)
        v_star = Tensor(eq.solution.array)

        step_tape = GradientTape()
        ps = params.bound_copy(step_tape, params.step_names)
        v_in = step_tape.watch(v_star, "v")
        r_in = step_tape.watch(r_val, "r")
        out = fn(v_in, r_in, ps, step_tape)
        step = TapedStep(tape=step_tape, v_name="v", output=out)
        return ForwardPass(
            spec=spec, params=params, obs=obs, reward=r_val, equilibrium=eq,
            v_star=v_star, mapper_tape=mapper_tape, step=step, tape=None,
        )

    # Explicit: everything on one tape, weights bound once (weight tying).
    tape = GradientTape()
    all_names = MAPPER_NAMES + HEAD_NAMES + tuple(params.step_names)
    pb = params.bound_copy(tape, all_names)
    r_b = reward_map(obs, pb, tape, nonlinearity=spec.mapper_nonlinearity)
    v = v0
    trace: list[float] = []
    for _ in range(spec.k_layer):
        tape.mark_step()
        v_next = fn(v, r_b, pb, tape)
        trace.append(relative_residual(v, v_next))
        v = v_next
    eq = EquilibriumResult(
        solution=Tensor(v.array),
        residual_trace=trace,
        iterations=spec.k_layer,
        converged=trace[-1] <= spec.forward_cfg.tol,
    )
    return ForwardPass(
        spec=spec, params=params, obs=obs, reward=Tensor(r_b.array), equilibrium=eq,
        v_star=Tensor(v.array), mapper_tape=None, step=None, tape=tape,
        bound_params=pb, bound_reward=r_b, bound_v=v,
    )


def attach_head(fp: ForwardPass) -> tuple[GradientTape, Tensor]:
    """Tape the policy head onto a forward pass; returns (tape, logits).

    Implicit mode opens a fresh head tape with v* and R as leaves; explicit
    mode extends the unrolled tape with its already-bound tensors.
    """
    if fp.tape is not None:
        logits = policy_logits(fp.bound_v, fp.bound_reward, fp.bound_params, fp.tape)
        return fp.tape, logits
    head_tape = GradientTape()
    ph = fp.params.bound_copy(head_tape, HEAD_NAMES)
    v_in = head_tape.watch(fp.v_star, "v")
    r_in = head_tape.watch(fp.reward, "r")
    logits = policy_logits(v_in, r_in, ph, head_tape)
    return head_tape, logits


def forward_logits(spec: PlannerSpec, params, obs: Tensor) -> tuple[Tensor, EquilibriumResult]:
    """Tape-free forward pass straight to logits (for evaluation/rollouts)."""
    fn = step_fn(spec.kind)
    r = reward_map(obs, params, None, nonlinearity=spec.mapper_nonlinearity)
    v0 = Tensor(np.zeros(spec.value_shape()))
    if spec.differentiation == "implicit":
        eq = solve(lambda v: fn(v, r, params, None), v0, spec.forward_cfg)
    else:
        v = v0
        trace = []
        for _ in range(spec.k_layer):
            v_next = fn(v, r, params, None)
            trace.append(relative_residual(v, v_next))
            v = v_next
        eq = EquilibriumResult(v, trace, spec.k_layer, trace[-1] <= spec.forward_cfg.tol)
    return policy_logits(eq.solution, r, params, None), eq
