"""Scaling benchmarks: wall time and activation memory vs. iteration budget.

The point of this module is the decoupling story: with implicit
differentiation the backward pass replays a single taped step a fixed
number of times, so its cost and the stored-activation count do not move
when the forward iteration budget grows; the unrolled mode stores and
replays every step. Memory is measured as counted floats retained on the
tapes, which is deterministic, rather than process RSS.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import planners, training
from .envs import PlanningSample, observation
from .gradients import implicit_backward
from .solvers import DivergenceError, SolverConfig
from .tensor_ad import Tensor

__all__ = ["BenchmarkRecord", "run_scaling_benchmark", "write_bench_csv", "BENCH_COLUMNS"]

BENCH_COLUMNS = ("planner", "mode", "m", "K", "K_bwd", "fwd_s", "bwd_s", "stored_floats", "diverged", "reps")


@dataclass
class BenchmarkRecord:
    planner: str
    mode: str
    m: int
    k: int  # layers (explicit) or forward-solver iterations (implicit)
    k_bwd: int
    fwd_s: float
    bwd_s: float
    stored_floats: int
    diverged: bool
    reps: int
    solve_replays: int = 0  # implicit: adjoint-solve VJP replays
    step_replays: int = 0  # explicit: taped steps replayed by backward

    def __post_init__(self):
        if self.reps < 5:
            raise ValueError("timings are medians over at least 5 repetitions")


def _bench_spec(kind: str, mode: str, m: int, k: int, k_bwd: int, channels: int) -> planners.PlannerSpec:
    # tol=0 pins the exact iteration counts, so rows are comparable.
    fwd = SolverConfig(kind="forward_iteration", max_iter=k, tol=0.0)
    bwd = SolverConfig(kind="anderson", max_iter=k_bwd, tol=0.0)
    return planners.PlannerSpec(
        kind=kind,
        differentiation=mode,
        map_size=m,
        channels=channels,
        k_layer=k,
        forward_cfg=fwd,
        backward_cfg=bwd,
    )


def _one_pass(spec: planners.PlannerSpec, params, sample: PlanningSample):
    """Forward + backward once; returns (fwd_s, bwd_s, stored, solve_replays, step_replays)."""
    obs = Tensor(observation(sample.grid))
    t0 = time.perf_counter()
    fp = planners.solve_forward(spec, params, obs)
    head_tape, logits = planners.attach_head(fp)
    training.cross_entropy_loss(logits, sample.expert_action, head_tape)
    fwd_s = time.perf_counter() - t0

    t1 = time.perf_counter()
    if spec.differentiation == "explicit":
        fp.tape.backward(1.0)
        bwd_s = time.perf_counter() - t1
        return fwd_s, bwd_s, fp.tape.stored_floats(), 0, fp.tape.step_marks
    head_grads = head_tape.backward(1.0)
    core = implicit_backward(fp.step, head_grads["v"], spec.backward_cfg)
    fp.mapper_tape.backward(head_grads["r"] + core.grads["r"])
    bwd_s = time.perf_counter() - t1
    stored = fp.mapper_tape.stored_floats() + fp.step.tape.stored_floats() + head_tape.stored_floats()
    return fwd_s, bwd_s, stored, core.solve_replays, 0


def run_scaling_benchmark(
    sample: PlanningSample,
    kinds=("vin",),
    modes=("implicit", "explicit"),
    ks=(30, 50, 80),
    k_bwd: int = 15,
    reps: int = 5,
    channels: int = 40,
    seed: int = 0,
) -> list[BenchmarkRecord]:
    """One record per (kind, mode, K): median times over ``reps`` passes.

    A warm-up pass runs and is discarded per config. Divergence marks the
    row instead of failing the sweep.
    """
    m = sample.grid.size
    records = []
    for kind in kinds:
        for mode in modes:
            for k in ks:
                spec = _bench_spec(kind, mode, m, k, k_bwd, channels)
                params = planners.init_params(spec, np.random.default_rng(seed))
                try:
                    _one_pass(spec, params, sample)  # warm-up
                    fwd_times, bwd_times = [], []
                    stored = solve_replays = step_replays = 0
                    for _ in range(reps):
                        f_s, b_s, stored, solve_replays, step_replays = _one_pass(spec, params, sample)
                        fwd_times.append(f_s)
                        bwd_times.append(b_s)
                    rec = BenchmarkRecord(
                        planner=kind, mode=mode, m=m, k=k, k_bwd=k_bwd,
                        fwd_s=float(np.median(fwd_times)), bwd_s=float(np.median(bwd_times)),
                        stored_floats=stored, diverged=False, reps=reps,
                        solve_replays=solve_replays, step_replays=step_replays,
                    )
                except DivergenceError:
                    rec = BenchmarkRecord(
                        planner=kind, mode=mode, m=m, k=k, k_bwd=k_bwd,
                        fwd_s=float("nan"), bwd_s=float("nan"),
                        stored_floats=0, diverged=True, reps=reps,
                    )
                records.append(rec)
    return records


def write_bench_csv(path, records: list[BenchmarkRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(BENCH_COLUMNS) + "\n")
        for r in records:
            row = (
                r.planner, r.mode, r.m, r.k, r.k_bwd,
                f"{r.fwd_s:.6g}", f"{r.bwd_s:.6g}", r.stored_floats,
                int(r.diverged), r.reps,
            )
            fh.write(",".join(str(c) for c in row) + "\n")
