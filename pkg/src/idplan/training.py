"""Supervised training of planners on expert action maps.

Cross-entropy over all supervised cells (free, non-goal), RMSprop updates,
greedy-rollout success evaluation, per-epoch curve rows, and a binary
checkpoint with enough state (parameters, optimizer buffers, RNG) to
resume bit-exactly. Gradient reduction runs in sample-index order, so a
fixed config + seed reproduces byte-identical curves and checkpoints.
"""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import planners
from .envs import ACTION_DELTAS, ACTION_NONE, OccupancyGrid, PlanningSample, observation
from .gradients import explicit_backward, implicit_backward
from .solvers import DivergenceError
from .tensor_ad import GradientTape, ShapeMismatchError, Tensor

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "TrainResult",
    "TrainingAbortedError",
    "NoSupervisedCellsError",
    "cross_entropy_loss",
    "rmsprop_step",
    "loss_and_grads",
    "train",
    "greedy_action_map",
    "rollout_success",
    "evaluate_success",
    "save_checkpoint",
    "load_checkpoint",
    "CURVE_COLUMNS",
]

log = logging.getLogger(__name__)

CURVE_COLUMNS = (
    "epoch", "train_loss", "val_success", "diverged_batches",
    "fwd_iters_mean", "bwd_iters_mean", "fwd_time_s", "bwd_time_s",
)

_CKPT_MAGIC = b"IDPC"
_CKPT_VERSION = 1


class TrainingAbortedError(RuntimeError):
    """More than half the batches of an epoch diverged."""


class NoSupervisedCellsError(ValueError):
    """The expert map supervises no cell (everything obstacle/goal)."""


class CheckpointFormatError(IOError):
    """Checkpoint file is corrupt or of an unknown version."""


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    seed: int = 0
    planner: planners.PlannerSpec = field(default_factory=planners.PlannerSpec)
    threads: int = 1
    # Optional: stop as soon as validation success reaches this level.
    early_stop_success: float | None = None
    rollout_horizon_factor: int = 4

    def __post_init__(self):
        for name in ("epochs", "batch_size", "threads", "rollout_horizon_factor"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "rmsprop_alpha", "rmsprop_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def cross_entropy_loss(logits: Tensor, expert: np.ndarray, tape: GradientTape | None = None) -> Tensor:
    """Mean -log softmax(logits)[expert action] over supervised cells.

    Cells with ACTION_NONE (obstacles and the goal) are masked out. Records
    itself on the tape with the usual (softmax - onehot)/N pull-back.
    """
    if logits.ndim != 3:
        raise ShapeMismatchError(f"cross_entropy_loss: logits rank {logits.ndim} != 3")
    a = logits.shape[0]
    if expert.shape != logits.shape[1:]:
        raise ShapeMismatchError(
            f"cross_entropy_loss: expert map {expert.shape} != grid {logits.shape[1:]}"
        )
    mask = expert != ACTION_NONE
    n = int(mask.sum())
    if n == 0:
        raise NoSupervisedCellsError("no supervised cells in expert map")

    z = logits.array
    zmax = z.max(axis=0)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=0)
    softmax = ez / total
    log_norm = zmax + np.log(total)
    picked = np.take_along_axis(z, np.where(mask, expert, 0)[None].astype(np.int64), axis=0)[0]
    loss = float((np.where(mask, log_norm - picked, 0.0)).sum() / n)

    if tape is None or logits.tape is not tape or logits.node < 0:
        return Tensor(loss)

    onehot = np.zeros((a,) + expert.shape)
    rows, cols = np.nonzero(mask)
    onehot[expert[rows, cols], rows, cols] = 1.0
    pull = (softmax - onehot) * (mask[None] / n)

    def vjp(g: np.ndarray) -> tuple:
        return (float(g) * pull,)

    return tape.record("cross_entropy", np.asarray(loss), (logits.node,), vjp, saved=pull.size)


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    alpha: float = 0.99,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One RMSprop update: s <- a*s + (1-a)*g^2 ; p <- p - lr*g/(sqrt(s)+eps)."""
    new_params, new_state = {}, {}
    for name in params:
        g = grads[name]
        s = alpha * state[name] + (1.0 - alpha) * g * g
        new_state[name] = s
        new_params[name] = params[name] - lr * g / (np.sqrt(s) + eps)
    return new_params, new_state


@dataclass
class SampleStats:
    fwd_iters: int
    bwd_iters: int
    fwd_time: float
    bwd_time: float


def loss_and_grads(
    spec: planners.PlannerSpec,
    params,
    sample: PlanningSample,
    need_grads: bool = True,
) -> tuple[float, dict[str, np.ndarray], SampleStats]:
    """Loss and parameter gradients for one sample under either mode.

    Implicit mode assembles gradients from three small tapes: the reward
    mapper, one step taped at the equilibrium (solved adjointly), and the
    policy head + loss. Contributions to shared tensors (the transition
    kernel appears in both the step and the head; the reward map feeds
    both) are summed. Explicit mode is a single reverse replay.
    """
    obs = Tensor(observation(sample.grid))
    t0 = time.perf_counter()
    fp = planners.solve_forward(spec, params, obs)
    head_tape, logits = planners.attach_head(fp)
    loss_t = cross_entropy_loss(logits, sample.expert_action, head_tape)
    fwd_time = time.perf_counter() - t0
    loss = loss_t.item()

    if not need_grads:
        stats = SampleStats(fp.equilibrium.iterations, 0, fwd_time, 0.0)
        return loss, {}, stats

    t1 = time.perf_counter()
    if spec.differentiation == "explicit":
        grads = explicit_backward(fp.tape, 1.0)
        bwd_iters = fp.tape.step_marks
    else:
        head_grads = head_tape.backward(1.0)
        core = implicit_backward(fp.step, head_grads["v"], spec.backward_cfg)
        r_cot = head_grads["r"] + core.grads["r"]
        mapper_grads = fp.mapper_tape.backward(r_cot)
        grads = dict(mapper_grads)
        for name in planners.HEAD_NAMES:
            grads[name] = head_grads[name]
        for name, g in core.grads.items():
            if name == "r":
                continue
            grads[name] = grads[name] + g if name in grads else g
        bwd_iters = core.adjoint.iterations
    bwd_time = time.perf_counter() - t1
    stats = SampleStats(fp.equilibrium.iterations, bwd_iters, fwd_time, bwd_time)
    return loss, grads, stats


def greedy_action_map(logits: np.ndarray) -> np.ndarray:
    """Per-cell argmax over the action axis; ties go to the lowest index."""
    return logits.argmax(axis=0)


def rollout_success(
    actions: np.ndarray,
    grid: OccupancyGrid,
    starts: np.ndarray,
    horizon: int,
) -> np.ndarray:
    """Greedy walkers from each start; True where the goal is reached.

    A step into an obstacle or off the grid leaves the walker in place.
    """
    m = grid.size
    free = ~grid.cells
    goal = np.array(grid.goal)
    pos = starts.astype(np.int64).copy()
    done = (pos == goal).all(axis=1)
    for _ in range(horizon):
        if done.all():
            break
        act = actions[pos[:, 0], pos[:, 1]]
        act = np.where(done | (act >= 4), 0, act)
        nxt = pos + ACTION_DELTAS[act]
        inside = ((nxt >= 0) & (nxt < m)).all(axis=1)
        legal = inside.copy()
        legal[inside] = free[nxt[inside, 0], nxt[inside, 1]]
        move = legal & ~done
        pos[move] = nxt[move]
        done |= (pos == goal).all(axis=1)
    return done


def _eval_starts(grid: OccupancyGrid, rng: np.random.Generator, max_starts: int = 100) -> np.ndarray:
    rows, cols = np.nonzero(~grid.cells)
    starts = np.stack([rows, cols], axis=1)
    if grid.size <= 20 or len(starts) <= max_starts:
        return starts
    pick = rng.choice(len(starts), size=max_starts, replace=False)
    return starts[pick]


def evaluate_success(
    spec: planners.PlannerSpec,
    params,
    samples: list[PlanningSample],
    seed: int = 0,
    horizon_factor: int = 4,
) -> float:
    """Mean greedy-rollout success over (grid, start-cell) pairs.

    Start cells are all free cells on maps up to 20x20, otherwise 100
    seeded-random free cells per grid. Grids whose forward solve diverges
    count every start as a failure.
    """
    rng = np.random.default_rng(seed)
    hits = 0
    total = 0
    for sample in samples:
        starts = _eval_starts(sample.grid, rng)
        total += len(starts)
        try:
            logits, _ = planners.forward_logits(spec, params, Tensor(observation(sample.grid)))
        except DivergenceError:
            log.warning("evaluation forward solve diverged; grid counted as failed")
            continue
        actions = greedy_action_map(logits.array)
        done = rollout_success(actions, sample.grid, starts, horizon_factor * sample.grid.size)
        hits += int(done.sum())
    return hits / total if total else 0.0


@dataclass
class Checkpoint:
    """Best-validation parameters plus everything needed to resume.

    ``params`` holds the best-validation snapshot (what evaluation should
    use); ``last_params``/``opt_state``/``rng_state``/``epoch`` capture the
    exact training state after the last completed epoch, so resuming
    reproduces the trajectory an uninterrupted run would have taken.
    """

    spec: planners.PlannerSpec
    config: TrainConfig
    params: object
    last_params: object
    opt_state: dict[str, np.ndarray]
    epoch: int
    rng_state: dict
    best_val: float
    best_epoch: int = 0


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list[dict]
    best_val: float
    checkpoint_path: Path | None = None
    curve_path: Path | None = None


def _batched(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _mean_grads(per_sample: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    keys = per_sample[0].keys()
    inv = 1.0 / len(per_sample)
    return {k: sum(g[k] for g in per_sample) * inv for k in keys}


def _run_batch(spec, params, samples, threads: int):
    """Per-sample losses/grads for one batch, reduced in sample-index order."""
    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: loss_and_grads(spec, params, s), samples))
    else:
        results = [loss_and_grads(spec, params, s) for s in samples]
    return results


def write_curve_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CURVE_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt_cell(row[c]) for c in CURVE_COLUMNS) + "\n")


def _fmt_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def train(
    cfg: TrainConfig,
    train_samples: list[PlanningSample],
    val_samples: list[PlanningSample],
    out_dir: Path | str | None = None,
    init: object | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Seeded minibatch training with per-epoch validation success.

    Diverged batches (any sample whose forward or adjoint solve blows up)
    are skipped and counted; an epoch where more than half the batches
    diverge aborts the run. The checkpoint retains the best-validation
    parameters alongside the full resume state; passing it back as
    ``resume`` continues exactly where the run stopped.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation sets must be non-empty")
    spec = cfg.planner
    sizes = {s.grid.size for s in train_samples} | {s.grid.size for s in val_samples}
    if sizes != {spec.map_size}:
        raise ValueError(f"dataset map sizes {sorted(sizes)} != planner map_size {spec.map_size}")

    rng = np.random.default_rng(cfg.seed)
    if resume is not None:
        params = resume.last_params
        opt_state = dict(resume.opt_state)
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch + 1
        best_val = resume.best_val
        best_params = resume.params
        best_epoch = resume.best_epoch
    else:
        params = init if init is not None else planners.init_params(spec, rng)
        opt_state = {name: np.zeros(t.shape) for name, t in params.named().items()}
        start_epoch = 1
        best_val = -1.0
        best_params = params
        best_epoch = 0

    curve: list[dict] = []
    n = len(train_samples)

    for epoch in range(start_epoch, cfg.epochs + 1):
        order = rng.permutation(n)
        losses: list[float] = []
        diverged = 0
        batches = 0
        fwd_iters: list[int] = []
        bwd_iters: list[int] = []
        fwd_time = 0.0
        bwd_time = 0.0

        for batch in _batched(order, cfg.batch_size):
            batches += 1
            samples = [train_samples[i] for i in batch]
            try:
                results = _run_batch(spec, params, samples, cfg.threads)
            except DivergenceError:
                diverged += 1
                log.info("epoch %d: diverged batch skipped (%d so far)", epoch, diverged)
                continue
            grads = _mean_grads([g for _, g, _ in results])
            losses.extend(loss for loss, _, _ in results)
            for _, _, st in results:
                fwd_iters.append(st.fwd_iters)
                bwd_iters.append(st.bwd_iters)
                fwd_time += st.fwd_time
                bwd_time += st.bwd_time
            arrays = {k: t.array for k, t in params.named().items()}
            new_arrays, opt_state = rmsprop_step(
                arrays, grads, opt_state, cfg.lr, cfg.rmsprop_alpha, cfg.rmsprop_eps
            )
            params = type(params)(**{k: Tensor(v) for k, v in new_arrays.items()})

        if diverged * 2 > batches:
            raise TrainingAbortedError(
                f"epoch {epoch}: {diverged}/{batches} batches diverged; "
                "the learned step operator is far from a contraction"
            )

        val = evaluate_success(
            spec, params, val_samples, seed=cfg.seed, horizon_factor=cfg.rollout_horizon_factor
        )
        curve.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else float("nan"),
                "val_success": val,
                "diverged_batches": diverged,
                "fwd_iters_mean": float(np.mean(fwd_iters)) if fwd_iters else 0.0,
                "bwd_iters_mean": float(np.mean(bwd_iters)) if bwd_iters else 0.0,
                "fwd_time_s": fwd_time,
                "bwd_time_s": bwd_time,
            }
        )
        if val > best_val:
            best_val = val
            best_params = params
            best_epoch = epoch
        log.info("epoch %d: loss=%.4f val_success=%.3f", epoch, curve[-1]["train_loss"], val)
        if cfg.early_stop_success is not None and val >= cfg.early_stop_success:
            log.info("early stop: validation success %.3f reached target", val)
            break

    ckpt = Checkpoint(
        spec=spec,
        config=cfg,
        params=best_params,
        last_params=params,
        opt_state=opt_state,
        epoch=curve[-1]["epoch"] if curve else start_epoch - 1,
        rng_state=rng.bit_generator.state,
        best_val=best_val,
        best_epoch=best_epoch,
    )
    result = TrainResult(checkpoint=ckpt, curve=curve, best_val=best_val)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = out / "checkpoint.idpc"
        result.curve_path = out / "curve.csv"
        save_checkpoint(result.checkpoint_path, ckpt)
        write_curve_csv(result.curve_path, curve)
    return result


# --- checkpoint serialization -------------------------------------------------

def _spec_dict(spec: planners.PlannerSpec) -> dict:
    d = dataclasses.asdict(spec)
    return d


def _spec_from_dict(d: dict) -> planners.PlannerSpec:
    from .solvers import SolverConfig

    d = dict(d)
    d["forward_cfg"] = SolverConfig(**d["forward_cfg"])
    d["backward_cfg"] = SolverConfig(**d["backward_cfg"])
    return planners.PlannerSpec(**d)


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("planner")
    return d


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "spec": _spec_dict(ckpt.spec),
        "config": _cfg_dict(ckpt.config),
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "best_val": ckpt.best_val,
        "param_class": type(ckpt.params).__name__,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    tensors: list[tuple[str, np.ndarray]] = []
    tensors += [(f"best.{n}", t.array) for n, t in ckpt.params.named().items()]
    tensors += [(f"last.{n}", t.array) for n, t in ckpt.last_params.named().items()]
    tensors += [(f"opt.{n}", arr) for n, arr in sorted(ckpt.opt_state.items())]

    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError(f"{path}: truncated checkpoint header")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    meta = json.loads(blob[offset : offset + meta_len].decode())
    offset += meta_len
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + nlen].decode()
            offset += nlen
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            size = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(blob, "<f8", size, offset).reshape(dims).copy()
            offset += 8 * size
            tensors[name] = arr
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: truncated tensor section ({exc})") from exc

    spec = _spec_from_dict(meta["spec"])
    cfg = TrainConfig(planner=spec, **meta["config"])
    param_cls = planners.VinParams if meta["param_class"] == "VinParams" else planners.ConvGruParams
    best = param_cls(**{n[5:]: Tensor(a) for n, a in tensors.items() if n.startswith("best.")})
    last = param_cls(**{n[5:]: Tensor(a) for n, a in tensors.items() if n.startswith("last.")})
    opt_state = {n[4:]: a for n, a in tensors.items() if n.startswith("opt.")}
    return Checkpoint(
        spec=spec,
        config=cfg,
        params=best,
        last_params=last,
        opt_state=opt_state,
        epoch=meta["epoch"],
        rng_state=meta["rng_state"],
        best_val=meta["best_val"],
        best_epoch=meta["best_epoch"],
    )
