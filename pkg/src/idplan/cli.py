"""Command-line entry point: gen / train / eval / gradcheck / bench.

Training is driven by a plain ``key = value`` config file (``#`` comments,
no nesting); unknown keys are rejected with their line number. Every
command writes its artifacts under ``--out``, prints a one-line
machine-readable ``status=ok ...`` summary on success, and renders figure
siblings next to each CSV unless ``--no-figures`` is given.

Exit codes: 0 success, 1 usage error, 2 runtime/numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import envs, figures, gradients, planners, training
from .solvers import DivergenceError, SolverConfig
from .tensor_ad import NumericFaultError, ShapeMismatchError

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


# Config keys -> (type, destination). Planner keys build the PlannerSpec,
# train keys the TrainConfig, io keys point at data and output locations.
def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_CONFIG_KEYS: dict[str, tuple] = {
    "epochs": (int, "train"),
    "batch_size": (int, "train"),
    "lr": (float, "train"),
    "rmsprop_alpha": (float, "train"),
    "rmsprop_eps": (float, "train"),
    "seed": (int, "train"),
    "threads": (int, "train"),
    "early_stop_success": (float, "train"),
    "rollout_horizon_factor": (int, "train"),
    "planner": (str, "spec"),
    "differentiation": (str, "spec"),
    "map_size": (int, "spec"),
    "channels": (int, "spec"),
    "kernel": (int, "spec"),
    "latent": (int, "spec"),
    "k_layer": (int, "spec"),
    "mapper_nonlinearity": (_parse_bool, "spec"),
    "k_fwd": (int, "fwd"),
    "forward_solver": (str, "fwd"),
    "forward_tol": (float, "fwd"),
    "k_bwd": (int, "bwd"),
    "backward_solver": (str, "bwd"),
    "backward_tol": (float, "bwd"),
    "anderson_memory": (int, "anderson"),
    "anderson_beta": (float, "anderson"),
    "anderson_ridge": (float, "anderson"),
    "train_data": (str, "io"),
    "val_data": (str, "io"),
    "out": (str, "io"),
}


def parse_config(path) -> dict[str, object]:
    """Line-based ``key = value`` file; returns typed values keyed by name."""
    values: dict[str, object] = {}
    text = Path(path).read_text()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(path, line_no, f"expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(path, line_no, f"unknown key {key!r}")
        if key in values:
            raise ConfigError(path, line_no, f"duplicate key {key!r}")
        caster = _CONFIG_KEYS[key][0]
        try:
            values[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(path, line_no, f"bad value for {key!r}: {exc}") from exc
    return values


def build_train_config(values: dict[str, object]) -> training.TrainConfig:
    anderson_kw = {
        "memory": values.get("anderson_memory", 5),
        "relaxation": values.get("anderson_beta", 1.0),
        "ridge": values.get("anderson_ridge", 1e-4),
    }
    fwd_kind = values.get("forward_solver", "forward_iteration")
    bwd_kind = values.get("backward_solver", "anderson")
    fwd = SolverConfig(
        kind=fwd_kind,
        max_iter=values.get("k_fwd", 80),
        tol=values.get("forward_tol", 1e-4),
        **(anderson_kw if fwd_kind == "anderson" else {}),
    )
    bwd = SolverConfig(
        kind=bwd_kind,
        max_iter=values.get("k_bwd", 15),
        tol=values.get("backward_tol", 1e-6),
        **(anderson_kw if bwd_kind == "anderson" else {}),
    )
    spec = planners.PlannerSpec(
        kind=values.get("planner", "vin"),
        differentiation=values.get("differentiation", "implicit"),
        map_size=values.get("map_size", 15),
        channels=values.get("channels", 40),
        kernel=values.get("kernel", 3),
        latent=values.get("latent", 1),
        k_layer=values.get("k_layer", 30),
        forward_cfg=fwd,
        backward_cfg=bwd,
        mapper_nonlinearity=values.get("mapper_nonlinearity", False),
    )
    kwargs = {}
    for key in ("epochs", "batch_size", "lr", "rmsprop_alpha", "rmsprop_eps", "seed",
                "threads", "early_stop_success", "rollout_horizon_factor"):
        if key in values:
            kwargs[key] = values[key]
    return training.TrainConfig(planner=spec, **kwargs)


def _status(ok: bool, **kv) -> None:
    fields = " ".join(f"{k}={v}" for k, v in kv.items())
    print(f"status={'ok' if ok else 'fail'}" + (f" {fields}" if fields else ""))


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    paths = {}
    first_split = None
    for i, (split, count) in enumerate(counts.items()):
        split_seed = args.seed + 1_000_003 * i
        if args.task == "maze":
            samples = envs.make_maze_dataset(args.size, count, split_seed, args.density)
            kind = envs.KIND_MAZE
        else:
            samples = envs.make_cspace_dataset(args.bins, count, split_seed)
            kind = envs.KIND_CSPACE
        path = out / f"{split}.idpd"
        envs.write_dataset(path, samples, kind)
        paths[split] = path
        if first_split is None:
            first_split = samples
    if not args.no_figures and first_split:
        figures.save_dataset_preview(first_split, out / "dataset_preview.png")
    _status(True, cmd="gen", task=args.task,
            train=paths["train"], val=paths["val"], test=paths["test"])
    return 0


def cmd_train(args) -> int:
    values = parse_config(args.config)
    for key, flag in (("train_data", None), ("val_data", None)):
        if key not in values:
            raise UsageError(f"config must set {key}")
    cfg = build_train_config(values)
    if args.threads is not None:
        cfg = dataclasses.replace(cfg, threads=args.threads)
    out = Path(args.out or values.get("out", "."))
    train_samples, _ = envs.read_dataset(values["train_data"])
    val_samples, _ = envs.read_dataset(values["val_data"])
    result = training.train(cfg, train_samples, val_samples, out_dir=out)
    if not args.no_figures:
        figures.save_learning_curve(result.curve, out / "curve.png")
    _status(True, cmd="train", best_val=f"{result.best_val:.4f}",
            epochs=len(result.curve), checkpoint=result.checkpoint_path,
            curve=result.curve_path)
    return 0


def cmd_eval(args) -> int:
    ckpt = training.load_checkpoint(args.checkpoint)
    samples, _ = envs.read_dataset(args.data)
    rate = training.evaluate_success(
        ckpt.spec, ckpt.params, samples, seed=args.seed,
        horizon_factor=ckpt.config.rollout_horizon_factor,
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = out / "eval.csv"
        with open(report, "w") as fh:
            fh.write("checkpoint,data,samples,success\n")
            fh.write(f"{args.checkpoint},{args.data},{len(samples)},{rate:.6f}\n")
    _status(True, cmd="eval", success=f"{rate:.6f}", samples=len(samples))
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    spec = planners.PlannerSpec(
        kind=args.planner, map_size=args.size, channels=args.channels, latent=args.latent
    )
    reports = []
    for trial in range(args.trials):
        grid = envs.generate_maze(args.size, int(rng.integers(2**31 - 1)), density=0.3)
        sample = envs.bfs_expert(grid)
        params = planners.init_params(spec, rng)
        rep = gradients.grad_check(spec, params, sample, k_explicit=args.k_explicit)
        reports.append(rep)
        log.info(
            "trial %d: pair=%.2e fd=%.2e ties=%d", trial, rep.max_pair_err, rep.max_fd_err, rep.tie_cells
        )
    worst_pair = max(r.max_pair_err for r in reports)
    worst_fd = max(r.max_fd_err for r in reports)
    passed = all(r.passed for r in reports)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w") as fh:
            fh.write("trial,loss,max_pair_err,max_fd_err,tie_cells,excluded,passed\n")
            for i, r in enumerate(reports):
                fh.write(
                    f"{i},{r.loss:.6g},{r.max_pair_err:.6g},{r.max_fd_err:.6g},"
                    f"{r.tie_cells},{int(r.excluded)},{int(r.passed)}\n"
                )
        if not args.no_figures:
            figures.save_gradcheck_figure(reports, out / "gradcheck.png")
    _status(passed, cmd="gradcheck", max_pair_err=f"{worst_pair:.3e}",
            max_fd_err=f"{worst_fd:.3e}", trials=args.trials)
    return 0 if passed else 2


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    ks = [int(k) for k in args.ks.split(",")]
    modes = ("implicit", "explicit") if args.mode == "both" else (args.mode,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for m in sizes:
        sample = envs.bfs_expert(envs.generate_maze(m, args.seed, density=0.3))
        records += bench_mod.run_scaling_benchmark(
            sample, kinds=(args.planner,), modes=modes, ks=ks,
            k_bwd=args.kbwd, reps=args.reps, channels=args.channels, seed=args.seed,
        )
    csv_path = out / "bench.csv"
    bench_mod.write_bench_csv(csv_path, records)
    if not args.no_figures:
        figures.save_bench_figures(records, out)
    _status(True, cmd="bench", rows=len(records), csv=csv_path)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="idplan", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--no-figures", action="store_true", help="skip PNG rendering next to CSV outputs")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate maze or configuration-space datasets")
    p.add_argument("--task", choices=("maze", "cspace"), required=True)
    p.add_argument("--size", type=int, default=15, help="maze side length")
    p.add_argument("--bins", type=int, choices=(18, 36), default=18, help="cspace angular bins")
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a planner from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output dir (overrides config 'out')")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="success rate of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="implicit vs unrolled vs finite-difference gradients")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--planner", choices=("vin", "convgppn"), default="vin")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--latent", type=int, default=1)
    p.add_argument("--k-explicit", type=int, default=200)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="forward/backward scaling benchmark")
    p.add_argument("--sizes", default="15")
    p.add_argument("--ks", default="30,50,80")
    p.add_argument("--mode", choices=("implicit", "explicit", "both"), default="both")
    p.add_argument("--planner", choices=("vin", "convgppn"), default="vin")
    p.add_argument("--kbwd", type=int, default=15)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--channels", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, NumericFaultError, ShapeMismatchError,
            training.TrainingAbortedError, training.CheckpointFormatError,
            envs.DatasetFormatError, envs.GenerationError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
