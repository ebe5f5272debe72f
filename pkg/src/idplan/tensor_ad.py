"""Dense float64 tensors plus a minimal reverse-mode gradient tape.

The primitive set is deliberately small: same-padded 2D convolution,
channel-wise max, a handful of pointwise ops, and reshape. Each primitive
computes its value with numpy and, when handed a ``GradientTape``, records
a closure that maps an output cotangent to input cotangents (a
vector-Jacobian product). Replaying a tape backwards from a seed yields
gradients for every watched leaf; the tape itself is never mutated by a
replay, so the same single-step tape can be replayed many times with
different seeds. That re-replayability is what the implicit backward pass
is built on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeMismatchError",
    "NumericFaultError",
    "conv2d",
    "channel_max",
    "pointwise",
    "reshape",
    "backward",
    "finite_diff",
]

# Opt-in per-op output finiteness validation. The fixed-point solvers always
# check their iterates regardless of this flag; enabling it here roughly
# doubles the cost of every primitive, so it is reserved for tests.
STRICT_FINITE_CHECKS = False

POINTWISE_KINDS = ("add", "sub", "mul", "sigmoid", "tanh", "scale")


class ShapeMismatchError(ValueError):
    """A primitive was called with inconsistent operand dimensions."""


class NumericFaultError(ArithmeticError):
    """A primitive produced NaN/Inf from finite inputs."""


class Tensor:
    """Immutable dense float64 array, row-major, optionally bound to a tape.

    ``tape``/``node`` identify the tape node that produced this value (or the
    leaf it was watched as). Tensors not created through a tape are plain
    constants: gradients do not flow into them.
    """

    __slots__ = ("array", "tape", "node")

    def __init__(self, values, _tape: Optional["GradientTape"] = None, _node: int = -1):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.array = arr
        self.tape = _tape
        self.node = _node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the element storage."""
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return f"Tensor(shape={self.array.shape})"


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    vjp: Optional[Callable[[np.ndarray], tuple]]
    shape: tuple[int, ...]
    saved: int  # floats retained by the vjp closure


class GradientTape:
    """Append-only, topologically ordered record of primitive applications.

    ``watch`` registers a tensor as a differentiable leaf and returns a bound
    copy (sharing storage). Primitives called with ``tape=this`` append one
    node each. ``backward`` replays VJPs in reverse order; it allocates its
    own cotangent buffers, so repeated calls on the same tape are independent
    and bitwise reproducible.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        self.step_marks: int = 0
        self._auto_leaf = 0

    def watch(self, t: Tensor, name: str | None = None) -> Tensor:
        if name is None:
            name = f"leaf{self._auto_leaf}"
            self._auto_leaf += 1
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        idx = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, t.array.shape, 0))
        self.leaves[name] = idx
        return Tensor(t.array, _tape=self, _node=idx)

    def record(self, op: str, out: np.ndarray, parents, vjp, saved: int = 0) -> Tensor:
        if STRICT_FINITE_CHECKS and not np.isfinite(out).all():
            raise NumericFaultError(f"{op} produced non-finite values")
        idx = len(self.nodes)
        self.nodes.append(_Node(op, tuple(parents), vjp, out.shape, int(saved)))
        return Tensor(out, _tape=self, _node=idx)

    def mark_step(self) -> None:
        """Tally one planner-step boundary (used for replay accounting)."""
        self.step_marks += 1

    def stored_floats(self) -> int:
        """Total floats retained for VJPs, the activation-memory measure."""
        return sum(n.saved for n in self.nodes)

    @property
    def output(self) -> int:
        for i in range(len(self.nodes) - 1, -1, -1):
            if self.nodes[i].op != "leaf":
                return i
        raise ValueError("tape holds no recorded operations")

    def backward(self, seed, output: int | None = None) -> dict[str, np.ndarray]:
        """Cotangent of <seed, node[output]> for every watched leaf.

        Leaves the seeded output does not reach get exact zeros.
        """
        out = self.output if output is None else output
        seed_arr = seed.array if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
        if seed_arr.shape != self.nodes[out].shape:
            raise ShapeMismatchError(
                f"backward: seed shape {seed_arr.shape} != output shape {self.nodes[out].shape}"
            )
        cots: list[np.ndarray | None] = [None] * len(self.nodes)
        cots[out] = seed_arr
        for i in range(out, -1, -1):
            c = cots[i]
            if c is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue  # leaf: keeps its accumulated cotangent
            for pid, g in zip(node.parents, node.vjp(c)):
                if cots[pid] is None:
                    cots[pid] = g
                else:
                    cots[pid] = cots[pid] + g
        return {
            name: (cots[idx] if cots[idx] is not None else np.zeros(self.nodes[idx].shape))
            for name, idx in self.leaves.items()
        }


def backward(tape: GradientTape, seed, output: int | None = None) -> dict[str, np.ndarray]:
    """Free-function alias for :meth:`GradientTape.backward`."""
    return tape.backward(seed, output=output)


def _bound(tape: GradientTape | None, t: Tensor | None) -> bool:
    return tape is not None and t is not None and t.tape is tape and t.node >= 0


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded "same" correlation. x: (C,H,W), w: (O,C,F,F)."""
    f = w.shape[-1]
    if f == 1:
        return np.tensordot(w[:, :, 0, 0], x, axes=(1, 0))
    p = f // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (f, f), axis=(1, 2))  # (C,H,W,F,F)
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))  # (O,H,W)


def _conv_weight_grad(g: np.ndarray, x: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return np.tensordot(g, x, axes=([1, 2], [1, 2]))[:, :, None, None]
    p = f // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (f, f), axis=(1, 2))
    return np.tensordot(g, win, axes=([1, 2], [1, 2]))  # (O,C,F,F)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, tape: GradientTape | None = None) -> Tensor:
    """Shape-preserving 2D convolution: (C_in,H,W) x (C_out,C_in,F,F) -> (C_out,H,W).

    Zero padding of width (F-1)/2, stride 1. ``b`` may be None for a
    bias-free layer.
    """
    if x.ndim != 3:
        raise ShapeMismatchError(f"conv2d: input rank {x.ndim} != 3 (C,H,W)")
    if w.ndim != 4:
        raise ShapeMismatchError(f"conv2d: weight rank {w.ndim} != 4 (C_out,C_in,F,F)")
    c_out, c_in, fh, fw = w.shape
    if fh != fw:
        raise ShapeMismatchError(f"conv2d: kernel is {fh}x{fw}, expected square")
    if fh % 2 != 1:
        raise ShapeMismatchError(f"conv2d: kernel size {fh} must be odd")
    if c_in != x.shape[0]:
        raise ShapeMismatchError(
            f"conv2d: weight expects {c_in} input channels, input has {x.shape[0]}"
        )
    if b is not None and b.shape != (c_out,):
        raise ShapeMismatchError(f"conv2d: bias shape {b.shape} != ({c_out},)")

    out = _conv_same(x.array, w.array)
    if b is not None:
        out = out + b.array[:, None, None]

    xb, wb, bb = _bound(tape, x), _bound(tape, w), _bound(tape, b)
    if not (xb or wb or bb):
        return Tensor(out)

    xa = x.array if wb else None
    # Transposed, 180-degree-flipped kernel: the adjoint of a same-padded
    # stride-1 correlation is another same-padded correlation.
    wt = np.ascontiguousarray(w.array.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]) if xb else None
    f = fh
    parents = [t.node for t, flag in ((x, xb), (w, wb), (b, bb)) if flag]

    def vjp(g: np.ndarray) -> tuple:
        grads = []
        if xb:
            grads.append(_conv_same(g, wt))
        if wb:
            grads.append(_conv_weight_grad(g, xa, f))
        if bb:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    saved = (xa.size if xa is not None else 0) + (wt.size if wt is not None else 0)
    return tape.record("conv2d", out, parents, vjp, saved)


def channel_max(q: Tensor, tape: GradientTape | None = None) -> tuple[Tensor, np.ndarray]:
    """Max over the leading (channel) axis: (A,H,W) -> ((H,W), argmax (H,W)).

    Ties resolve to the lowest channel index; the VJP routes each cell's
    cotangent entirely to that channel.
    """
    if q.ndim != 3:
        raise ShapeMismatchError(f"channel_max: input rank {q.ndim} != 3 (A,H,W)")
    if q.shape[0] < 1:
        raise ShapeMismatchError("channel_max: needs at least one channel")
    am = q.array.argmax(axis=0)
    v = np.take_along_axis(q.array, am[None], axis=0)[0]
    if not _bound(tape, q):
        return Tensor(v), am

    a, h, w = q.shape
    rows, cols = np.indices((h, w))

    def vjp(g: np.ndarray) -> tuple:
        dq = np.zeros((a, h, w))
        dq[am, rows, cols] = g
        return (dq,)

    out = tape.record("channel_max", v, (q.node,), vjp, saved=am.size)
    return out, am


def pointwise(kind: str, x: Tensor, y=None, tape: GradientTape | None = None) -> Tensor:
    """Elementwise primitive with an analytic VJP.

    ``add``/``sub``/``mul`` take a second tensor of identical shape,
    ``scale`` a python scalar, ``sigmoid``/``tanh`` are unary.
    """
    if kind not in POINTWISE_KINDS:
        raise ValueError(f"pointwise: unknown kind {kind!r}")
    xa = x.array

    if kind in ("add", "sub", "mul"):
        if not isinstance(y, Tensor):
            raise ShapeMismatchError(f"pointwise {kind}: second operand must be a Tensor")
        if y.shape != x.shape:
            raise ShapeMismatchError(f"pointwise {kind}: shapes {x.shape} != {y.shape}")
        ya = y.array
        xb, yb = _bound(tape, x), _bound(tape, y)
        if kind == "add":
            out = xa + ya
            vjp = lambda g: tuple(g for flag in (xb, yb) if flag)
            saved = 0
        elif kind == "sub":
            out = xa - ya

            def vjp(g, _xb=xb, _yb=yb):
                grads = []
                if _xb:
                    grads.append(g)
                if _yb:
                    grads.append(-g)
                return tuple(grads)

            saved = 0
        else:  # mul
            out = xa * ya

            def vjp(g, _xa=xa, _ya=ya, _xb=xb, _yb=yb):
                grads = []
                if _xb:
                    grads.append(g * _ya)
                if _yb:
                    grads.append(g * _xa)
                return tuple(grads)

            saved = (ya.size if xb else 0) + (xa.size if yb else 0)
        if not (xb or yb):
            return Tensor(out)
        parents = [t.node for t, flag in ((x, xb), (y, yb)) if flag]
        return tape.record(kind, out, parents, vjp, saved)

    if kind == "scale":
        c = float(y)
        out = xa * c
        if not _bound(tape, x):
            return Tensor(out)
        return tape.record("scale", out, (x.node,), lambda g: (g * c,), saved=1)

    # sigmoid / tanh
    if y is not None:
        raise ShapeMismatchError(f"pointwise {kind}: takes no second operand")
    if kind == "sigmoid":
        out = 1.0 / (1.0 + np.exp(-xa))
        deriv = lambda g, s=out: (g * (s * (1.0 - s)),)
    else:  # tanh
        out = np.tanh(xa)
        deriv = lambda g, t=out: (g * (1.0 - t * t),)
    if not _bound(tape, x):
        return Tensor(out)
    return tape.record(kind, out, (x.node,), deriv, saved=out.size)


def reshape(x: Tensor, shape: tuple[int, ...], tape: GradientTape | None = None) -> Tensor:
    if int(np.prod(shape)) != x.size:
        raise ShapeMismatchError(f"reshape: {x.shape} has {x.size} elements, target {shape}")
    out = x.array.reshape(shape)
    if not _bound(tape, x):
        return Tensor(out)
    old = x.shape
    return tape.record("reshape", out, (x.node,), lambda g: (g.reshape(old),), saved=0)


def finite_diff(f: Callable[[Tensor], float], x: Tensor, h: float) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per element."""
    if h <= 0:
        raise ValueError("finite_diff: h must be positive")
    flat = x.array.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += h
        lo[i] -= h
        fp = float(f(Tensor(hi.reshape(x.shape))))
        fm = float(f(Tensor(lo.reshape(x.shape))))
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(x.shape))
