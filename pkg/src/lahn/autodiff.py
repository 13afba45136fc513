"""Reverse-mode automatic differentiation over dense float64 tensors.

A deliberately small engine: a ``Tensor`` wraps a numpy float64 array plus an
optional gradient buffer, and a ``Tape`` records every differentiable
operation executed while it is active. ``Tape.backward`` replays the recorded
entries in reverse, accumulating gradients into every tensor that requires
them. Everything is 64-bit and single-threaded; there is no broadcasting
beyond scalar ``scale`` and the explicit row-wise bias add, which keeps every
backward rule short enough to audit by hand.

Ops that take no active tape (or whose inputs carry no gradient) just compute
values, so evaluation paths pay nothing for the machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_COS_EPS = 1e-8


class ShapeError(ValueError):
    """Operand shapes do not match the operation's contract."""


class Tensor:
    """Dense float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        """The value of a scalar tensor as a Python float."""
        return float(self.values)

    def detach(self) -> "Tensor":
        """A gradient-free copy; backward never propagates past it."""
        return Tensor(self.values.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def param(values) -> Tensor:
    """A leaf tensor that accumulates gradients (a trainable parameter)."""
    return Tensor(values, requires_grad=True)


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


class Tape:
    """Ordered record of operations; backward replays it once, reversed.

    Use as a context manager around one training step's forward pass. The
    record order is the forward execution order, so the reverse is a valid
    topological order and each entry is visited exactly once. A fresh tape
    per step is the "cleared between steps" contract.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._outer: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and propagate through the record."""
        if loss.values.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        loss.grad = np.ones((), dtype=np.float64)
        for out, rule in reversed(self._entries):
            if out.grad is not None:
                rule(out.grad)


def _record(out: Tensor, inputs: Sequence[Tensor], rule: Callable[[np.ndarray], None]) -> Tensor:
    tape = Tape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._entries.append((out, rule))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m*n]x[n*p]; backward is the usual transpose pair."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values)

    def rule(g: np.ndarray) -> None:
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _record(out, (a, b), rule)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the table.

    Repeated ids accumulate each upstream gradient into the same row.
    """
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"ids must be a flat sequence, got shape {idx.shape}")
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        bad = idx[(idx < 0) | (idx >= n_rows)][0]
        raise IndexError(f"id {int(bad)} out of range for table with {n_rows} rows")
    out = Tensor(table.values[idx])

    def rule(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.values)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _record(out, (table,), rule)


def mean_pool(x: Tensor, mask: Sequence[bool]) -> Tensor:
    """Mean of the rows of ``x`` where ``mask`` is true; others contribute nothing."""
    keep = np.asarray(mask, dtype=bool)
    if x.values.ndim != 2 or keep.shape != (x.shape[0],):
        raise ShapeError(f"mean_pool needs [T x d] and mask of length T, got {x.shape} and {keep.shape}")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("mean_pool over an all-false mask (empty sequence)")
    out = Tensor(x.values[keep].mean(axis=0))

    def rule(g: np.ndarray) -> None:
        gx = np.zeros_like(x.values)
        gx[keep] = g / count
        _accum(x, gx)

    return _record(out, (x,), rule)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    if not rows:
        raise ValueError("stack_rows of an empty sequence")
    d = rows[0].shape
    for r in rows:
        if r.values.ndim != 1 or r.shape != d:
            raise ShapeError(f"stack_rows needs equal 1-D shapes, got {d} and {r.shape}")
    out = Tensor(np.stack([r.values for r in rows]))

    def rule(g: np.ndarray) -> None:
        for i, r in enumerate(rows):
            _accum(r, g[i])

    return _record(out, tuple(rows), rule)


def row(x: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a matrix; backward scatters into that row."""
    if x.values.ndim != 2:
        raise ShapeError(f"row needs a 2-D tensor, got shape {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"row {i} out of range for shape {x.shape}")
    out = Tensor(x.values[i].copy())

    def rule(g: np.ndarray) -> None:
        gx = np.zeros_like(x.values)
        gx[i] = g
        _accum(x, gx)

    return _record(out, (x,), rule)


def concat1d(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-D tensors; backward slices the gradient back apart."""
    if not parts:
        raise ValueError("concat1d of an empty sequence")
    for p in parts:
        if p.values.ndim != 1:
            raise ShapeError(f"concat1d needs 1-D tensors, got shape {p.shape}")
    sizes = [p.shape[0] for p in parts]
    out = Tensor(np.concatenate([p.values for p in parts]))

    def rule(g: np.ndarray) -> None:
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off : off + n])
            off += n

    return _record(out, tuple(parts), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != x.values.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.values.reshape(shape).copy())

    def rule(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.values.shape))

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.values + b.values)

    def rule(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values)

    def rule(g: np.ndarray) -> None:
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return _record(out, (a, b), rule)


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    out = Tensor(x.values * alpha)

    def rule(g: np.ndarray) -> None:
        _accum(x, g * alpha)

    return _record(out, (x,), rule)


def add_rows(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector to every row of a matrix; bias grad sums over rows."""
    if x.values.ndim != 2 or bias.values.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_rows needs [B x d] and [d], got {x.shape} and {bias.shape}")
    out = Tensor(x.values + bias.values)

    def rule(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(bias, g.sum(axis=0))

    return _record(out, (x, bias), rule)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors in one tape entry."""
    if not parts:
        raise ValueError("add_n of an empty sequence")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError(f"add_n shapes differ: {shape} vs {p.shape}")
    acc = parts[0].values.copy()
    for p in parts[1:]:
        acc += p.values
    out = Tensor(acc)

    def rule(g: np.ndarray) -> None:
        for p in parts:
            _accum(p, g)

    return _record(out, tuple(parts), rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.values, 0.0))

    def rule(g: np.ndarray) -> None:
        _accum(x, g * (x.values > 0.0))

    return _record(out, (x,), rule)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximate gelu: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + t))

    def rule(g: np.ndarray) -> None:
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * v**2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner))

    return _record(out, (x,), rule)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode (or p == 0) is the identity. The mask is drawn once and closed
    over by the backward rule, so forward and backward see the same draw.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.values.shape) >= p
    inv = 1.0 / (1.0 - p)
    out = Tensor(x.values * keep * inv)

    def rule(g: np.ndarray) -> None:
        _accum(x, g * keep * inv)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# similarities and losses
# ---------------------------------------------------------------------------


def cosine_similarity(a: Tensor, b: Tensor, eps: float = _COS_EPS) -> Tensor:
    """cos(a, b) with norms clamped below at eps; scalar output.

    A clamped norm is treated as a constant in backward (its derivative
    through the clamp is zero), so zero vectors stay differentiable.
    """
    if a.values.ndim != 1 or b.values.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs matching 1-D shapes, got {a.shape} and {b.shape}")
    na_raw = float(np.linalg.norm(a.values))
    nb_raw = float(np.linalg.norm(b.values))
    na = max(na_raw, eps)
    nb = max(nb_raw, eps)
    dot = float(a.values @ b.values)
    cos = dot / (na * nb)
    out = Tensor(cos)

    def rule(g: np.ndarray) -> None:
        gs = float(g)
        if a.requires_grad:
            ga = b.values / (na * nb)
            if na_raw > eps:
                ga = ga - (cos / na**2) * a.values
            _accum(a, gs * ga)
        if b.requires_grad:
            gb = a.values / (na * nb)
            if nb_raw > eps:
                gb = gb - (cos / nb**2) * b.values
            _accum(b, gs * gb)

    return _record(out, (a, b), rule)


def cosine_many(a: Tensor, rows: Tensor, eps: float = _COS_EPS) -> Tensor:
    """cos(a, rows[j]) for every row of a constant matrix, as a vector.

    ``rows`` must be gradient-free (it holds detached features); gradients
    flow only into ``a``. Equivalent to stacking cosine_similarity calls.
    """
    if a.values.ndim != 1 or rows.values.ndim != 2 or rows.shape[1] != a.shape[0]:
        raise ShapeError(f"cosine_many needs [d] and [S x d], got {a.shape} and {rows.shape}")
    if rows.requires_grad:
        raise ValueError("cosine_many rows must be detached")
    na_raw = float(np.linalg.norm(a.values))
    na = max(na_raw, eps)
    nb = np.maximum(np.linalg.norm(rows.values, axis=1), eps)
    dots = rows.values @ a.values
    cos = dots / (na * nb)
    out = Tensor(cos)

    def rule(g: np.ndarray) -> None:
        ga = (g / nb) @ rows.values / na
        if na_raw > eps:
            ga = ga - (float(g @ cos) / na**2) * a.values
        _accum(a, ga)

    return _record(out, (a, rows), rule)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target], max-stabilized.

    Backward is (softmax - onehot) / B.
    """
    if logits.values.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy needs [B x C] logits, got shape {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"targets length {t.shape} does not match batch {n}")
    if t.size and (t.min() < 0 or t.max() >= c):
        bad = t[(t < 0) | (t >= c)][0]
        raise IndexError(f"target {int(bad)} out of range for {c} classes")
    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(n), t]
    out = Tensor(losses.mean())

    def rule(g: np.ndarray) -> None:
        sm = np.exp(shifted)
        sm /= sm.sum(axis=1, keepdims=True)
        sm[np.arange(n), t] -= 1.0
        _accum(logits, float(g) * sm / n)

    return _record(out, (logits,), rule)


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_coords: int
    worst: tuple[int, int, float, float] | None  # input idx, flat idx, analytic, numeric
    note: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel error {self.max_rel_error:.3e} over {self.n_coords} coords {self.note}"


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of f(*inputs) against central differences.

    f must be scalar-valued and deterministic (fix any rng it uses per call).
    The numeric side only ever runs forward passes, so it is independent of
    every backward rule it is checking. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-6); the report carries the max.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
        if not np.isfinite(out.values).all():
            return GradCheckReport(False, math.inf, 0, None, "non-finite forward value")
        tape.backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.values) for t in inputs
    ]
    for a in analytic:
        if not np.isfinite(a).all():
            return GradCheckReport(False, math.inf, 0, None, "non-finite analytic gradient")

    max_rel = 0.0
    worst = None
    n_coords = 0
    for ti, t in enumerate(inputs):
        flat = t.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                fp = float(f(*inputs).values)
                flat[i] = orig - h
                fm = float(f(*inputs).values)
            finally:
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return GradCheckReport(False, math.inf, n_coords, worst, "non-finite perturbed value")
            numeric = (fp - fm) / (2.0 * h)
            ana = float(analytic[ti].reshape(-1)[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-6)
            n_coords += 1
            if rel > max_rel:
                max_rel = rel
                worst = (ti, i, ana, numeric)
    return GradCheckReport(max_rel < tol, max_rel, n_coords, worst)
