"""Minimal reverse-mode differentiation over dense 2-D float64 arrays.

Every operation records its adjoint rule on the implicit tape formed by the
parent links of the output tensor; ``grad`` replays the tape in reverse
topological order.  The primitive set is exactly what the regression model
and the explainer need: dense linear algebra, a few pointwise nonlinearities,
and segment aggregations over graph arcs.

All values are float64 and every sanctioned op checks its result for
NaN/Inf (raising :class:`NonFiniteError`), so numerical blow-ups surface at
the op that produced them instead of corrupting a training run silently.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

EPS_STD = 1e-8  # variance guard inside the std aggregator


class NonFiniteError(ArithmeticError):
    """An op produced a NaN or Inf value."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def _as_array(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got ndim={a.ndim}")
    return a


def _check_finite(a: np.ndarray) -> np.ndarray:
    # a single-pass sum is finite iff all entries are (Inf - Inf -> NaN)
    if not np.isfinite(a.sum()):
        raise NonFiniteError("non-finite value produced by an op")
    return a


class Tensor:
    """A 2-D float64 array node on the tape."""

    __slots__ = ("value", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = _as_array(value)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item() requires a 1x1 tensor")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != tuple(shape):
        raise ShapeError(f"cannot unbroadcast {grad.shape} to {shape}")
    return out


def _make(value, parents, backward) -> Tensor:
    _check_finite(value)
    if any(p.requires_grad for p in parents):
        return Tensor(value, _parents=parents, _backward=backward)
    return Tensor(value)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.value + b.value

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.value - b.value

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = a.value * b.value

    def backward(g, acc):
        acc(a, _unbroadcast(g * b.value, a.shape))
        acc(b, _unbroadcast(g * a.value, b.shape))

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def backward(g, acc):
        acc(a, g @ b.value.T)
        acc(b, a.value.T @ g)

    return _make(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g, acc):
        acc(a, g.T)

    return _make(a.value.T.copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g, acc):
        acc(a, g.reshape(a.shape))

    return _make(a.value.reshape(shape), (a,), backward)


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols requires equal row counts")
    out = np.concatenate([p.value for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g, acc):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[:, j0:j1])

    return _make(out, tuple(parts), backward)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    def backward(g, acc):
        full = np.zeros(a.shape)
        full[:, j0:j1] = g
        acc(a, full)

    return _make(a.value[:, j0:j1].copy(), (a,), backward)


class RowScatter:
    """Precomputed plan for per-row index aggregation.

    Holds a sparse incidence operator for sum-scatters (the adjoint of a row
    gather and the workhorse of mean/std segment aggregation) plus the
    sorted-segment layout used by the max/min reduceat path.  Building the
    plan once per graph topology amortizes the index sorting away from the
    per-step hot path.
    """

    def __init__(self, idx: np.ndarray, n_rows: int):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
            raise IndexError("row index out of range")
        self.idx = idx
        self.n_rows = n_rows
        self.matrix = sp.csr_matrix(
            (np.ones(idx.size), (idx, np.arange(idx.size))),
            shape=(n_rows, idx.size))
        self.counts = np.bincount(idx, minlength=n_rows).astype(np.float64)
        if idx.size == 0 or np.all(np.diff(idx) >= 0):
            self.perm = None
            sorted_idx = idx
        else:
            self.perm = np.argsort(idx, kind="stable")
            sorted_idx = idx[self.perm]
        if idx.size:
            self.starts = np.flatnonzero(np.r_[True, np.diff(sorted_idx) > 0])
            self.nodes = sorted_idx[self.starts]
        else:
            self.starts = np.empty(0, dtype=np.int64)
            self.nodes = np.empty(0, dtype=np.int64)

    def scatter_add(self, g: np.ndarray) -> np.ndarray:
        return self.matrix @ g

    def segment_reduce(self, ufunc, arr: np.ndarray, fill: float) -> np.ndarray:
        """Per-segment ufunc reduction; rows with no entries get ``fill``."""
        full = np.full((self.n_rows, arr.shape[1]), fill)
        if self.idx.size:
            src = arr if self.perm is None else arr[self.perm]
            full[self.nodes] = ufunc.reduceat(np.asfortranarray(src),
                                              self.starts, axis=0)
        return full


def gather_rows(a: Tensor, idx: np.ndarray, plan: RowScatter | None = None) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError("gather_rows index out of range")
    if plan is None:
        plan = RowScatter(idx, a.shape[0])

    def backward(g, acc):
        acc(a, plan.scatter_add(g))

    return _make(a.value[idx], (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0.0

    def backward(g, acc):
        acc(a, g * mask)

    return _make(np.where(mask, a.value, 0.0), (a,), backward)


def absval(a: Tensor) -> Tensor:
    sign = np.sign(a.value)

    def backward(g, acc):
        acc(a, g * sign)

    return _make(np.abs(a.value), (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) at train time, identity in eval."""
    if not train or p == 0.0:
        def backward(g, acc):
            acc(a, g)

        return _make(a.value.copy(), (a,), backward)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {p}")
    scale = (rng.random(a.shape) >= p) / (1.0 - p)

    def backward(g, acc):
        acc(a, g * scale)

    return _make(a.value * scale, (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g, acc):
        dot = (g * out).sum(axis=1, keepdims=True)
        acc(a, out * (g - dot))

    return _make(out, (a,), backward)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0, variance 1; affine is the caller's job."""
    mean = a.value.mean(axis=1, keepdims=True)
    centered = a.value - mean
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = centered * inv

    def backward(g, acc):
        g_mean = g.mean(axis=1, keepdims=True)
        proj = (g * out).mean(axis=1, keepdims=True)
        acc(a, inv * (g - g_mean - out * proj))

    return _make(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size

    def backward(g, acc):
        acc(a, np.full(a.shape, g[0, 0] / n))

    return _make(np.array([[a.value.mean()]]), (a,), backward)


def segment_aggregate(messages: Tensor, dst: np.ndarray, n_nodes: int,
                      kind: str, plan: RowScatter | None = None) -> Tensor:
    """Per-target aggregation of arc messages.

    ``dst[e]`` is the target node of arc ``e``; nodes with no incoming arcs
    yield a zero row for every kind.  ``std`` is the EPS_STD-stabilized
    population form; max/min route their gradient to the first arc (in arc
    order) attaining the extremum.  A precomputed ``plan`` for ``dst`` skips
    the per-call index sorting.
    """
    dst = np.asarray(dst, dtype=np.int64)
    if dst.size != messages.shape[0]:
        raise ShapeError("one dst index per message row required")
    if dst.size and (dst.min() < 0 or dst.max() >= n_nodes):
        raise IndexError("segment target out of range")
    if plan is None:
        plan = RowScatter(dst, n_nodes)
    counts = plan.counts
    nonempty = counts > 0
    safe = np.where(nonempty, counts, 1.0)[:, None]
    vals = messages.value

    if kind == "mean":
        out = plan.scatter_add(vals) / safe

        def backward(g, acc):
            acc(messages, (g / safe)[dst])

    elif kind in ("max", "min"):
        ufunc = np.maximum if kind == "max" else np.minimum
        fill = -np.inf if kind == "max" else np.inf
        ext = plan.segment_reduce(ufunc, vals, fill)
        out = np.where(nonempty[:, None], ext, 0.0)
        # first-arriving extremal arc per (node, column) receives the gradient
        n_arcs = dst.size
        arc_ids = np.where(vals == ext[dst],
                           np.arange(n_arcs, dtype=np.float64)[:, None],
                           float(n_arcs))
        winner_f = plan.segment_reduce(np.minimum, arc_ids, np.inf)
        winner = np.where(np.isfinite(winner_f), winner_f, n_arcs).astype(np.int64)

        def backward(g, acc):
            gm = np.zeros_like(vals)
            nz_nodes, nz_cols = np.nonzero(winner < n_arcs)
            gm[winner[nz_nodes, nz_cols], nz_cols] += g[nz_nodes, nz_cols]
            acc(messages, gm)

    elif kind == "std":
        mean = plan.scatter_add(vals) / safe
        sq = plan.scatter_add(vals ** 2)
        var = np.maximum(sq / safe - mean ** 2, 0.0)
        std = np.sqrt(var + EPS_STD)
        out = np.where(nonempty[:, None], std, 0.0)
        active = var > 0.0  # clamped-at-zero variance gets zero gradient

        def backward(g, acc):
            coef = np.where(active, g / (std * safe), 0.0)
            acc(messages, coef[dst] * (vals - mean[dst]))

    else:
        raise ValueError(f"unknown aggregation kind: {kind}")

    return _make(out, (messages,), backward)


def grad(output: Tensor, leaves) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each leaf.

    A leaf the output does not depend on gets an all-zero gradient.
    """
    if output.value.size != 1:
        raise ShapeError("grad requires a scalar (1x1) output")
    leaves = list(leaves)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}

    def accumulate(t: Tensor, g: np.ndarray):
        if not t.requires_grad:
            return
        key = id(t)
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g

    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        node._backward(g, accumulate)

    return [grads.get(id(leaf), np.zeros(leaf.shape)) for leaf in leaves]


def finite_difference_check(f, point: np.ndarray, h: float = 1e-5,
                            tolerance: float = 1e-6,
                            analytic: np.ndarray | None = None,
                            exclude: np.ndarray | None = None) -> dict:
    """Central-difference check of a scalar function's gradient.

    ``f(x)`` must be deterministic (dropout disabled).  If ``analytic`` is
    not given, ``f`` must accept a Tensor and the gradient is taken off the
    tape.  ``exclude`` masks coordinates sitting on nondifferentiable kinks.
    Relative error uses a unit floor so coordinates where both sides are
    tiny compare absolutely.
    """
    point = np.asarray(point, dtype=np.float64)
    if analytic is None:
        x = tensor(point, requires_grad=True)
        out = f(x)
        analytic = grad(out, [x])[0]
    numeric = np.zeros_like(point)
    flat = point.copy()
    it = np.nditer(point, flags=["multi_index"])
    for _ in it:
        ij = it.multi_index
        orig = flat[ij]
        flat[ij] = orig + h
        fp = _scalar_value(f(tensor(flat)))
        flat[ij] = orig - h
        fm = _scalar_value(f(tensor(flat)))
        flat[ij] = orig
        numeric[ij] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1.0)
    rel_err = np.abs(numeric - analytic) / denom
    if exclude is not None:
        rel_err = np.where(exclude, 0.0, rel_err)
    return {
        "analytic": analytic,
        "numeric": numeric,
        "rel_err": rel_err,
        "max_rel_err": float(rel_err.max()) if rel_err.size else 0.0,
        "passed": bool(np.all(rel_err < tolerance)),
    }


def _scalar_value(out) -> float:
    if isinstance(out, Tensor):
        return out.item()
    return float(out)
