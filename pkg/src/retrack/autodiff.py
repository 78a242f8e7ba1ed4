"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every value is a :class:`Tensor`: a numpy array of shape ``(rows, cols)``
plus an optional record of the operation that produced it.  Operations
execute eagerly in numpy and append themselves to the implicit tape (the
creation-ordered graph of tensors), so :func:`backward` can replay the
tape in reverse and accumulate a gradient for every tracked input exactly
once.  Scalars are 1x1 matrices; there is no broadcasting beyond the
explicit ``repeat_*`` ops.

Conventions:

* all data is float64; inputs are validated to be finite after every
  operation (``NonFiniteError`` names the offending op),
* ``max``-type ops break ties toward the lowest index and route the
  subgradient there,
* a graph is single-owner: build it, call :func:`backward` (or
  :func:`grads`), let it go.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "DegenerateRowError",
    "tensor",
    "scalar",
    "backward",
    "grads",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "scale",
    "add_scalar",
    "exp",
    "sqrt",
    "sigmoid",
    "softplus",
    "relu",
    "sum_all",
    "mean_all",
    "row_sum",
    "col_mean",
    "repeat_col",
    "repeat_row",
    "concat_rows",
    "concat_cols",
    "max_over_axis",
    "row_softmax",
    "softmax_cross_entropy_row",
    "rowwise_l2_normalize",
    "layer_norm",
    "affine",
    "stop_gradient",
    "gradcheck",
    "gradcheck_multi",
]


class ShapeError(ValueError):
    """An operation received matrices with incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf entries."""


class DegenerateRowError(ValueError):
    """A row-normalization input had a row with near-zero norm."""


_ORDER = itertools.count()


class Tensor:
    """A 2-D float64 matrix tracked on the autodiff tape.

    ``data`` is the value, ``grad`` is filled by :func:`backward`.  Tensors
    created by operations carry their parents and a vector-Jacobian
    closure; leaf tensors (parameters, constants) carry neither.
    """

    __slots__ = ("data", "grad", "_parents", "_vjp", "_op", "_order")

    def __init__(
        self,
        data,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"{_op}: tensors are 2-D matrices, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{_op}: non-finite entries in result of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op
        self._order = next(_ORDER)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item: expected 1x1 scalar, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # Operator sugar for the small set of same-shape binary ops.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data) -> Tensor:
    """Create a leaf tensor from array-like 2-D data."""
    return Tensor(data)


def scalar(value: float) -> Tensor:
    """Create a 1x1 leaf tensor."""
    return Tensor(np.array([[float(value)]]))


# ---------------------------------------------------------------------------
# backward pass


def _reachable(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    nodes = list(seen.values())
    nodes.sort(key=lambda t: t._order)
    return nodes


def backward(loss: Tensor) -> None:
    """Replay the tape in reverse from a 1x1 loss, filling ``.grad``.

    Every tensor reachable from ``loss`` gets its grad reset and then
    accumulated exactly once per use; tensors not reachable are left
    untouched (use :func:`grads` to read a full parameter set safely).
    """
    if loss.data.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.data.shape}")
    nodes = _reachable(loss)
    for t in nodes:
        t.grad = None
    loss.grad = np.ones((1, 1))
    for t in reversed(nodes):
        if t.grad is None or t._vjp is None:
            continue
        parts = t._vjp(t.grad)
        for parent, g in zip(t._parents, parts):
            if g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def grads(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of ``loss`` w.r.t. each named parameter (zeros if unused)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


# ---------------------------------------------------------------------------
# shape helpers


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return Tensor(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data + c, (a,), lambda g: (g,), "add_scalar")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    out = _softplus_np(a.data)
    sig = _sigmoid_np(a.data)
    return Tensor(out, (a,), lambda g: (g * sig,), "softplus")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Stable for large |x| in both directions.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ {a.data.shape} @ {b.data.shape}")
    return Tensor(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.data.sum()]])
    return Tensor(out, (a,), lambda g: (np.full_like(a.data, g[0, 0]),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array([[a.data.mean()]])
    return Tensor(out, (a,), lambda g: (np.full_like(a.data, g[0, 0] / n),), "mean_all")


def row_sum(a: Tensor) -> Tensor:
    out = a.data.sum(axis=1, keepdims=True)
    return Tensor(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),), "row_sum")


def col_mean(a: Tensor) -> Tensor:
    n = a.data.shape[0]
    out = a.data.mean(axis=0, keepdims=True)
    return Tensor(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),), "col_mean")


def repeat_col(v: Tensor, n: int) -> Tensor:
    """Tile a (Q, 1) column vector into a (Q, n) matrix."""
    if v.data.shape[1] != 1:
        raise ShapeError(f"repeat_col: expected column vector, got {v.data.shape}")
    out = np.broadcast_to(v.data, (v.data.shape[0], n)).copy()
    return Tensor(out, (v,), lambda g: (g.sum(axis=1, keepdims=True),), "repeat_col")


def repeat_row(v: Tensor, n: int) -> Tensor:
    """Tile a (1, D) row vector into an (n, D) matrix."""
    if v.data.shape[0] != 1:
        raise ShapeError(f"repeat_row: expected row vector, got {v.data.shape}")
    out = np.broadcast_to(v.data, (n, v.data.shape[1])).copy()
    return Tensor(out, (v,), lambda g: (g.sum(axis=0, keepdims=True),), "repeat_row")


def concat_rows(mats: Sequence[Tensor]) -> Tensor:
    if not mats:
        raise ShapeError("concat_rows: empty input")
    cols = mats[0].data.shape[1]
    for m in mats:
        if m.data.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    offsets = np.cumsum([0] + [m.data.shape[0] for m in mats])

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return [g[offsets[i] : offsets[i + 1]] for i in range(len(mats))]

    return Tensor(np.concatenate([m.data for m in mats], axis=0), tuple(mats), vjp, "concat_rows")


def concat_cols(mats: Sequence[Tensor]) -> Tensor:
    if not mats:
        raise ShapeError("concat_cols: empty input")
    rows = mats[0].data.shape[0]
    for m in mats:
        if m.data.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    offsets = np.cumsum([0] + [m.data.shape[1] for m in mats])

    def vjp(g: np.ndarray) -> list[np.ndarray]:
        return [g[:, offsets[i] : offsets[i + 1]] for i in range(len(mats))]

    return Tensor(np.concatenate([m.data for m in mats], axis=1), tuple(mats), vjp, "concat_cols")


def max_over_axis(a: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max values along ``axis`` plus argmax indices (ties: lowest index).

    The subgradient is routed entirely to the argmax entry of each
    row/column, matching the lowest-index tie convention.
    """
    if axis not in (0, 1):
        raise ShapeError(f"max_over_axis: axis must be 0 or 1, got {axis}")
    idx = np.argmax(a.data, axis=axis)  # first occurrence == lowest index
    if axis == 1:
        out = a.data[np.arange(a.data.shape[0]), idx].reshape(-1, 1)

        def vjp(g: np.ndarray) -> tuple[np.ndarray]:
            z = np.zeros_like(a.data)
            z[np.arange(a.data.shape[0]), idx] = g[:, 0]
            return (z,)

    else:
        out = a.data[idx, np.arange(a.data.shape[1])].reshape(1, -1)

        def vjp(g: np.ndarray) -> tuple[np.ndarray]:
            z = np.zeros_like(a.data)
            z[idx, np.arange(a.data.shape[1])] = g[0, :]
            return (z,)

    return Tensor(out, (a,), vjp, "max_over_axis"), idx


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return Tensor(out, (a,), vjp, "row_softmax")


def softmax_cross_entropy_row(logits: Tensor, target: int) -> Tensor:
    """Cross-entropy of a softmax over one (1, N) logits row.

    Computed with max-subtraction so extreme logits stay finite; the
    backward pass is the classic ``softmax - onehot``.
    """
    if logits.data.shape[0] != 1:
        raise ShapeError(f"softmax_cross_entropy_row: expected (1, N) logits, got {logits.data.shape}")
    n = logits.data.shape[1]
    if not 0 <= target < n:
        raise ShapeError(f"softmax_cross_entropy_row: target {target} out of range for {n} logits")
    row = logits.data[0]
    m = row.max()
    shifted = row - m
    lse = m + np.log(np.exp(shifted).sum())
    loss = np.array([[lse - row[target]]])
    soft = np.exp(shifted)
    soft = soft / soft.sum()

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        d = soft.copy()
        d[target] -= 1.0
        return (g[0, 0] * d.reshape(1, -1),)

    return Tensor(loss, (logits,), vjp, "softmax_cross_entropy_row")


def rowwise_l2_normalize(
    a: Tensor,
    eps: float = 1e-8,
    guarded: bool = False,
    diag: dict | None = None,
) -> Tensor:
    """Scale every row to unit L2 norm.

    Strict mode (default) rejects rows with norm <= ``eps`` — a
    near-zero row signals a degenerate feature upstream.  Guarded mode
    uses ``sqrt(||row||^2 + eps^2)`` in the denominator instead, which
    leaves unit rows unchanged to ~1e-16, maps zero rows to zero rows,
    and stays differentiable; guarded rows are counted into ``diag``
    under ``"degenerate_rows"`` when a diagnostics dict is supplied.
    """
    ss = (a.data * a.data).sum(axis=1, keepdims=True)
    norms = np.sqrt(ss)
    if guarded:
        denom = np.sqrt(ss + eps * eps)
        if diag is not None:
            n_bad = int((norms <= eps).sum())
            if n_bad:
                diag["degenerate_rows"] = diag.get("degenerate_rows", 0) + n_bad
    else:
        if (norms <= eps).any():
            raise DegenerateRowError(
                f"rowwise_l2_normalize: row norm <= {eps} in matrix of shape {a.data.shape}"
            )
        denom = norms
    out = a.data / denom

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        # d(a/denom) with denom = sqrt(ss [+ eps^2]); d denom/da = a/denom.
        gd = (g * a.data).sum(axis=1, keepdims=True)
        return (g / denom - a.data * (gd / (denom * denom * denom)),)

    return Tensor(out, (a,), vjp, "rowwise_l2_normalize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learned (1, D) gain and bias."""
    q, d = x.data.shape
    if gain.data.shape != (1, d) or bias.data.shape != (1, d):
        raise ShapeError(
            f"layer_norm: gain/bias must be (1, {d}), got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gain.data + bias.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gh = g * gain.data
        gh_mean = gh.mean(axis=1, keepdims=True)
        ghxn_mean = (gh * xn).mean(axis=1, keepdims=True)
        dx = inv * (gh - gh_mean - xn * ghxn_mean)
        dgain = (g * xn).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        return (dx, dgain, dbias)

    return Tensor(out, (x, gain, bias), vjp, "layer_norm")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with a (1, out) bias row added to every row."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: inner dims differ {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (1, w.data.shape[1]):
        raise ShapeError(f"affine: bias must be (1, {w.data.shape[1]}), got {b.data.shape}")
    out = x.data @ w.data + b.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (g @ w.data.T, x.data.T @ g, g.sum(axis=0, keepdims=True))

    return Tensor(out, (x, w, b), vjp, "affine")


def stop_gradient(a: Tensor) -> Tensor:
    """Detach: same value, no gradient flows to the input."""
    return Tensor(a.data.copy(), (), None, "stop_gradient")


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from the live ``params`` tensors; each
    parameter entry is perturbed by ±h in place.  The error for an entry
    is ``|analytic - fd| / max(1, |fd|)``; the max over all entries of
    all parameters is returned.
    """
    analytic = grads(f(), params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(an[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst


def gradcheck_multi(
    f: Callable[[], Mapping[str, Tensor]],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    f_fast: Callable[[], Mapping[str, float]] | None = None,
) -> dict[str, float]:
    """Gradcheck several scalars that share one forward pass.

    ``f`` returns named 1x1 tensors built on one tape; the analytic
    gradient of each is taken with a separate backward pass.  Finite
    differences reuse a single ±h evaluation per parameter entry for all
    outputs — ``f_fast`` (if given) is a cheaper tape-free evaluation
    returning the same named scalars as floats.  Returns the max relative
    error per output name.
    """
    outs = f()
    labels = list(outs.keys())
    analytic = {label: grads(outs[label], params) for label in labels}

    if f_fast is None:
        def f_fast():  # type: ignore[misc]
            return {k: v.item() for k, v in f().items()}

    worst = {label: 0.0 for label in labels}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        an = {label: analytic[label][name].reshape(-1) for label in labels}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f_fast()
            flat[i] = orig - h
            minus = f_fast()
            flat[i] = orig
            for label in labels:
                fd = (plus[label] - minus[label]) / (2.0 * h)
                err = abs(an[label][i] - fd) / max(1.0, abs(fd))
                if err > worst[label]:
                    worst[label] = float(err)
    return worst
