"""Minimal dense reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor`.  When any input requires a gradient the
result remembers its parents and a closure that pushes the output gradient back
to them; :func:`backward` walks that record in reverse topological order.

Broadcasting is deliberately narrow: two operands must have equal shapes, or the
lower-rank one must match the trailing axes of the other (a bias vector added to
every row, a scalar constant).  Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

# Stand-in for -inf in attention masks; exp() of it underflows to exactly 0.
NEG_INF = -1e30


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class GraphError(RuntimeError):
    """Misuse of the gradient graph (non-scalar loss, etc.)."""


class TrainingFault(FloatingPointError):
    """A loss or gradient became non-finite."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op or 'leaf'})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _result(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        axes = [i for i, (x, y) in enumerate(zip(sa[::-1], sb[::-1])) if x != y]
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform (mismatched trailing axes {axes})")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: _accumulate(a, -g), "neg")


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent."""
    a = as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def bw(g):
        if p == 0.0:
            return
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _result(out, (a,), bw, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _result(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)), "sigmoid")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input was inside the range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _result(out, (a,), lambda g: _accumulate(a, g * inside), "clamp")


def masked_fill(a, mask, value: float = NEG_INF) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} differs from input {a.shape}")
    out = np.where(mask, value, a.data)
    return _result(out, (a,), lambda g: _accumulate(a, np.where(mask, 0.0, g)), "masked_fill")


def rowscale(x, w) -> Tensor:
    """Scale row ``i`` of an ``(N, D)`` tensor by ``w[i]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise ShapeError(f"rowscale: expected (N, D) and (N,), got {x.shape} and {w.shape}")

    def bw(g):
        _accumulate(x, g * w.data[:, None])
        _accumulate(w, (g * x.data).sum(axis=1))

    return _result(x.data * w.data[:, None], (x, w), bw, "rowscale")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: only rank 1/2 operands supported, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: contraction axis mismatch, axis -1 of {a.shape} vs axis 0 of {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ad, bd = a.data, b.data
        if a.requires_grad:
            if bd.ndim == 1:
                ga = np.multiply.outer(g, bd)
            else:
                ga = g @ bd.T
            _accumulate(a, ga)
        if b.requires_grad:
            if ad.ndim == 1:
                gb = np.multiply.outer(ad, g)
            elif bd.ndim == 1:
                gb = ad.T @ g
            else:
                gb = ad.T @ g
            _accumulate(b, gb)

    return _result(out, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: rank-2 input required, got {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _result(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)), "reshape")


# ---------------------------------------------------------------- reductions


def _axis(a: Tensor, axis: int | None, op: str) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    ax = _axis(a, axis, "sum")
    out = a.data.sum(axis=ax)

    def bw(g):
        gg = g if ax is None else np.expand_dims(g, ax)
        _accumulate(a, np.broadcast_to(gg, a.shape))

    return _result(out, (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    ax = _axis(a, axis, "mean")
    n = a.data.size if ax is None else a.shape[ax]
    return mul(sum(a, axis), 1.0 / n)


def max(a, axis: int | None = None) -> Tensor:  # noqa: A001
    """Max reduction; the gradient goes to the first arg-max."""
    a = as_tensor(a)
    ax = _axis(a, axis, "max")
    if ax is None:
        idx = np.unravel_index(np.argmax(a.data), a.shape)
        out = a.data[idx]

        def bw(g):
            grad = np.zeros_like(a.data)
            grad[idx] = g
            _accumulate(a, grad)

        return _result(out, (a,), bw, "max")
    arg = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), ax).squeeze(ax)

    def bw_axis(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(arg, ax), np.expand_dims(g, ax), ax)
        _accumulate(a, grad)

    return _result(out, (a,), bw_axis, "max")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis(a, axis, "softmax")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=ax, keepdims=True)))

    return _result(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _axis(a, axis, "log_softmax")
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        _accumulate(a, g - sm * g.sum(axis=ax, keepdims=True))

    return _result(out, (a,), bw, "log_softmax")


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(x))`` without forming the probability."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * np.exp(-np.logaddexp(0.0, a.data))), "log_sigmoid")


def log_complement_softmax(a) -> Tensor:
    """``log(1 - softmax(x))`` along the last axis, via a logsumexp over the other entries."""
    a = as_tensor(a)
    G = a.shape[-1]
    if G < 2:
        raise ShapeError("log_complement_softmax needs at least two classes")
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    others = np.where(np.eye(G, dtype=bool), -np.inf, z[..., None, :])
    m = others.max(axis=-1)
    out = m + np.log(np.exp(others - m[..., None]).sum(axis=-1)) - lse
    p = np.exp(z - lse)
    with np.errstate(over="ignore"):
        odds = np.exp(z - lse - out)  # p_i / (1 - p_i)

    def bw(g):
        # d out_i / d x_k = p_k p_i / (1 - p_i) for k != i, and -p_i for k == i
        with np.errstate(invalid="ignore", over="ignore"):
            gw = np.where(g == 0, 0.0, g * odds)
        _accumulate(a, p * gw.sum(axis=-1, keepdims=True) - gw * p - g * p)

    return _result(out, (a,), bw, "log_complement_softmax")


# ---------------------------------------------------------------- indexing


def take_rows(a, index) -> Tensor:
    """Gather along axis 0 (``a[index]``); repeated indices accumulate."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"take_rows: index out of range for axis 0 of size {a.shape[0]}")

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        _accumulate(a, grad)

    return _result(a.data[index], (a,), bw, "take_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _result(out, ts, bw, "concat")


def stack_rows(vectors: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    return concat([reshape(as_tensor(v), (1, -1)) for v in vectors], axis=0)


def group_max(a, groups: Sequence[np.ndarray]) -> Tensor:
    """Elementwise max over row groups of an ``(N, D)`` tensor -> ``(G, D)``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"group_max: rank-2 input required, got {a.shape}")
    rows = []
    args = []
    for grp in groups:
        grp = np.asarray(grp, dtype=np.int64)
        block = a.data[grp]
        arg = np.argmax(block, axis=0)
        args.append(grp[arg])
        rows.append(block[arg, np.arange(a.shape[1])])
    out = np.stack(rows) if rows else np.zeros((0, a.shape[1]))
    cols = np.arange(a.shape[1])

    def bw(g):
        grad = np.zeros_like(a.data)
        for j, src in enumerate(args):
            np.add.at(grad, (src, cols), g[j])
        _accumulate(a, grad)

    return _result(out, (a,), bw, "group_max")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Gradients accumulate into ``.grad`` of every reached tensor (existing
    gradients are cleared first).  Returns a map from each reached leaf, plus any
    tensor listed in ``params``, to its gradient; unreached params map to zeros.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    for node in order:
        node.grad = None
    grads: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if not node._parents:
                grads[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
    for p in params:
        if p not in grads:
            p.grad = np.zeros_like(p.data)
            grads[p] = p.grad
    return grads


# Tensor hashes by identity so it can key gradient maps.
Tensor.__hash__ = object.__hash__  # type: ignore[assignment]
Tensor.__eq__ = lambda self, other: self is other  # type: ignore[assignment]
