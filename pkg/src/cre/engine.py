"""Dense tensors with reverse-mode automatic differentiation.

Differentiable operations are free functions over :class:`Tensor`. While a
:class:`Tape` is active, each executed op appends itself to the tape;
:func:`backward` replays the tape in exact reverse execution order and
accumulates gradients into ``Tensor.grad``. A tape can be replayed once.

Training math runs in float32. :func:`finite_diff_check` is the numeric
oracle; run it on float64 tensors, where central differences are reliable.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateFeatureError, ShapeError, TapeReuseError

_REAL_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


class Tensor:
    """A dense n-d array of 32- or 64-bit reals with an optional grad slot.

    Data is row-major and treated as immutable once created; only ``grad``
    is written after construction (by :func:`backward`).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _REAL_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Light operator sugar; the functional forms below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; ops executed inside record onto the innermost
    active tape. One backward pass per tape.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _ACTIVE_TAPES and out.requires_grad:
        _ACTIVE_TAPES[-1]._entries.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay ``tape`` in reverse, populating ``grad`` on every tensor with
    ``requires_grad`` that the loss reaches. Errors on non-scalar loss or on
    a tape that was already consumed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeReuseError("tape already consumed by a previous backward pass")
    tape.consumed = True

    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for out, inputs, backward_fn in reversed(tape._entries):
        got = pending.pop(id(out), None)
        if got is None:
            continue  # this op did not influence the loss
        _, g = got
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            held = pending.get(id(t))
            pending[id(t)] = (t, gi if held is None else held[1] + gi)
    # Whatever is left never appeared as an op output: leaf parameters.
    for t, g in pending.values():
        t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


# --------------------------------------------------------------------------
# Shape helpers
# --------------------------------------------------------------------------


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _coerce_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the axes numpy broadcast to reach ``g.shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...],
                    keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_operand(b, a)
    _check_same_dtype(a, b, "add")
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def subtract(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_operand(b, a)
    _check_same_dtype(a, b, "subtract")
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"subtract: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd)


def multiply(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce_operand(b, a)
    _check_same_dtype(a, b, "multiply")
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar (no gradient for the scalar)."""
    a = as_tensor(a)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return _make(a.data * c, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes if axes else None, keepdims=keepdims)

    def bwd(g):
        return (_expand_reduced(g, a.shape, axes, keepdims) / count,)

    return _make(np.asarray(data), (a,), bwd)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def bwd(g):
        return (_expand_reduced(g, a.shape, axes, keepdims),)

    return _make(np.asarray(data), (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x * x * x))
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        inner_d = c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * inner_d),)

    return _make(data, (a,), bwd)


# --------------------------------------------------------------------------
# Shape ops
# --------------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(perm))

    def bwd(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(perm), (a,), bwd)


def swap_last_two(a: Tensor) -> Tensor:
    nd = as_tensor(a).ndim
    if nd < 2:
        raise ShapeError(f"swap_last_two: need ndim >= 2, got shape {a.shape}")
    return transpose(a, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concatenate: empty input list")
    for t in ts[1:]:
        _check_same_dtype(ts[0], t, "concatenate")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), bwd)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: leading dimensions do not broadcast: {a.shape} @ {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``, flattened to one gemm."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, w)
    if b is not None:
        out = add(out, b)
    if x.ndim != 2:
        out = reshape(out, lead + (w.shape[1],))
    return out


# --------------------------------------------------------------------------
# Normalization and attention
# --------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},) for input {x.shape}"
        )
    _check_same_dtype(x, gain, "layer_norm")
    _check_same_dtype(x, bias, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        u = g * gain.data
        gx = inv * (u - u.mean(axis=-1, keepdims=True)
                    - xhat * (u * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(data, (x, gain, bias), bwd)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Divide each vector along ``axis`` by its Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm < 1e-12).any():
        raise DegenerateFeatureError("l2_normalize: (near-)zero-norm row has no direction")
    y = x.data / norm

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norm,)

    return _make(y, (x,), bwd)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; composite op."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query/key widths disagree: {q.shape} vs {k.shape}")
    scores = scale(matmul(q, swap_last_two(k)), q.shape[-1] ** -0.5)
    return matmul(softmax(scores, axis=-1), v)


# --------------------------------------------------------------------------
# Lookup / scatter ops
# --------------------------------------------------------------------------


def _check_index_array(ids, upper: int, what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"{what}: indices must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= upper):
        raise IndexError(f"{what}: index out of range [0, {upper}): min={ids.min()}, max={ids.max()}")
    return ids


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer array ``ids`` (any shape)."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    ids = _check_index_array(ids, table.shape[0], "embedding")
    d = table.shape[1]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], (table,), bwd)


def gather_positions(x: Tensor, idx) -> Tensor:
    """``out[b, t] = x[b, idx[b, t]]`` for ``x`` of shape (B, S, D)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"gather_positions: expected (B, S, D) input, got {x.shape}")
    idx = _check_index_array(idx, x.shape[1], "gather_positions")
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_positions: index shape {idx.shape} does not match batch {x.shape}")
    b = x.shape[0]
    rows = np.arange(b)[:, None]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx[:, :, None], axis=1), (x,), bwd)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]; max-shifted for stability."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (n, K), got {logits.shape}")
    n, k = logits.shape
    targets = _check_index_array(targets, k, "softmax_cross_entropy targets")
    if targets.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: targets shape {targets.shape} != ({n},)")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    per_row = np.log(z[:, 0]) - shifted[rows, targets]
    data = np.asarray(per_row.mean(), dtype=x.dtype)

    def bwd(g):
        p = e / z
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(data, (logits,), bwd)


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-4) -> float:
    """Max relative error between tape gradients of ``f()`` and central
    differences over every element of ``params``.

    ``f`` must be a deterministic, scalar-valued expression over ``params``
    (checked by evaluating it twice). Relative error per element is
    ``|analytic - central| / (|analytic| + |central| + 1e-8)``.
    """
    v1 = float(as_tensor(f()).data.reshape(()))
    v2 = float(as_tensor(f()).data.reshape(()))
    if v1 != v2:
        raise ContractError(f"finite_diff_check: f is not deterministic ({v1!r} != {v2!r})")

    saved = [p.grad for p in params]
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ContractError(f"finite_diff_check: f must be scalar-valued, got shape {loss.shape}")
    backward(loss, tape)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(as_tensor(f()).data.reshape(()))
            flat[i] = orig - h
            fm = float(as_tensor(f()).data.reshape(()))
            flat[i] = orig
            central = (fp - fm) / (2.0 * h)
            a = float(gflat[i])
            err = abs(a - central) / (abs(a) + abs(central) + 1e-8)
            if err > worst:
                worst = err
    return worst
