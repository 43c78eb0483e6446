"""Dense tensors with a reverse-mode differentiation tape.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and that touch at least one tensor with ``requires_grad`` are recorded in
execution order.  ``tape.backward(loss)`` walks the record in reverse and
accumulates gradients into the ``.grad`` field of leaf tensors.  Outside a
tape every op still runs, it just isn't recorded (cheap inference).

Broadcasting is restricted to prefix axes: in a binary op the smaller
operand's shape must equal a trailing suffix of the larger one.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_PRECISION = {32: np.float32, 64: np.float64}
_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_precision(bits: int) -> None:
    """Set the default float width (32 or 64) for newly created tensors in this thread."""
    if bits not in _PRECISION:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state.dtype = _PRECISION[bits]


@contextlib.contextmanager
def precision(bits: int):
    old = default_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = old


class OpCounter:
    """Counts primitive invocations (recorded or not) while active."""

    def __init__(self):
        self.count = 0
        self.by_name: dict[str, int] = {}

    def __enter__(self):
        stack = _counters()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _counters().remove(self)


def _counters() -> list:
    if not hasattr(_state, "counters"):
        _state.counters = []
    return _state.counters


def _tapes() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> "Tape | None":
    stack = _tapes()
    return stack[-1] if stack else None


class Tensor:
    """An n-d real array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; every path goes through a recorded primitive
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Node:
    __slots__ = ("out", "parents", "backward", "name")

    def __init__(self, out, parents, backward, name):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of executed primitives.

    Driving one tape from several threads is not supported; separate threads
    should each open their own tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable, name: str):
        self.nodes.append(_Node(out, tuple(parents), backward, name))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict:
        """Back-propagate from a scalar ``loss``.

        Leaf gradients are *added* to ``tensor.grad``; call :meth:`zero_grad`
        (or reset each leaf) between steps.  Returns ``{leaf: grad}`` for the
        leaves reached in this call.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("backward: loss tensor was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in self._produced:
                    if pid in grads:
                        grads[pid] = grads[pid] + pg
                    else:
                        grads[pid] = pg
                else:
                    leaves[pid] = parent
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=parent.data.dtype)
                    else:
                        parent.grad = parent.grad + pg
        return {t: t.grad for t in leaves.values()}

    def zero_grad(self, params: Iterable[Tensor]) -> None:
        for p in params:
            p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive plumbing


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: non-finite values in output")
    return arr


def make_op(name: str, out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and record ``backward`` (grad_out -> parent grads)."""
    for c in _counters():
        c.count += 1
        c.by_name[name] = c.by_name.get(name, 0) + 1
    _finite(out_data, name)
    needs = any(p.requires_grad for p in parents)
    tape = active_tape()
    out = Tensor._wrap(out_data, needs and tape is not None)
    if out.requires_grad:
        tape.record(out, parents, backward, name)
    return out


def _check_broadcast(name: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{name}: incompatible shapes {a} and {b} (only prefix-axis broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    # matmul broadcasting may also expand size-1 axes
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return make_op("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("softplus", softplus_array(xd), (x,), lambda g: (g * sigmoid_array(xd),))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.data)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = sigmoid_array(xd)
    return make_op("silu", xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy matmul semantics; ``a`` and ``b`` must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _reduce_to(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _reduce_to(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_op("matmul", out, (a, b), backward)


def apply_linear_map(m, x: Tensor) -> Tensor:
    """Left-multiply the leading axis of ``x`` by the (sparse) matrix ``m``.

    ``x`` of shape ``(n, *rest)`` maps to ``(m.shape[0], *rest)``.  The
    backward pass multiplies by the transpose.
    """
    x = as_tensor(x)
    n = m.shape[1]
    if x.ndim == 0 or x.shape[0] != n:
        raise ShapeError(f"apply_linear_map: operator {m.shape} incompatible with input {x.shape}")
    rest = x.shape[1:]
    flat = x.data.reshape(n, -1)
    out = np.asarray(m @ flat, dtype=x.data.dtype).reshape((m.shape[0],) + rest)
    mt = m.T

    def backward(g):
        return (np.asarray(mt @ g.reshape(g.shape[0], -1), dtype=g.dtype).reshape(x.shape),)

    return make_op("apply_linear_map", out, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from e
    old = x.shape
    return make_op("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_op("transpose", out, (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum(sizes)[:-1]
    return make_op("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing, including negative strides."""
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if not (isinstance(it, (slice, int, np.integer)) or it is Ellipsis or it is None):
            raise TypeError("getitem: only basic indexing is supported")
    out = x.data[idx]
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_op("slice", np.ascontiguousarray(out), (x,), backward)


def flip(x: Tensor, axis: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(None, None, -1)
    return getitem(x, tuple(sl))


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op("sum", np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_op("mean", np.asarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# fused network primitives


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        gx = g * gd
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make_op("layernorm", out, (x, gamma, beta), backward)


def causal_dwconv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution along axis -2.

    ``x``: (..., L, C), ``w``: (C, k), ``b``: (C,).
    ``y[t, c] = b[c] + sum_j w[c, j] * x[t - (k-1) + j, c]`` with zero padding.
    """
    C, k = w.shape
    if x.shape[-1] != C or b.shape != (C,):
        raise ShapeError(f"causal_dwconv1d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    xd, wd = x.data, w.data
    L = xd.shape[-2]
    out = np.broadcast_to(b.data, xd.shape).copy()
    for j in range(k):
        shift = k - 1 - j
        if shift >= L:
            continue
        out[..., shift:, :] += wd[:, j] * xd[..., :L - shift, :]

    def backward(g):
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for j in range(k):
            shift = k - 1 - j
            if shift >= L:
                continue
            dx[..., :L - shift, :] += wd[:, j] * g[..., shift:, :]
            dw[:, j] = (g[..., shift:, :] * xd[..., :L - shift, :]).reshape(-1, C).sum(axis=0)
        db = g.reshape(-1, C).sum(axis=0)
        return dx, dw, db

    return make_op("causal_dwconv1d", out, (x, w, b), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (B, K) against integer ``labels`` (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    n = z.shape[0]
    rows = np.arange(n)
    loss = (lse[:, 0] - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - lse)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_op("softmax_cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# verification


def gradcheck(f: Callable, x, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and finite differences.

    ``x`` is a leaf tensor or a sequence of them (64-bit recommended).  The
    numeric side is the fourth-order central stencil, whose truncation error
    is O(eps**4); that allows a step large enough to keep roundoff far below
    the smallest gradients of interest.  The error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f()
    if out.size != 1:
        raise ShapeError(f"gradcheck: function output must be scalar, got {out.shape}")
    tape.backward(out)

    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for step in (2 * eps, eps, -eps, -2 * eps):
                flat[i] = orig + step
                vals.append(float(f().data))
            flat[i] = orig
            num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1e-8, abs(num)))
    for t, r in zip(xs, saved):
        t.requires_grad = r
        t.grad = None
    return worst


__all__ = [
    "Tensor", "Tape", "OpCounter", "ShapeError", "NonFiniteError", "set_precision", "precision",
    "default_dtype", "as_tensor", "make_op", "zero_grad", "add", "sub", "mul", "exp", "log", "softplus",
    "sigmoid", "silu", "matmul", "apply_linear_map", "reshape", "transpose", "concat", "getitem",
    "flip", "tsum", "mean", "layernorm", "causal_dwconv1d", "softmax_cross_entropy", "gradcheck",
]
