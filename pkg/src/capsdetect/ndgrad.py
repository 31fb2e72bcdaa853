"""Small numpy-backed tensor engine with reverse-mode differentiation.

Only what the capsule/CNN models and the gradient-based attacks need is
provided. Broadcasting is deliberately limited to scalar-vs-tensor and
same-shape operands; anything else goes through an explicit op
(``broadcast_to``, ``add_bias``, ``einsum``).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "tensor", "precision", "default_dtype", "no_grad",
    "matmul", "bmm", "conv2d", "relu", "sigmoid", "add", "sub", "mul", "scale", "clamp",
    "neg", "square", "sqrt", "tanh", "softmax", "log_softmax", "cross_entropy", "reduce",
    "sum", "mean", "l2_norm", "reshape", "transpose", "crop", "einsum", "broadcast_to",
    "add_bias", "mask_select", "squash", "sign", "backward", "topo_order",
    "adam_step", "Adam", "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (use ``np.float64`` for grad checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _note_branch(mask: np.ndarray) -> None:
    # piecewise ops log which branch each element took while a recorder is active
    log = getattr(_state, "branches", None)
    if log is not None:
        log.append(np.packbits(np.asarray(mask, dtype=bool)).tobytes())


@contextlib.contextmanager
def record_branches():
    """Collect the branch masks of relu/clamp/max/sign-like ops run inside."""
    prev = getattr(_state, "branches", None)
    _state.branches = log = []
    try:
        yield log
    finally:
        _state.branches = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-d array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(_finite(data, op), dtype=data.dtype)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(f"{op}: unsupported broadcast {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# Each backward closure maps the output gradient to a tuple of parent
# gradients (None where a parent does not need one).

# ---------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        return (np.matmul(g, b.data.transpose(0, 2, 1)) if a.requires_grad else None,
                np.matmul(a.data.transpose(0, 2, 1), g) if b.requires_grad else None)

    return _make(np.matmul(a.data, b.data), (a, b), bw, "bmm")


def _einsum_parse(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        for ch in s:
            if ch not in out and ch not in other:
                raise ValueError(f"einsum: index {ch!r} reduced within a single operand")
    return sa, sb, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum. Every index must appear in the output or the other operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb, out = _einsum_parse(spec)

    def bw(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None,
                np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None)

    return _make(np.einsum(spec, a.data, b.data, optimize=True), (a, b), bw, "einsum")


_OFFSET_MIN_CHANNELS = 32


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: [N,C,H,W], w: [F,C,kh,kw].

    With few input channels a single im2col matmul is used. With many, the
    sum runs one kernel offset at a time in NHWC layout, which keeps the
    working set far smaller than a full im2col buffer.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"conv2d: channel mismatch {c} vs {cw}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError("conv2d: kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError("conv2d: output extent is not exact for this stride")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xn = x.data.transpose(0, 2, 3, 1)
    if padding:
        xn = np.pad(xn, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    xn = np.ascontiguousarray(xn)
    w_off = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # [kh,kw,C,F]
    m = n * ho * wo

    def window(i, j):
        return xn[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :].reshape(m, c)

    per_offset = c >= _OFFSET_MIN_CHANNELS
    cols = None
    if per_offset:
        acc = np.zeros((m, f), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                acc += window(i, j) @ w_off[i, j]
    else:
        cols = np.stack([window(i, j) for i in range(kh) for j in range(kw)], axis=1).reshape(m, -1)
        acc = cols @ w_off.reshape(-1, f)
    out = acc.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m, f)
        gw = None
        if w.requires_grad:
            if per_offset:
                gw = np.empty((kh, kw, c, f), dtype=w.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gw[i, j] = window(i, j).T @ gm
            else:
                gw = (cols.T @ gm).reshape(kh, kw, c, f)
            gw = np.ascontiguousarray(gw.transpose(3, 2, 0, 1))
        gx = None
        if x.requires_grad:
            # col2im one kernel offset at a time, accumulating in NHWC layout
            gx = np.zeros((n, hp, wp, c), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                        (gm @ w_off[i, j].T).reshape(n, ho, wo, c))
            gx = gx.transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gx)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), bw, "conv2d")


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), -_unbroadcast(g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (_unbroadcast(g * b.data, a) if a.requires_grad else None,
                _unbroadcast(g * a.data, b) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(x: Tensor, k: float) -> Tensor:
    x = _as_tensor(x)
    k = float(k)
    return _make(x.data * x.dtype.type(k), (x,), lambda g: (g * k,), "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split on sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note_branch(x.data > lo)
    _note_branch(x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if (x.data < 0).any():
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(x.data)
    _note_branch(out > 0)
    safe = np.where(out > 0, out, 1)
    return _make(out, (x,), lambda g: (np.where(out > 0, g / (2 * safe), 0),), "sqrt")


# ----------------------------------------------------------------- normalisers
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _make(out, (x,),
                 lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Softmax cross-entropy for logits [N,K] and integer labels [N]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or (labels < 0).any() or (labels >= k).any():
        raise ValueError("cross_entropy: bad labels")
    rows = np.arange(n)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    denom = n if reduction == "mean" else 1
    out = np.asarray(-logp[rows, labels].sum() / denom, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / denom),)

    return _make(out, (logits,), bw, "cross_entropy")


# ------------------------------------------------------------------- reductions
def reduce(op: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def expand(g):
        return g if keepdims or axis is None else np.expand_dims(g, axis)

    if op == "sum":
        out = x.data.sum(axis=axis, keepdims=keepdims)
        bw = lambda g: (np.broadcast_to(expand(g), x.shape),)  # noqa: E731
    elif op == "mean":
        out = x.data.mean(axis=axis, keepdims=keepdims)
        count = x.data.size // max(np.size(out), 1)
        bw = lambda g: (np.broadcast_to(expand(g) / count, x.shape),)  # noqa: E731
    elif op == "max":
        out = x.data.max(axis=axis, keepdims=keepdims)
        _note_branch(x.data == (expand(out) if axis is not None else out))

        def bw(g):
            # ties share the gradient equally
            hit = x.data == expand(out) if axis is not None else x.data == out
            hit = hit / hit.sum(axis=axis, keepdims=True)
            return (hit * expand(g),)

    elif op == "l2_norm":
        out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=keepdims))
        _note_branch(out > 0)

        def bw(g):
            o, g2 = expand(out), expand(g)
            safe = np.where(o > 0, o, 1)
            # subgradient 0 at the origin
            return (np.where(o > 0, g2 * x.data / safe, 0),)

    else:
        raise ValueError(f"unknown reduction {op!r}")
    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, op)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return reduce("sum", x, axis, keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", x, axis, keepdims)


def l2_norm(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("l2_norm", x, axis, keepdims)


# -------------------------------------------------------------------- structure
def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def crop(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window of the last two axes."""
    x = _as_tensor(x)
    if height > x.shape[-2] or width > x.shape[-1]:
        raise ValueError("crop window larger than input")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., :height, :width] = g
        return (gx,)

    return _make(np.ascontiguousarray(x.data[..., :height, :width]), (x,), bw, "crop")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); backward sums over expanded axes."""
    x = _as_tensor(x)
    shape = tuple(shape)
    lead = len(shape) - x.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bw, "broadcast_to")


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-d bias along ``axis`` (channel axis for conv outputs)."""
    x, b = _as_tensor(x), _as_tensor(b)
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ValueError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _make(x.data + b.data.reshape(view), (x, b),
                 lambda g: (g, g.sum(axis=others) if b.requires_grad else None), "add_bias")


def mask_select(poses: Tensor, class_ids) -> Tensor:
    """Zero every pose row except ``poses[n, class_ids[n]]``. poses: [N,K,D]."""
    poses = _as_tensor(poses)
    ids = np.asarray(class_ids, dtype=np.int64)
    n, k = poses.shape[:2]
    if ids.shape != (n,) or (ids < 0).any() or (ids >= k).any():
        raise ValueError("mask_select: class id out of range")
    rows = np.arange(n)
    out = np.zeros_like(poses.data)
    out[rows, ids] = poses.data[rows, ids]

    def bw(g):
        gx = np.zeros_like(poses.data)
        gx[rows, ids] = g[rows, ids]
        return (gx,)

    return _make(out, (poses,), bw, "mask_select")


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = |s|^2/(1+|s|^2) * s/|s| along ``axis``; squash(0) = 0."""
    s = _as_tensor(s)
    n2 = (s.data * s.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    factor = n / (1 + n2)  # |s|^2/(1+|s|^2)/|s|, which is 0 at the origin
    out = s.data * factor

    def bw(g):
        # d factor/d|s| = (1-|s|^2)/(1+|s|^2)^2, chained through d|s|/ds = s/|s|
        dfac = (1 - n2) / (1 + n2) ** 2
        safe = np.where(n > 0, n, 1)
        proj = (g * s.data).sum(axis=axis, keepdims=True)
        return (g * factor + np.where(n > 0, proj * dfac / safe, 0) * s.data,)

    return _make(out, (s,), bw, "squash")


def sign(x) -> Tensor:
    """Elementwise sign with sign(0) = 0. Never recorded for differentiation."""
    x = _as_tensor(x)
    return Tensor(np.sign(x.data), dtype=x.dtype)


# --------------------------------------------------------------------- backward
def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError("backward: loss must be a scalar")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not attached to any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if pg.shape != p.shape:
                raise ValueError(f"{node._op}: gradient shape {pg.shape} does not match {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------- optimiser
def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction. ``state`` holds t, m, v."""
    if len(params) != len(grads):
        raise ValueError("adam_step: params/grads length mismatch")
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)


# ------------------------------------------------------------------- grad check
def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], probes: int = 20,
              h: float = 1e-5, rng: np.random.Generator | None = None,
              wrt: Sequence[int] | None = None, stats: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. Runs in float64. ``probes`` random
    coordinates are checked per differentiated input. A coordinate whose +-h
    move flips a relu/clamp/max branch anywhere in ``fn`` sits on a kink, where
    the central difference is not a derivative; it is replaced by a fresh draw.
    ``stats`` (if given) receives the checked and redrawn counts.
    """
    rng = rng or np.random.default_rng(0)
    wrt = range(len(inputs)) if wrt is None else wrt
    base = [np.array(a, dtype=np.float64) for a in inputs]
    checked = redrawn = 0

    def evaluate(arrays):
        with no_grad(), record_branches() as branches:
            value = fn(*[Tensor(a) for a in arrays]).item()
        return value, branches

    with precision(np.float64):
        ts = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(base)]
        backward(fn(*ts))
        _, branches0 = evaluate(base)
        worst = 0.0
        for i in wrt:
            analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(base[i])
            order = rng.permutation(base[i].size)
            done = 0
            for idx in order:
                if done == probes:
                    break
                pos = np.unravel_index(idx, base[i].shape)
                vals = []
                smooth = True
                for d in (h, -h):
                    moved = [a.copy() for a in base]
                    moved[i][pos] += d
                    v, br = evaluate(moved)
                    smooth &= br == branches0
                    vals.append(v)
                if not smooth:
                    redrawn += 1
                    continue
                numeric = (vals[0] - vals[1]) / (2 * h)
                a = float(analytic[pos])
                denom = max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
                done += 1
            checked += done
    if stats is not None:
        stats.update(checked=checked, redrawn=redrawn)
    return worst
