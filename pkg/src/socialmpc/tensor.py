"""A small reverse-mode automatic differentiation engine over float64 arrays.

Broadcasting is restricted: an operand may only broadcast *into* the other
operand's shape (bias vectors over leading batch axes, ``(…, 1)`` masks); two
tensors that would both need expansion raise :class:`ShapeError`.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # ----------------------------------------------------------------- misc
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # ------------------------------------------------------------ operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # ------------------------------------------------------------ backward
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topo(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # free the graph
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence, backward) -> Tensor:
    tparents = tuple(p for p in parents if isinstance(p, Tensor))
    rg = any(p.requires_grad for p in tparents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(p if isinstance(p, Tensor) else Tensor(p) for p in parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_bcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} would both need broadcasting")
    return out


# ------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    _check_bcast("add", x, y)
    return _make(x + y, (a, b), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    _check_bcast("sub", x, y)
    return _make(x - y, (a, b), lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))


def mul(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    _check_bcast("mul", x, y)
    return _make(x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def div(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    _check_bcast("div", x, y)
    return _make(x / y, (a, b),
                 lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)))


def exp(a) -> Tensor:
    out = np.exp(_arr(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    x = _arr(a)
    return _make(np.log(x), (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    out = np.tanh(_arr(a))
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    x = _arr(a)
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    x = _arr(a)
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def smooth_l1(a, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 x^2 / beta if |x| < beta else |x| - 0.5 beta."""
    x = _arr(a)
    ax = np.abs(x)
    small = ax < beta
    out = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    return _make(out, (a,), lambda g: (g * np.where(small, x / beta, np.sign(x)),))


# ------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    x = _arr(a)
    out = x.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    x = _arr(a)
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    out = x.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(out, (a,), bw)


# ------------------------------------------------------------- shape ops

def matmul(a, b) -> Tensor:
    x, y = _arr(a), _arr(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    lead_x, lead_y = x.shape[:-2], y.shape[:-2]
    if lead_x != lead_y and lead_x != () and lead_y != () and lead_y != lead_x[len(lead_x) - len(lead_y):]:
        raise ShapeError(f"matmul: batch shapes {x.shape} and {y.shape} differ")

    def bw(g):
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return (_unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape))

    return _make(x @ y, (a, b), bw)


def transpose(a, axes=None) -> Tensor:
    x = _arr(a)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(x, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    x = _arr(a)
    return _make(x.reshape(shape), (a,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    arrs = [_arr(t) for t in tensors]
    ax = axis % arrs[0].ndim
    for t in arrs[1:]:
        if t.ndim != arrs[0].ndim or any(t.shape[i] != arrs[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {arrs[0].shape} and {t.shape} mismatch off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in arrs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(arrs)))

    return _make(np.concatenate(arrs, axis=ax), tuple(tensors), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    expanded = [reshape(t, _arr(t).shape[:axis % (_arr(t).ndim + 1)] + (1,) + _arr(t).shape[axis % (_arr(t).ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def slice_(a, idx) -> Tensor:
    x = _arr(a)

    def bw(g):
        out = np.zeros_like(x)
        np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return _make(x[idx], (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# ------------------------------------------------------------- composites

def softmax(a, axis: int = -1) -> Tensor:
    x = _arr(a)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = _arr(a)
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    x = _arr(a)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), bw)


def attention(Q, K, V, mask: np.ndarray | None = None, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention softmax(Q K^T / sqrt(d)) V.

    Shapes (…, T_q, d), (…, T_k, d), (…, T_k, d_v).  With ``n_heads > 1`` the
    feature axes are split into heads and re-joined.  ``mask`` is a boolean array
    broadcastable to (…, T_q, T_k); False entries are excluded.
    """
    q, k, v = _arr(Q), _arr(K), _arr(V)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key length {k.shape} does not match value length {v.shape}")
    d = q.shape[-1]
    if d % n_heads or v.shape[-1] % n_heads:
        raise ShapeError(f"attention: dims {d}, {v.shape[-1]} not divisible by {n_heads} heads")
    if n_heads > 1:
        Qh, Kh, Vh = (_split_heads(t, n_heads) for t in (Q, K, V))
        m = None if mask is None else np.expand_dims(mask, -3)
        out = _sdpa(Qh, Kh, Vh, m, d // n_heads)
        return _merge_heads(out)
    return _sdpa(Q, K, V, mask, d)


def _split_heads(t, h: int) -> Tensor:
    x = _arr(t)
    shp = x.shape[:-1] + (h, x.shape[-1] // h)
    nd = len(shp)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return transpose(reshape(t, shp), axes)


def _merge_heads(t: Tensor) -> Tensor:
    nd = t.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = transpose(t, axes)
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _sdpa(Q, K, V, mask, d) -> Tensor:
    """Fused attention node: stores only the probability tensor for backward."""
    q, k, v = _arr(Q), _arr(K), _arr(V)
    scale = 1.0 / math.sqrt(d)
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        logits = np.where(mask, logits, -1e30)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v, -1, -2)
        gl = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gl @ k
        gk = np.swapaxes(gl, -1, -2) @ q
        return (_unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape))

    return _make(out, (Q, K, V), bw)


# ------------------------------------------------------------- checkpoints

_MAGIC = b"SMPCKPT\0"
_VERSION = 1


def save_parameters(path, named: Iterable[tuple[str, Tensor]]) -> None:
    named = list(named)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named)))
        for name, t in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_parameters(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (ln,) = struct.unpack("<I", fh.read(4))
            name = fh.read(ln).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            out[name] = data
    return out
