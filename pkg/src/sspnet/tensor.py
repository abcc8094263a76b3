"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to the parent adjoints.
Node ids come from a global counter, so sorting reachable nodes by id gives
a valid topological order: a node is always created after its inputs. That
ordered record is the tape.

Only one implicit broadcast exists: a single-channel NCHW map multiplied
with a multi-channel map of the same spatial size (attention gating).
"""

from __future__ import annotations

import itertools
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GeometryError

_ids = itertools.count()

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._id = next(_ids)
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: Backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_ids)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# -- tape traversal --------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _adjoints(root: Tensor) -> dict[int, np.ndarray]:
    adj: dict[int, np.ndarray] = {root._id: np.ones_like(root.data)}
    for node in _topo(root):
        g = adj.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in adj:
                adj[parent._id] = adj[parent._id] + pg
            else:
                adj[parent._id] = pg
    return adj


def _check_scalar(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"gradient root must be a scalar, got shape {loss.shape}")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    _check_scalar(loss)
    adj = _adjoints(loss)
    for node in _topo(loss):
        if node.requires_grad and node._backward is None and node._id in adj:
            g = adj[node._id]
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar w.r.t. arbitrary (leaf or interior) tensors.

    Nothing is mutated; tensors the loss does not depend on get zeros.
    """
    _check_scalar(loss)
    adj = _adjoints(loss)
    return [adj[t._id].copy() if t._id in adj else np.zeros_like(t.data) for t in wrt]


# -- elementwise -------------------------------------------------------------

def _channel_broadcast(a: np.ndarray, b: np.ndarray) -> bool:
    """True when one operand is a 1-channel NCHW map matching the other spatially."""
    if a.ndim != 4 or b.ndim != 4:
        return False
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        return False
    return (a.shape[1] == 1) != (b.shape[1] == 1)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return Tensor._from_op(a.data + float(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        return add(mul(b, -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def scalar_affine(x, scale: float = 1.0, offset: float = 1.0) -> Tensor:
    """``offset + scale * x``; the ``1 + A`` term of residual gating."""
    x = as_tensor(x)
    return Tensor._from_op(offset + scale * x.data, (x,), lambda g: (scale * g,))


def mul(a, b) -> Tensor:
    """Elementwise product; also broadcasts a 1-channel map over channels."""
    if _is_scalar(b):
        a, s = as_tensor(a), float(b)
        return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not _channel_broadcast(a.data, b.data):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    b = as_tensor(b)
    if _is_scalar(a):
        a = Tensor(np.full(b.shape, float(a)))
    a = as_tensor(a)
    if a.shape != b.shape:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._from_op(out, (a, b), lambda g: (g / bd, -g * out / bd))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._from_op(xd * xd, (x,), lambda g: (2.0 * xd * g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,))


def tabs(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return Tensor._from_op(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` without overflow."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return Tensor._from_op(out, (x,), lambda g: (g * _sigmoid(xd),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


# -- reductions and shape ops ------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return Tensor._from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.data.sum(axis=axis, keepdims=True)
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x, idx) -> Tensor:
    """Basic or advanced numpy indexing; the backward scatter-adds."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(np.array(x.data[idx], dtype=np.float64), (x,), bw)


def concat(xs: Iterable[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat of an empty list")
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise DimensionError(f"concat: {tuple(ref)} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- spatial ops -------------------------------------------------------------

def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest upsampling of an NCHW tensor: ``out[..., i, j] = x[..., i // f, j // f]``."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest expects NCHW, got {x.shape}")
    f = int(factor)
    if f == 1:
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),))


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, s = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r:r + span_h:stride, s:s + span_w:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xp_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(xp_shape)
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            r, s = i * dilation, j * dilation
            out[:, :, r:r + span_h:stride, s:s + span_w:stride] += cols[:, :, i, j]
    return out


def conv2d(x, w, b=None, stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW input and OIHW weights."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"bad conv geometry stride={stride} dilation={dilation} padding={padding}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(wd, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv2d: {h}x{wd} input leaves no output positions")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    w2 = w.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {b.shape}, expected {(o,)}")
        out = out + b.data.reshape(1, o, 1, 1)
        parents = (x, w, b)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            gxp = _col2im(gcols, xp_shape, kh, kw, stride, dilation, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, bw)


# -- gradient checking -------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      coords: Sequence[int] | None = None, kink_tol: float | None = 1e-2,
                      stats: dict | None = None) -> float:
    """Largest relative gap between autodiff and central differences.

    ``coords`` restricts the comparison to some flat indices of ``x``; by
    default every coordinate is probed. A coordinate whose forward and
    backward one-sided differences disagree by more than ``kink_tol``
    (relative) has a non-differentiable point (a relu kink) inside the
    probe window and is skipped; ``stats["skipped"]`` counts those.
    ``kink_tol=None`` disables the test.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data, requires_grad=True)
    (analytic,) = grad(f(probe), [probe])
    analytic = analytic.reshape(-1)
    base = x.data.reshape(-1).copy()
    f0 = f(Tensor(x.data)).item() if kink_tol is not None else 0.0
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    skipped = 0
    for i in idx:
        hi = base.copy()
        lo = base.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = f(Tensor(hi.reshape(x.shape))).item()
        f_lo = f(Tensor(lo.reshape(x.shape))).item()
        if kink_tol is not None:
            fwd, bwd = (f_hi - f0) / eps, (f0 - f_lo) / eps
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-2):
                skipped += 1
                continue
        fd = (f_hi - f_lo) / (2 * eps)
        err = abs(analytic[i] - fd) / max(1e-12, abs(fd))
        worst = max(worst, err)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
        stats["probed"] = stats.get("probed", 0) + len(idx)
    return worst


# -- serialization -----------------------------------------------------------

MAGIC = b"SSPT"


def save_tensor(t, path) -> None:
    """Write ``SSPT`` | u32 rank | u32 dims... | f64 payload, little endian."""
    arr = np.ascontiguousarray(as_tensor(t).data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an SSPT tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload size does not match shape {dims}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    return Tensor(data.reshape(dims))
