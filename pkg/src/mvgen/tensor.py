"""Dense tensor arithmetic with reverse-mode differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
checking) and are immutable after construction.  Operations record a
computation graph when gradients are enabled; ``backward`` walks the graph
in reverse topological order and returns a :class:`GradTape` mapping each
parameter to its accumulated gradient.

Non-finite results are an error, never silent: every op validates its
output unless finite checks are disabled globally (they are on by default).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_GRAD_ENABLED = True
_FINITE_CHECKS = True

FLOAT_DTYPES = (np.float32, np.float64)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Override the per-op NaN/Inf validation; used by perf-critical loops."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite values in result")


class Tensor:
    """Immutable dense array node of the computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.dtype != like.dtype:
            raise ValueError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class GradTape:
    """Gradients accumulated by a backward pass, keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors  # keeps ids alive

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zero if no path to the loss reached it."""
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads


def backward(loss: Tensor) -> GradTape:
    """Reverse-mode differentiation from a scalar loss."""
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a detached graph: loss does not require grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
                tensors[pid] = parent
    return GradTape(grads, tensors)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _result(out, (a, b), vjp, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _result(out, (a, b), vjp, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))

    return _result(out, (a, b), vjp, "mul")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _result(out, (x,), vjp, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return _result(out, (x,), vjp, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of empty sequence")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), vjp, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    if a.dtype != b.dtype:
        raise ValueError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return (ga, gb)

    return _result(out, (a, b), vjp, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).astype(x.dtype, copy=False),)

    return _result(np.asarray(out), (x,), vjp, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[i] for i in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        return ((np.broadcast_to(g2, shape) / count).astype(x.dtype, copy=False),)

    return _result(np.asarray(out), (x,), vjp, "mean")


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = x.data * s

    def vjp(g):
        return ((g * s * (1.0 + x.data * (1.0 - s))).astype(x.dtype, copy=False),)

    return _result(out, (x,), vjp, "silu")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((out * (g - dot)).astype(x.dtype, copy=False),)

    return _result(out, (x,), vjp, "softmax_rows")


# ---------------------------------------------------------------------------
# structured ops


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Gather conv patches: (B, C, H, W) -> (B*OH*OW, C*KH*KW)."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = _pad_hw(x, pad)
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    # (B, OH, OW, C, KH, KW) row-major over output positions
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw), oh, ow


def _col2im(gcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    """Scatter-add conv patch gradients back to the input layout."""
    b, c, h, w = xshape
    g6 = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, :, i, j]
    if pad:
        gx = gx[:, :, pad : pad + h, pad : pad + w]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OIHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x (B,C,H,W) and w (OC,C,KH,KW)")
    bsz, c, h, wd = x.shape
    oc, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError("conv2d kernel larger than padded input")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = w.data.reshape(oc, c * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        if b.shape != (oc,):
            raise ValueError(f"conv2d bias shape {b.shape} != ({oc},)")
        out = out + b.data
    out = out.reshape(bsz, oh, ow, oc).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, oc)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = gmat @ wmat
            gx = _col2im(gcols, x.shape, kh, kw, stride, pad, oh, ow)
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, vjp, "conv2d")


def group_norm(
    x: Tensor,
    groups: int,
    scale: Tensor | None = None,
    shift: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Group normalization over (B, C, H, W) with optional per-channel affine."""
    if x.data.ndim != 4:
        raise ValueError("group_norm expects (B, C, H, W)")
    bsz, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    out = xhat
    if scale is not None:
        if scale.shape != (c,):
            raise ValueError(f"group_norm scale shape {scale.shape} != ({c},)")
        out = out * scale.data[None, :, None, None]
    if shift is not None:
        if shift.shape != (c,):
            raise ValueError(f"group_norm shift shape {shift.shape} != ({c},)")
        out = out + shift.data[None, :, None, None]

    parents = [x]
    if scale is not None:
        parents.append(scale)
    if shift is not None:
        parents.append(shift)

    n = c // groups * h * w

    def vjp(g):
        gy = g * scale.data[None, :, None, None] if scale is not None else g
        gyg = gy.reshape(bsz, groups, -1)
        xhg = xhat.reshape(bsz, groups, -1)
        m1 = gyg.mean(axis=2, keepdims=True)
        m2 = (gyg * xhg).mean(axis=2, keepdims=True)
        gx = (inv * (gyg - m1 - xhg * m2)).reshape(x.shape).astype(x.dtype, copy=False)
        outs = [gx]
        if scale is not None:
            outs.append((g * xhat).sum(axis=(0, 2, 3)))
        if shift is not None:
            outs.append(g.sum(axis=(0, 2, 3)))
        return tuple(outs)

    del n
    return _result(out, tuple(parents), vjp, "group_norm")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor spatial upsampling by an integer factor."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    bsz, c, h, w = x.shape

    def vjp(g):
        g6 = g.reshape(bsz, c, h, factor, w, factor)
        return (g6.sum(axis=(3, 5)),)

    return _result(out, (x,), vjp, "nearest_upsample")


def avgpool_downsample(x: Tensor, factor: int) -> Tensor:
    """Average pooling with equal kernel and stride."""
    bsz, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"avgpool factor {factor} must divide spatial dims {(h, w)}")
    g6 = x.data.reshape(bsz, c, h // factor, factor, w // factor, factor)
    out = g6.mean(axis=(3, 5))
    area = factor * factor

    def vjp(g):
        up = g.repeat(factor, axis=2).repeat(factor, axis=3)
        return ((up / area).astype(x.dtype, copy=False),)

    return _result(out, (x,), vjp, "avgpool_downsample")


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather from a 2-D table; gradients scatter-add into rows."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("embedding indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"embedding index out of range [0, {table.shape[0]})")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(out, (table,), vjp, "embedding")


def take_rows(values: Tensor, row_indices: np.ndarray) -> Tensor:
    """Gather rows of the second-to-last axis by per-row index (argmax attention)."""
    return embedding(values, row_indices)


__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "no_grad",
    "finite_checks",
    "add",
    "sub",
    "mul",
    "reshape",
    "transpose",
    "concat",
    "matmul",
    "tsum",
    "tmean",
    "silu",
    "softmax_rows",
    "conv2d",
    "group_norm",
    "nearest_upsample",
    "avgpool_downsample",
    "embedding",
    "take_rows",
]
