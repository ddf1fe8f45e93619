"""Dense tensors with reverse-mode gradients for the network's operator set.

The carrier type for images, feature maps and weights is a rank-4 array laid
out (n, c, h, w), float32 on the production path.  The same Tensor class also
holds the scalars and matrices produced by the loss arithmetic, so a single
backward() call covers the whole training graph.  float64 tensors are
supported for the numerical-check tests; operations preserve their input
dtype.

Operations are pure: they never mutate their inputs, and a fixed input always
produces a bit-identical output, which is what the determinism guarantees of
the trainer and CLI rest on.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# working-set target per conv row tile in the no-graph inference path
_TILE_BYTES = 1_500_000

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional node in the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- leaf manipulation ---------------------------------------------------

    def detach(self) -> "Tensor":
        """A constant view of this tensor, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        """A leaf copy in another float dtype (used by the 64-bit check mode)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise TypeError("Tensor division is only supported by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar loss into .grad fields."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # own the buffer: later contributions accumulate in place
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad += g


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise / reduction / linear-algebra arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = a, _coerce(b, a)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    a, b = a, _coerce(b, a)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a, b = a, _coerce(b, a)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward)


def square(x: Tensor) -> Tensor:
    data = x.data * x.data

    def backward(g):
        return (2.0 * g * x.data,)

    return _node(data, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape).astype(x.dtype, copy=True),)

    return _node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([x.data.shape[a] for a in axis]))
    else:
        count = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), backward)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")

    def backward(g):
        return (g.T,)

    return _node(x.data.T, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _node(data, (x,), backward)


def slice_hw(x: Tensor, hs: slice, ws: slice) -> Tensor:
    """Slice the two spatial axes of an (n, c, h, w) tensor."""
    if x.ndim != 4:
        raise ShapeError("slice_hw expects an (n, c, h, w) tensor")
    data = x.data[:, :, hs, ws]

    def backward(g):
        buf = np.zeros_like(x.data)
        buf[:, :, hs, ws] = g
        return (buf,)

    return _node(data, (x,), backward)


# ---------------------------------------------------------------------------
# Network operators
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    """One convolution layer: weights (out, in, k, k), bias (out,), stride.

    Padding is always (k-1)/2 reflection padding on both sides, mirroring
    without repeating the border row/column.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (out, in, k, k), got {self.weight.shape}")
        if self.kernel % 2 == 0:
            raise ShapeError(f"conv kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ShapeError(f"conv stride must be 1 or 2, got {self.stride}")
        if self.bias.shape != (self.out_channels,):
            raise ShapeError("conv bias length must equal out_channels")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


def _reflect_pad(x: np.ndarray, p: int) -> np.ndarray:
    # hand-rolled np.pad(..., mode="reflect"); mirrors without repeating the border
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    out[:, :, :p, p:p + w] = x[:, :, p:0:-1, :]
    bottom_stop = h - 2 - p
    out[:, :, p + h:, p:p + w] = x[:, :, h - 2:bottom_stop if bottom_stop >= 0 else None:-1, :]
    # columns mirror on the filled rows so the corners reflect both axes
    out[:, :, :, :p] = out[:, :, :, 2 * p:p:-1]
    out[:, :, :, p + w:] = out[:, :, :, p + w - 2:w - 2:-1]
    return out


def _fold_reflect(a: np.ndarray, p: int, axis: int) -> np.ndarray:
    """Accumulate gradients from a reflection-padded axis back onto the core."""
    if p == 0:
        return a
    m = np.moveaxis(a, axis, -1)
    length = m.shape[-1] - 2 * p
    core = m[..., p:p + length].copy()
    core[..., 1:p + 1] += m[..., :p][..., ::-1]
    core[..., length - 1 - p:length - 1] += m[..., p + length:][..., ::-1]
    return np.moveaxis(core, -1, axis)


def _im2col(xp: np.ndarray, k: int, stride: int):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * k * k)
    return cols, oh, ow


def _conv_infer_shift1(xp: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Stride-1 shift-and-accumulate convolution.

    Each kernel offset is one GEMM against a contiguous column window of the
    flattened padded plane (the row/column shift becomes a start offset), so
    both the GEMM input view and the accumulation are contiguous; no im2col
    matrix is materialized.  The wrap-around columns at the right edge are
    computed and discarded when the full-width tile is cropped to ow.
    """
    n, c, hp, wp = xp.shape
    oc, _, k, _ = weight.shape
    oh = hp - k + 1
    ow = wp - k + 1
    out = np.empty((n, oc, oh, ow), dtype=xp.dtype)
    wk = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))  # (k, k, oc, c)
    denom = (c + 2 * oc) * wp * xp.itemsize
    tile = max(4, min(max(oh - 1, 1), _TILE_BYTES // max(1, denom)))
    tmp = np.empty((oc, tile * wp), dtype=xp.dtype)
    acc = np.empty((oc, tile * wp), dtype=xp.dtype)
    row_tmp = np.empty((oc, ow), dtype=xp.dtype)
    row_acc = np.empty((oc, ow), dtype=xp.dtype)
    for b in range(n):
        plane = xp[b].reshape(c, hp * wp)
        # full-width windows overrun the final padded row, so rows [0, oh-1)
        # take the fast path and the last output row runs with exact windows
        for r0 in range(0, oh - 1, tile):
            rt = min(oh - 1, r0 + tile) - r0
            m = rt * wp
            tview, aview = tmp[:, :m], acc[:, :m]
            first = True
            for ki in range(k):
                for kj in range(k):
                    start = (r0 + ki) * wp + kj
                    window = plane[:, start:start + m]
                    if first:
                        np.matmul(wk[ki, kj], window, out=aview)
                        first = False
                    else:
                        np.matmul(wk[ki, kj], window, out=tview)
                        aview += tview
            np.add(aview.reshape(oc, rt, wp)[:, :, :ow], bias[:, None, None],
                   out=out[b, :, r0:r0 + rt, :])
        first = True
        for ki in range(k):
            for kj in range(k):
                start = (oh - 1 + ki) * wp + kj
                window = plane[:, start:start + ow]
                if first:
                    np.matmul(wk[ki, kj], window, out=row_acc)
                    first = False
                else:
                    np.matmul(wk[ki, kj], window, out=row_tmp)
                    row_acc += row_tmp
        np.add(row_acc, bias[:, None], out=out[b, :, oh - 1, :])
    return out


def _conv_infer_shift2(xp: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    """Strided shift-and-accumulate convolution (used by the stride-2 layers)."""
    n, c, hp, wp = xp.shape
    oc, _, k, _ = weight.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.empty((n, oc, oh, ow), dtype=xp.dtype)
    wk = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
    denom = (c + 2 * oc) * wp * xp.itemsize
    tile = max(4, min(oh, _TILE_BYTES // max(1, denom)))
    tmp = np.empty((oc, tile * wp), dtype=xp.dtype)
    for b in range(n):
        acc = out[b]
        acc[:] = bias[:, None, None]
        for r0 in range(0, oh, tile):
            r1 = min(oh, r0 + tile)
            rt = r1 - r0
            tview = tmp[:, :rt * wp]
            acct = acc[:, r0:r1]
            for ki in range(k):
                rows = np.ascontiguousarray(
                    xp[b, :, r0 * stride + ki:(r1 - 1) * stride + ki + 1:stride, :])
                v = rows.reshape(c, rt * wp)
                for kj in range(k):
                    np.matmul(wk[ki, kj], v, out=tview)
                    acct += tview.reshape(oc, rt, wp)[:, :, kj:kj + stride * (ow - 1) + 1:stride]
    return out


def _conv_infer_im2row(xp: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    """Row-major im2col convolution for small c*k*k: one big-K GEMM per row
    tile; patch rows are built with contiguous-destination slice copies."""
    n, c, hp, wp = xp.shape
    oc, _, k, _ = weight.shape
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    out = np.empty((n, oc, oh, ow), dtype=xp.dtype)
    wmat = weight.reshape(oc, c * k * k)
    tile = max(4, min(oh, (16 * _TILE_BYTES) // max(1, c * k * k * ow * xp.itemsize)))
    cols = np.empty((c * k * k, tile * ow), dtype=xp.dtype)
    for b in range(n):
        for r0 in range(0, oh, tile):
            r1 = min(oh, r0 + tile)
            rt = r1 - r0
            cview = cols[:, :rt * ow]
            row = 0
            for ci in range(c):
                for ki in range(k):
                    for kj in range(k):
                        patch = xp[b, ci,
                                   r0 * stride + ki:(r1 - 1) * stride + ki + 1:stride,
                                   kj:kj + stride * (ow - 1) + 1:stride]
                        cview[row].reshape(rt, ow)[:] = patch
                        row += 1
            dest = out[b, :, r0:r1, :].reshape(oc, rt * ow)
            np.matmul(wmat, cview, out=dest)
            dest += bias[:, None]
    return out


def _conv_forward_infer(xp: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    c, k = weight.shape[1], weight.shape[2]
    if c * k * k <= 384:
        return _conv_infer_im2row(xp, weight, bias, stride)
    if stride == 1:
        return _conv_infer_shift1(xp, weight, bias)
    return _conv_infer_shift2(xp, weight, bias, stride)


def conv2d(x: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation over the reflection-padded input, plus bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {c}")
    k, stride = spec.kernel, spec.stride
    p = (k - 1) // 2
    if h < p + 1 or w < p + 1:
        raise ShapeError(f"spatial dims {h}x{w} too small for reflection pad {p}")
    if x.dtype != spec.weight.dtype:
        raise ShapeError("conv2d input dtype must match the weight dtype")

    xp = _reflect_pad(x.data, p)
    if not (_grad_enabled and (x.requires_grad or spec.weight.requires_grad or spec.bias.requires_grad)):
        return Tensor(_conv_forward_infer(xp, spec.weight.data, spec.bias.data, stride))

    cols, oh, ow = _im2col(xp, k, stride)
    wmat = spec.weight.data.reshape(spec.out_channels, -1)
    y = cols @ wmat.T
    y += spec.bias.data
    data = y.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, spec.out_channels)
        grad_w = (gmat.T @ cols).reshape(spec.weight.shape)
        grad_b = gmat.sum(axis=0)
        gcols = gmat @ wmat
        gwin = gcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gpad = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gpad[:, :, i:i + stride * (oh - 1) + 1:stride,
                     j:j + stride * (ow - 1) + 1:stride] += gwin[:, :, :, :, i, j]
        gx = _fold_reflect(_fold_reflect(gpad, p, 2), p, 3)
        return np.ascontiguousarray(gx), grad_w, grad_b

    return _node(data, (x, spec.weight, spec.bias), backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over h*w (population variance)."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects (n, c, h, w), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")

    xd = x.data
    if not (_grad_enabled and (x.requires_grad or gamma.requires_grad or beta.requires_grad)):
        # allocation-lean path: y = x*scale + shift with per-channel affine
        m = xd.shape[2] * xd.shape[3]
        s1 = np.einsum("nchw->nc", xd)
        s2 = np.einsum("nchw,nchw->nc", xd, xd)
        mean = s1 / m
        var = np.maximum(s2 / m - mean * mean, 0.0)
        scale = gamma.data / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
        shift = beta.data - scale * mean
        y = xd * scale[:, :, None, None]
        y += shift[:, :, None, None]
        return Tensor(y)

    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xc * inv
    g4 = gamma.data.reshape(1, c, 1, 1)
    data = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
        grad_beta = g.sum(axis=(0, 2, 3))
        dxhat = g * g4
        gx = inv * (dxhat
                    - dxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True))
        return gx, grad_gamma, grad_beta

    return _node(data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return _node(data, (x,), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor spatial upsampling: out(i, j) = in(i // f, j // f)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects (n, c, h, w), got {x.shape}")
    if factor < 1:
        raise ShapeError("upsample factor must be >= 1")
    n, c, h, w = x.shape
    data = np.empty((n, c, h * factor, w * factor), dtype=x.dtype)
    for i in range(factor):
        for j in range(factor):
            data[:, :, i::factor, j::factor] = x.data

    def backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _node(data, (x,), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)
    data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(flat)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return _node(data, (x,), backward)
