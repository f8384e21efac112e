"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op output gets a monotonically increasing ``node_id``; since an op's
output is always created after its inputs, sorting reachable nodes by
descending id is a valid reverse topological order.  ``backward`` relies on
that instead of keeping an explicit tape.

Shapes are explicit: elementwise binary ops require identical shapes (python
scalars excepted).  The only broadcasting is per-channel bias/affine.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, NonFiniteError, ShapeError, UsageError

_ids = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only scan elementwise when it is not
    if np.isfinite(arr.sum()):
        return
    if not np.isfinite(arr).all():
        bad = np.flatnonzero(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{op} produced a non-finite value at flat index {bad}")


class Tensor:
    """A float64 array plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy, order="C")
        _check_finite(arr, "leaf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        data = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.node_id = next(_ids)
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise UsageError("division is only defined by a python scalar")
        return div_scalar(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("root does not depend on any tensor requiring grad")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            n = stack.pop()
            if n.node_id in nodes:
                continue
            nodes[n.node_id] = n
            stack.extend(p for p in n._parents if p.requires_grad)
        grads = {self.node_id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward of {node.op}")
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return add(a, -float(b))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def div_scalar(a: Tensor, c: float) -> Tensor:
    if c == 0.0:
        raise NonFiniteError("division by zero")
    return Tensor._from_op(a.data / c, (a,), lambda g: (g / c,), "div_scalar")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        # d sqrt(v) at v == 0 is taken as 0; only reached when all variances vanish.
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0.0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    out = np.tanh(0.5 * x)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(softplus_np(ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def gaussian_sample(mean: Tensor, var: Tensor, eps: np.ndarray) -> Tensor:
    """``mean + sqrt(var) * eps`` as one node; eps is a constant draw."""
    _same_shape(mean, var, "gaussian_sample")
    if eps.shape != mean.shape:
        raise ShapeError(f"gaussian_sample: noise shape {eps.shape} != {mean.shape}")
    std = np.sqrt(var.data)
    out = std * eps
    out += mean.data

    def backward(g):
        dvar = None
        if var.requires_grad:
            # d sqrt(v) at v == 0 is taken as 0
            with np.errstate(divide="ignore", invalid="ignore"):
                dvar = np.where(std > 0.0, (0.5 * g) * eps / std, 0.0)
        return (g if mean.requires_grad else None, dvar)

    return Tensor._from_op(out, (mean, var), backward, "gaussian_sample")


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "identity": identity,
}


def pointwise(x: Tensor, kind: str) -> Tensor:
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ConfigError(f"unknown pointwise kind {kind!r}") from None


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(np.sum(a.data, axis=axis), (a,), backward, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div_scalar(tsum(a, axis), float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, key) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return Tensor._from_op(a.data[key], (a,), backward, "getitem")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """``np.take`` with gradient; repeated indices accumulate."""
    idx = np.asarray(indices)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        gm = np.moveaxis(g, axis, 0) if idx.ndim else g
        np.add.at(moved, idx, gm)
        return (out,)

    return Tensor._from_op(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def channel_affine(x: Tensor, scale: Tensor | None, shift: Tensor | None, axis: int = 1) -> Tensor:
    """``x * scale[c] + shift[c]`` along ``axis``; the only broadcasting op."""
    c = x.shape[axis]
    view = [1] * x.ndim
    view[axis] = c
    red = tuple(i for i in range(x.ndim) if i != axis)
    for p, name in ((scale, "scale"), (shift, "shift")):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"channel_affine: {name} shape {p.shape} != ({c},)")
    xd = x.data
    out = xd * scale.data.reshape(view) if scale is not None else xd.copy()
    if shift is not None:
        out = out + shift.data.reshape(view)
    parents = [x]
    if scale is not None:
        parents.append(scale)
    if shift is not None:
        parents.append(shift)

    def backward(g):
        if not x.requires_grad:
            grads = [None]
        else:
            grads = [g * scale.data.reshape(view) if scale is not None else g]
        if scale is not None:
            grads.append((g * xd).sum(axis=red) if scale.requires_grad else None)
        if shift is not None:
            grads.append(g.sum(axis=red) if shift.requires_grad else None)
        return tuple(grads)

    return Tensor._from_op(out, parents, backward, "channel_affine")


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    return channel_affine(x, None, bias, axis=axis % x.ndim)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight + bias`` over the last axis of an n-d input."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add_bias(y, bias, axis=1)
    return reshape(y, lead + (weight.shape[1],))


# ---------------------------------------------------------------------------
# convolution kernels (numpy level)
#
# x: (B, C, T[, W]), w: (O, C, K_t[, K_w]).  "same" padding: total d*(k-1),
# leading half floor.  The (short) width axis is folded into the channels
# with a block-banded weight, so every conv becomes a 1-d correlation over
# time.  Samples are laid out as rows of a zero-padded (B * T_pad, C * W)
# buffer, where a time tap is a plain row shift and each tap is one GEMM.


def _same_lo(k: int, d: int) -> int:
    return (d * (k - 1)) // 2


def _width_taps(width: int, kw: int, dil_w: int):
    lo = _same_lo(kw, dil_w)
    for wo in range(width):
        for j in range(kw):
            wi = wo + j * dil_w - lo
            if 0 <= wi < width:
                yield wo, j, wi


def _fold(w: np.ndarray, width: int, dil_w: int) -> np.ndarray:
    """(O, C, K_t[, K_w]) -> (K_t, C * W, O * W)."""
    o, c, kt = w.shape[:3]
    if w.ndim == 3:
        return np.ascontiguousarray(w.transpose(2, 1, 0))
    big = np.zeros((kt, c, width, o, width))
    for wo, j, wi in _width_taps(width, w.shape[3], dil_w):
        big[:, :, wi, :, wo] = w[:, :, :, j].transpose(2, 1, 0)
    return big.reshape(kt, c * width, o * width)


def _unfold(dbig: np.ndarray, wshape, width: int, dil_w: int) -> np.ndarray:
    """Adjoint of ``_fold``."""
    if len(wshape) == 3:
        return np.ascontiguousarray(dbig.transpose(2, 1, 0))
    o, c, kt, kw = wshape
    d = dbig.reshape(kt, c, width, o, width)
    dw = np.zeros(wshape)
    for wo, j, wi in _width_taps(width, kw, dil_w):
        dw[:, :, :, j] += d[:, :, wi, :, wo].transpose(2, 1, 0)
    return dw


def _rows(x: np.ndarray, lo: int, padded: int, extra: int) -> tuple[np.ndarray, int]:
    b, c, t = x.shape[:3]
    width = x.shape[3] if x.ndim == 4 else 1
    n = b * padded
    buf = np.zeros((n + extra, c * width))
    buf[:n].reshape(b, padded, c, width)[:, lo : lo + t] = x.reshape(b, c, t, width).transpose(0, 2, 1, 3)
    return buf, n


def _geometry(x: np.ndarray, kt: int, dil) -> tuple[int, int, int, int]:
    width = x.shape[3] if x.ndim == 4 else 1
    dt = dil[0]
    return width, dt, _same_lo(kt, dt), x.shape[2] + dt * (kt - 1)


def _corr_fwd(x: np.ndarray, w: np.ndarray, dil) -> np.ndarray:
    b, t = x.shape[0], x.shape[2]
    o, kt = w.shape[0], w.shape[2]
    width, dt, lo, padded = _geometry(x, kt, dil)
    wk = _fold(w, width, dil[1] if len(dil) > 1 else 1)
    buf, n = _rows(x, lo, padded, dt * (kt - 1))
    cw, ow = wk.shape[1], wk.shape[2]
    if cw * kt <= 4 * ow:
        # few input channels: one GEMM over stacked shifted copies
        cols = np.empty((n, kt, cw))
        for i in range(kt):
            cols[:, i, :] = buf[i * dt : i * dt + n]
        y = cols.reshape(n, -1) @ wk.reshape(-1, ow)
    else:
        y = buf[:n] @ wk[0]
        for i in range(1, kt):
            y += buf[i * dt : i * dt + n] @ wk[i]
    y = y.reshape(b, padded, o, width)[:, :t].transpose(0, 2, 1, 3)
    return np.ascontiguousarray(y.reshape((b, o) + x.shape[2:]))


def _corr_dx(g: np.ndarray, w: np.ndarray, dil) -> np.ndarray:
    # odd kernels pad symmetrically, so the adjoint is a correlation with
    # the flipped, channel-transposed kernel
    return _corr_fwd(g, np.flip(w, axis=tuple(range(2, w.ndim))).swapaxes(0, 1), dil)


def _corr_dw(x: np.ndarray, g: np.ndarray, dil, ksize) -> np.ndarray:
    kt = ksize[0]
    width, dt, lo, padded = _geometry(x, kt, dil)
    buf, n = _rows(x, lo, padded, dt * (kt - 1))
    gb, _ = _rows(g, 0, padded, 0)
    dbig = np.empty((kt, buf.shape[1], gb.shape[1]))
    for i in range(kt):
        dbig[i] = buf[i * dt : i * dt + n].T @ gb
    return _unfold(dbig, (g.shape[1], x.shape[1]) + tuple(ksize), width, dil[1] if len(dil) > 1 else 1)


def _batched(x: Tensor, spatial_dims: int, op: str) -> tuple[Tensor, bool]:
    if x.ndim == spatial_dims + 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != spatial_dims + 2:
        raise ShapeError(f"{op}: expected {spatial_dims + 1}-d or batched input, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def _check_kernel(w: Tensor, spatial_dims: int, cin: int, op: str, transposed: bool = False) -> None:
    if w.ndim != spatial_dims + 2:
        raise ShapeError(f"{op}: kernel must be {spatial_dims + 2}-d, got {w.shape}")
    expect = w.shape[0] if transposed else w.shape[1]
    if expect != cin:
        raise ShapeError(f"{op}: kernel expects {expect} input channels, input has {cin}")
    if any(k % 2 == 0 for k in w.shape[2:]):
        raise ConfigError(f"{op}: kernel extents must be odd, got {w.shape[2:]}")


def _conv_node(out, xb, kernel, bias, dx_fn, dw_fn, op, squeeze) -> Tensor:
    """Wrap a conv result; the optional per-channel bias is added in place."""
    parents = (xb, kernel)
    red = (0,) + tuple(range(2, out.ndim))
    if bias is not None:
        if bias.shape != (out.shape[1],):
            raise ShapeError(f"{op}: bias shape {bias.shape} != ({out.shape[1]},)")
        out += bias.data.reshape((1, -1) + (1,) * (out.ndim - 2))
        parents = parents + (bias,)

    def backward(g):
        grads = (
            dx_fn(g) if xb.requires_grad else None,
            dw_fn(g) if kernel.requires_grad else None,
        )
        if bias is not None:
            grads = grads + (g.sum(axis=red) if bias.requires_grad else None,)
        return grads

    return _unbatch(Tensor._from_op(out, parents, backward, op), squeeze)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1, stride: int = 1) -> Tensor:
    """Dilated 'same' cross-correlation of (B, C_in, T) with (C_out, C_in, K).

    With ``stride > 1`` the stride-1 result is subsampled, giving ceil(T/stride)
    outputs.
    """
    if dilation < 1 or stride < 1:
        raise ConfigError("dilation and stride must be positive")
    xb, squeeze = _batched(x, 1, "conv1d")
    _check_kernel(kernel, 1, xb.shape[1], "conv1d")
    xd, wd, dil = xb.data, kernel.data, (dilation,)
    full = _corr_fwd(xd, wd, dil)
    out = full if stride == 1 else np.ascontiguousarray(full[:, :, ::stride])

    def upsample(g):
        if stride == 1:
            return g
        gf = np.zeros(full.shape)
        gf[:, :, ::stride] = g
        return gf

    return _conv_node(
        out, xb, kernel, bias,
        lambda g: _corr_dx(upsample(g), wd, dil),
        lambda g: _corr_dw(xd, upsample(g), dil, wd.shape[2:]),
        "conv1d", squeeze,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation=(1, 1)) -> Tensor:
    """Dilated 'same' cross-correlation of (B, C_in, T, W) with (C_out, C_in, K_t, K_w)."""
    dil = tuple(int(d) for d in dilation)
    if len(dil) != 2 or min(dil) < 1:
        raise ConfigError(f"conv2d dilation must be two positive ints, got {dilation}")
    xb, squeeze = _batched(x, 2, "conv2d")
    _check_kernel(kernel, 2, xb.shape[1], "conv2d")
    xd, wd = xb.data, kernel.data
    return _conv_node(
        _corr_fwd(xd, wd, dil), xb, kernel, bias,
        lambda g: _corr_dx(g, wd, dil),
        lambda g: _corr_dw(xd, g, dil, wd.shape[2:]),
        "conv2d", squeeze,
    )


def conv_transpose1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2, dilation: int = 1) -> Tensor:
    """Adjoint of ``conv1d(., kernel, stride)``: (B, C_in, T) -> (B, C_out, stride*T).

    ``kernel`` has shape (C_in, C_out, K), the layout of the forward
    convolution it transposes.
    """
    if stride < 1 or dilation < 1:
        raise ConfigError("stride and dilation must be positive")
    xb, squeeze = _batched(x, 1, "conv_transpose1d")
    _check_kernel(kernel, 1, xb.shape[1], "conv_transpose1d", transposed=True)
    xd, wd, dil = xb.data, kernel.data, (dilation,)
    b, c, t = xd.shape
    up = np.zeros((b, c, stride * t))
    up[:, :, ::stride] = xd
    return _conv_node(
        _corr_dx(up, wd, dil), xb, kernel, bias,
        lambda g: _corr_fwd(g, wd, dil)[:, :, ::stride],
        lambda g: _corr_dw(g, up, dil, wd.shape[2:]),
        "conv_transpose1d", squeeze,
    )


def maxpool2d(x: Tensor, window=(2, 2), stride=None) -> Tensor:
    """Max over windows of (B, C, T, W); ties route the gradient to the first
    element in row-major scan order of the window."""
    p, q = (int(v) for v in window)
    st, sw = (p, q) if stride is None else (int(v) for v in stride)
    xb, squeeze = _batched(x, 2, "maxpool2d")
    xd = xb.data
    t, w = xd.shape[2:]
    if p > t or q > w:
        raise ShapeError(f"maxpool2d window {(p, q)} larger than input {(t, w)}")
    to, wo = (t - p) // st + 1, (w - q) // sw + 1
    slices = [
        (slice(None), slice(None), slice(i, i + st * (to - 1) + 1, st), slice(j, j + sw * (wo - 1) + 1, sw))
        for i in range(p)
        for j in range(q)
    ]
    out = xd[slices[0]].copy()
    arg = np.zeros(out.shape, dtype=np.int8 if len(slices) < 128 else np.int64)
    for k in range(1, len(slices)):
        cand = xd[slices[k]]
        better = cand > out  # strict: earlier index wins ties
        np.copyto(out, cand, where=better)
        arg[better] = k

    def backward(g):
        dx = np.zeros_like(xd)
        for k, s in enumerate(slices):
            dx[s] += np.where(arg == k, g, 0.0)
        return (dx,)

    return _unbatch(Tensor._from_op(out, (xb,), backward, "maxpool2d"), squeeze)


def normalize_groups(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization without the affine part; x is (B, C, ...)."""
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels are not divisible into {groups} groups")
    shape = x.shape
    xr = x.data.reshape(shape[0], groups, -1)
    n = xr.shape[2]
    mu = xr.mean(axis=2, keepdims=True)
    cen = xr - mu
    var = (cen * cen).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = cen * inv

    def backward(g):
        gr = g.reshape(xr.shape)
        s1 = gr.sum(axis=2, keepdims=True)
        s2 = (gr * xhat).sum(axis=2, keepdims=True)
        return ((inv / n) * (n * gr - s1 - xhat * s2)).reshape(shape),

    return Tensor._from_op(xhat.reshape(shape), (x,), backward, "group_norm")


def group_norm(x: Tensor, groups: int, eps: float = 1e-5, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    xb, squeeze = (reshape(x, (1,) + x.shape), True) if x.ndim == 2 else (x, False)
    y = normalize_groups(xb, groups, eps)
    if gain is not None or bias is not None:
        y = channel_affine(y, gain, bias, axis=1)
    return _unbatch(y, squeeze)


# ---------------------------------------------------------------------------
# recurrent


def gru(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor, h0: Tensor | None = None) -> Tensor:
    """Single-direction GRU over (B, T, F) -> (B, T, H).

    Gate blocks along the 3H axis are ordered (reset, update, candidate):
        r = sigmoid(x W_r + b_ir + h U_r + b_hr)
        z = sigmoid(x W_z + b_iz + h U_z + b_hz)
        n = tanh(x W_n + b_in + r * (h U_n + b_hn))
        h' = (1 - z) * n + z * h
    """
    if x.ndim != 3:
        raise ShapeError(f"gru expects (B, T, F), got {x.shape}")
    bsz, steps, feat = x.shape
    hid = w_hh.shape[0]
    if w_ih.shape != (feat, 3 * hid) or w_hh.shape != (hid, 3 * hid):
        raise ShapeError(f"gru weights {w_ih.shape}, {w_hh.shape} do not match F={feat}, H={hid}")
    if b_ih.shape != (3 * hid,) or b_hh.shape != (3 * hid,):
        raise ShapeError("gru biases must have shape (3H,)")
    h_init = np.zeros((bsz, hid)) if h0 is None else h0.data
    if h_init.shape != (bsz, hid):
        raise ShapeError(f"gru h0 shape {h_init.shape} != {(bsz, hid)}")

    xd, wi, wh, bi, bh = x.data, w_ih.data, w_hh.data, b_ih.data, b_hh.data
    # time-major so each step reads a contiguous (B, 3H) block
    gi = np.ascontiguousarray((xd.reshape(-1, feat) @ wi + bi).reshape(bsz, steps, 3 * hid).transpose(1, 0, 2))
    rz_all = np.empty((steps, bsz, 2 * hid))
    n_all = np.empty((steps, bsz, hid))
    ghn_all = np.empty_like(n_all)
    hs = np.empty((steps + 1, bsz, hid))
    hs[0] = h_init
    b_n = bh[2 * hid :]
    wh_c = np.ascontiguousarray(wh)
    for t in range(steps):
        h = hs[t]
        gh = h @ wh_c
        rz = rz_all[t]
        np.add(gi[t, :, : 2 * hid], gh[:, : 2 * hid], out=rz)
        rz += bh[: 2 * hid]
        # sigmoid(v) = (tanh(v/2) + 1) / 2, overflow-free
        rz *= 0.5
        np.tanh(rz, out=rz)
        rz *= 0.5
        rz += 0.5
        ghn = ghn_all[t]
        np.add(gh[:, 2 * hid :], b_n, out=ghn)
        n = n_all[t]
        np.multiply(rz[:, :hid], ghn, out=n)
        n += gi[t, :, 2 * hid :]
        np.tanh(n, out=n)
        h_new = hs[t + 1]
        np.subtract(h, n, out=h_new)
        h_new *= rz[:, hid:]
        h_new += n
    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2))
        dgi = np.empty((steps, bsz, 3 * hid))
        dwh = np.zeros_like(wh)
        dbh = np.zeros_like(bh)
        dh = np.zeros((bsz, hid))
        _kernels.gru_backward(gt, np.ascontiguousarray(wh), rz_all, n_all, ghn_all, hs, dgi, dwh, dbh, dh)
        flat = dgi.transpose(1, 0, 2).reshape(-1, 3 * hid)
        dx = (flat @ wi.T).reshape(xd.shape) if x.requires_grad else None
        dwi = xd.reshape(-1, feat).T @ flat if w_ih.requires_grad else None
        dbi = flat.sum(axis=0) if b_ih.requires_grad else None
        return dx, dwi, dwh, dbi, dbh, dh

    parents = (x, w_ih, w_hh, b_ih, b_hh, h0 if h0 is not None else Tensor(h_init))
    return Tensor._from_op(out, parents, backward, "gru")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns (new_params, new_state)."""
    if not state.m:
        m = [np.zeros_like(p) for p in params]
        v = [np.zeros_like(p) for p in params]
    else:
        m, v = state.m, state.v
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * g * g
        new_p.append(p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, AdamState(step, new_m, new_v)


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ConfigError("optimizer received no parameters")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)
        for p, d in zip(self.params, new):
            _check_finite(d, "adam_step")
            p.data = d
