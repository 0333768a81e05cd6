"""Define-by-run reverse-mode autodiff over dense float32 arrays.

Every primitive is a :class:`Function` whose ``backward`` is written in terms
of other primitives, so gradients can themselves be differentiated
(``create_graph=True``).  That second-order path is what the R1 penalty
needs.  Primitives whose adjoint is a raw kernel (bilinear warping) set
``twice_differentiable = False`` and refuse to be double-differentiated.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """An operation received inputs that violate its shape contract."""


class UnknownPrimitive(KeyError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are cast to (used by grad checks)."""
    prev = _default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_fn", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _fn=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        dt = _default_dtype()
        if arr.dtype != dt:
            arr = arr.astype(dt)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._fn = _fn
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._fn is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One recorded primitive application: inputs, saved context, backward rule."""

    op_id = "?"
    twice_differentiable = True

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays, **attrs):  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: Tensor):  # pragma: no cover - abstract
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **attrs)
        track = _grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, _fn=fn if track else None)


# -- primitives --------------------------------------------------------------

def _sum_to(g: Tensor, shape) -> Tensor:
    if g.shape == tuple(shape):
        return g
    return SumTo.apply(g, shape=tuple(shape))


class SumTo(Function):
    op_id = "sum_to"

    def forward(self, x, shape):
        self.in_shape = x.shape
        self.shape = shape
        nd = x.ndim - len(shape)
        axes = tuple(range(nd)) + tuple(i + nd for i, s in enumerate(shape) if s == 1 and x.shape[i + nd] != 1)
        out = x.sum(axis=axes, dtype=np.float64, keepdims=True)
        return out.reshape(shape).astype(x.dtype)

    def backward(self, g):
        return (BroadcastTo.apply(g, shape=self.in_shape),)


class BroadcastTo(Function):
    op_id = "broadcast_to"

    def forward(self, x, shape):
        self.in_shape = x.shape
        return np.ascontiguousarray(np.broadcast_to(x, shape))

    def backward(self, g):
        return (_sum_to(g, self.in_shape),)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Add(Function):
    op_id = "add"

    def forward(self, a, b):
        _check_broadcast("add", a, b)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _sum_to(g, a.shape), _sum_to(g, b.shape)


class Sub(Function):
    op_id = "sub"

    def forward(self, a, b):
        _check_broadcast("sub", a, b)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _sum_to(g, a.shape), _sum_to(mul(g, -1.0), b.shape)


class Mul(Function):
    op_id = "mul"

    def forward(self, a, b):
        _check_broadcast("mul", a, b)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    op_id = "div"

    def forward(self, a, b):
        _check_broadcast("div", a, b)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _sum_to(mul(mul(g, a), -1.0) / mul(b, b), b.shape)
        return ga, gb


class Square(Function):
    op_id = "square"

    def forward(self, x):
        return x * x

    def backward(self, g):
        return (mul(g, mul(self.inputs[0], 2.0)),)


class Sqrt(Function):
    op_id = "sqrt"

    def forward(self, x):
        if np.any(x < 0):
            raise ValueError("sqrt: negative input")
        return np.sqrt(x)

    def backward(self, g):
        out = sqrt(self.inputs[0])
        return (div(mul(g, 0.5), out),)


class Tanh(Function):
    op_id = "tanh"

    def forward(self, x):
        return np.tanh(x)

    def backward(self, g):
        t = tanh(self.inputs[0])
        return (mul(g, sub(1.0, mul(t, t))),)


class LeakyReLU(Function):
    op_id = "leaky_relu"

    def forward(self, x, slope=0.2):
        self.mask = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.mask

    def backward(self, g):
        return (mul(g, Tensor(self.mask)),)


class Sum(Function):
    op_id = "sum"

    def forward(self, x, axis=None, keepdims=False):
        self.in_shape = x.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if np.isscalar(self.axis) else tuple(self.axis)
            axes = tuple(a % len(self.in_shape) for a in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(self.in_shape))
            g = reshape(g, kshape)
        elif self.axis is None:
            g = reshape(g, (1,) * len(self.in_shape))
        return (BroadcastTo.apply(g, shape=self.in_shape),)


class Reshape(Function):
    op_id = "reshape"

    def forward(self, x, shape):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def backward(self, g):
        return (reshape(g, self.in_shape),)


class Transpose(Function):
    op_id = "transpose"

    def forward(self, x, axes=None):
        self.axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        return np.ascontiguousarray(x.transpose(self.axes))

    def backward(self, g):
        inv = tuple(np.argsort(self.axes))
        return (Transpose.apply(g, axes=inv),)


class MatMul(Function):
    op_id = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb


# -- convolution (valid, square kernel, stride s) ------------------------------

def _im2col(x, k, stride):
    """Columns (B, C*k*k, Ho*Wo) gathered from k*k strided shifts of x."""
    B, C, H, W = x.shape
    Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
    return cols.reshape(B, C * k * k, Ho * Wo), Ho, Wo


def _col2im(cols, x_shape, k, stride, Ho, Wo):
    B, C, H, W = x_shape
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    out = np.zeros(x_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += cols[:, :, i, j]
    return out


def _conv_check(x, w):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if x.shape[2] < w.shape[2] or x.shape[3] < w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")


class Conv2d(Function):
    """Valid cross-correlation. x (B, C, H, W), w (O, C, k, k)."""

    op_id = "conv2d_valid"

    def forward(self, x, w, stride=1):
        _conv_check(x, w)
        self.stride = stride
        O, C, k, _ = w.shape
        cols, Ho, Wo = _im2col(x, k, stride)
        out = np.matmul(w.reshape(O, -1), cols)
        return out.reshape(x.shape[0], O, Ho, Wo)

    def backward(self, g):
        x, w = self.inputs
        gx = ConvDx.apply(g, w, stride=self.stride, x_shape=x.shape) if x.requires_grad else None
        gw = ConvDw.apply(x, g, stride=self.stride, w_shape=w.shape) if w.requires_grad else None
        return gx, gw


class ConvDx(Function):
    """Adjoint of :class:`Conv2d` in its image argument (transposed conv)."""

    op_id = "conv2d_dx"

    def forward(self, g, w, stride, x_shape):
        self.stride, self.x_shape = stride, x_shape
        B, O, Ho, Wo = g.shape
        k = w.shape[2]
        gcols = np.matmul(w.reshape(O, -1).T, g.reshape(B, O, Ho * Wo))
        return _col2im(gcols, x_shape, k, stride, Ho, Wo)

    def backward(self, h):
        g, w = self.inputs
        gg = Conv2d.apply(h, w, stride=self.stride) if g.requires_grad else None
        gw = ConvDw.apply(h, g, stride=self.stride, w_shape=w.shape) if w.requires_grad else None
        return gg, gw


class ConvDw(Function):
    """Adjoint of :class:`Conv2d` in its kernel argument."""

    op_id = "conv2d_dw"

    def forward(self, x, g, stride, w_shape):
        self.stride = stride
        O, C, k, _ = w_shape
        cols, Ho, Wo = _im2col(x, k, stride)
        B = x.shape[0]
        gw = np.matmul(g.reshape(B, O, Ho * Wo), cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape(w_shape)

    def backward(self, h):
        x, g = self.inputs
        gx = ConvDx.apply(g, h, stride=self.stride, x_shape=x.shape) if x.requires_grad else None
        gg = Conv2d.apply(x, h, stride=self.stride) if g.requires_grad else None
        return gx, gg


# -- padding / cropping --------------------------------------------------------

class PadReflect(Function):
    op_id = "pad_reflect"

    def forward(self, x, p=1):
        H, W = x.shape[-2:]
        if p >= H or p >= W:
            raise ShapeError(f"pad_reflect: pad {p} too large for spatial shape {(H, W)}")
        self.p = p
        self.in_shape = x.shape
        return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)], mode="reflect")

    def backward(self, g):
        return (PadReflectAdj.apply(g, p=self.p, out_shape=self.in_shape),)


def _reflect_fold(g, p, axis):
    n = g.shape[axis] - 2 * p
    sl = lambda a, b: tuple(slice(a, b) if i == axis else slice(None) for i in range(g.ndim))
    core = g[sl(p, p + n)].copy()
    core[sl(1, p + 1)] += g[sl(0, p)].take(np.arange(p - 1, -1, -1), axis=axis)
    core[sl(n - 1 - p, n - 1)] += g[sl(p + n, 2 * p + n)].take(np.arange(p - 1, -1, -1), axis=axis)
    return core


class PadReflectAdj(Function):
    op_id = "pad_reflect_adj"

    def forward(self, g, p, out_shape):
        self.p = p
        out = _reflect_fold(_reflect_fold(g, p, g.ndim - 2), p, g.ndim - 1)
        if out.shape != tuple(out_shape):
            raise ShapeError(f"pad_reflect_adj: {g.shape} does not fold to {out_shape}")
        return out

    def backward(self, h):
        return (PadReflect.apply(h, p=self.p),)


class Crop(Function):
    """Spatial crop ``x[..., y0:y1, x0:x1]``."""

    op_id = "crop"

    def forward(self, x, box):
        y0, y1, x0, x1 = box
        H, W = x.shape[-2:]
        if not (0 <= y0 < y1 <= H and 0 <= x0 < x1 <= W):
            raise ShapeError(f"crop: box {box} outside spatial shape {(H, W)}")
        self.box, self.in_shape = box, x.shape
        return np.ascontiguousarray(x[..., y0:y1, x0:x1])

    def backward(self, g):
        return (CropAdj.apply(g, box=self.box, out_shape=self.in_shape),)


class CropAdj(Function):
    op_id = "crop_adj"

    def forward(self, g, box, out_shape):
        self.box = box
        y0, y1, x0, x1 = box
        out = np.zeros(out_shape, dtype=g.dtype)
        out[..., y0:y1, x0:x1] = g
        return out

    def backward(self, h):
        return (Crop.apply(h, box=self.box),)


# -- channel concat / slice ----------------------------------------------------

class Concat(Function):
    op_id = "concat"

    def forward(self, *xs, axis=1):
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
                raise ShapeError(f"concat: shapes {[y.shape for y in xs]} disagree off axis {axis}")
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        outs, start = [], 0
        for n in self.sizes:
            outs.append(SliceAxis.apply(g, axis=self.axis, start=start, stop=start + n))
            start += n
        return tuple(outs)


class SliceAxis(Function):
    op_id = "slice"

    def forward(self, x, axis, start, stop):
        self.axis, self.start, self.stop, self.in_shape = axis, start, stop, x.shape
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, stop)
        return np.ascontiguousarray(x[tuple(sl)])

    def backward(self, g):
        return (SliceAxisAdj.apply(g, axis=self.axis, start=self.start, out_shape=self.in_shape),)


class SliceAxisAdj(Function):
    op_id = "slice_adj"

    def forward(self, g, axis, start, out_shape):
        self.axis, self.start, self.stop = axis, start, start + g.shape[axis]
        out = np.zeros(out_shape, dtype=g.dtype)
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(self.start, self.stop)
        out[tuple(sl)] = g
        return out

    def backward(self, h):
        return (SliceAxis.apply(h, axis=self.axis, start=self.start, stop=self.stop),)


# -- bilinear 2x upsampling (half-pixel centres, edge clamped) ----------------

def _up_axis(x, axis):
    n = x.shape[axis]
    prev = np.take(x, np.clip(np.arange(n) - 1, 0, n - 1), axis=axis)
    nxt = np.take(x, np.clip(np.arange(n) + 1, 0, n - 1), axis=axis)
    even = 0.75 * x + 0.25 * prev
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape).astype(x.dtype)


def _up_axis_adj(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    even = np.take(g2, 0, axis=axis + 1)
    odd = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    # even[i] pulls 0.25 from x[i-1]; odd[i] pulls 0.25 from x[i+1] (edges clamp)
    sl = [slice(None)] * g.ndim
    ev = 0.25 * even
    od = 0.25 * odd
    src = [slice(None)] * g.ndim
    sl[axis] = slice(0, n - 1)
    src[axis] = slice(1, n)
    out[tuple(sl)] += ev[tuple(src)]
    sl[axis] = slice(0, 1)
    src[axis] = slice(0, 1)
    out[tuple(sl)] += ev[tuple(src)]
    sl[axis] = slice(1, n)
    src[axis] = slice(0, n - 1)
    out[tuple(sl)] += od[tuple(src)]
    sl[axis] = slice(n - 1, n)
    src[axis] = slice(n - 1, n)
    out[tuple(sl)] += od[tuple(src)]
    return out.astype(g.dtype)


class Upsample2x(Function):
    op_id = "upsample2x"

    def forward(self, x):
        return _up_axis(_up_axis(x, x.ndim - 2), x.ndim - 1)

    def backward(self, g):
        return (Upsample2xAdj.apply(g),)


class Upsample2xAdj(Function):
    op_id = "upsample2x_adj"

    def forward(self, g):
        if g.shape[-1] % 2 or g.shape[-2] % 2:
            raise ShapeError(f"upsample2x_adj: odd spatial shape {g.shape}")
        return _up_axis_adj(_up_axis_adj(g, g.ndim - 1), g.ndim - 2)

    def backward(self, h):
        return (Upsample2x.apply(h),)


# -- windowed box sums (window clipped to the image) --------------------------

def _box_axis(x, r, axis):
    n = x.shape[axis]
    c = np.cumsum(x, axis=axis, dtype=np.float64)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 0)
    c = np.pad(c, pad)
    hi = np.minimum(np.arange(n) + r + 1, n)
    lo = np.maximum(np.arange(n) - r, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


class BoxSum(Function):
    """Sum over the (2r+1)^2 window centred at each pixel, clipped at the border.

    The operator is symmetric, so it is its own adjoint.
    """

    op_id = "box_sum"

    def forward(self, x, window):
        if window < 1 or window % 2 == 0:
            raise ShapeError(f"box_sum: window must be odd and positive, got {window}")
        self.window = window
        r = window // 2
        out = _box_axis(_box_axis(x, r, x.ndim - 2), r, x.ndim - 1)
        return out.astype(x.dtype)

    def backward(self, g):
        return (BoxSum.apply(g, window=self.window),)


# -- per-image pixel gathers (exact shifts / dihedral maps) --------------------

class Gather(Function):
    """out[b, c].flat[i] = x[b, c].flat[index[b, i]]; index (B, H*W) int."""

    op_id = "gather"

    def forward(self, x, index):
        B, C, H, W = x.shape
        if index.shape != (B, H * W):
            raise ShapeError(f"gather: index {index.shape} does not match image {x.shape}")
        self.index = index
        flat = x.reshape(B, C, H * W)
        out = np.take_along_axis(flat, index[:, None, :].repeat(C, axis=1), axis=2)
        return out.reshape(x.shape)

    def backward(self, g):
        return (Scatter.apply(g, index=self.index),)


class Scatter(Function):
    op_id = "scatter"

    def forward(self, g, index):
        B, C, H, W = g.shape
        self.index = index
        N = H * W
        out = np.empty((B, C, N), dtype=g.dtype)
        gf = g.reshape(B, C, N)
        for b in range(B):
            for c in range(C):
                out[b, c] = np.bincount(index[b], weights=gf[b, c], minlength=N)
        return out.reshape(g.shape)

    def backward(self, h):
        return (Gather.apply(h, index=self.index),)


# -- warping (raw-kernel adjoint; first order only) ---------------------------

class Warp(Function):
    """out(x) = bilinear(image, x + u(x)), u[:, 0] rows and u[:, 1] columns."""

    op_id = "warp"
    twice_differentiable = False

    def forward(self, img, u):
        if img.ndim != 4 or u.ndim != 4 or u.shape[1] != 2 or img.shape[0] != u.shape[0] \
                or img.shape[2:] != u.shape[2:]:
            raise ShapeError(f"warp: image {img.shape} incompatible with displacement {u.shape}")
        H, W = img.shape[2:]
        gy, gx = np.meshgrid(np.arange(H, dtype=u.dtype), np.arange(W, dtype=u.dtype), indexing="ij")
        self.cy = gy + u[:, 0]
        self.cx = gx + u[:, 1]
        return _kernels.bilinear_sample(img, self.cy, self.cx)

    def backward(self, g):
        img, u = self.inputs
        gimg, gy, gx = _kernels.bilinear_sample_backward(g.data, img.data, self.cy, self.cx)
        gu = np.stack([gy, gx], axis=1)
        return Tensor(gimg), Tensor(gu)


# -- public functional API -----------------------------------------------------

def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def square(x):
    return Square.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def tanh(x):
    return Tanh.apply(x)


def leaky_relu(x, slope=0.2):
    return LeakyReLU.apply(x, slope=slope)


def sum_(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=axes)


def matmul(a, b):
    return MatMul.apply(a, b)


def conv2d(x, w, stride=1, pad=True):
    """3x3-style convolution; ``pad`` applies reflection padding of k//2 first."""
    if pad:
        x = pad_reflect(x, w.shape[-1] // 2)
    return Conv2d.apply(x, w, stride=stride)


def pad_reflect(x, p=1):
    return PadReflect.apply(x, p=p)


def crop(x, box):
    return Crop.apply(x, box=tuple(box))


def concat(xs: Sequence, axis=1):
    return Concat.apply(*xs, axis=axis)


def slice_axis(x, axis, start, stop):
    return SliceAxis.apply(x, axis=axis, start=start, stop=stop)


def upsample2x(x):
    return Upsample2x.apply(x)


def box_sum(x, window):
    return BoxSum.apply(x, window=window)


def gather(x, index):
    return Gather.apply(x, index=np.asarray(index, dtype=np.int64))


def warp(img, u):
    return Warp.apply(img, u)


PRIMITIVES = {
    cls.op_id: cls
    for cls in (Add, Sub, Mul, Div, Square, Sqrt, Tanh, LeakyReLU, Sum, SumTo, BroadcastTo,
                Reshape, Transpose, MatMul, Conv2d, ConvDx, ConvDw, PadReflect, PadReflectAdj,
                Crop, CropAdj, Concat, SliceAxis, SliceAxisAdj, Upsample2x, Upsample2xAdj,
                BoxSum, Gather, Scatter, Warp)
}


def apply_primitive(op_id: str, inputs: Sequence, **attrs) -> Tensor:
    try:
        cls = PRIMITIVES[op_id]
    except KeyError:
        raise UnknownPrimitive(f"unknown primitive {op_id!r}") from None
    return cls.apply(*inputs, **attrs)


# -- reverse sweep -------------------------------------------------------------

def _toposort(roots: Iterable[Tensor]):
    order, seen = [], set()
    stack = [(r, False) for r in roots if r._fn is not None]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._fn.inputs:
            if p._fn is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def grad(outputs, inputs, grad_outputs=None, create_graph=False):
    """Gradients of ``outputs`` w.r.t. ``inputs``; unreachable inputs get zeros."""
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    if grad_outputs is None:
        for o in outputs:
            if o.data.size != 1:
                raise ValueError(f"grad: implicit seed requires a scalar output, got shape {o.shape}")
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    grads: dict[int, Tensor] = {}
    for o, g in zip(outputs, grad_outputs):
        g = as_tensor(g)
        grads[id(o)] = grads[id(o)] + g if id(o) in grads else g
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for t in _toposort(outputs):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            fn = t._fn
            if create_graph and not fn.twice_differentiable:
                raise NotImplementedError(f"{fn.op_id} does not support higher-order gradients")
            in_grads = fn.backward(g)
            for p, pg in zip(fn.inputs, in_grads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = add(grads[k], pg) if k in grads else pg
    out = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        out.append(g)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` (numpy) for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    leaves = []
    seen = set()
    for t in _toposort([loss]):
        for p in t._fn.inputs:
            if p._fn is None and p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                leaves.append(p)
    if not leaves:
        return
    gs = grad(loss, leaves)
    for leaf, g in zip(leaves, gs):
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def backprop(loss: Tensor, params: dict) -> dict:
    """Map parameter name -> gradient array; parameters off the loss path get zeros."""
    if loss.data.size != 1:
        raise ValueError(f"backprop: loss must be scalar, got shape {loss.shape}")
    names = list(params)
    gs = grad(loss, [params[n] for n in names])
    return {n: g.data for n, g in zip(names, gs)}
