"""Reverse-mode differentiable tensors and the layer primitives.

A Tensor wraps a dense numpy array plus an optional gradient. Operations
build a graph of parent links and backward closures; backward() walks the
graph in reverse topological order and accumulates dL/dleaf additively.

Values are float32 by default (training); every operation also runs in
float64, which the gradient test-suite uses. Tensors are immutable once
produced by an operation; a graph and its backward pass belong to a
single thread.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ConfigError, ShapeError
from . import kernels

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _operands(a, b, op: str):
    if not isinstance(a, Tensor):
        if not isinstance(b, Tensor):
            raise ShapeError(f"{op}: at least one operand must be a Tensor")
        a = _coerce(a, b)
    b = _coerce(b, a)
    _check_same_dtype(a, b, op)
    return a, b


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward_fn = backward_fn if track else None
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(root: Tensor):
    """Populate .grad on every requires_grad leaf reachable from root."""
    if root.data.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.data.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
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
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# element-wise operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")
    out = _make(a.data + b.data, (a, b), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    out._backward_fn = bw
    return out


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")
    out = _make(a.data - b.data, (a, b), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    out._backward_fn = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")
    out = _make(a.data * b.data, (a, b), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward_fn = bw
    return out


def div(a, b) -> Tensor:
    a, b = _operands(a, b, "div")
    out = _make(a.data / b.data, (a, b), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward_fn = bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, -g)

    out._backward_fn = bw
    return out


def square(a: Tensor) -> Tensor:
    out = _make(a.data * a.data, (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, 2.0 * a.data * g)

    out._backward_fn = bw
    return out


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    out = _make(root, (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g / (2.0 * root))

    out._backward_fn = bw
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = _make(e, (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * e)

    out._backward_fn = bw
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    out._backward_fn = bw
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only inside the range."""
    out = _make(np.clip(a.data, lo, hi), (a,), None)

    def bw(g):
        if a.requires_grad:
            mask = (a.data >= lo) & (a.data <= hi)
            _accumulate(a, g * mask.astype(a.dtype))

    out._backward_fn = bw
    return out


def lrelu(a: Tensor, alpha: float = 0.1) -> Tensor:
    """x for x >= 0, alpha*x otherwise."""
    if alpha <= 0:
        raise ConfigError(f"lrelu alpha must be positive, got {alpha}")
    pos = a.data >= 0
    out = _make(np.where(pos, a.data, a.dtype.type(alpha) * a.data), (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * np.where(pos, a.dtype.type(1.0), a.dtype.type(alpha)))

    out._backward_fn = bw
    return out


def relu(a: Tensor) -> Tensor:
    pos = a.data >= 0
    out = _make(np.where(pos, a.data, a.dtype.type(0)), (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * pos.astype(a.dtype))

    out._backward_fn = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(over="ignore"):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    s = s.astype(a.dtype, copy=False)
    out = _make(s, (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g * s * (1.0 - s))

    out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# shape and reduction operations
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _make(a.data.reshape(shape), (a,), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    out._backward_fn = bw
    return out


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    out = _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), None)

    def bw(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(a, np.broadcast_to(gg, a.data.shape))

    out._backward_fn = bw
    return out


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    count = math.prod(a.data.shape[ax] for ax in axes)
    out = _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), None)

    def bw(g):
        if a.requires_grad:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axes)
            _accumulate(a, np.broadcast_to(gg, a.data.shape) / a.dtype.type(count))

    out._backward_fn = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape[1]} vs {b.data.shape[0]}")
    out = _make(a.data @ b.data, (a, b), None)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# convolution geometry
# ---------------------------------------------------------------------------

AXIS_NAMES_3D = ("depth", "height", "width")


def _tuple_n(value, n, what):
    if isinstance(value, int):
        return (value,) * n
    value = tuple(value)
    if len(value) != n:
        raise ConfigError(f"{what} needs {n} entries, got {len(value)}")
    return value


def _pad_pairs(padding, in_ext, k_ext, stride, n):
    """Canonical per-axis (lead, trail) padding.

    "same" keeps extent at stride 1 (output ceil(in/s) in general); an
    asymmetric remainder goes to the trailing side.
    """
    if padding == "same":
        pairs = []
        for i in range(n):
            o = -(-in_ext[i] // stride[i])
            total = max((o - 1) * stride[i] + k_ext[i] - in_ext[i], 0)
            pairs.append((total // 2, total - total // 2))
        return tuple(pairs)
    if isinstance(padding, int):
        return ((padding, padding),) * n
    padding = tuple(padding)
    if len(padding) != n:
        raise ConfigError(f"padding needs {n} entries, got {len(padding)}")
    pairs = []
    for p in padding:
        if isinstance(p, int):
            pairs.append((p, p))
        else:
            lead, trail = p
            pairs.append((int(lead), int(trail)))
    return tuple(pairs)


def _conv_out_extents(in_ext, k_ext, stride, pairs, axis_names):
    outs = []
    for i in range(len(in_ext)):
        padded = in_ext[i] + pairs[i][0] + pairs[i][1]
        if k_ext[i] > padded:
            raise ShapeError(
                f"kernel {axis_names[i]} {k_ext[i]} exceeds padded input {axis_names[i]} {padded}"
            )
        outs.append((padded - k_ext[i]) // stride[i] + 1)
    return tuple(outs)


def _check_strides(stride):
    if any(s < 1 for s in stride):
        raise ConfigError(f"strides must be >= 1, got {stride}")


def _pad_volume(x: np.ndarray, pairs) -> np.ndarray:
    if all(p == (0, 0) for p in pairs):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple(pairs))


def _crop_volume(x: np.ndarray, pairs) -> np.ndarray:
    sl = [slice(None), slice(None)]
    for (lead, trail), ext in zip(pairs, x.shape[2:]):
        sl.append(slice(lead, ext - trail))
    return x[tuple(sl)]


# numpy-level primitives; x, k, g are plain arrays. Column matrices are
# position-major [N*L, C*kvol] so every direction is one BLAS call.


def _position_major(gout):
    # [N,C,d,h,w] -> [N*d*h*w, C]
    return np.ascontiguousarray(np.moveaxis(gout, 1, 4)).reshape(-1, gout.shape[1])


def _conv_forward_cols(x, k, stride, pairs):
    n = x.shape[0]
    cout = k.shape[0]
    xp = _pad_volume(x, pairs)
    kdhw = k.shape[2:]
    od = kernels.out_extent(xp.shape[2], kdhw[0], stride[0])
    oh = kernels.out_extent(xp.shape[3], kdhw[1], stride[1])
    ow = kernels.out_extent(xp.shape[4], kdhw[2], stride[2])
    cols = kernels.vol2col(xp, kdhw, stride)
    out = cols @ k.reshape(cout, -1).T
    out = np.moveaxis(out.reshape(n, od, oh, ow, cout), 4, 1)
    return np.ascontiguousarray(out), cols


def _conv_forward(x, k, stride, pairs):
    return _conv_forward_cols(x, k, stride, pairs)[0]


def _conv_input_grad(gout, k, x_shape, stride, pairs):
    cout = gout.shape[1]
    kdhw = k.shape[2:]
    padded_shape = (
        x_shape[0],
        x_shape[1],
        x_shape[2] + pairs[0][0] + pairs[0][1],
        x_shape[3] + pairs[1][0] + pairs[1][1],
        x_shape[4] + pairs[2][0] + pairs[2][1],
    )
    cols = _position_major(gout) @ k.reshape(cout, -1)
    xp = kernels.col2vol(cols, padded_shape, kdhw, stride)
    return _crop_volume(xp, pairs)


def _conv_kernel_grad(x, gout, k_shape, stride, pairs):
    xp = _pad_volume(x, pairs)
    cols = kernels.vol2col(xp, k_shape[2:], stride)
    gw = _position_major(gout).T @ cols
    return gw.reshape(k_shape)


# ---------------------------------------------------------------------------
# convolution operations
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of [N,Cin,D,H,W] with [Cout,Cin,kD,kH,kW]."""
    _check_same_dtype(x, kernel, "conv3d")
    if x.data.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-D [N,C,D,H,W], got {x.data.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5-D [Cout,Cin,kD,kH,kW], got {kernel.data.shape}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: input channels (axis 1) {x.data.shape[1]} "
            f"!= kernel input channels (axis 1) {kernel.data.shape[1]}"
        )
    stride = _tuple_n(stride, 3, "stride")
    _check_strides(stride)
    pairs = _pad_pairs(padding, x.data.shape[2:], kernel.data.shape[2:], stride, 3)
    _conv_out_extents(x.data.shape[2:], kernel.data.shape[2:], stride, pairs, AXIS_NAMES_3D)

    track = _grad_enabled and (x.requires_grad or kernel.requires_grad)
    data, cols = _conv_forward_cols(x.data, kernel.data, stride, pairs)
    if not track:
        cols = None  # free the gather when no backward pass will need it
    out = _make(data, (x, kernel), None)
    x_shape, k_shape = x.data.shape, kernel.data.shape

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _conv_input_grad(g, kernel.data, x_shape, stride, pairs))
        if kernel.requires_grad:
            _accumulate(kernel, (_position_major(g).T @ cols).reshape(k_shape))

    out._backward_fn = bw
    return out


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kH,kW]."""
    _check_same_dtype(x, kernel, "conv2d")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D [Cout,Cin,kH,kW], got {kernel.data.shape}")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input channels (axis 1) {x.data.shape[1]} "
            f"!= kernel input channels (axis 1) {kernel.data.shape[1]}"
        )
    stride2 = _tuple_n(stride, 2, "stride")
    _check_strides(stride2)
    pairs2 = _pad_pairs(padding, x.data.shape[2:], kernel.data.shape[2:], stride2, 2)
    _conv_out_extents(x.data.shape[2:], kernel.data.shape[2:], stride2, pairs2, ("height", "width"))

    stride3 = (1,) + stride2
    pairs3 = ((0, 0),) + pairs2
    x5 = x.data[:, :, None]
    k5 = kernel.data[:, :, None]
    track = _grad_enabled and (x.requires_grad or kernel.requires_grad)
    out5, cols = _conv_forward_cols(x5, k5, stride3, pairs3)
    if not track:
        cols = None
    out = _make(out5[:, :, 0], (x, kernel), None)
    x_shape5, k_shape5 = x5.shape, k5.shape

    def bw(g):
        g5 = g[:, :, None]
        if x.requires_grad:
            _accumulate(x, _conv_input_grad(g5, k5, x_shape5, stride3, pairs3)[:, :, 0])
        if kernel.requires_grad:
            _accumulate(kernel, (_position_major(g5).T @ cols).reshape(k_shape5)[:, :, 0])

    out._backward_fn = bw
    return out


def _deconv_geometry(in_ext, k_ext, stride, padding, out_extents):
    """Target extents and pads making deconv3d the exact conv3d adjoint."""
    if out_extents is not None:
        target = tuple(int(e) for e in out_extents)
    elif padding == "same":
        for i in range(3):
            if k_ext[i] < stride[i]:
                raise ConfigError(
                    f"deconv3d 'same' needs kernel >= stride on every axis; "
                    f"{AXIS_NAMES_3D[i]}: kernel {k_ext[i]} < stride {stride[i]}"
                )
        target = tuple(in_ext[i] * stride[i] for i in range(3))
    else:
        pairs = _pad_pairs(padding, (1, 1, 1), k_ext, stride, 3)
        target = tuple(
            (in_ext[i] - 1) * stride[i] + k_ext[i] - pairs[i][0] - pairs[i][1] for i in range(3)
        )
    pairs = _pad_pairs(padding, target, k_ext, stride, 3)
    produced = _conv_out_extents(target, k_ext, stride, pairs, AXIS_NAMES_3D)
    for i in range(3):
        if produced[i] != in_ext[i]:
            raise ShapeError(
                f"deconv3d {AXIS_NAMES_3D[i]}: input extent {in_ext[i]} is not the "
                f"convolution image of target extent {target[i]} (would be {produced[i]})"
            )
    return target, pairs


def deconv3d(x: Tensor, kernel: Tensor, stride=1, padding="same", out_extents=None) -> Tensor:
    """Transposed convolution: the linear adjoint of conv3d.

    Kernel layout matches conv3d, [Cm,Cn,kD,kH,kW]; here the input carries
    Cm channels and the output Cn. With "same" padding the spatial extents
    scale by exactly the stride. out_extents pins the output extents when
    several input extents map to the same conv output (floor ambiguity).
    """
    _check_same_dtype(x, kernel, "deconv3d")
    if x.data.ndim != 5:
        raise ShapeError(f"deconv3d input must be 5-D [N,C,D,H,W], got {x.data.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"deconv3d kernel must be 5-D, got {kernel.data.shape}")
    if x.data.shape[1] != kernel.data.shape[0]:
        raise ShapeError(
            f"deconv3d channel mismatch: input channels (axis 1) {x.data.shape[1]} "
            f"!= kernel leading channels (axis 0) {kernel.data.shape[0]}"
        )
    stride = _tuple_n(stride, 3, "stride")
    _check_strides(stride)
    target, pairs = _deconv_geometry(x.data.shape[2:], kernel.data.shape[2:], stride, padding, out_extents)
    target_shape = (x.data.shape[0], kernel.data.shape[1]) + target

    out = _make(_conv_input_grad(x.data, kernel.data, target_shape, stride, pairs), (x, kernel), None)
    k_shape = kernel.data.shape

    def bw(g):
        if x.requires_grad:
            _accumulate(x, _conv_forward(g, kernel.data, stride, pairs))
        if kernel.requires_grad:
            _accumulate(kernel, _conv_kernel_grad(g, x.data, k_shape, stride, pairs))

    out._backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance with EMA momentum."""

    def __init__(self, channels: int, momentum: float = 0.9, dtype=DEFAULT_DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        m = self.momentum
        self.mean = (m * self.mean + (1.0 - m) * batch_mean).astype(self.mean.dtype)
        self.var = (m * self.var + (1.0 - m) * batch_var).astype(self.var.dtype)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    stats: RunningStats | None = None,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Channel-wise batch normalization over batch and spatial axes.

    Train mode normalizes with batch statistics and, when a RunningStats
    is supplied, folds them into the running averages. Infer mode
    normalizes with the running statistics.
    """
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be positive, got {eps}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    if x.data.ndim < 2:
        raise ShapeError(f"batchnorm input must have a channel axis, got shape {x.data.shape}")
    if x.data.shape[0] == 0:
        raise ShapeError("batchnorm on a zero-size batch")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm affine shape mismatch: gamma {gamma.data.shape}, beta {beta.data.shape}, channels {c}"
        )
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    if mode == "train":
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = np.mean(centered * centered, axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = centered * inv
        if stats is not None and update_stats:
            stats.update(mu.reshape(c), var.reshape(c))
    else:
        if stats is None:
            raise ConfigError("batchnorm infer mode requires running statistics")
        rm = stats.mean.reshape(bshape).astype(x.dtype)
        rv = stats.var.reshape(bshape).astype(x.dtype)
        inv = 1.0 / np.sqrt(rv + x.dtype.type(eps))
        xhat = (x.data - rm) * inv
    g_col = gamma.data.reshape(bshape)
    out = _make(g_col * xhat + beta.data.reshape(bshape), (x, gamma, beta), None)

    def bw(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g_col
            if mode == "train":
                t1 = dxhat.mean(axis=axes, keepdims=True)
                t2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                _accumulate(x, inv * (dxhat - t1 - xhat * t2))
            else:
                _accumulate(x, dxhat * inv)

    out._backward_fn = bw
    return out
