"""
Dense tensors with reverse-mode differentiation over a recorded tape.

Every differentiable primitive used by the detector lives here: convolution,
max pooling, bilinear up-sampling, channel concatenation, ReLU, batch
normalisation and the handful of reshaping/reduction ops needed to assemble
head outputs. A primitive computes its forward result with numpy and, when a
``Tape`` is active and some input requires a gradient, appends a backward rule
to that tape.

Usage::

    with Tape() as tape:
        loss = some_function(x)
    tape.backward(loss)
    x.grad  # same shape as x
"""
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from slimdet.errors import NumericalError, ShapeError

MAX_RANK = 4

_state = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate without recording, even inside an outer tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Dense row-major array plus gradient bookkeeping."""

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype == np.float64:
                dtype = np.float64
            else:
                dtype = np.float32
        if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ShapeError(f"unsupported element type {dtype}")
        array = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        if array.ndim > MAX_RANK:
            raise ShapeError(f"rank {array.ndim} exceeds the supported maximum of {MAX_RANK}")
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def square(self) -> "Tensor":
        return square(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.ops: List[_Op] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, op: _Op) -> None:
        self.ops.append(op)

    def backward(self, output: Tensor, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate gradients from ``output`` back to every leaf on this tape.

        Args:
            output: Tensor produced on this tape (usually a scalar loss)
            grad: Upstream gradient; ones when omitted
        """
        grads = {id(output): np.ones_like(output.data) if grad is None else np.asarray(grad, dtype=output.dtype)}
        produced = {id(op.output) for op in self.ops}
        leaves = {}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            input_grads = op.backward(g)
            for tensor, tensor_grad in zip(op.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key not in produced:
                    leaves[key] = tensor
                if key in grads:
                    grads[key] = grads[key] + tensor_grad
                else:
                    grads[key] = tensor_grad
        for op in self.ops:
            for tensor in op.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaves.setdefault(id(tensor), tensor)
        for key, tensor in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(tensor.data) if g is None else g.astype(tensor.dtype, copy=False)
            tensor.grad = g if tensor.grad is None else tensor.grad + g


def _result_dtype(*tensors: Tensor):
    return np.result_type(*[t.data.dtype for t in tensors])


def emit_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(_Op(name, inputs, out, backward))
    return out


def _require_rank(tensor: Tensor, rank: int, what: str) -> None:
    if tensor.ndim != rank:
        raise ShapeError(f"{what} must have rank {rank}, got shape {tensor.shape}")


# ---------------------------------------------------------------------------
# Elementwise and structural helpers
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return emit_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return emit_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(a: Tensor) -> Tensor:
    return emit_op("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return emit_op("sum", out, (a,), lambda g: (np.full_like(a.data, g),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    return emit_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return emit_op("transpose", out, (a,), lambda g: (g.transpose(inverse),))


def concat(inputs: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; every other extent must match."""
    if not inputs:
        raise ShapeError("concat needs at least one input")
    ref = inputs[0].shape
    for k, t in enumerate(inputs):
        if t.ndim != len(ref):
            raise ShapeError(f"concat input {k} has rank {t.ndim}, expected {len(ref)}")
        for dim in range(len(ref)):
            if dim != axis and t.shape[dim] != ref[dim]:
                raise ShapeError(f"concat input {k} differs in dimension {dim}: {t.shape[dim]} != {ref[dim]}")
    sizes = [t.shape[axis] for t in inputs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in inputs], axis=axis)

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return emit_op("concat", out, tuple(inputs), backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Stack NCHW tensors along C in input order."""
    for k, t in enumerate(inputs):
        if t.ndim != 4:
            raise ShapeError(f"concat_channels input {k} must be NCHW, got shape {t.shape}")
    ref = inputs[0].shape if inputs else None
    for k, t in enumerate(inputs):
        if t.shape[0] != ref[0]:
            raise ShapeError(f"concat_channels input {k} batch {t.shape[0]} != {ref[0]}")
        if t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels input {k} spatial {t.shape[2:]} != {ref[2:]}")
    return concat(inputs, axis=1)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit_op("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Convolution / pooling / resize
# ---------------------------------------------------------------------------

def _output_extent(size: int, kernel: int, stride: int, pad: int, axis: str) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output {axis}: ({size} + 2*{pad} - {kernel}) / {stride} + 1")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding, NCHW input and OIKK weights."""
    _require_rank(x, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d Cin mismatch: input has {cin} channels, weight expects {wcin}")
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    oh = _output_extent(h, kh, stride, pad, "height")
    ow = _output_extent(w, kw, stride, pad, "width")
    k = kh

    dtype = _result_dtype(x, weight, bias)
    xp = np.pad(x.data.astype(dtype, copy=False), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # windows: (N, Cin, OH, OW, K, K)
    out = np.tensordot(windows, weight.data.astype(dtype, copy=False), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias.data.astype(dtype, copy=False).reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = g.sum(axis=(0, 2, 3))
        grad_xp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                grad_xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w]
        return (grad_x.astype(x.dtype, copy=False), grad_w.astype(weight.dtype, copy=False),
                grad_b.astype(bias.dtype, copy=False))

    return emit_op("conv2d", out, (x, weight, bias), backward)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window maximum; the first row-major argmax receives the gradient."""
    _require_rank(x, 4, "maxpool2d input")
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d needs positive k and stride, got k={k} stride={stride}")
    n, c, h, w = x.shape
    oh = _output_extent(h, k, stride, 0, "height")
    ow = _output_extent(w, k, stride, 0, "width")
    windows = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]

    def backward(g):
        grad = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices((n, c, oh, ow))
        rows = hi * stride + arg // k
        cols = wi * stride + arg % k
        np.add.at(grad, (ni, ci, rows, cols), g)
        return (grad,)

    return emit_op("maxpool2d", np.ascontiguousarray(out), (x,), backward)


def bilinear_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Row d holds the half-pixel-centre blend weights of destination index d."""
    matrix = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for d in range(dst):
        pos = min(max((d + 0.5) * scale - 0.5, 0.0), src - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        matrix[d, lo] += 1.0 - frac
        matrix[d, hi] += frac
    return matrix


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_rank(x, 4, "upsample_bilinear input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"upsample_bilinear target must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample_bilinear only enlarges: {h}x{w} -> {out_h}x{out_w}")
    ah = bilinear_matrix(h, out_h, x.dtype)
    aw = bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True),)

    return emit_op("upsample_bilinear", np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# Batch normalisation kernels (state handling lives in layers)
# ---------------------------------------------------------------------------

def _channel_view(x: Tensor) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    if x.ndim < 2:
        raise ShapeError(f"batch norm input needs a channel axis, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    return axes, view


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """
    Normalise with batch statistics.

    Returns:
        (output tensor, batch mean, biased batch variance)
    """
    axes, view = _channel_view(x)
    count = x.data.size // x.shape[1]
    if count < 2:
        raise ShapeError(f"batch norm in training mode needs N*H*W >= 2, got {count}")
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(g):
        grad_beta = g.sum(axis=axes)
        grad_gamma = (g * xhat).sum(axis=axes)
        grad_x = (gamma.data * inv_std).reshape(view) / count * (
            count * g - grad_beta.reshape(view) - xhat * grad_gamma.reshape(view))
        return grad_x.astype(x.dtype, copy=False), grad_gamma.astype(gamma.dtype), grad_beta.astype(beta.dtype)

    result = emit_op("batch_norm_train", out.astype(_result_dtype(x, gamma, beta), copy=False), (x, gamma, beta), backward)
    return result, mean, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    axes, view = _channel_view(x)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(view)) * inv_std.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)

    def backward(g):
        grad_x = g * (gamma.data * inv_std).reshape(view)
        grad_gamma = (g * xhat).sum(axis=axes)
        return (grad_x.astype(x.dtype, copy=False), grad_gamma.astype(gamma.dtype, copy=False),
                g.sum(axis=axes).astype(beta.dtype, copy=False))

    return emit_op("batch_norm_eval", out.astype(_result_dtype(x, gamma, beta), copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """
    Compare tape gradients of a scalar function with central differences.

    Args:
        f: Scalar-valued function of one tensor
        x: Point to check at (evaluated in double precision)
        h: Finite-difference step

    Returns:
        max |analytic - numeric| / max(1, |analytic|, |numeric|) over all elements
    """
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), dtype=np.float64, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    worst = 0.0
    for index in np.ndindex(base.shape):
        plus = base.copy()
        plus[index] += h
        minus = base.copy()
        minus[index] -= h
        with no_grad():
            f_plus = f(Tensor(plus, dtype=np.float64)).item()
            f_minus = f(Tensor(minus, dtype=np.float64)).item()
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[index])
        if not (np.isfinite(numeric) and np.isfinite(a)):
            raise NumericalError(f"non-finite gradient at index {index}", index=index)
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
