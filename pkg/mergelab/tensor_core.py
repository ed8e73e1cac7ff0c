"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
``Tape.gradient`` replays the records backward. Every backward rule is itself
written with the primitives of this module, so running it while the tape keeps
recording (``create_graph=True``) yields a differentiable gradient. That is
what the double-backward Hessian-vector product relies on.

Composite layers (convolution, pooling, batch normalization, softmax
cross-entropy) are assembled from the elementary primitives and inherit
first and second derivatives from them.
"""
from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_LOCAL = threading.local()

BackwardFn = Callable[["Tensor"], Sequence[Optional["Tensor"]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised in checked mode when a primitive receives NaN or inf."""


class TapeError(ValueError):
    """Raised when the differentiation tape is used incorrectly."""


# ----------------------------------------------------------------------
# Thread-local settings
def default_dtype() -> np.dtype:
    return getattr(_LOCAL, "dtype", np.dtype(np.float32))


def dtype_for(bits: int) -> np.dtype:
    if bits == 32:
        return np.dtype(np.float32)
    if bits == 64:
        return np.dtype(np.float64)
    raise ValueError(f"Unsupported precision {bits}; expected 32 or 64")


@contextmanager
def precision(bits: int) -> Iterator[np.dtype]:
    """Switch the default float width for tensors created in this thread."""
    previous = default_dtype()
    _LOCAL.dtype = dtype_for(bits)
    try:
        yield _LOCAL.dtype
    finally:
        _LOCAL.dtype = previous


def is_checked() -> bool:
    return bool(getattr(_LOCAL, "checked", False))


@contextmanager
def checked_mode(enabled: bool = True) -> Iterator[None]:
    """Reject non-finite primitive inputs while active."""
    previous = is_checked()
    _LOCAL.checked = enabled
    try:
        yield
    finally:
        _LOCAL.checked = previous


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


# ----------------------------------------------------------------------
class Tensor:
    """Dense array plus an optional handle into the active tape."""

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data: Any, dtype: Any = None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data: np.ndarray = arr
        self.node_id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        node = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{node})"

    # Operator sugar --------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class _Node:
    node_id: int
    op: str
    parents: tuple[Optional[int], ...]
    backward: Optional[BackwardFn]
    shape: tuple[int, ...]


class Tape:
    """Ordered record of primitives; recording order is a topological order."""

    def __init__(self, checked: bool = False):
        self.nodes: list[_Node] = []
        self.checked = checked
        self.recording = True
        self._checked_ctx: Optional[Any] = None

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        if self.checked:
            self._checked_ctx = checked_mode(True)
            self._checked_ctx.__enter__()
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._checked_ctx is not None:
            self._checked_ctx.__exit__(*exc)
            self._checked_ctx = None
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    @contextmanager
    def paused(self) -> Iterator[None]:
        previous = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = previous

    def watch(self, tensor: Tensor | np.ndarray) -> Tensor:
        """Register a leaf; the returned tensor shares data with the input."""
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=default_dtype())
        leaf = Tensor(data)
        node = _Node(len(self.nodes), "leaf", (), None, tuple(data.shape))
        self.nodes.append(node)
        leaf.node_id = node.node_id
        leaf.tape = self
        return leaf

    def record(self, op: str, parents: Sequence[Optional[int]], out: np.ndarray, backward: BackwardFn) -> Tensor:
        node = _Node(len(self.nodes), op, tuple(parents), backward, tuple(out.shape))
        self.nodes.append(node)
        result = Tensor(out)
        result.node_id = node.node_id
        result.tape = self
        return result

    def gradient(
        self,
        loss: Tensor,
        sources: Optional[Sequence[Tensor]] = None,
        *,
        create_graph: bool = False,
    ) -> dict[int, Tensor]:
        """Return node-id → gradient for every leaf (or the given sources)."""
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("Loss tensor was not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"Loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, Tensor] = {loss.node_id: Tensor(np.ones_like(loss.data))}
        snapshot = self.nodes[: loss.node_id + 1]
        leaf_ids = [n.node_id for n in snapshot if n.op == "leaf"]
        wanted = leaf_ids if sources is None else [s.node_id for s in sources if s.node_id is not None]
        keep = set(wanted)
        ctx = _null() if create_graph else self.paused()
        with ctx:
            for node in reversed(snapshot):
                upstream = grads.get(node.node_id)
                if upstream is None or node.backward is None:
                    continue
                if node.node_id not in keep:
                    del grads[node.node_id]
                in_grads = node.backward(upstream)
                for pid, g in zip(node.parents, in_grads):
                    if pid is None or g is None:
                        continue
                    grads[pid] = g if pid not in grads else add(grads[pid], g)
        result: dict[int, Tensor] = {}
        for nid in wanted:
            g = grads.get(nid)
            if g is None:
                g = Tensor(np.zeros(self.nodes[nid].shape, dtype=loss.data.dtype))
            result[nid] = g
        return result


@contextmanager
def _null() -> Iterator[None]:
    yield


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Gradient map (node-id → Tensor) of a scalar loss w.r.t. all leaves."""
    if loss.tape is None or loss.node_id is None:
        raise TapeError("Loss tensor is not attached to a tape")
    return loss.tape.gradient(loss)


# ----------------------------------------------------------------------
# Recording helpers
def _as_tensor(x: Any, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _check_finite(op: str, *tensors: Tensor) -> None:
    if not is_checked():
        return
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"Non-finite input to {op} (shape {t.shape})")


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is None or not tape.recording:
        return Tensor(out)
    parents = [t.node_id if t.tape is tape else None for t in inputs]
    if all(p is None for p in parents):
        return Tensor(out)
    return tape.record(op, parents, out, backward_fn)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------
# Elementwise primitives
def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    _check_finite("add", a, b)

    def _back(g: Tensor) -> tuple[Tensor, Tensor]:
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, _back)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "subtract")
    _check_finite("subtract", a, b)

    def _back(g: Tensor) -> tuple[Tensor, Tensor]:
        return sum_to(g, a.shape), neg(sum_to(g, b.shape))

    return _emit("sub", (a, b), a.data - b.data, _back)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    _check_finite("scale", a)
    c = float(c)
    return _emit("scale", (a,), a.data * a.data.dtype.type(c), lambda g: (scale(g, c),))


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "multiply")
    _check_finite("multiply", a, b)

    def _back(g: Tensor) -> tuple[Tensor, Tensor]:
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)

    return _emit("mul", (a, b), a.data * b.data, _back)


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "divide")
    _check_finite("divide", a, b)

    def _back(g: Tensor) -> tuple[Tensor, Tensor]:
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _emit("div", (a, b), a.data / b.data, _back)


def power(a: Tensor, p: float) -> Tensor:
    _check_finite("power", a)
    p = float(p)

    def _back(g: Tensor) -> tuple[Tensor]:
        return (mul(g, scale(power(a, p - 1.0), p)),)

    return _emit("power", (a,), np.power(a.data, a.data.dtype.type(p)), _back)


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a)
    return _emit("exp", (a,), np.exp(a.data), lambda g: (mul(g, exp(a)),))


def log(a: Tensor) -> Tensor:
    _check_finite("log", a)
    return _emit("log", (a,), np.log(a.data), lambda g: (div(g, a),))


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a)
    mask = Tensor((a.data > 0).astype(a.data.dtype))
    return _emit("relu", (a,), a.data * mask.data, lambda g: (mul(g, mask),))


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# ----------------------------------------------------------------------
# Linear algebra and layout primitives
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_finite("matmul", a, b)

    def _back(g: Tensor) -> tuple[Tensor, Tensor]:
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _emit("matmul", (a, b), a.data @ b.data, _back)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)), lambda g: (transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    original = a.shape
    return _emit("reshape", (a,), out, lambda g: (reshape(g, original),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Reduce broadcast axes so the result has ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = a.data
    while out.ndim > len(shape):
        out = out.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and out.shape[axis] != 1:
            out = out.sum(axis=axis, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    source = a.shape
    return _emit("sum_to", (a,), out, lambda g: (broadcast_to(g, source),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    source = a.shape
    return _emit("broadcast_to", (a,), out, lambda g: (sum_to(g, source),))


def sum(a: Tensor, axis: Optional[int | Sequence[int]] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _normalize_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    source = a.shape

    def _back(g: Tensor) -> tuple[Tensor]:
        return (broadcast_to(reshape(g, kept_shape), source),)

    return _emit("sum", (a,), np.asarray(out, dtype=a.data.dtype), _back)


def mean(a: Tensor, axis: Optional[int | Sequence[int]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / max(count, 1))


def _normalize_axes(axis: Optional[int | Sequence[int]], ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather from the flattened array; result has ``index.shape``."""
    index = np.asarray(index, dtype=np.int64)
    source = a.shape
    return _emit("take", (a,), a.data.reshape(-1)[index], lambda g: (scatter_add(g, index, source),))


def scatter_add(a: Tensor, index: np.ndarray, shape: Sequence[int]) -> Tensor:
    """Adjoint of :func:`take`: accumulate ``a`` into zeros of ``shape``."""
    shape = tuple(shape)
    size = int(np.prod(shape))
    flat = np.bincount(index.reshape(-1), weights=a.data.reshape(-1).astype(np.float64), minlength=size)
    out = flat.astype(a.data.dtype).reshape(shape)
    return _emit("scatter_add", (a,), out, lambda g: (take(g, index),))


def segment(a: Tensor, start: int, shape: Sequence[int]) -> Tensor:
    """Contiguous slice of a flat tensor, reshaped."""
    shape = tuple(shape)
    count = int(np.prod(shape))
    if a.data.ndim != 1 or start < 0 or start + count > a.size:
        raise ShapeError(f"segment: [{start}, {start + count}) outside flat tensor of shape {a.shape}")
    total = a.size

    def _back(g: Tensor) -> tuple[Tensor]:
        return (embed(reshape(g, (count,)), start, total),)

    return _emit("segment", (a,), a.data[start : start + count].reshape(shape), _back)


def embed(a: Tensor, start: int, total: int) -> Tensor:
    """Place a flat tensor at ``start`` inside zeros of length ``total``."""
    out = np.zeros(total, dtype=a.data.dtype)
    count = a.size
    out[start : start + count] = a.data.reshape(-1)
    return _emit("embed", (a,), out, lambda g: (segment(g, start, (count,)),))


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-fill the last two axes by ``pad`` on each side."""
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    return _emit("pad2d", (a,), np.pad(a.data, widths), lambda g: (crop2d(g, pad),))


def crop2d(a: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return a
    out = np.ascontiguousarray(a.data[..., pad:-pad, pad:-pad])
    return _emit("crop2d", (a,), out, lambda g: (pad2d(g, pad),))


def max_reduce(a: Tensor, axis: int = -1) -> Tensor:
    """Maximum along one axis; ties route the gradient to the first maximum."""
    axis = axis % a.data.ndim
    arg = np.argmax(a.data, axis=axis)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(arg, axis), 1.0, axis=axis)
    mask_t = Tensor(mask)
    kept = tuple(1 if i == axis else d for i, d in enumerate(a.shape))
    source = a.shape

    def _back(g: Tensor) -> tuple[Tensor]:
        return (mul(broadcast_to(reshape(g, kept), source), mask_t),)

    return _emit("max", (a,), a.data.max(axis=axis), _back)


# ----------------------------------------------------------------------
# Composite layers
@lru_cache(maxsize=64)
def _window_index(
    batch: int, channels: int, height: int, width: int, kh: int, kw: int, stride: int
) -> tuple[np.ndarray, int, int]:
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    n = np.arange(batch)[:, None, None, None, None, None]
    c = np.arange(channels)[None, :, None, None, None, None]
    i = (np.arange(out_h) * stride)[None, None, :, None, None, None]
    j = (np.arange(out_w) * stride)[None, None, None, :, None, None]
    di = np.arange(kh)[None, None, None, None, :, None]
    dj = np.arange(kw)[None, None, None, None, None, :]
    flat = ((n * channels + c) * height + (i + di)) * width + (j + dj)
    flat.setflags(write=False)
    return flat, out_h, out_w


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input and OIHW kernel, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xp = pad2d(x, pad)
    index, out_h, out_w = _window_index(n, c, h + 2 * pad, w + 2 * pad, kh, kw, stride)
    # (N, C, Ho, Wo, kh, kw) -> rows (N*Ho*Wo, C*kh*kw)
    cols = take(xp, index)
    cols = transpose(cols, (0, 2, 3, 1, 4, 5))
    cols = reshape(cols, (n * out_h * out_w, c * kh * kw))
    kernel = reshape(weight, (o, c * kh * kw))
    out = matmul(cols, transpose(kernel))
    out = transpose(reshape(out, (n, out_h, out_w, o)), (0, 3, 1, 2))
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    stride = stride or kernel
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"max_pool2d: window {kernel} larger than input {x.shape}")
    index, out_h, out_w = _window_index(n, c, h, w, kernel, kernel, stride)
    windows = reshape(take(x, index), (n, c, out_h, out_w, kernel * kernel))
    return max_reduce(windows, axis=-1)


@dataclass
class BatchNormOutput:
    out: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> BatchNormOutput:
    """Normalize per feature (2D input) or per channel (4D input).

    Train mode normalizes with batch statistics and blends them into the
    running statistics with ``momentum`` (unbiased variance); eval mode uses
    the stored statistics.
    """
    if x.data.ndim == 2:
        axes: tuple[int, ...] = (0,)
        view = (1, x.shape[1])
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
        view = (1, x.shape[1], 1, 1)
    else:
        raise ShapeError(f"batch_norm: expected 2D or 4D input, got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: parameters {gamma.shape}/{beta.shape} do not match {channels} channels")
    g = reshape(gamma, view)
    b = reshape(beta, view)
    if training:
        mu = mean(x, axes, keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axes, keepdims=True)
        normed = mul(centered, power(add(var, eps), -0.5))
        count = int(np.prod([x.shape[a] for a in axes]))
        batch_mean = mu.data.reshape(-1).astype(np.float64)
        batch_var = var.data.reshape(-1).astype(np.float64)
        if count > 1:
            batch_var = batch_var * count / (count - 1)
        new_mean = (1.0 - momentum) * running_mean.astype(np.float64) + momentum * batch_mean
        new_var = (1.0 - momentum) * running_var.astype(np.float64) + momentum * batch_var
        new_var = np.maximum(new_var, 1e-12)
        out = add(mul(normed, g), b)
        return BatchNormOutput(out, new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype))
    rm = Tensor(running_mean.reshape(view).astype(x.data.dtype))
    inv = Tensor((1.0 / np.sqrt(running_var.astype(np.float64) + eps)).reshape(view).astype(x.data.dtype))
    out = add(mul(mul(sub(x, rm), inv), g), b)
    return BatchNormOutput(out, running_mean, running_var)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"Labels outside [0, {classes})")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = log(sum(exp(z), axis=1))
    picked = take(z, np.arange(labels.size) * classes + labels)
    return mean(sub(lse, picked))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------
# Gradients of flat parameter functions
LossFn = Callable[[Tensor], Tensor]


def value_and_grad(loss_fn: LossFn, theta: np.ndarray, *, checked: bool = False) -> tuple[float, np.ndarray]:
    """Evaluate ``loss_fn`` at a flat vector and return its gradient."""
    with Tape(checked=checked) as tape:
        leaf = tape.watch(Tensor(np.asarray(theta)))
        loss = loss_fn(leaf)
        grad = tape.gradient(loss, [leaf])[leaf.node_id]
    return float(loss.data.reshape(-1)[0]), grad.data


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return grad


def _flat_values(x: Any) -> np.ndarray:
    values = getattr(x, "values", x)
    return np.asarray(values)


def hessian_vector_product(loss_fn: LossFn, params: Any, v: Any, *, mode: str = "central") -> Any:
    """H·v of ``loss_fn`` at ``params``.

    ``params`` and ``v`` are flat arrays or objects exposing ``.values`` and
    ``.with_values`` (parameter vectors); the result has the type of ``v``.
    ``mode="central"`` differences two gradients, ``mode="double"``
    differentiates ∇L·v through the tape. Both run in 64-bit.
    """
    theta = _flat_values(params).astype(np.float64).reshape(-1)
    vec = _flat_values(v).astype(np.float64).reshape(-1)
    if theta.shape != vec.shape:
        raise ShapeError(f"hessian_vector_product: params {theta.shape} vs direction {vec.shape}")
    if not np.any(vec):
        hv = np.zeros_like(vec)
    elif mode == "central":
        h = 1e-3 * (1.0 + float(np.linalg.norm(theta))) / (1.0 + float(np.linalg.norm(vec)))
        with precision(64):
            _, g_plus = value_and_grad(loss_fn, theta + h * vec)
            _, g_minus = value_and_grad(loss_fn, theta - h * vec)
        hv = (g_plus - g_minus) / (2.0 * h)
    elif mode == "double":
        with precision(64), Tape() as tape:
            leaf = tape.watch(Tensor(theta))
            loss = loss_fn(leaf)
            grad = tape.gradient(loss, [leaf], create_graph=True)[leaf.node_id]
            directional = sum(mul(grad, Tensor(vec)))
            hv = tape.gradient(directional, [leaf])[leaf.node_id].data
    else:
        raise ValueError(f"Unknown HVP mode {mode!r}; expected 'central' or 'double'")
    if hasattr(v, "with_values"):
        return v.with_values(hv)
    return hv
