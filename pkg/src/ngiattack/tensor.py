"""Dense float64 tensors with a reverse-mode tape.

Every primitive records itself on the active :class:`Tape` when at least one
input requires a gradient. :func:`backward` replays the tape in reverse
execution order (a valid reverse topological order, since an output is always
recorded after its inputs) and writes ``.grad`` on every leaf that asked for one.

The op set is deliberately closed: it covers the model zoo and the input
transforms and nothing else.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible dimensions."""


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of executed primitives.

    Use as a context manager to scope recording; outside any ``with`` block a
    per-context default tape is used.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward_fn):
        self.records.append(Record(op, tuple(inputs), output, backward_fn))

    def owns(self, t: Tensor) -> bool:
        return any(r.output is t for r in self.records)

    def reset(self):
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.owns(loss) and not (loss.requires_grad and loss._leaf):
            raise ValueError("backward: loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._leaf:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.ascontiguousarray(g)
        self.reset()


_ACTIVE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("ngi_tape", default=None)


def current_tape() -> Tape:
    tape = _ACTIVE.get()
    if tape is None:
        tape = Tape()
        _ACTIVE.set(tape)
    return tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    current_tape().backward(loss)


def _emit(op, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        current_tape().record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bwd(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit("add", (a, b), a.data + b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit("mul", (a, b), a.data * b.data, bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), bwd)


def dense(x, w, b=None) -> Tensor:
    """``x @ w + b`` for x of shape (N, in), w of shape (in, out)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    inputs = [x, w]
    # stacked (N, 1, in) matmul runs one BLAS call per row, so each row's
    # result is independent of the rest of the batch
    out = np.matmul(x.data[:, None, :], w.data)[:, 0]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"dense: bias {b.shape} does not match out dim {w.shape[1]}")
        out = out + b.data
        inputs.append(b)

    def bwd(g):
        grads = [
            np.matmul(g[:, None, :], w.data.T)[:, 0] if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return grads

    return _emit("dense", tuple(inputs), out, bwd)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (F, C, kh, kw) filters.

    Output spatial size is ``(H + 2*padding - kh) // stride + 1``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)
    _, oh, ow = cols.shape[:3]
    cols3 = cols.reshape(n, oh * ow, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    # one BLAS call per image keeps every image's result batch-independent
    out = np.matmul(cols3, wmat.T)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {f} filters")
        out = out + b.data
        inputs.append(b)
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def bwd(g):
        g3 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, oh * ow, f)
        g2 = g3.reshape(-1, f)
        gx = gw = None
        if x.requires_grad:
            dcols = np.matmul(g3, wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = kernels.col2im(dcols, hp, wp, stride)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if w.requires_grad:
            gw = (g2.T @ cols3.reshape(-1, c * kh * kw)).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return grads

    return _emit("conv2d", tuple(inputs), out, bwd)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if h < size or w < size:
        raise ShapeError(f"maxpool2d: window {size} larger than input {h}x{w}")
    out, arg = kernels.maxpool_forward(x.data, size)

    def bwd(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w, size),)

    return _emit("maxpool2d", (x,), out, bwd)


def gather(x, index: np.ndarray) -> Tensor:
    """Per-image pixel gather: ``out[n, c, i, j] = x[n, c].flat[index[n, i, j]]``.

    Negative indices produce zeros. The adjoint scatter-adds each output
    gradient back onto its source pixel.
    """
    x = _as_tensor(x)
    index = np.ascontiguousarray(index, dtype=np.int64)
    if x.ndim != 4 or index.ndim != 3 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather: input {x.shape} incompatible with index {index.shape}")
    h, w = x.shape[2:]
    if index.size and index.max() >= h * w:
        raise ShapeError(f"gather: index {index.max()} out of range for {h}x{w} image")
    out = kernels.gather(x.data, index)

    def bwd(g):
        return (kernels.scatter_add(np.ascontiguousarray(g), index, h, w),)

    return _emit("gather", (x,), out, bwd)


def resize_index(h: int, w: int, out_h: int, out_w: int) -> np.ndarray:
    """Flat source index of each nearest-neighbour output pixel."""
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return (rows[:, None] * w + cols[None, :]).astype(np.int64)


def resize_nearest(x, out_h: int, out_w: int) -> Tensor:
    """Nearest-neighbour resize of NCHW input to (out_h, out_w)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"resize_nearest: expected 4-D input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_nearest: target size must be positive, got {out_h}x{out_w}")
    idx = resize_index(x.shape[2], x.shape[3], out_h, out_w)
    index = np.ascontiguousarray(np.broadcast_to(idx, (x.shape[0], out_h, out_w)))
    out = gather(x, index)
    return out


def pad(x, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two spatial dims of NCHW input."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pad: expected 4-D input, got {x.shape}")
    if min(top, bottom, left, right) < 0:
        raise ShapeError(f"pad: negative padding ({top}, {bottom}, {left}, {right})")
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))

    def bwd(g):
        return (g[:, :, top : top + h, left : left + w],)

    return _emit("pad", (x,), out, bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, bwd)


def flatten(x) -> Tensor:
    """Collapse every axis but the first."""
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.array(x.data.sum()), bwd)


def tensor_mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.size

    def bwd(g):
        return (np.full(x.shape, g.item() / n),)

    return _emit("mean", (x,), np.array(x.data.mean()), bwd)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels, reduction: str = "sum") -> Tensor:
    """``-log softmax(logits)[label]``.

    ``logits`` is (C,) with an int label, giving a scalar, or (N, C) with N
    labels. ``reduction`` is "sum", "mean" or "none" (per-row losses).
    """
    logits = _as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (C,) or (N, C) logits, got {logits.shape}")
    n, c = z.shape
    if c < 2:
        raise ShapeError(f"softmax_cross_entropy: need at least 2 classes, got {c}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {y.shape[0]} labels for {n} rows")
    if (y < 0).any() or (y >= c).any():
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")
    logp = log_softmax(z)
    per = -logp[np.arange(n), y]
    if reduction == "sum" or single:
        out = np.array(per.sum())
    elif reduction == "mean":
        out = np.array(per.mean())
    elif reduction == "none":
        out = per
    else:
        raise ValueError(f"softmax_cross_entropy: unknown reduction {reduction!r}")

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        if reduction == "none" and not single:
            scale = g[:, None]
        elif reduction == "mean" and not single:
            scale = g.item() / n
        else:
            scale = g.item()
        dz = p * scale
        return (dz[0] if single else dz,)

    return _emit("softmax_cross_entropy", (logits,), out, bwd)


_OPS = {
    "dense": dense,
    "conv2d": conv2d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "add": add,
    "mul": mul,
    "resize_nearest": resize_nearest,
    "pad": pad,
    "gather": gather,
}


def forward_op(op: str, *inputs, **params) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("conv2d", x, w, stride=1)``."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **params)
