"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations in execution order while it is active; calling
:func:`backward` on a scalar result replays the tape in reverse and
accumulates gradients into every tensor created with ``requires_grad=True``.
Tapes are built fresh for each episode and may be consumed exactly once.
Forward passes run fine without an active tape; they then record nothing and
produce no gradients, which keeps pure evaluation cheap.

Only the operations needed by the embedding/weight-generator networks and the
episode arithmetic are provided: elementwise add/sub/mul/div (same shape, or
scalar against tensor), 2-D matmul, 3x3 stride-1 convolution, batchnorm,
relu/sigmoid, 2x2 max pooling, and a handful of structural ops (reshape,
transpose, concatenation, row gather/slice, row/column tiling, reductions).
Everything is float64; there is no broadcasting beyond scalars.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "BatchNormState",
    "backward",
    "zero_grads",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "maxpool2x2",
    "exp",
    "log",
    "sum_all",
    "rowsum",
    "add_rowvec",
    "transpose",
    "reshape",
    "concat0",
    "concat1",
    "slice0",
    "gather_rows",
    "repeat_rows",
    "repeat_cols",
    "crop_hw",
]

_TAPE_STACK: list["Tape"] = []
_ids = itertools.count()


class Tape:
    """Ordered record of one forward pass; consumable by one backward pass."""

    def __init__(self):
        self._nodes: list[tuple["Tensor", object]] = []
        self._consumed = False

    def __len__(self):
        return len(self._nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


class Tensor:
    """Dense float64 array, optionally carrying a same-shape gradient buffer.

    ``grad`` exists iff ``requires_grad`` and accumulates across backward
    passes until explicitly zeroed (the optimizer does this after stepping).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _out(data, inputs, backward_fn) -> Tensor:
    """Create an op output, recording it on the active tape when gradients flow."""
    needs = bool(_TAPE_STACK) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPE_STACK[-1]._nodes.append((out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray):
    """Accumulate a gradient into ``t``, reducing when ``t`` was a scalar operand."""
    if not t.requires_grad:
        return
    if g.shape == t.data.shape:
        t.grad += g
    elif t.data.size == 1:
        t.grad += np.sum(g)
    else:  # pragma: no cover - shapes were validated on the forward pass
        raise ValueError(f"gradient shape {g.shape} does not match tensor shape {t.data.shape}")


def backward(loss: Tensor):
    """Run the reverse pass from a scalar loss over the active tape.

    Gradients accumulate into existing ``grad`` buffers; callers zero them.
    A tape supports exactly one backward pass.
    """
    if not _TAPE_STACK:
        raise RuntimeError("backward requires an active tape")
    tape = _TAPE_STACK[-1]
    if not tape._nodes:
        raise RuntimeError("backward on an empty tape")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape._consumed = True
    if loss.grad is not None:
        loss.grad += 1.0
    for out, fn in reversed(tape._nodes):
        fn(out.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise ops (same shape, or scalar against tensor)
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _out(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _out(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _out(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _out(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, -g)

    return _out(-a.data, (a,), bw)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b) -> Tensor:
    """Dispatch an elementwise binary op by name (``add``, ``sub``, ``mul``)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _out(a.data @ b.data, (a, b), bw)


def add_rowvec(x, b) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"add_rowvec: incompatible shapes {x.data.shape} and {b.data.shape}")

    def bw(g):
        _accum(x, g)
        if b.requires_grad:
            b.grad += g.sum(axis=0)

    return _out(x.data + b.data, (x, b), bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")

    def bw(g):
        _accum(a, g.T)

    return _out(a.data.T.copy(), (a,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _out(np.where(mask, a.data, 0.0), (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _out(s, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)

    def bw(g):
        _accum(a, g * e)

    return _out(e, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, g / a.data)

    return _out(np.log(a.data), (a,), bw)


# ---------------------------------------------------------------------------
# convolution / normalization / pooling
# ---------------------------------------------------------------------------

def _im2col3(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """Unfold a padded (B, C, h+2, w+2) input into (B, C*9, h*w) patch columns."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 9, h, w))
    k = 0
    for ki in range(3):
        for kj in range(3):
            cols[:, :, k] = xp[:, :, ki:ki + h, kj:kj + w]
            k += 1
    return cols.reshape(b, c * 9, h * w)


def conv2d(x, w, bias) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved).

    Implemented as an unfold + matmul; the backward pass scatters patch
    gradients back with the matching fold.
    """
    x, w, bias = _as_tensor(x), _as_tensor(w), _as_tensor(bias)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be B x C x H x W, got shape {x.data.shape}")
    if w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be Cout x Cin x 3 x 3, got shape {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[1]} channels, kernel expects {w.data.shape[1]}"
        )
    if bias.data.shape != (w.data.shape[0],):
        raise ValueError(f"conv2d bias must have shape ({w.data.shape[0]},), got {bias.data.shape}")

    b, cin, h, wd = x.data.shape
    cout = w.data.shape[0]
    xp = np.zeros((b, cin, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x.data
    cols = _im2col3(xp, h, wd)                      # (B, Cin*9, H*W)
    w2 = w.data.reshape(cout, cin * 9)
    out = np.matmul(w2, cols).reshape(b, cout, h, wd) + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        g2 = g.reshape(b, cout, h * wd)
        if bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            w.grad += np.einsum("bol,bkl->ok", g2, cols).reshape(w.data.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(b, cin, 9, h, wd)
            dxp = np.zeros_like(xp)
            k = 0
            for ki in range(3):
                for kj in range(3):
                    dxp[:, :, ki:ki + h, kj:kj + wd] += dcols[:, :, k]
                    k += 1
            x.grad += dxp[:, :, 1:-1, 1:-1]

    return _out(out, (x, w, bias), bw)


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer (eval-mode normalization)."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm2d(x, gamma, beta, state: BatchNormState, mode: str = "train",
                eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by batch statistics and updates the running stats as
    ``running <- momentum * running + (1 - momentum) * batch``; eval mode
    normalizes by the running stats. The train-mode backward differentiates
    through the batch statistics themselves.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d input must be B x C x H x W, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batchnorm2d gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")

    b, _, h, w = x.data.shape
    count = b * h * w
    gsh = gamma.data.reshape(1, c, 1, 1)

    if mode == "train":
        if count < 2:
            raise ValueError(f"batchnorm2d train mode needs B*H*W >= 2, got {count}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mean
        state.running_var = momentum * state.running_var + (1.0 - momentum) * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gsh * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        if beta.requires_grad:
            beta.grad += g.sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxhat = g * gsh
            if mode == "train":
                sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x.grad += (inv_std.reshape(1, c, 1, 1) / count) * (
                    count * dxhat - sum_d - xhat * sum_dx
                )
            else:
                x.grad += dxhat * inv_std.reshape(1, c, 1, 1)

    return _out(out, (x, gamma, beta), bw)


def maxpool2x2(x) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first
    position in row-major window order."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2x2 input must be B x C x H x W, got shape {x.data.shape}")
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 requires even spatial dims, got H={h}, W={w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(b, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h2, w2, 4)
    )
    arg = windows.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        g4 = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(g4, arg[..., None], g[..., None], axis=-1)
        x.grad += (
            g4.reshape(b, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )

    return _out(out, (x,), bw)


def crop_hw(x, h: int, w: int) -> Tensor:
    """Keep the top-left h x w spatial window of a B x C x H x W tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or h > x.data.shape[2] or w > x.data.shape[3]:
        raise ValueError(f"crop_hw: cannot crop shape {x.data.shape} to {h} x {w}")

    def bw(g):
        if x.requires_grad:
            x.grad[:, :, :h, :w] += g

    return _out(x.data[:, :, :h, :w].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# reductions and structural ops
# ---------------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _out(np.sum(a.data), (a,), bw)


def rowsum(a) -> Tensor:
    """(m, n) -> (m, 1) sum over columns."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"rowsum expects a 2-D tensor, got shape {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += np.broadcast_to(g, a.data.shape)

    return _out(a.data.sum(axis=1, keepdims=True), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _out(a.data.reshape(shape).copy(), (a,), bw)


def concat0(tensors) -> Tensor:
    """Concatenate along axis 0."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat0 needs at least one tensor")
    sizes = [t.data.shape[0] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            _accum(t, g[a:b])

    return _out(np.concatenate([t.data for t in ts], axis=0), tuple(ts), bw)


def concat1(tensors) -> Tensor:
    """Concatenate 2-D tensors along axis 1."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat1 needs at least one tensor")
    widths = [t.data.shape[1] for t in ts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for t, a, b in zip(ts, offsets[:-1], offsets[1:]):
            _accum(t, g[:, a:b])

    return _out(np.concatenate([t.data for t in ts], axis=1), tuple(ts), bw)


def slice0(a, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along axis 0."""
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ValueError(f"slice0 bounds [{start}, {stop}) invalid for shape {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad[start:stop] += g

    return _out(a.data[start:stop].copy(), (a,), bw)


def gather_rows(a, indices) -> Tensor:
    """Select rows by index along axis 0 (duplicates allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _out(a.data[idx].copy(), (a,), bw)


def repeat_rows(a, m: int) -> Tensor:
    """Tile a (1, n) row m times into (m, n)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ValueError(f"repeat_rows expects shape (1, n), got {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g.sum(axis=0, keepdims=True)

    return _out(np.repeat(a.data, m, axis=0), (a,), bw)


def repeat_cols(a, n: int) -> Tensor:
    """Tile an (m, 1) column n times into (m, n)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[1] != 1:
        raise ValueError(f"repeat_cols expects shape (m, 1), got {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g.sum(axis=1, keepdims=True)

    return _out(np.repeat(a.data, n, axis=1), (a,), bw)
