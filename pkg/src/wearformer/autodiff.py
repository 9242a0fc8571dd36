"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Just enough operator coverage to express a 1-D conv encoder, multi-head
self-attention with layer normalization, and a focal-loss head, and to train
them with Adam. Buffers are numpy arrays (always float64); the differentiation
machinery is written here.

Usage:

    with Tape() as tape:
        out = matmul(x, w) + b
        loss = mean(out * out)
    backward(tape, loss, params=[w, b])   # fills w.grad, b.grad

Ops record onto the innermost active tape of the current thread; with no
active tape they are plain forward computations. A tape is single-use:
calling backward on it twice raises TapeConsumedError (re-record instead).
Double backward (gradients of gradients) is unsupported.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _expit

from .errors import NumericError, ShapeError, TapeConsumedError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally marked as a trainable parameter."""

    __slots__ = ("data", "grad", "parameter", "name")

    def __init__(self, data, parameter: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.parameter = parameter
        self.name = name

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
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), parameter=self.parameter, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; non-Tensor operands are constants (no gradient)
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of operations; nodes are appended in execution order,
    which makes the list a topological order by construction."""

    def __init__(self):
        # each node: (output Tensor, backward closure grad_out -> None)
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray, dict], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, backward_fn) -> None:
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        backward(self, loss, params)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Reverse-topological gradient accumulation from a scalar loss.

    Fills ``.grad`` on every parameter-marked Tensor the tape touched.
    Parameters passed explicitly are guaranteed a gradient buffer (zeros when
    disconnected from the loss).
    """
    if tape._consumed:
        raise TapeConsumedError("tape already consumed by a previous backward()")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = np.array(g, dtype=np.float64, copy=True)

    for out, backward_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # branch never reached the loss
        backward_fn(g, accumulate)

    # every node output was popped above, so what remains belongs to leaves
    leaf_grads = grads

    def assign(t: Tensor) -> None:
        g = leaf_grads.get(id(t))
        t.grad = g if g is not None else np.zeros_like(t.data)

    for leaf in getattr(tape, "_param_leaves", ()):
        assign(leaf)
    if params is not None:
        for p in params:
            assign(p)


def _as_const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else _as_const(x)


def _register_param_leaf(tape: Tape, t: Tensor) -> None:
    leaves = getattr(tape, "_param_leaves", None)
    if leaves is None:
        leaves = []
        tape._param_leaves = leaves  # type: ignore[attr-defined]
    leaves.append(t)


def _make(out_data: np.ndarray, inputs: Sequence, backward_fn) -> Tensor:
    """Create the output tensor and record the node if a tape is active."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        for x in inputs:
            if isinstance(x, Tensor) and x.parameter:
                _register_param_leaf(tape, x)
        tape._record(out, backward_fn)
    return out


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _acc_maybe(x, grad_fn, g, accumulate) -> None:
    if isinstance(x, Tensor):
        accumulate(x, grad_fn(g))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da + db

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _sum_to_shape(g, da.shape), g, accumulate)
        _acc_maybe(b, lambda g: _sum_to_shape(g, db.shape), g, accumulate)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da - db

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _sum_to_shape(g, da.shape), g, accumulate)
        _acc_maybe(b, lambda g: _sum_to_shape(-g, db.shape), g, accumulate)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da * db

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _sum_to_shape(g * db, da.shape), g, accumulate)
        _acc_maybe(b, lambda g: _sum_to_shape(g * da, db.shape), g, accumulate)

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da / db

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _sum_to_shape(g / db, da.shape), g, accumulate)
        _acc_maybe(b, lambda g: _sum_to_shape(-g * da / (db * db), db.shape), g, accumulate)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    da = _data(a)

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: -g, g, accumulate)

    return _make(-da, (a,), bw)


def pow_const(a, exponent: float) -> Tensor:
    """a ** p for a constant exponent p."""
    da = _data(a)
    p = float(exponent)
    out = da ** p

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * p * da ** (p - 1.0) if p != 0.0 else np.zeros_like(da),
                   g, accumulate)

    return _make(out, (a,), bw)


def exp(a) -> Tensor:
    out = np.exp(_data(a))

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * out, g, accumulate)

    return _make(out, (a,), bw)


def log(a) -> Tensor:
    da = _data(a)

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g / da, g, accumulate)

    return _make(np.log(da), (a,), bw)


def sqrt(a) -> Tensor:
    out = np.sqrt(_data(a))

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * 0.5 / out, g, accumulate)

    return _make(out, (a,), bw)


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * (1.0 - out * out), g, accumulate)

    return _make(out, (a,), bw)


def relu(a) -> Tensor:
    da = _data(a)
    out = np.maximum(da, 0.0)

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * (da > 0.0), g, accumulate)

    return _make(out, (a,), bw)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    da = _data(a)
    cdf = 0.5 * (1.0 + _erf(da * _INV_SQRT2))
    out = da * cdf

    def bw(g, accumulate):
        pdf = np.exp(-0.5 * da * da) * _INV_SQRT2PI
        _acc_maybe(a, lambda g: g * (cdf + da * pdf), g, accumulate)

    return _make(out, (a,), bw)


def sigmoid(a) -> Tensor:
    out = _expit(_data(a))

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * out * (1.0 - out), g, accumulate)

    return _make(out, (a,), bw)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|)."""
    da = _data(a)
    out = np.maximum(da, 0.0) + np.log1p(np.exp(-np.abs(da)))

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g * _expit(da), g, accumulate)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    da = _data(a)

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g.reshape(da.shape), g, accumulate)

    return _make(da.reshape(shape), (a,), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    da = _data(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: g.transpose(inverse), g, accumulate)

    return _make(da.transpose(axes), (a,), bw)


def swap_last2(a) -> Tensor:
    da = _data(a)
    axes = list(range(da.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing."""
    da = _data(a)

    def bw(g, accumulate):
        def scatter(g):
            out = np.zeros_like(da)
            np.add.at(out, idx, g)
            return out

        _acc_maybe(a, scatter, g, accumulate)

    return _make(da[idx], (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g, accumulate):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc_maybe(t, lambda g, sl=tuple(sl): g[sl], g, accumulate)

    return _make(out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    out = da.sum(axis=axis, keepdims=keepdims)

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _expand_reduced(g, da.shape, axis, keepdims).copy(),
                   g, accumulate)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    out = da.mean(axis=axis, keepdims=keepdims)
    n = da.size / out.size

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _expand_reduced(g, da.shape, axis, keepdims) / n,
                   g, accumulate)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and network primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    da, db = _data(a), _data(b)
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {da.shape} vs {db.shape}")
    out = np.matmul(da, db)

    def bw(g, accumulate):
        _acc_maybe(a, lambda g: _sum_to_shape(np.matmul(g, np.swapaxes(db, -1, -2)), da.shape),
                   g, accumulate)
        _acc_maybe(b, lambda g: _sum_to_shape(np.matmul(np.swapaxes(da, -1, -2), g), db.shape),
                   g, accumulate)

    return _make(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    da = _data(a)
    shifted = da - da.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, accumulate):
        def grad(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return out * (g - inner)

        _acc_maybe(a, grad, g, accumulate)

    return _make(out, (a,), bw)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    """Standardize along the last axis, then apply a learned affine map."""
    dx, dg, ds = _data(x), _data(gain), _data(shift)
    if dx.shape[-1] != dg.shape[-1] or dg.shape != ds.shape:
        raise ShapeError(f"layer_norm shapes: x {dx.shape}, gain {dg.shape}, shift {ds.shape}")
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * dg + ds

    def bw(g, accumulate):
        lead = tuple(range(g.ndim - 1))

        def grad_x(g):
            gy = g * dg
            return inv * (gy - gy.mean(axis=-1, keepdims=True)
                          - y * (gy * y).mean(axis=-1, keepdims=True))

        _acc_maybe(x, grad_x, g, accumulate)
        _acc_maybe(gain, lambda g: (g * y).sum(axis=lead).reshape(dg.shape), g, accumulate)
        _acc_maybe(shift, lambda g: g.sum(axis=lead).reshape(ds.shape), g, accumulate)

    return _make(out, (x, gain, shift), bw)


def conv1d(x, weight, bias, stride: int) -> Tensor:
    """Valid (unpadded) 1-D convolution over the last axis.

    x: (C_in, L) or (B, C_in, L); weight: (C_out, C_in, k); bias: (C_out,).
    Output length is floor((L - k) / stride) + 1.
    """
    dx, dw, db = _data(x), _data(weight), _data(bias)
    squeeze = dx.ndim == 2
    x3 = dx[None] if squeeze else dx
    if x3.ndim != 3 or dw.ndim != 3:
        raise ShapeError(f"conv1d expects (B,C,L) input and (O,C,k) weight, got {dx.shape}, {dw.shape}")
    batch, c_in, length = x3.shape
    c_out, c_w, k = dw.shape
    if c_w != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {c_in} vs weight {c_w}")
    if db.shape != (c_out,):
        raise ShapeError(f"conv1d bias shape {db.shape}, expected ({c_out},)")
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    if length < k:
        raise ShapeError(f"conv1d window too short: length {length} < kernel {k}")
    l_out = (length - k) // stride + 1

    win = np.lib.stride_tricks.sliding_window_view(x3, k, axis=2)[:, :, ::stride, :]
    # (B, L_out, C_in*k) @ (C_in*k, C_out) -> one dgemm per batch element
    xmat = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(batch, l_out, c_in * k)
    wmat = dw.transpose(1, 2, 0).reshape(c_in * k, c_out)
    out3 = np.matmul(xmat, wmat).transpose(0, 2, 1) + db[None, :, None]
    out = out3[0] if squeeze else out3

    def bw(g, accumulate):
        g3 = g[None] if squeeze else g
        gmat = g3.transpose(0, 2, 1)  # (B, L_out, C_out)

        def grad_w(_):
            gw = np.matmul(xmat.reshape(-1, c_in * k).T, gmat.reshape(-1, c_out))
            return gw.reshape(c_in, k, c_out).transpose(2, 0, 1)

        def grad_b(_):
            return g3.sum(axis=(0, 2))

        def grad_x(_):
            gx4 = np.matmul(gmat, wmat.T).reshape(batch, l_out, c_in, k).transpose(0, 2, 1, 3)
            gx = np.zeros_like(x3)
            for i in range(k):
                gx[:, :, i:i + stride * l_out:stride] += gx4[:, :, :, i]
            return gx[0] if squeeze else gx

        _acc_maybe(x, grad_x, g, accumulate)
        _acc_maybe(weight, grad_w, g, accumulate)
        _acc_maybe(bias, grad_b, g, accumulate)

    return _make(out, (x, weight, bias), bw)


def conv1d_output_length(length: int, kernel: int, stride: int) -> int:
    if length < kernel:
        raise ShapeError(f"window too short: length {length} < kernel {kernel}")
    return (length - kernel) // stride + 1


def scaled_dot_attention(q, k, v, attn_dropout: "DropoutSpec | None" = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_head)) V per head.

    q, k, v: (..., heads, L, d_head) with matching shapes. Rows of the
    attention matrix sum to 1.
    """
    dq, dk, dv = _data(q), _data(k), _data(v)
    if dq.shape != dk.shape or dq.shape != dv.shape:
        raise ShapeError(f"attention operands must share a shape: {dq.shape}, {dk.shape}, {dv.shape}")
    d_head = dq.shape[-1]
    scores = mul(matmul(q, swap_last2(k)), 1.0 / math.sqrt(d_head))
    attn = softmax(scores, axis=-1)
    if attn_dropout is not None:
        attn = dropout(attn, attn_dropout.rate, attn_dropout.rng)
    return matmul(attn, v)


class DropoutSpec:
    """Rate plus the RNG that draws the masks; only passed while training."""

    __slots__ = ("rate", "rng")

    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    da = _data(a)
    if rate <= 0.0:
        mask = None
        out = da
    else:
        mask = (rng.random(da.shape) >= rate) / (1.0 - rate)
        out = da * mask

    def bw(g, accumulate):
        _acc_maybe(a, (lambda g: g) if mask is None else (lambda g: g * mask), g, accumulate)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Bias-corrected Adam moments, keyed like the parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None,
              state: AdamState) -> None:
    """One in-place Adam update. grads=None reads each parameter's .grad."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise NumericError(f"parameter {name!r} has no gradient")
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}; step aborted")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
