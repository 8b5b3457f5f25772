"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` only when at least one
input requires a gradient. Without an active tape every op is a plain numpy
computation, which is what inference uses.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "precision",
    "detect_anomaly",
    "kink_monitor",
    "default_dtype",
    "tensor",
]


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.tape: Tape | None = None
        self.check_finite = False
        self.kinks: list | None = None


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` naming the op that first yields NaN/Inf."""
    prev = _state.check_finite
    _state.check_finite = True
    try:
        yield
    finally:
        _state.check_finite = prev


@contextlib.contextmanager
def kink_monitor():
    """Collect the sign pattern of every relu input evaluated inside the block."""
    prev = _state.kinks
    log: list = []
    _state.kinks = log
    try:
        yield log
    finally:
        _state.kinks = prev


def recording():
    """True while a tape is active."""
    return _state.tape is not None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state.dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name=None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


@dataclass(eq=False)
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    visits: int = 0

    @property
    def input_ids(self):
        return tuple(id(t) for t in self.inputs)

    @property
    def output_id(self):
        return id(self.output)


@dataclass(eq=False)
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on a scalar result. Gradients accumulate into ``.grad``
    of leaf tensors (tensors not produced by a recorded op).
    """

    entries: list = field(default_factory=list)
    _prev: object = None

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None

    def record(self, op, inputs, output, backward):
        self.entries.append(TapeEntry(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.size != 1:
                raise ValueError("backward needs an explicit grad for non-scalar output")
            grad = np.ones_like(loss.data)
        produced = {id(e.output) for e in self.entries}
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        if id(loss) not in produced and loss.requires_grad:
            _accumulate_leaf(loss, grads.pop(id(loss)))
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            entry.visits += 1
            in_grads = entry.backward(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(t, gi)

    @property
    def ops(self):
        return [e.op for e in self.entries]


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------- helpers


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _state.dtype
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(op, out, inputs, backward) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    tape = _state.tape
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.record(op, inputs, result, backward)
    return result


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _binary(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _binary(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make("div", out, (a, b), backward)


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make("power", out, (a,), backward)


def sqrt(a):
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    if _state.kinks is not None:
        _state.kinks.append(np.sign(a.data))
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(a.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make("gelu", out, (a,), backward)


def tanh(a):
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh, "sigmoid": sigmoid}


def activation(a, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(a)


# ---------------------------------------------------------------- reductions & shape


def sum_(a, axis=None, keepdims=False):
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return _make("mean", np.asarray(out), (a,), backward)


def reshape(a, shape):
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a, shape):
    return _make("broadcast_to", np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if _is_basic(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.asarray(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis=-1):
    tensors = [_t(x) for x in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(tensors), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def linear(x, w, b=None):
    """Apply ``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make("linear", out, inputs, backward)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), backward)


# ---------------------------------------------------------------- normalization


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last (channel) axis, then apply ``gamma``/``beta``."""
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    xc = data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(data.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make("layer_norm", out, (x, gamma, beta), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel normalization over every axis but the last.

    ``running_mean``/``running_var`` are numpy arrays updated in place in
    training mode as ``r <- momentum * r + (1 - momentum) * batch_stat``, the
    variance using the unbiased estimator.
    """
    data = x.data
    axes = tuple(range(data.ndim - 1))
    if training:
        n = data.size // data.shape[-1]
        mu = data.mean(axis=axes)
        xc = data - mu
        var = (xc * xc).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (n / max(n - 1, 1))
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
    else:
        rstd = 1.0 / np.sqrt(running_var + eps)
        xhat = (data - running_mean) * rstd
    rstd = rstd.astype(data.dtype)
    xhat = xhat.astype(data.dtype)
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        if training:
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=axes)
                - xhat * (dxhat * xhat).mean(axis=axes)
            )
        else:
            dx = dxhat * rstd
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make("batch_norm", out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- convolution


def _pad_hw(data, pads):
    (pt, pb), (pl, pr) = pads
    if not (pt or pb or pl or pr):
        return data
    return np.pad(data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


def conv2d(x, w, b=None, stride=(1, 1), padding="same"):
    """Channels-last 2D convolution.

    ``x`` is (B, H, W, Cin), ``w`` is (kh, kw, Cin, Cout). ``padding`` is
    ``"same"`` (odd kernels, zero padding of k//2) or ((top, bottom), (left, right)).
    """
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[-1]}, kernel {cin}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"same padding needs odd kernel sizes, got {kh}x{kw}")
        padding = ((kh // 2, kh // 2), (kw // 2, kw // 2))
    sh, sw = stride
    xp = _pad_hw(x.data, padding)
    B, Hp, Wp, _ = xp.shape
    Ho = (Hp - kh) // sh + 1
    Wo = (Wp - kw) // sw + 1
    out = np.zeros((B, Ho, Wo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + sh * (Ho - 1) + 1 : sh, j : j + sw * (Wo - 1) + 1 : sw, :]
            out += patch @ w.data[i, j]
    if b is not None:
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)
    (pt, _), (pl, _) = padding

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + sh * (Ho - 1) + 1, sh), slice(j, j + sw * (Wo - 1) + 1, sw))
                gxp[sl] += g @ w.data[i, j].T
                gw[i, j] = xp[sl].reshape(-1, cin).T @ g2
        gx = gxp[:, pt : pt + x.shape[1], pl : pl + x.shape[2], :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make("conv2d", out, inputs, backward)


def depthwise_conv2d(x, w, b=None):
    """Per-channel KxK convolution with zero same-padding; ``w`` is (K, K, C)."""
    kh, kw, c = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"depthwise kernel must be odd-sized, got {kh}x{kw}")
    if x.shape[-1] != c:
        raise ValueError(f"depthwise channel mismatch: input {x.shape[-1]}, kernel {c}")
    B, H, W, _ = x.shape
    xp = _pad_hw(x.data, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + H, j : j + W, :] * w.data[i, j]
    if b is not None:
        out += b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        g2 = g.reshape(-1, c)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + H, j : j + W, :] += g * w.data[i, j]
                gw[i, j] = np.einsum("nc,nc->c", xp[:, i : i + H, j : j + W, :].reshape(-1, c), g2)
        gx = gxp[:, kh // 2 : kh // 2 + H, kw // 2 : kw // 2 + W, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make("depthwise_conv2d", out, inputs, backward)


def depthwise_separable_conv2d(x, dw, pw, dw_bias=None, pw_bias=None):
    """Depthwise KxK followed by a pointwise (1x1) channel map ``pw`` (Cin, Cout)."""
    return linear(depthwise_conv2d(x, dw, dw_bias), pw, pw_bias)
