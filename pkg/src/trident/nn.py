"""Parameter containers and the basic layers the network is assembled from."""

from __future__ import annotations

import functools
import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Ordered container of parameters, buffers and child modules.

    Attribute assignment registers :class:`Parameter` values and child
    modules, so ``named_parameters`` follows definition order. Buffers are
    plain numpy arrays (e.g. batch-norm running statistics) that are saved in
    checkpoints but never optimized.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        out = OrderedDict((n, p.data) for n, p in self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state):
        """Copy arrays from ``state``; raises ``KeyError``/``ValueError`` naming
        the first tensor that is missing, unexpected or mis-shaped."""
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name!r} has shape {src.shape} in checkpoint, model expects {arr.shape}")
        for name in state:
            if name not in own:
                raise KeyError(f"checkpoint has unexpected tensor {name!r}")
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, src in state.items():
            if name in params:
                params[name].data = np.array(src, dtype=params[name].dtype)
            else:
                buffers[name][...] = src

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _rng(rng):
    return rng if rng is not None else np.random.default_rng()


def normal_init(rng, shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(default_dtype())


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, bias=True):
        super().__init__()
        rng = _rng(rng)
        self.weight = Parameter(normal_init(rng, (n_in, n_out)))
        if bias:
            self.bias = Parameter(np.zeros(n_out, dtype=default_dtype()))
        else:
            self.bias = None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(dim, dtype=default_dtype()))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm(Module):
    def __init__(self, dim, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(dim, dtype=default_dtype()))
        self.register_buffer("running_mean", np.zeros(dim, dtype=default_dtype()))
        self.register_buffer("running_var", np.ones(dim, dtype=default_dtype()))
        self.register_buffer("num_batches", np.zeros(1, dtype=default_dtype()))

    def forward(self, x):
        if not self.training and self.num_batches[0] == 0:
            raise RuntimeError("batch norm used in inference mode before any training batch")
        if self.training:
            self.num_batches += 1
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Conv2d(Module):
    """Channels-last convolution with Kaiming-uniform (fan-in) weights."""

    def __init__(self, n_in, n_out, kernel, stride=(1, 1), padding="same", rng=None):
        super().__init__()
        kh, kw = kernel
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_uniform(_rng(rng), (kh, kw, n_in, n_out), kh * kw * n_in))
        self.bias = Parameter(np.zeros(n_out, dtype=default_dtype()))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel, rng=None):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(_rng(rng), (kernel, kernel, channels), kernel * kernel))
        self.bias = Parameter(np.zeros(channels, dtype=default_dtype()))

    def forward(self, x):
        return T.depthwise_conv2d(x, self.weight, self.bias)


class CodedLinear(Module):
    """Linear map of ``[x, code]`` where ``code`` is a constant positional code.

    The weight is stored as one (n_feat + n_code, n_out) matrix. The code
    half contributes an input-independent table ``code @ W_code + b``; when
    no gradient is being recorded the table is cached and rebuilt only if the
    code array or the weights change.
    """

    def __init__(self, n_feat, n_code, n_out, rng=None):
        super().__init__()
        self.n_feat = n_feat
        self.n_code = n_code
        self.weight = Parameter(normal_init(_rng(rng), (n_feat + n_code, n_out)))
        self.bias = Parameter(np.zeros(n_out, dtype=default_dtype()))
        object.__setattr__(self, "_cache", None)

    def _table(self, code):
        w_code = self.weight.data[self.n_feat :]
        c = self._cache
        if c is not None and c[0] is code and np.array_equal(c[1], w_code) and np.array_equal(c[2], self.bias.data):
            return c[3]
        table = Tensor._wrap(code.astype(self.weight.dtype) @ w_code + self.bias.data)
        object.__setattr__(self, "_cache", (code, w_code.copy(), self.bias.data.copy(), table))
        return table

    def forward(self, x, code=None):
        if self.n_code == 0:
            return T.linear(x, self.weight, self.bias)
        feat = T.linear(x, self.weight[: self.n_feat])
        if T.recording() and (self.weight.requires_grad or self.bias.requires_grad):
            table = T.linear(Tensor._wrap(code.astype(self.weight.dtype)), self.weight[self.n_feat :], self.bias)
        else:
            table = self._table(code)
        return feat + table


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate query and key/value widths.

    Inputs are (..., N, dim) feature tensors plus optional constant positional
    codes broadcastable to (..., N, code_dim); attention runs independently for
    every leading index. Returns the projected output and the attention
    weights shaped (..., heads, Nq, Nk).
    """

    def __init__(self, q_dim, kv_dim, dim, heads, rng=None, q_code=0, kv_code=0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"attention width {dim} is not divisible by {heads} heads")
        rng = _rng(rng)
        self.heads = heads
        self.head_dim = dim // heads
        self.q = CodedLinear(q_dim, q_code, dim, rng)
        self.k = CodedLinear(kv_dim, kv_code, dim, rng)
        self.v = CodedLinear(kv_dim, kv_code, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x):
        lead = x.shape[:-1]
        x = x.reshape(lead + (self.heads, self.head_dim))
        n = x.ndim
        return T.swapaxes(x, n - 3, n - 2)

    def forward(self, queries, keys_values, q_code=None, kv_code=None):
        q = self._split(self.q(queries, q_code))
        k = self._split(self.k(keys_values, kv_code))
        v = self._split(self.v(keys_values, kv_code))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        n = ctx.ndim
        ctx = T.swapaxes(ctx, n - 3, n - 2)
        ctx = ctx.reshape(ctx.shape[:-2] + (self.heads * self.head_dim,))
        return self.o(ctx), attn.data


@functools.lru_cache(maxsize=64)
def sinusoid_code(n, channels):
    """Sin/cos code of positions 0..n-1 on a geometric frequency ladder.

    The first half of the channels holds sines, the second half cosines.
    """
    if channels % 2:
        raise ValueError("sinusoidal code needs an even channel count")
    half = channels // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.arange(n)[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    out.flags.writeable = False
    return out
