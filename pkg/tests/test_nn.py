import numpy as np
import pytest

from trident import tensor as T
from trident.gradcheck import gradient_check
from trident.nn import CodedLinear, Linear, Module, MultiHeadAttention, sinusoid_code
from trident.tensor import Parameter, Tape, Tensor


class Pair(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.a = Linear(3, 2, rng)
        self.b = Linear(2, 1, rng)


def test_named_parameters_follow_definition_order():
    names = [n for n, _ in Pair().named_parameters()]
    assert names == ["a.weight", "a.bias", "b.weight", "b.bias"]


def test_state_dict_round_trip():
    src, dst = Pair(), Pair()
    for p in src.parameters():
        p.data = p.data + 1.0
    dst.load_state_dict(src.state_dict())
    for (n, p), (_, q) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_load_state_dict_names_missing_tensor():
    state = Pair().state_dict()
    del state["b.bias"]
    with pytest.raises(KeyError, match="b.bias"):
        Pair().load_state_dict(state)


def test_load_state_dict_names_misshaped_tensor():
    state = Pair().state_dict()
    state["a.weight"] = np.zeros((2, 3))
    with pytest.raises(ValueError, match="a.weight"):
        Pair().load_state_dict(state)


def test_load_state_dict_rejects_unexpected_tensor():
    state = Pair().state_dict()
    state["c.weight"] = np.zeros(1)
    with pytest.raises(KeyError, match="c.weight"):
        Pair().load_state_dict(state)


def test_requires_grad_toggle():
    m = Pair().requires_grad_(False)
    assert not any(p.requires_grad for p in m.parameters())


def test_coded_linear_equals_linear_on_concatenation():
    rng = np.random.default_rng(1)
    cl = CodedLinear(5, 4, 3, rng)
    cl.bias.data = rng.normal(size=3).astype(np.float32)
    x = rng.normal(size=(2, 7, 5)).astype(np.float32)
    code = sinusoid_code(7, 4)
    ref = np.concatenate([x, np.broadcast_to(code, (2, 7, 4))], axis=-1) @ cl.weight.data + cl.bias.data
    assert np.allclose(cl(Tensor(x), code).data, ref, atol=1e-5)
    # recorded path gives the same numbers
    with Tape():
        out = cl(Tensor(x, requires_grad=True), code)
    assert np.allclose(out.data, ref, atol=1e-5)


def test_coded_linear_cache_follows_weight_edits():
    rng = np.random.default_rng(2)
    cl = CodedLinear(3, 2, 2, rng)
    x = Tensor(rng.normal(size=(4, 3)).astype(np.float32))
    code = sinusoid_code(4, 2)
    first = cl(x, code).data.copy()
    cl.weight.data[3:] += 1.0  # in-place edit of the code rows
    second = cl(x, code).data
    assert not np.allclose(first, second)
    cl.bias.data[:] = 5.0
    assert np.allclose(cl(x, code).data - second, 5.0 - 0.0, atol=1e-5)


def test_coded_linear_gradcheck_reaches_code_rows():
    rng = np.random.default_rng(3)
    cl = CodedLinear(3, 2, 2, rng)
    code = sinusoid_code(4, 2)
    x = Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
    w = rng.normal(size=(4, 2))

    def f(x, W, b):
        cl.weight, cl.bias = W, b
        return (cl(x, code) * w).sum()

    W = Parameter(cl.weight.data.astype(np.float64))
    b = Parameter(rng.normal(size=2))
    assert gradient_check(f, [x, W, b]).max_rel_err < 1e-4


def test_sinusoid_code_bounds_and_read_only():
    c = sinusoid_code(10, 6)
    assert c.shape == (10, 6) and np.all(np.abs(c) <= 1)
    assert np.allclose(c[0, :3], 0) and np.allclose(c[0, 3:], 1)
    with pytest.raises(ValueError):
        c[0, 0] = 2.0
    with pytest.raises(ValueError, match="even"):
        sinusoid_code.__wrapped__(4, 3)


def test_attention_single_key_returns_value_projection():
    rng = np.random.default_rng(4)
    mha = MultiHeadAttention(4, 6, 4, heads=2, rng=rng)
    q = Tensor(rng.normal(size=(5, 4)).astype(np.float32))
    kv = Tensor(rng.normal(size=(1, 6)).astype(np.float32))
    out, attn = mha(q, kv)
    assert np.all(attn == 1.0)
    expected = mha.o(mha.v(kv)).data
    assert np.allclose(out.data, np.broadcast_to(expected, (5, 4)), atol=1e-6)


def test_attention_identical_keys_uniform():
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(4, 4, 4, heads=1, rng=rng)
    kv = Tensor(np.tile(rng.normal(size=(1, 4)), (7, 1)).astype(np.float32))
    _, attn = mha(Tensor(rng.normal(size=(3, 4)).astype(np.float32)), kv)
    assert np.allclose(attn, 1 / 7, atol=1e-7)


def test_attention_rows_normalised_and_batched():
    rng = np.random.default_rng(6)
    mha = MultiHeadAttention(8, 8, 8, heads=2, rng=rng)
    x = Tensor(rng.normal(size=(3, 5, 8)).astype(np.float32))
    out, attn = mha(x, x)
    assert out.shape == (3, 5, 8) and attn.shape == (3, 2, 5, 5)
    assert np.allclose(attn.sum(-1), 1.0, atol=1e-6)


def test_attention_head_dim():
    assert MultiHeadAttention(96, 96, 96, heads=2).head_dim == 48


def test_attention_heads_must_divide_width():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadAttention(8, 8, 8, heads=3)
