import numpy as np
import pytest

from trident import tensor as T
from trident.gan import LossWeights, MetricDiscriminator, generator_losses
from trident.gradcheck import gradient_check
from trident.model import (
    PRESETS,
    AxisSelfAttention,
    ConvFFN,
    Encoder,
    ModelConfig,
    TokenMix,
    TridentBlock,
    TridentNet,
    bounded_mask,
    model_forward,
    posenc_2d,
)
from trident.nn import sinusoid_code
from trident.signal import stft
from trident.tensor import Tape, Tensor

from _helpers import duality_gap

TINY = PRESETS["tiny"]


def f32(rng, *shape):
    return Tensor(rng.normal(size=shape).astype(np.float32))


# ---------------------------------------------------------------- positional code


def test_posenc_origin():
    pe = posenc_2d(300, 163, 64)
    q = 16  # sin/cos split inside each 32-channel half
    assert np.all(pe[0, 0, :q] == 0) and np.all(pe[0, 0, 2 * q : 3 * q] == 0)
    assert np.all(pe[0, 0, q : 2 * q] == 1) and np.all(pe[0, 0, 3 * q :] == 1)


def test_posenc_bounded_and_distinct():
    pe = posenc_2d(300, 163, 64)
    assert pe.shape == (300, 163, 64)
    assert np.abs(pe).max() <= 1.0
    flat = pe.reshape(-1, 64)
    assert len(np.unique(flat, axis=0)) == 300 * 163
    # distinct by a margin: the per-axis codes are well separated
    for n in (300, 163):
        c = sinusoid_code(n, 32)
        d = np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(n) * 10
        assert d.min() > 1e-2


def test_posenc_rejects_bad_width():
    with pytest.raises(ValueError):
        posenc_2d.__wrapped__(4, 4, 6)


# ---------------------------------------------------------------- encoder / conv-ffn


def test_encoder_shape_and_nonnegative():
    rng = np.random.default_rng(0)
    enc = Encoder(96, rng)
    out = enc(f32(rng, 1, 20, 163, 2))
    assert out.shape == (1, 20, 163, 96)
    assert out.data.min() >= 0


def test_encoder_zero_input_zero_output():
    enc = Encoder(8, np.random.default_rng(0))
    assert not enc(Tensor(np.zeros((2, 5, 7, 2), np.float32))).data.any()


def test_conv_ffn_zero_branch_is_layer_norm():
    rng = np.random.default_rng(1)
    m = ConvFFN(6, 3, 12, rng)
    for p in m.parameters():
        if p is not m.norm.gamma and p is not m.norm.beta:
            p.data[...] = 0
    x = f32(rng, 1, 4, 5, 6)
    assert np.allclose(m(x).data, m.norm(x).data)
    assert m(x).shape == x.shape


def test_conv_ffn_gradcheck():
    rng = np.random.default_rng(2)
    m = ConvFFN(3, 3, 4, rng)
    x = Tensor(rng.normal(size=(1, 4, 3, 3)))
    w = rng.normal(size=x.shape)
    r = gradient_check(lambda x, *ps: (m(x) * w).sum(), [x] + m.parameters())
    assert r.max_rel_err < 1e-4


# ---------------------------------------------------------------- companion-branch parts


def test_token_mix_single_token():
    rng = np.random.default_rng(3)
    m = TokenMix(1, 4, rng)
    x = f32(rng, 1, 1, 3, 4)
    a, b = m.fc1.weight.data, m.fc2.weight.data
    h = x.data[..., None]  # (1,1,3,4,1): the token axis moved last
    mixed = T.gelu(Tensor(h @ a + m.fc1.bias.data)).data @ b + m.fc2.bias.data
    ref = m.norm(Tensor(x.data + mixed[..., 0])).data
    assert np.allclose(m(x).data, ref, atol=1e-6)


def test_token_mix_zero_input():
    m = TokenMix(3, 4, np.random.default_rng(4))
    m.norm.beta.data[:] = 0.25
    out = m(Tensor(np.zeros((1, 3, 2, 4), np.float32))).data
    assert np.allclose(out, 0.25)


def test_token_mix_gradcheck():
    rng = np.random.default_rng(5)
    m = TokenMix(3, 4, rng)
    x = Tensor(rng.normal(size=(1, 3, 2, 4)))
    # fc2's bias shifts whole tokens, which the layer norm removes: its exact
    # gradient is 0, so the readout is kept small to hold the difference
    # round-off well under the 1e-8 comparison floor
    w = rng.normal(size=x.shape) * 1e-3
    assert gradient_check(lambda x, *ps: (m(x) * w).sum(), [x] + m.parameters()).max_rel_err < 1e-4


def test_axis_attention_length_one():
    rng = np.random.default_rng(6)
    sa = AxisSelfAttention(8, 2, 4, rng)
    x = f32(rng, 1, 3, 1, 8)
    code = sinusoid_code(1, 4)
    out, w = sa(x, code)
    assert np.all(w == 1.0)
    proj = sa.attn.o(sa.attn.v(x, code)).data
    assert np.allclose(out.data, sa.norm(Tensor(x.data + proj)).data, atol=1e-6)


def test_axis_attention_rows_sum_to_one():
    rng = np.random.default_rng(7)
    sa = AxisSelfAttention(96, 2, 8, rng)
    assert sa.attn.head_dim == 48
    _, w = sa(f32(rng, 1, 3, 9, 96), sinusoid_code(9, 8))
    assert np.allclose(w.sum(-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- block


def test_block_shapes():
    rng = np.random.default_rng(8)
    block = TridentBlock(TINY, rng)
    main, tg, fg = f32(rng, 2, 7, 5, 16), f32(rng, 2, 4, 5, 16), f32(rng, 2, 4, 7, 16)
    m, t, f = block(main, tg, fg)
    assert (m.shape, t.shape, f.shape) == (main.shape, tg.shape, fg.shape)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_duality(seed):
    assert duality_gap(TINY, seed) < 1e-5


def test_duality_needs_tied_parameters():
    # control: without tying the branches the outputs differ substantially
    rng = np.random.default_rng(0)
    block = TridentBlock(TINY, rng)
    main = rng.normal(size=(1, 6, 5, 16)).astype(np.float32)
    tg = rng.normal(size=(1, 4, 5, 16)).astype(np.float32)
    fg = rng.normal(size=(1, 4, 6, 16)).astype(np.float32)
    _, _, f_out = block(Tensor(main), Tensor(tg), Tensor(fg))
    _, t_out, _ = block(Tensor(main.transpose(0, 2, 1, 3)), Tensor(fg), Tensor(tg))
    assert np.max(np.abs(t_out.data - f_out.data)) > 1e-2


def test_out_ca_order_is_configurable():
    rng = np.random.default_rng(9)
    a = TridentBlock(TINY, np.random.default_rng(1))
    b = TridentBlock(TINY.replace(out_ca_order="ft"), np.random.default_rng(1))
    args = (f32(rng, 1, 4, 3, 16), f32(rng, 1, 4, 3, 16), f32(rng, 1, 4, 4, 16))
    assert not np.allclose(a(*args)[0].data, b(*args)[0].data)


# ---------------------------------------------------------------- mask


def test_bounded_mask_examples():
    z = Tensor(np.array([[0.0, 0.0], [100.0, 0.0], [3.0, -4.0]]), dtype=np.float64)
    m = bounded_mask(z).data
    assert np.all(m[0] == 0)
    assert np.allclose(m[1], [1.0, 0.0])
    assert np.hypot(*m[2]) == pytest.approx(np.tanh(5.0))


def test_mask_bound_random_weights():
    rng = np.random.default_rng(10)
    for seed in range(5):
        net = TridentNet(TINY, seed=seed)
        for p in net.decoder.head.parameters():
            p.data = p.data * 300.0
        out = net(rng.normal(0, 0.3, size=(1, 1600)))
        mag = np.hypot(out.mask.data[..., 0], out.mask.data[..., 1])
        assert mag.max() <= 1 + 1e-6


# ---------------------------------------------------------------- full network


def test_output_length_matches_input():
    net = TridentNet(TINY, seed=0)
    for n in (320, 1001, 4000):
        out = model_forward(np.random.default_rng(n).normal(0, 0.1, n), net)
        assert out.wave.shape == (1, n)


def test_forward_is_deterministic():
    x = np.random.default_rng(0).normal(0, 0.1, (2, 1600))
    a = TridentNet(TINY, seed=3)(x).wave.data
    b = TridentNet(TINY, seed=3)(x).wave.data
    assert a.tobytes() == b.tobytes()


def test_eval_mode_is_batch_independent():
    net = TridentNet(TINY, seed=0)
    x = np.random.default_rng(1).normal(0, 0.1, (3, 1600))
    net(x)
    net.eval()
    both = net(x).wave.data
    one = net(x[1:2]).wave.data
    assert np.allclose(both[1], one[0], atol=1e-5)


def test_gradient_reaches_every_parameter():
    net = TridentNet(TINY, seed=0)
    disc = MetricDiscriminator(seed=1).requires_grad_(False)
    rng = np.random.default_rng(2)
    clean = rng.normal(0, 0.1, (2, 1600))
    noisy = clean + rng.normal(0, 0.05, clean.shape)
    ref = stft(clean, dtype=np.float32)
    with Tape() as tape:
        out = net(noisy)
        total, _ = generator_losses(out.spec_real, out.spec_imag, ref.real, ref.imag, out.wave, clean,
                                    disc, LossWeights())
    tape.backward(total)
    dead = [n for n, p in net.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_parameter_count_of_m_model():
    assert TridentNet(PRESETS["M"]).num_parameters() == pytest.approx(1.42e6, rel=0.15)


def test_g1_runs_without_companion_branches():
    net = TridentNet(PRESETS["G1"].replace(channels=8, heads_tsa=1, heads_fsa=1, heads_in=1, heads_out=1,
                                           ffn_hidden=8, blocks=2, decoder_blocks=1))
    assert not any("branch" in n or "tokens" in n for n, _ in net.named_parameters())
    cap = net(np.random.default_rng(0).normal(0, 0.1, 800), capture=True).capture
    assert cap.weights == {}


def test_capture_covers_all_attention():
    net = TridentNet(TINY, seed=0)
    cap = net(np.random.default_rng(0).normal(0, 0.1, 1600), capture=True).capture
    kinds = sorted(cap.weights)
    assert kinds == sorted((0, b, k) for b in "tf" for k in ("in_ca", "sa", "out_ca"))
    for w in cap.weights.values():
        assert np.allclose(w.sum(-1), 1.0, atol=1e-5)


@pytest.mark.parametrize(
    "kw, msg",
    [
        (dict(kernel=4), "odd"),
        (dict(channels=96, heads_in=5), "divisible"),
        (dict(posenc_channels=6), "multiple of 4"),
        (dict(blocks=-1), "non-negative"),
        (dict(out_ca_order="tt"), "out_ca_order"),
    ],
)
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = PRESETS["S"]
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"chanels": 3})


def test_presets_match_architecture_table():
    m, s, l = PRESETS["M"], PRESETS["S"], PRESETS["L"]
    assert (m.channels, m.kernel, m.tokens_t, m.tokens_f, m.blocks, m.decoder_blocks) == (96, 7, 16, 16, 3, 4)
    assert (m.heads_tsa, m.heads_fsa, m.heads_in, m.heads_out) == (2, 2, 3, 3)
    assert (s.blocks, s.decoder_blocks) == (2, 2)
    assert (l.blocks, l.decoder_blocks) == (7, 8)
    assert (PRESETS["G1"].tokens_t, PRESETS["G1"].tokens_f) == (0, 0)
