"""The three-branch enhancement network.

Feature maps are channels-last. The main stream is (B, T, F, C); the
time-global stream is (B, M_T, F, C) and the frequency-global stream is
(B, M_F, T, C). Each companion branch works on "groups" along the axis it
keeps at full resolution (F for the time-global branch, T for the
frequency-global branch) and attends over the axis it compresses.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import signal as sig
from . import tensor as T
from .capture import AttentionCapture
from .nn import (
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    kaiming_uniform,
    normal_init,
    sinusoid_code,
)
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 96
    kernel: int = 7
    tokens_t: int = 16
    tokens_f: int = 16
    blocks: int = 3
    decoder_blocks: int = 4
    heads_tsa: int = 2
    heads_fsa: int = 2
    heads_in: int = 3
    heads_out: int = 3
    ffn_hidden: int = 96
    posenc_channels: int = 64
    out_ca_order: str = "tf"
    input_power: float = 0.3

    def __post_init__(self):
        self.validate()

    def validate(self):
        C = self.channels
        if C < 1:
            raise ValueError("channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd size, got {self.kernel}")
        for name in ("tokens_t", "tokens_f", "blocks", "decoder_blocks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("heads_tsa", "heads_fsa", "heads_in", "heads_out"):
            h = getattr(self, name)
            if h < 1 or C % h:
                raise ValueError(f"channels={C} is not divisible by {name}={h}")
        if self.ffn_hidden < 1:
            raise ValueError("ffn_hidden must be positive")
        if self.posenc_channels < 4 or self.posenc_channels % 4:
            raise ValueError("posenc_channels must be a positive multiple of 4")
        if sorted(self.out_ca_order) != ["f", "t"]:
            raise ValueError("out_ca_order must be 'tf' or 'ft'")
        if not 0 < self.input_power <= 1:
            raise ValueError("input_power must lie in (0, 1]")

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "S": ModelConfig(blocks=2, decoder_blocks=2),
    "M": ModelConfig(),
    "L": ModelConfig(blocks=7, decoder_blocks=8),
    "G1": ModelConfig(tokens_t=0, tokens_f=0, blocks=6, decoder_blocks=6),
    "tiny": ModelConfig(
        channels=16, kernel=3, tokens_t=4, tokens_f=4, blocks=1, decoder_blocks=1,
        heads_tsa=2, heads_fsa=2, heads_in=2, heads_out=2, ffn_hidden=32,
    ),
    "toy": ModelConfig(
        channels=8, kernel=3, tokens_t=2, tokens_f=2, blocks=1, decoder_blocks=1,
        heads_tsa=1, heads_fsa=1, heads_in=1, heads_out=1, ffn_hidden=8, posenc_channels=4,
    ),
}


@functools.lru_cache(maxsize=16)
def posenc_2d(n_time, n_freq, channels=64):
    """Sinusoidal 2D code (T, F, channels): first half encodes t, second half f.

    The result is cached and read-only.
    """
    if channels % 4:
        raise ValueError("2D positional code needs channels divisible by 4")
    half = channels // 2
    t_code = sinusoid_code(n_time, half)
    f_code = sinusoid_code(n_freq, half)
    out = np.empty((n_time, n_freq, channels))
    out[:, :, :half] = t_code[:, None, :]
    out[:, :, half:] = f_code[None, :, :]
    out.flags.writeable = False
    return out


@functools.lru_cache(maxsize=16)
def _posenc_ft(n_time, n_freq, channels):
    return posenc_2d(n_time, n_freq, channels).transpose(1, 0, 2)


@functools.lru_cache(maxsize=16)
def _group_code(n_groups, channels):
    """Code of the kept axis, (G, 1, channels), broadcast over tokens."""
    return sinusoid_code(n_groups, channels)[:, None, :]


class Pointwise(Linear):
    """1x1 convolution, i.e. a per-position channel map with conv initialisation."""

    def __init__(self, n_in, n_out, rng):
        super().__init__(n_in, n_out, rng)
        self.weight.data = kaiming_uniform(rng, (n_in, n_out), n_in)


class ConvFFN(Module):
    """Depthwise KxK -> GELU -> 1x1 to hidden -> GELU -> 1x1 back, residual + post LN."""

    def __init__(self, channels, kernel, hidden, rng):
        super().__init__()
        self.dw = DepthwiseConv2d(channels, kernel, rng)
        self.pw1 = Pointwise(channels, hidden, rng)
        self.pw2 = Pointwise(hidden, channels, rng)
        self.norm = LayerNorm(channels)

    def forward(self, x):
        h = T.gelu(self.dw(x))
        h = T.gelu(self.pw1(h))
        return self.norm(x + self.pw2(h))


class FFN(Module):
    def __init__(self, channels, hidden, rng):
        super().__init__()
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.norm = LayerNorm(channels)

    def forward(self, x):
        return self.norm(x + self.fc2(T.gelu(self.fc1(x))))


class TokenMix(Module):
    """Two-layer map across the token axis (axis 1), shared over the other axes."""

    def __init__(self, tokens, channels, rng):
        super().__init__()
        self.fc1 = Linear(tokens, 2 * tokens, rng)
        self.fc2 = Linear(2 * tokens, tokens, rng)
        self.norm = LayerNorm(channels)

    def forward(self, x):
        h = T.transpose(x, (0, 2, 3, 1))
        h = self.fc2(T.gelu(self.fc1(h)))
        return self.norm(x + T.transpose(h, (0, 3, 1, 2)))


class AxisSelfAttention(Module):
    """Self-attention along axis 2 of (B, A, N, C), independently for each A."""

    def __init__(self, channels, heads, code_channels, rng):
        super().__init__()
        self.attn = MultiHeadAttention(channels, channels, channels, heads, rng, code_channels, code_channels)
        self.norm = LayerNorm(channels)

    def forward(self, x, code):
        out, weights = self.attn(x, x, code, code)
        return self.norm(x + out), weights


class CrossAttention(Module):
    """Attention from a query stream to a key/value stream, residual + post LN on the queries."""

    def __init__(self, channels, heads, code_channels, rng):
        super().__init__()
        P = code_channels
        self.attn = MultiHeadAttention(channels, channels, channels, heads, rng, P, P)
        self.norm = LayerNorm(channels)

    def forward(self, queries, keys_values, q_code, kv_code):
        out, weights = self.attn(queries, keys_values, q_code, kv_code)
        return self.norm(queries + out), weights


class GlobalBranch(Module):
    """One companion branch, written for the time-global orientation.

    ``tokens`` is (B, M, G, C) where G is the kept axis; the main feature is
    supplied grouped as (B, G, N, C) with N the axis being summarised, along
    with its positional code (G, N, P). Every attention input carries a
    positional code: the 2D code on the main grid and the kept-axis code on
    the tokens.
    """

    def __init__(self, cfg: ModelConfig, n_tokens, heads_sa, rng):
        super().__init__()
        C, P = cfg.channels, cfg.posenc_channels
        self.in_ca = CrossAttention(C, cfg.heads_in, P, rng)
        self.mix = TokenMix(n_tokens, C, rng)
        self.sa = AxisSelfAttention(C, heads_sa, P, rng)
        self.ffn = FFN(C, cfg.ffn_hidden, rng)
        self.out_ca = CrossAttention(C, cfg.heads_out, P, rng)
        self.code_channels = P

    def process(self, tokens, main_g, pe_g, capture=None, tag=None):
        G = tokens.shape[2]
        code = _group_code(G, self.code_channels)
        x, w_in = self.in_ca(T.transpose(tokens, (0, 2, 1, 3)), main_g, code, pe_g)
        x = T.transpose(x, (0, 2, 1, 3))
        x = self.mix(x)
        x, w_sa = self.sa(x, sinusoid_code(G, self.code_channels))
        x = self.ffn(x)
        if capture is not None:
            capture.add(tag[0], tag[1], "in_ca", w_in)
            capture.add(tag[0], tag[1], "sa", w_sa)
        return x

    def inject(self, main_g, pe_g, tokens, capture=None, tag=None):
        G = tokens.shape[2]
        code = _group_code(G, self.code_channels)
        out, w_out = self.out_ca(main_g, T.transpose(tokens, (0, 2, 1, 3)), pe_g, code)
        if capture is not None:
            capture.add(tag[0], tag[1], "out_ca", w_out)
        return out


class TridentBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.conv_ffn = ConvFFN(cfg.channels, cfg.kernel, cfg.ffn_hidden, rng)
        self.t_branch = GlobalBranch(cfg, cfg.tokens_t, cfg.heads_fsa, rng) if cfg.tokens_t else None
        self.f_branch = GlobalBranch(cfg, cfg.tokens_f, cfg.heads_tsa, rng) if cfg.tokens_f else None

    def forward(self, main, t_global, f_global, capture=None, index=0):
        """Advance (main, t_global, f_global) by one block."""
        main = self.conv_ffn(main)
        _, n_t, n_f, _ = main.shape
        P = self.cfg.posenc_channels
        pe_tf = posenc_2d(n_t, n_f, P)
        pe_ft = _posenc_ft(n_t, n_f, P)
        if self.t_branch is not None:
            main_ft = T.transpose(main, (0, 2, 1, 3))
            t_global = self.t_branch.process(t_global, main_ft, pe_ft, capture, (index, "t"))
        if self.f_branch is not None:
            f_global = self.f_branch.process(f_global, main, pe_tf, capture, (index, "f"))
        for which in self.cfg.out_ca_order:
            if which == "t" and self.t_branch is not None:
                main_ft = T.transpose(main, (0, 2, 1, 3))
                main_ft = self.t_branch.inject(main_ft, pe_ft, t_global, capture, (index, "t"))
                main = T.transpose(main_ft, (0, 2, 1, 3))
            elif which == "f" and self.f_branch is not None:
                main = self.f_branch.inject(main, pe_tf, f_global, capture, (index, "f"))
        return main, t_global, f_global


class Encoder(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.conv1 = Conv2d(2, channels, (1, 7), rng=rng)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv2d(channels, channels, (7, 1), rng=rng)
        self.bn2 = BatchNorm(channels)

    def forward(self, x):
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


def bounded_mask(z: Tensor, eps=1e-12) -> Tensor:
    """Map raw complex values (..., 2) to ``tanh(|z|) * z / |z|``; z = 0 gives 0."""
    r = T.sqrt((z * z).sum(axis=-1, keepdims=True) + eps)
    return z * (T.tanh(r) / r)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        C = cfg.channels
        self.gate_a = Pointwise(C, C, rng)
        self.gate_b = Pointwise(C, C, rng)
        self.stack = [ConvFFN(C, cfg.kernel, cfg.ffn_hidden, rng) for _ in range(cfg.decoder_blocks)]
        for i, m in enumerate(self.stack):
            setattr(self, f"ffn{i}", m)
        self.head = Linear(C, 2, rng)

    def forward(self, x):
        x = self.gate_a(x) * T.sigmoid(self.gate_b(x))
        for m in self.stack:
            x = m(x)
        return bounded_mask(self.head(x))


@dataclass
class Enhanced:
    """Outputs of one forward pass; ``wave`` and ``spec_*`` are (B, ...) tensors."""

    wave: Tensor
    spec_real: Tensor
    spec_imag: Tensor
    mask: Tensor
    noisy: sig.ComplexSpectrogram
    capture: AttentionCapture | None = None


class TridentNet(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed=0, stft_config=sig.DEFAULT_STFT):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stft_config = stft_config
        rng = np.random.default_rng(seed)
        C = cfg.channels
        self.encoder = Encoder(C, rng)
        if cfg.tokens_t:
            self.tokens_t = Parameter(normal_init(rng, (cfg.tokens_t, C)))
        if cfg.tokens_f:
            self.tokens_f = Parameter(normal_init(rng, (cfg.tokens_f, C)))
        self.blocks = [TridentBlock(cfg, rng) for _ in range(cfg.blocks)]
        for i, b in enumerate(self.blocks):
            setattr(self, f"block{i}", b)
        self.decoder = Decoder(cfg, rng)

    @property
    def dtype(self):
        return self.encoder.conv1.weight.dtype

    def _init_tokens(self, bank, batch, n_kept):
        if bank is None:
            return None
        M, C = bank.shape
        return T.broadcast_to(T.reshape(bank, (1, M, 1, C)), (batch, M, n_kept, C))

    def backbone(self, feat, capture=None):
        B, n_t, n_f, _ = feat.shape
        t_global = self._init_tokens(getattr(self, "tokens_t", None), B, n_f)
        f_global = self._init_tokens(getattr(self, "tokens_f", None), B, n_t)
        for i, block in enumerate(self.blocks):
            feat, t_global, f_global = block(feat, t_global, f_global, capture, i)
        return feat

    def predict_mask(self, noisy_spec: sig.ComplexSpectrogram, capture=None) -> Tensor:
        comp = sig.power_compress(noisy_spec, self.cfg.input_power)
        x = Tensor._wrap(np.stack([comp.real, comp.imag], axis=-1).astype(self.dtype))
        feat = self.encoder(x)
        feat = self.backbone(feat, capture)
        return self.decoder(feat)

    def forward(self, noisy, capture=False) -> Enhanced:
        """Enhance a batch of waveforms (B, N) (a single (N,) waveform is promoted)."""
        x = np.asarray(noisy.samples if isinstance(noisy, sig.Waveform) else noisy)
        if x.ndim == 1:
            x = x[None]
        n = x.shape[-1]
        spec = sig.stft(x, self.stft_config, dtype=self.dtype)
        cap = AttentionCapture() if capture else None
        mask = self.predict_mask(spec, cap)
        xr = Tensor._wrap(spec.real)
        xi = Tensor._wrap(spec.imag)
        mr = mask[..., 0]
        mi = mask[..., 1]
        est_r = mr * xr - mi * xi
        est_i = mr * xi + mi * xr
        wave = sig.istft_tensor(est_r, est_i, n, self.stft_config)
        return Enhanced(wave, est_r, est_i, mask, spec, cap)


def model_forward(noisy, model: TridentNet, capture=False) -> Enhanced:
    return model.forward(noisy, capture=capture)
