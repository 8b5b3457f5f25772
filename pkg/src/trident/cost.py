"""Analytic parameter and FLOP counts for a :class:`ModelConfig`.

FLOP convention: one multiply-accumulate counts as one FLOP (the convention
behind the reported model costs), plus one FLOP per element for every
normalisation, activation, softmax and residual addition. The STFT/iSTFT and
the mask application are not network layers and are excluded. Pass
``mac_flops=2`` for the strict two-FLOPs-per-MAC count.

Attention projections of ``[feature, positional code]`` are counted as the
feature part plus one addition per output element: the code part is an
input-independent table that inference builds once per grid size (see
:class:`trident.nn.CodedLinear`).
"""

from __future__ import annotations

from collections import OrderedDict

from .model import ModelConfig
from .signal import DEFAULT_STFT, SAMPLE_RATE


def _linear(n_in, n_out):
    return n_in * n_out + n_out


def count_params(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars in ``TridentNet(cfg)``."""
    C, K, H, P = cfg.channels, cfg.kernel, cfg.ffn_hidden, cfg.posenc_channels
    ln = 2 * C
    conv_ffn = K * K * C + C + _linear(C, H) + _linear(H, C) + ln
    encoder = (7 * 2 * C + C) + 2 * C + (7 * C * C + C) + 2 * C

    def branch(m):
        if m == 0:
            return 0
        attn = _linear(C + P, C) * 3 + _linear(C, C)
        in_ca = attn + ln
        mix = _linear(m, 2 * m) + _linear(2 * m, m) + ln
        sa = attn + ln
        ffn = _linear(C, H) + _linear(H, C) + ln
        out_ca = attn + ln
        return in_ca + mix + sa + ffn + out_ca

    block = conv_ffn + branch(cfg.tokens_t) + branch(cfg.tokens_f)
    tokens = (cfg.tokens_t + cfg.tokens_f) * C
    decoder = 2 * _linear(C, C) + cfg.decoder_blocks * conv_ffn + _linear(C, 2)
    return encoder + tokens + cfg.blocks * block + decoder


def frames_for(seconds, stft=DEFAULT_STFT):
    n = int(round(seconds * SAMPLE_RATE))
    return stft.n_frames(n), stft.n_bins


def flops_breakdown(cfg: ModelConfig, input_seconds=3.0, mac_flops=1, stft=DEFAULT_STFT, elementwise=True):
    """Per-component FLOP counts for one utterance of ``input_seconds``.

    ``elementwise=False`` leaves out the per-element terms, giving pure
    multiply-accumulate counts (times ``mac_flops``).
    """
    n_t, n_f = frames_for(input_seconds, stft)
    C, K, H = cfg.channels, cfg.kernel, cfg.ffn_hidden
    pos = n_t * n_f
    mac = mac_flops
    ew = 1 if elementwise else 0

    def conv_ffn():
        macs = pos * (K * K * C + C * H + H * C)
        elem = pos * (C + H) + 2 * pos * C  # gelus, residual + norm
        return mac * macs + ew * elem

    def attention(n_groups, n_q, n_k, heads):
        macs = n_groups * (n_q * C * C + 2 * n_k * C * C + 2 * n_q * n_k * C + n_q * C * C)
        elem = n_groups * (n_q * C + 2 * n_k * C)  # positional tables
        elem += n_groups * (heads * n_q * n_k + 2 * n_q * C)  # softmax, residual + norm
        return mac * macs + ew * elem

    def branch(m, kept, reduced, heads_sa):
        if m == 0:
            return 0
        in_ca = attention(kept, m, reduced, cfg.heads_in)
        mix = mac * kept * C * (4 * m * m) + ew * (kept * C * 2 * m + 2 * m * kept * C)
        sa = attention(m, kept, kept, heads_sa)
        ffn = mac * m * kept * 2 * C * H + ew * (m * kept * H + 2 * m * kept * C)
        out_ca = attention(kept, reduced, m, cfg.heads_out)
        return in_ca + mix + sa + ffn + out_ca

    parts = OrderedDict()
    parts["encoder"] = mac * pos * (7 * 2 * C + 7 * C * C) + ew * 4 * pos * C
    block = (
        conv_ffn()
        + branch(cfg.tokens_t, n_f, n_t, cfg.heads_fsa)
        + branch(cfg.tokens_f, n_t, n_f, cfg.heads_tsa)
    )
    parts["blocks"] = cfg.blocks * block
    parts["decoder_gate"] = mac * pos * 2 * C * C + ew * 2 * pos * C
    parts["decoder_ffn"] = cfg.decoder_blocks * conv_ffn()
    parts["decoder_head"] = mac * pos * 2 * C + ew * 4 * pos * 2
    return parts


def estimate_flops(cfg: ModelConfig, input_seconds=3.0, mac_flops=1, stft=DEFAULT_STFT, elementwise=True) -> int:
    return int(sum(flops_breakdown(cfg, input_seconds, mac_flops, stft, elementwise).values()))
