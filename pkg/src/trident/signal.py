"""STFT analysis/synthesis, power compression, complex masking and SI-SNR.

Framing: periodic Hann window of 320 samples (20 ms at 16 kHz), hop 160,
each windowed frame zero-padded to a 324-point DFT, 163 bins kept. The
signal is reflect-padded and framed so that ``T = ceil(N / hop)`` and frame
``t`` is centred on sample ``t * hop + hop / 2``; with this alignment every
output sample is covered by at least one window value >= 0.5, which keeps
the overlap-add normalisation well conditioned at both ends.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SAMPLE_RATE = 16000
FRAME_LEN = 320
HOP = 160
FFT_SIZE = 324


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = FRAME_LEN
    hop: int = HOP
    fft_size: int = FFT_SIZE
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must be at least frame_len")
        if self.frame_len % self.hop or (self.frame_len - self.hop) % 2:
            raise ValueError("frame_len must be a multiple of hop with an even overlap")

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    @property
    def offset(self):
        return (self.frame_len - self.hop) // 2

    def n_frames(self, n_samples):
        return -(-n_samples // self.hop)


DEFAULT_STFT = StftConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[-1]


@dataclass
class ComplexSpectrogram:
    """Complex T-F planes, shape (..., T, F), with the framing that produced them."""

    real: np.ndarray
    imag: np.ndarray
    length: int
    config: StftConfig = DEFAULT_STFT

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real/imag shapes differ: {self.real.shape} vs {self.imag.shape}")
        if self.real.shape[-1] != self.config.n_bins:
            raise ValueError(f"expected {self.config.n_bins} bins, got {self.real.shape[-1]}")

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self):
        return self.real + 1j * self.imag

    def magnitude(self):
        return np.hypot(self.real, self.imag)


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


@functools.lru_cache(maxsize=8)
def _bases(cfg: StftConfig, dtype):
    n = np.arange(cfg.frame_len)[:, None]
    k = np.arange(cfg.n_bins)[None, :]
    ang = 2 * np.pi * n * k / cfg.fft_size
    win = hann(cfg.frame_len)
    # analysis: window folded into the DFT rows
    fwd_re = win[:, None] * np.cos(ang)
    fwd_im = -win[:, None] * np.sin(ang)
    # synthesis: one-sided inverse DFT restricted to the first frame_len outputs
    scale = np.full(cfg.n_bins, 2.0)
    scale[0] = 1.0
    if cfg.fft_size % 2 == 0:
        scale[-1] = 1.0
    inv_re = (scale[:, None] * np.cos(ang.T)) / cfg.fft_size
    inv_im = -(scale[:, None] * np.sin(ang.T)) / cfg.fft_size
    out = [fwd_re, fwd_im, inv_re, inv_im, win]
    return tuple(np.ascontiguousarray(a, dtype=dtype) for a in out)


@functools.lru_cache(maxsize=32)
def _envelope(cfg: StftConfig, n_frames, dtype):
    win = hann(cfg.frame_len)
    env = _overlap_add(np.broadcast_to(win * win, (1, n_frames, cfg.frame_len)), cfg.hop)[0]
    return env.astype(dtype)


def _overlap_add(frames, hop):
    *lead, n_frames, frame_len = frames.shape
    r = frame_len // hop
    out = np.zeros(tuple(lead) + ((n_frames + r - 1) * hop,), dtype=frames.dtype)
    for j in range(r):
        chunk = frames[..., j * hop : (j + 1) * hop].reshape(tuple(lead) + (n_frames * hop,))
        out[..., j * hop : (j + n_frames) * hop] += chunk
    return out


def _frame(padded, n_frames, cfg):
    view = np.lib.stride_tricks.sliding_window_view(padded, cfg.frame_len, axis=-1)
    return view[..., : (n_frames - 1) * cfg.hop + 1 : cfg.hop, :]


def _pad(x, cfg):
    n = x.shape[-1]
    n_frames = cfg.n_frames(n)
    left = cfg.offset
    right = (n_frames - 1) * cfg.hop + cfg.frame_len - n - left
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return np.pad(x, pad, mode="reflect"), n_frames


def stft(w, cfg: StftConfig = DEFAULT_STFT, dtype=np.float64) -> ComplexSpectrogram:
    """Short-time DFT of a waveform (or array of shape (..., N))."""
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=dtype)
    n = x.shape[-1]
    if n < cfg.frame_len:
        raise ValueError(f"waveform of {n} samples is shorter than one frame ({cfg.frame_len})")
    fwd_re, fwd_im, *_ = _bases(cfg, np.dtype(dtype))
    padded, n_frames = _pad(x, cfg)
    frames = _frame(padded, n_frames, cfg)
    return ComplexSpectrogram(frames @ fwd_re, frames @ fwd_im, n, cfg)


def istft(spec, target_len=None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``target_len``."""
    cfg = spec.config
    target_len = spec.length if target_len is None else target_len
    dtype = spec.real.dtype
    _, _, inv_re, inv_im, win = _bases(cfg, dtype)
    frames = (spec.real @ inv_re + spec.imag @ inv_im) * win
    n_frames = frames.shape[-2]
    env = _envelope(cfg, n_frames, dtype)
    sl = slice(cfg.offset, cfg.offset + target_len)
    if np.any(env[sl] <= 0):
        raise ZeroDivisionError("overlap-add normalisation vanishes inside the output range")
    return _overlap_add(frames, cfg.hop)[..., sl] / env[sl]


def istft_tensor(real: Tensor, imag: Tensor, target_len: int, cfg: StftConfig = DEFAULT_STFT) -> Tensor:
    """Differentiable :func:`istft` on (B, T, F) tensors; returns (B, target_len)."""
    dtype = real.dtype
    _, _, inv_re, inv_im, win = _bases(cfg, dtype)
    n_frames = real.shape[-2]
    env = _envelope(cfg, n_frames, dtype)
    sl = slice(cfg.offset, cfg.offset + target_len)
    if np.any(env[sl] <= 0):
        raise ZeroDivisionError("overlap-add normalisation vanishes inside the output range")
    frames = (real.data @ inv_re + imag.data @ inv_im) * win
    out = _overlap_add(frames, cfg.hop)[..., sl] / env[sl]
    full_len = env.shape[0]

    def backward(g):
        gp = np.zeros(g.shape[:-1] + (full_len,), dtype=g.dtype)
        gp[..., sl] = g / env[sl]
        gf = _frame(gp, n_frames, cfg) * win
        return gf @ inv_re.T, gf @ inv_im.T

    return T._make("istft", out, (real, imag), backward)


def _power(spec, e, eps):
    mag = np.hypot(spec.real, spec.imag)
    gain = np.where(mag > eps, np.maximum(mag, eps) ** (e - 1), 0.0)
    return ComplexSpectrogram(spec.real * gain, spec.imag * gain, spec.length, spec.config)


def power_compress(spec: ComplexSpectrogram, p=0.3, eps=1e-12) -> ComplexSpectrogram:
    """Raise magnitudes to ``p`` keeping the phase; zero bins stay zero."""
    if not 0 < p <= 1:
        raise ValueError(f"compression power must lie in (0, 1], got {p}")
    return _power(spec, p, eps)


def power_decompress(spec: ComplexSpectrogram, p=0.3, eps=1e-12) -> ComplexSpectrogram:
    """Inverse of :func:`power_compress` with the same ``p``."""
    if not 0 < p <= 1:
        raise ValueError(f"compression power must lie in (0, 1], got {p}")
    return _power(spec, 1.0 / p, eps)


def apply_complex_mask(noisy: ComplexSpectrogram, mask) -> ComplexSpectrogram:
    """Bin-wise complex product of ``mask`` (..., T, F, 2) with ``noisy``."""
    mask = np.asarray(mask)
    if mask.shape != noisy.shape + (2,):
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {noisy.shape} + (2,)")
    mr, mi = mask[..., 0], mask[..., 1]
    real = mr * noisy.real - mi * noisy.imag
    imag = mr * noisy.imag + mi * noisy.real
    return ComplexSpectrogram(real, imag, noisy.length, noisy.config)


SI_SNR_CAP = 60.0


def si_snr(est, ref, cap=SI_SNR_CAP):
    """Scale-invariant SNR in dB over the last axis, capped at ``cap``."""
    est = np.asarray(est.samples if isinstance(est, Waveform) else est, dtype=np.float64)
    ref = np.asarray(ref.samples if isinstance(ref, Waveform) else ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean(axis=-1, keepdims=True)
    ref = ref - ref.mean(axis=-1, keepdims=True)
    ref_pow = np.sum(ref * ref, axis=-1, keepdims=True)
    if np.any(ref_pow == 0):
        raise ValueError("SI-SNR is undefined for an all-zero reference")
    target = np.sum(est * ref, axis=-1, keepdims=True) / ref_pow * ref
    noise = est - target
    t_pow = np.sum(target * target, axis=-1)
    n_pow = np.sum(noise * noise, axis=-1)
    with np.errstate(divide="ignore"):
        val = 10 * np.log10(t_pow / np.maximum(n_pow, 1e-300))
    val = np.where(n_pow <= 1e-30 * np.maximum(t_pow, 1e-300), cap, val)
    return np.minimum(val, cap)
