"""Generator losses, the metric discriminator and its training loss.

The discriminator learns to predict a normalised quality score for a
(clean, estimate) pair of compressed magnitude spectrograms. Its score on the
estimate enters the generator objective as ``(1 - D(S, S_hat))^2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import signal as sig
from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    power: float = 0.3
    gan_weight: float = 0.005

    def __post_init__(self):
        if not 0 < self.power <= 1:
            raise ValueError(f"compression power must lie in (0, 1], got {self.power}")
        if self.gan_weight < 0:
            raise ValueError("gan_weight must be non-negative")


@dataclass
class LossReport:
    L_a: float
    L_p: float
    L_w: float
    L_GAN: float
    L: float
    L_D: float | None = None

    def as_dict(self):
        return asdict(self)


def _const(x, dtype):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=dtype))


def compressed_magnitude(real, imag, p, eps=1e-12):
    """``|z|^p`` with ``|z|^2`` guarded by ``eps``."""
    return T.power(real * real + imag * imag + eps, 0.5 * p)


def compressed_complex(real, imag, p, eps=1e-12):
    """``z / |z|^(1-p)``: magnitude compressed to ``|z|^p``, phase kept."""
    gain = T.power(real * real + imag * imag + eps, 0.5 * (p - 1.0))
    return real * gain, imag * gain


def mse(a, b):
    d = a - b
    return (d * d).mean()


class MetricDiscriminator(Module):
    """Four strided conv blocks (8/16/32/64 ch, 3x3, stride 2, LN + GELU),
    global average pooling, two linear layers and a sigmoid."""

    widths = (8, 16, 32, 64)

    def __init__(self, seed=1, hidden=32):
        super().__init__()
        rng = np.random.default_rng(seed)
        c_in = 2
        self.convs = []
        self.norms = []
        for i, c in enumerate(self.widths):
            conv = Conv2d(c_in, c, (3, 3), stride=(2, 2), padding=((1, 1), (1, 1)), rng=rng)
            norm = LayerNorm(c)
            setattr(self, f"conv{i}", conv)
            setattr(self, f"norm{i}", norm)
            self.convs.append(conv)
            self.norms.append(norm)
            c_in = c
        self.fc1 = Linear(c_in, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    @property
    def dtype(self):
        return self.fc1.weight.dtype

    def forward(self, ref_mag, test_mag):
        """Score (B,) for compressed magnitudes ``ref_mag``/``test_mag`` of shape (B, T, F)."""
        ref = _const(ref_mag, self.dtype)
        test = _const(test_mag, self.dtype)
        x = T.concat([T.reshape(ref, ref.shape + (1,)), T.reshape(test, test.shape + (1,))], axis=-1)
        for conv, norm in zip(self.convs, self.norms):
            x = T.gelu(norm(conv(x)))
        x = x.mean(axis=(1, 2))
        x = self.fc2(T.gelu(self.fc1(x)))
        return T.sigmoid(T.reshape(x, (x.shape[0],)))


def generator_losses(est_real, est_imag, clean_real, clean_imag, est_wave, clean_wave,
                     disc: MetricDiscriminator, weights: LossWeights = LossWeights()):
    """Return ``(total, report)``: the differentiable total and a float summary.

    ``est_*`` are tensors (B, T, F) / (B, N); ``clean_*`` are constants. The
    discriminator's parameters are treated as constants here: callers freeze
    them (``requires_grad_(False)``) so only the generator receives gradients.
    """
    if est_real.shape != tuple(np.shape(clean_real)) or est_wave.shape != tuple(np.shape(clean_wave)):
        raise ValueError("estimate and reference shapes differ")
    dtype = est_real.dtype
    p = weights.power
    cr, ci = _const(clean_real, dtype), _const(clean_imag, dtype)
    cw = _const(clean_wave, dtype)

    est_mag = compressed_magnitude(est_real, est_imag, p)
    clean_mag = compressed_magnitude(cr, ci, p)
    loss_a = mse(est_mag, clean_mag)
    er, ei = compressed_complex(est_real, est_imag, p)
    sr, si = compressed_complex(cr, ci, p)
    loss_p = (mse(er, sr) + mse(ei, si)) * 0.5
    loss_w = mse(est_wave, cw)

    if weights.gan_weight > 0:
        score = disc(clean_mag, est_mag)
    else:
        score = disc(clean_mag.detach(), est_mag.detach())
    resid = 1.0 - score
    loss_gan = (resid * resid).mean()
    total = (loss_a + loss_p + loss_w) * (1.0 / 3.0)
    if weights.gan_weight > 0:
        total = total + loss_gan * weights.gan_weight
    report = LossReport(
        float(loss_a.data), float(loss_p.data), float(loss_w.data), float(loss_gan.data), float(total.data)
    )
    return total, report


def discriminator_loss(d_clean: Tensor, d_est: Tensor, q) -> Tensor:
    """Batch mean of ``(1 - D(S,S))^2 + (Q - D(S,S_hat))^2``; ``q`` is a constant."""
    q = _const(q, d_est.dtype)
    a = 1.0 - d_clean
    b = q - d_est
    return (a * a + b * b).mean()


def quality_proxy(est, ref):
    """Normalised quality in [0, 1] from SI-SNR: ``clip((si_snr + 10) / 40, 0, 1)``."""
    return np.clip((sig.si_snr(est, ref) + 10.0) / 40.0, 0.0, 1.0)


QualityFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
