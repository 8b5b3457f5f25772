"""Synthetic speech/noise corpus, SNR mixing and 16-bit PCM WAV I/O."""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .signal import SAMPLE_RATE, Waveform

TARGET_RMS = 0.1
NOISE_KINDS = ("white", "pink", "babble")
VOICEBANK_SNRS = (0.0, 5.0, 10.0, 15.0)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def _normalize(x, rms=TARGET_RMS):
    r = _rms(x)
    if r == 0:
        raise ValueError("cannot normalise an all-zero signal")
    return x * (rms / r)


def _peaking(x, centre, bandwidth, boost, sr):
    """Add a unit-peak 2-pole band-pass copy of ``x`` scaled by ``boost``."""
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * centre / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    # constant-peak-gain band-pass numerator
    b = [(1 - r * r) / 2, 0.0, -(1 - r * r) / 2]
    return x + boost * lfilter(b, a, x)


def _envelope(rng, n, sr):
    """Syllable-rate raised-cosine bumps (2-6 Hz) with occasional silent gaps."""
    env = np.zeros(n)
    pos = 0
    voiced = 0
    while pos < n:
        length = int(sr / rng.uniform(2.0, 6.0))
        end = min(pos + length, n)
        if rng.random() >= 0.25 or voiced == 0:
            k = np.arange(end - pos)
            env[pos:end] = 0.5 - 0.5 * np.cos(2 * np.pi * k / length)
            voiced += 1
        pos = end
    return env


def synth_clean(seed, duration=3.0, f0=None, sr=SAMPLE_RATE):
    """Speech-like test signal: 8-harmonic source, two formant-like resonances,
    syllabic envelope; RMS normalised to 0.1.

    ``f0`` fixes a constant fundamental instead of the bounded random walk.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    if f0 is None:
        ctrl_rate = 100
        n_ctrl = n * ctrl_rate // sr + 2
        walk = rng.uniform(100.0, 220.0) + np.cumsum(rng.normal(0.0, 1.5, n_ctrl))
        walk = np.clip(walk, 80.0, 300.0)
        track = np.interp(np.arange(n) / sr, np.arange(n_ctrl) / ctrl_rate, walk)
    else:
        track = np.full(n, float(f0))
    phase = 2 * np.pi * np.cumsum(track) / sr
    src = sum(np.sin(k * phase) / k for k in range(1, 9))
    y = _peaking(src, rng.uniform(300.0, 800.0), rng.uniform(80.0, 160.0), 0.5, sr)
    y = _peaking(y, rng.uniform(1000.0, 2500.0), rng.uniform(120.0, 240.0), 0.5, sr)
    y = y * _envelope(rng, n, sr)
    return _normalize(y)


def synth_noise(seed, kind, duration=3.0, sr=SAMPLE_RATE):
    """White (Gaussian), pink (-3 dB/octave) or babble (six overlapping talkers)."""
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sr))
    if kind == "white":
        y = rng.normal(size=n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.normal(size=n))
        f = np.fft.rfftfreq(n, 1.0 / sr)
        shape = np.zeros_like(f)
        shape[1:] = 1.0 / np.sqrt(f[1:])
        y = np.fft.irfft(spec * shape, n)
    else:
        seeds = rng.integers(0, 2**31, size=6)
        y = sum(synth_clean(int(s), duration, sr=sr) for s in seeds)
    return _normalize(y)


def signal_power(x):
    return float(np.mean(np.square(x, dtype=np.float64)))


def mix_at_snr(clean, noise, snr_db):
    """``clean + g * noise`` with ``g`` chosen so the mixture has the requested SNR."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError(f"length mismatch: {clean.shape} vs {noise.shape}")
    pc, pn = signal_power(clean), signal_power(noise)
    if pc == 0 or pn == 0:
        raise ValueError("mix_at_snr needs non-zero clean and noise power")
    gain = np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    clean_seed: int
    noise_seed: int
    noise_kind: str = "white"
    duration_s: float = 3.0

    def realize(self):
        """Return ``(noisy, clean, gain)``; the pair is rescaled if the mixture peak exceeds 1."""
        clean = synth_clean(self.clean_seed, self.duration_s)
        noise = synth_noise(self.noise_seed, self.noise_kind, self.duration_s)
        noisy = mix_at_snr(clean, noise, self.snr_db)
        peak = np.max(np.abs(noisy))
        gain = 1.0 if peak <= 1.0 else 0.99 / peak
        return noisy * gain, clean * gain, gain

    def to_line(self):
        return f"{self.clean_seed} {self.noise_seed} {self.noise_kind} {self.snr_db!r} {self.duration_s!r}"

    @classmethod
    def from_line(cls, line):
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"bad manifest record: {line!r}")
        return cls(float(parts[3]), int(parts[0]), int(parts[1]), parts[2], float(parts[4]))


def draw_specs(n, seed, snr_range=(-5.0, 20.0), discrete=None, kinds=NOISE_KINDS, duration=3.0):
    """Draw ``n`` mixtures: SNR uniform on ``snr_range`` or uniform over ``discrete`` levels."""
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n):
        if discrete is not None:
            snr = float(rng.choice(np.asarray(discrete, dtype=float)))
        else:
            snr = float(rng.uniform(*snr_range))
        kind = str(kinds[rng.integers(len(kinds))])
        cs, ns = (int(v) for v in rng.integers(0, 2**31, size=2))
        specs.append(MixSpec(snr, cs, ns, kind, duration))
    return specs


def build_corpus(specs):
    """Stack realised pairs into arrays ``(noisy, clean)`` of shape (n, samples)."""
    pairs = [s.realize() for s in specs]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def write_manifest(path, specs):
    with open(path, "w") as fh:
        fh.write("# clean_seed noise_seed noise_kind snr_db duration_s\n")
        for s in specs:
            fh.write(s.to_line() + "\n")


def read_manifest(path):
    with open(path) as fh:
        return [MixSpec.from_line(line) for line in fh if line.strip() and not line.startswith("#")]


# ---------------------------------------------------------------- WAV


class WavFormatError(ValueError):
    pass


def write_wav(path, w, sample_rate=SAMPLE_RATE):
    """16-bit PCM mono; samples outside [-1, 1) are clipped."""
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    if x.ndim != 1:
        raise WavFormatError("only mono waveforms can be written")
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    try:
        fh = wave.open(os.fspath(path), "rb")
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from None
    with fh:
        channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
        if rate != SAMPLE_RATE:
            raise WavFormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
        if channels != 1:
            raise WavFormatError(f"{path}: {channels} channels, expected mono")
        if width != 2:
            raise WavFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)
