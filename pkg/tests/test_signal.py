import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trident.signal import (
    DEFAULT_STFT,
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    apply_complex_mask,
    hann,
    istft,
    power_compress,
    power_decompress,
    si_snr,
    stft,
)

N3 = 48000


def rel_l2(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_zero_signal_gives_zero_spectrogram():
    spec = stft(Waveform(np.zeros(N3)))
    assert spec.shape == (300, 163)
    assert not spec.real.any() and not spec.imag.any()


def test_pure_tone_peaks_at_expected_bin():
    t = np.arange(N3) / 16000
    mag = stft(np.sin(2 * np.pi * 1000 * t)).magnitude()
    assert round(1000 * 324 / 16000) == 20
    assert np.all(np.argmax(mag[2:-2], axis=1) == 20)


def test_constant_signal_dc_bin_is_window_sum():
    spec = stft(np.ones(N3))
    assert hann(320).sum() == pytest.approx(160.0)
    assert spec.real[150, 0] == pytest.approx(160.0, abs=1e-9)
    assert abs(spec.imag[150, 0]) < 1e-9


def test_frames_match_naive_dft():
    rng = np.random.default_rng(0)
    x = rng.normal(size=4000)
    spec = stft(x)
    n, k = np.arange(320), np.arange(163)
    basis = np.exp(-2j * np.pi * np.outer(n, k) / 324)
    padded = np.pad(x, (80, 400), mode="reflect")
    for t in (1, 7, 20):
        frame = padded[t * 160 : t * 160 + 320] * hann(320)
        ref = np.array([np.sum(frame * basis[:, j]) for j in range(163)])
        assert np.max(np.abs(spec.to_complex()[t] - ref)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_round_trip(seed):
    x = np.random.default_rng(seed).normal(size=N3)
    assert rel_l2(istft(stft(x)), x) < 1e-6


@pytest.mark.parametrize("n", [320, 321, 479, 1000, 16001])
def test_round_trip_odd_lengths(n):
    x = np.random.default_rng(n).normal(size=n)
    y = istft(stft(x))
    assert y.shape == (n,) and rel_l2(y, x) < 1e-6


def test_batched_round_trip():
    x = np.random.default_rng(1).normal(size=(3, 2000))
    assert rel_l2(istft(stft(x)), x) < 1e-6


def test_zero_spectrogram_gives_zero_waveform():
    z = np.zeros((50, 163))
    assert not istft(ComplexSpectrogram(z, z, 8000)).any()


def test_identity_mask_end_to_end():
    x = np.random.default_rng(2).normal(size=N3)
    spec = stft(x)
    mask = np.zeros(spec.shape + (2,))
    mask[..., 0] = 1.0
    assert rel_l2(istft(apply_complex_mask(spec, mask)), x) < 1e-6


def test_window_overlap_add():
    # 50% hop periodic Hann: the plain window sums to exactly 1 in the
    # interior; its square (the weighted overlap-add envelope) ranges over
    # [0.5, 1] and is divided out explicitly.
    w = hann(320)
    s = w[:160] + w[160:]
    s2 = w[:160] ** 2 + w[160:] ** 2
    assert np.allclose(s, 1.0, atol=1e-12)
    assert s2.min() == pytest.approx(0.5) and s2.max() == pytest.approx(1.0)


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(fft_size=300)
    with pytest.raises(ValueError):
        StftConfig(hop=100)


def test_zero_overlap_envelope_is_rejected():
    cfg = StftConfig(frame_len=160, hop=160)
    spec = stft(np.ones(1600), cfg)
    with pytest.raises(ZeroDivisionError):
        istft(spec)


def test_too_short_signal():
    with pytest.raises(ValueError, match="shorter than one frame"):
        stft(np.zeros(100))


def test_waveform_rejects_other_rates_and_nan():
    with pytest.raises(ValueError, match="16000"):
        Waveform(np.zeros(10), sample_rate=44100)
    with pytest.raises(ValueError, match="non-finite"):
        Waveform(np.array([0.0, np.nan]))


# ---------------------------------------------------------------- compression


def spec_of(z):
    z = np.atleast_2d(np.asarray(z, dtype=complex))
    z = np.pad(z, ((0, 0), (0, 163 - z.shape[1])))
    return ComplexSpectrogram(z.real, z.imag, 320)


def test_compress_unit_and_zero_and_hundred():
    out = power_compress(spec_of([np.exp(0.7j), 0.0, 100 * np.exp(-2j)])).to_complex()[0]
    assert out[0] == pytest.approx(np.exp(0.7j))
    assert out[1] == 0
    assert abs(out[2]) == pytest.approx(100 ** 0.3, rel=1e-12)
    assert abs(out[2]) == pytest.approx(3.9811, abs=1e-4)
    assert np.angle(out[2]) == pytest.approx(-2.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-6, 4), st.floats(-np.pi, np.pi), st.floats(0.1, 1.0))
def test_compress_invertible(log_mag, phase, p):
    z = 10 ** log_mag * np.exp(1j * phase)
    back = power_decompress(power_compress(spec_of([z]), p), p).to_complex()[0, 0]
    assert abs(back - z) <= 1e-5 * abs(z)


def test_compress_rejects_bad_power():
    with pytest.raises(ValueError):
        power_compress(spec_of([1.0]), 0.0)


# ---------------------------------------------------------------- masking


def test_mask_rotation_by_i():
    spec = spec_of([1 + 2j, -3 + 0.5j])
    mask = np.zeros(spec.shape + (2,))
    mask[..., 1] = 1.0
    out = apply_complex_mask(spec, mask).to_complex()
    assert np.allclose(out, 1j * spec.to_complex())


def test_mask_linearity_and_bound():
    rng = np.random.default_rng(3)
    spec = stft(rng.normal(size=3200))
    m1, m2 = rng.normal(size=spec.shape + (2,)), rng.normal(size=spec.shape + (2,))
    lhs = apply_complex_mask(spec, m1 + m2).to_complex()
    rhs = apply_complex_mask(spec, m1).to_complex() + apply_complex_mask(spec, m2).to_complex()
    assert np.allclose(lhs, rhs)
    unit = m1 / np.maximum(1.0, np.hypot(m1[..., 0], m1[..., 1]))[..., None]
    out = apply_complex_mask(spec, unit)
    assert np.all(out.magnitude() <= spec.magnitude() * (1 + 1e-12) + 1e-15)


def test_mask_shape_checked():
    with pytest.raises(ValueError, match="mask shape"):
        apply_complex_mask(spec_of([1.0]), np.ones((1, 163)))


# ---------------------------------------------------------------- SI-SNR


def test_si_snr_identity_is_capped():
    s = np.random.default_rng(0).normal(size=1000)
    assert si_snr(s, s) == 60.0
    assert si_snr(2 * s, s) == si_snr(s, s)


def test_si_snr_orthogonal_noise():
    rng = np.random.default_rng(1)
    s = rng.normal(size=4000)
    s -= s.mean()
    n = rng.normal(size=4000)
    n -= n.mean()
    n -= (n @ s) / (s @ s) * s
    n *= np.sqrt((s @ s) / 10 / (n @ n))
    assert si_snr(s + n, s) == pytest.approx(10.0, abs=1e-9)


def test_si_snr_scale_invariance_general():
    rng = np.random.default_rng(2)
    s, e = rng.normal(size=500), rng.normal(size=500)
    assert si_snr(3.7 * e, s) == pytest.approx(si_snr(e, s), abs=1e-9)


def test_si_snr_errors():
    with pytest.raises(ValueError, match="length"):
        si_snr(np.ones(3), np.ones(4))
    with pytest.raises(ValueError, match="all-zero"):
        si_snr(np.ones(3), np.zeros(3))


def test_default_framing():
    assert (DEFAULT_STFT.frame_len, DEFAULT_STFT.hop, DEFAULT_STFT.fft_size, DEFAULT_STFT.n_bins) == (320, 160, 324, 163)
    assert DEFAULT_STFT.n_frames(N3) == 300
