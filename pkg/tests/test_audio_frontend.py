from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from havt_ivd.audio_frontend import (
    LOG_EPS,
    compute_melspec,
    hann_window,
    hz_to_mel,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    stft,
)
from havt_ivd.data_model import AudioSegment, VehicleState
from havt_ivd.synthetic_scene import SceneConfig, SceneLayout, Vehicle, _streams, mic_gains, render_audio

GOLDEN = Path(__file__).parent / "golden"


def direct_dft(frame: np.ndarray) -> np.ndarray:
    n = frame.size
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (frame[None, :] * np.exp(-2j * np.pi * k * t / n)).sum(axis=1)


def reference_frames(x: np.ndarray, n_fft: int = 1024, hop: int = 512) -> np.ndarray:
    # centered framing written out by hand: frame t covers x[t*hop - n_fft/2 : t*hop + n_fft/2]
    half = n_fft // 2
    out = []
    for t in range(x.size // hop + 1):
        idx = np.arange(t * hop - half, t * hop + half)
        idx = np.abs(idx)                                   # reflect at the start
        idx = np.where(idx >= x.size, 2 * (x.size - 1) - idx, idx)   # reflect at the end
        out.append(x[idx])
    return np.array(out)


def test_frame_count_for_five_seconds():
    assert stft(np.zeros(240000)).shape == (513, 469)


def test_zero_signal_gives_zero_magnitude():
    assert np.all(np.abs(stft(np.zeros(5000))) == 0)


def test_sine_peaks_at_closed_form_bin():
    t = np.arange(48000) / 48000
    expected = round(1000 * 1024 / 48000)
    assert expected == 21
    # reflect padding flips a sine's sign at t=0, so the first frame is smeared;
    # every frame clear of the padding peaks at the closed-form bin
    spectrum = np.abs(stft(np.sin(2 * np.pi * 1000 * t)))
    assert np.all(spectrum[:, 1:-1].argmax(axis=0) == expected)
    # a zero-phase sinusoid reflects seamlessly, so even the edge frames agree
    spectrum = np.abs(stft(np.cos(2 * np.pi * 1000 * t)))
    assert np.all(spectrum.argmax(axis=0) == expected)


def test_stft_matches_direct_dft_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(6000)
    spectrum = stft(x)
    frames = reference_frames(x)
    assert spectrum.shape[1] == len(frames)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)
    for t in (0, 1, 5, len(frames) - 1):
        np.testing.assert_allclose(spectrum[:, t], direct_dft(frames[t] * w), rtol=1e-9, atol=1e-9)


def test_parseval_per_frame():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(20000)
    spectrum = stft(x)
    windowed = reference_frames(x) * hann_window(1024)
    one_sided = np.abs(spectrum) ** 2
    total = one_sided[0] + one_sided[-1] + 2 * one_sided[1:-1].sum(axis=0)
    np.testing.assert_allclose(total / 1024, (windowed ** 2).sum(axis=1), rtol=1e-4)


@pytest.mark.parametrize("bad", [np.array([]), np.array([1.0, np.nan] * 1000), np.zeros(100)])
def test_stft_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        stft(bad)


def test_mel_scale_roundtrip():
    f = np.linspace(0, 24000, 97)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-8)
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))


def test_filterbank_shape_and_support():
    fb = mel_filterbank()
    assert fb.shape == (128, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0) and np.all(fb.max(axis=1) > 0)
    assert np.all(np.diff(mel_center_frequencies()) > 0)


def test_filter_rows_are_unimodal_and_overlap():
    fb = mel_filterbank(norm=None)
    for row in fb:
        peak = int(row.argmax())
        assert np.all(np.diff(row[:peak + 1]) >= -1e-15)
        assert np.all(np.diff(row[peak:]) <= 1e-15)
    for k in range(fb.shape[0] - 1):
        assert np.any((fb[k] > 0) & (fb[k + 1] > 0))


@pytest.mark.parametrize("sr, n_mels", [(48000, 128), (16000, 64), (16000, 128)])
def test_flat_spectrum_matches_quadrature_areas(sr, n_mels):
    fb = mel_filterbank(1024, n_mels, sr, norm=None)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_mels + 2))

    def tri(f, lo, mid, hi):
        if lo < f <= mid:
            return (f - lo) / (mid - lo)
        if mid < f < hi:
            return (hi - f) / (hi - mid)
        return 0.0

    areas = np.array([integrate.quad(tri, lo, hi, args=(lo, mid, hi), points=[mid])[0] for lo, mid, hi in zip(edges, edges[1:], edges[2:])])
    df = sr / 1024
    np.testing.assert_allclose(fb @ np.ones(513), areas / df, rtol=1e-9)
    normed = mel_filterbank(1024, n_mels, sr)
    np.testing.assert_allclose(normed @ np.ones(513), np.ones(n_mels), rtol=1e-12)


def test_filterbank_errors():
    with pytest.raises(ValueError, match="Nyquist"):
        mel_filterbank(1024, 128, 48000, f_max=30000)
    with pytest.raises(ValueError):
        mel_filterbank(64, 40, 16000)


def test_melspec_default_shape():
    rng = np.random.default_rng(3)
    spectrum = compute_melspec(AudioSegment(rng.uniform(-0.5, 0.5, (6, 240000)), 48000))
    assert spectrum.shape == (6, 128, 469)
    assert np.all(np.isfinite(spectrum.values))


def test_silence_is_log_eps():
    spectrum = compute_melspec(AudioSegment(np.zeros((2, 16000)), 16000))
    assert np.all(spectrum.values == np.float32(np.log(LOG_EPS)))


def test_melspec_deterministic_and_channel_equivariant():
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.5, 0.5, (3, 16000)) * np.array([[0.1], [1.0], [0.4]])
    a = compute_melspec(AudioSegment(x, 16000)).values
    assert np.array_equal(a, compute_melspec(AudioSegment(x, 16000)).values)
    perm = [2, 0, 1]
    b = compute_melspec(AudioSegment(x[perm], 16000)).values
    assert np.array_equal(a[perm], b)


def _single_idler(config: SceneConfig, px: float, py: float, f0: float = 30.0) -> SceneLayout:
    size = config.image_size
    w = h = 16
    v = Vehicle(int(px - w / 2), int(py - h / 2), w, h, np.full(3, 0.5), np.zeros((h, w)), (0.0, 0.0), 0, VehicleState.IDLING, f0)
    return SceneLayout(np.zeros((3, size, size)), [v], snr_db=20.0, n_requested=1, streams=_streams(5))


def test_closest_mic_has_most_idle_band_energy():
    config = SceneConfig()
    mic = np.array(config.mic_positions[2]) / config.meters_per_pixel
    layout = _single_idler(config, *mic)
    spectrum = compute_melspec(AudioSegment(render_audio(config, layout), config.sample_rate)).values
    low = mel_center_frequencies() < 160
    energy = spectrum[:, low, :].sum(axis=(1, 2))
    assert int(energy.argmax()) == 2
    # ordering over channels follows the generator's gains
    gains = mic_gains(config, layout.vehicles[0])
    assert list(np.argsort(energy)) == list(np.argsort(gains))


def test_golden_spectrogram():
    t = np.arange(16000) / 16000
    x = 0.3 * np.sin(2 * np.pi * (200 + 1500 * t) * t)
    x = np.stack([x, 0.5 * x[::-1]])
    values = compute_melspec(AudioSegment(x, 16000), n_mels=64).values
    golden = np.fromfile(GOLDEN / "melspec_chirp_2x64x32.f32", dtype="<f4").reshape(2, 64, 32)
    np.testing.assert_allclose(values, golden, atol=1e-5)
