import io
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asit.dsp import (
    DspConfig,
    LogMelSpectrogram,
    Waveform,
    compute_log_mel,
    dataset_stats,
    frame_count,
    hz_to_mel,
    interpolate_frames,
    load_and_resample,
    mel_filterbank_matrix,
    mel_to_hz,
    normalize,
    read_wav,
    spectrogram_from_bytes,
    spectrogram_to_bytes,
    spectrogram_to_csv,
    write_wav,
)
from asit.errors import ConfigError, DecodeError, EmptyInputError, TooShortError

import oracles


def wav_bytes(samples, sr, channels=1):
    """16-bit PCM container; ``samples`` is (n,) or (n, channels) in [-1, 1]."""
    pcm = np.round(np.asarray(samples) * 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


CFG = DspConfig()


# -- load_and_resample ---------------------------------------------------------


def test_silence_upsampled_stays_silent():
    w = load_and_resample(wav_bytes(np.zeros(16000), 16000), 32000)
    assert w.sample_rate == 32000
    assert len(w) == 32000
    assert not w.samples.any()


def test_resampled_sine_keeps_its_frequency():
    sr_in, f = 48000, 440.0
    t = np.arange(sr_in) / sr_in
    w = load_and_resample(wav_bytes(0.5 * np.sin(2 * np.pi * f * t), sr_in), 32000)
    spectrum = np.abs(np.fft.rfft(w.samples))
    bin_hz = w.sample_rate / len(w.samples)
    assert abs(np.argmax(spectrum) * bin_hz - f) <= bin_hz


def test_antiphase_stereo_cancels():
    a = 0.3 * np.sin(np.linspace(0, 50, 4000))
    data = wav_bytes(np.stack([a, -a], axis=1), 16000, channels=2)
    w = load_and_resample(data, 32000)
    assert np.abs(w.samples).max() == 0.0


def test_wav_round_trip(tmp_path):
    x = np.linspace(-0.9, 0.9, 1000)
    write_wav(tmp_path / "x.wav", Waveform(x, 16000))
    back = read_wav(tmp_path / "x.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, x, atol=2 / 32767)


def test_malformed_container_is_a_decode_error():
    with pytest.raises(DecodeError):
        read_wav(b"RIFF....not a wav at all")


def test_empty_audio_is_reported():
    with pytest.raises(EmptyInputError):
        read_wav(wav_bytes(np.zeros(0), 16000))


def test_waveform_rejects_bad_input():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)


# -- filterbank ----------------------------------------------------------------


def test_single_filter_spans_band():
    fb = mel_filterbank_matrix(DspConfig(n_mels=1))
    assert fb.shape == (1, 513)
    peak_hz = np.argmax(fb[0]) * CFG.sample_rate_hz / CFG.fft_size
    assert 0 < peak_hz < CFG.sample_rate_hz / 2


def test_filterbank_matches_textbook_triangles():
    fb = mel_filterbank_matrix(CFG)
    ref = oracles.triangular_mel_filters(128, 1024, 32000)
    np.testing.assert_allclose(fb, ref, atol=1e-12)


def test_filterbank_covers_interior_bins():
    fb = mel_filterbank_matrix(CFG)
    peaks = fb.argmax(axis=1)
    interior = fb[:, peaks[0] : peaks[-1] + 1]
    assert (interior.sum(axis=0) > 0).all()
    assert (fb >= 0).all()


def test_filter_peaks_increase():
    # Low filters are narrower than one FFT bin, so sampled argmaxes can repeat;
    # the triangle apexes themselves must be strictly increasing and each
    # sampled maximum must sit within one bin of its apex.
    fb = mel_filterbank_matrix(CFG)
    apex_hz = mel_to_hz(np.linspace(0, hz_to_mel(16000), 130))[1:-1]
    assert (np.diff(apex_hz) > 0).all()
    bin_hz = 32000 / 1024
    assert (np.abs(fb.argmax(axis=1) * bin_hz - apex_hz) <= bin_hz).all()
    assert (np.diff(fb.argmax(axis=1)) >= 0).all()


def test_filter_support_is_contiguous_and_filters_overlap():
    fb = mel_filterbank_matrix(CFG)
    for row in fb:
        nz = np.flatnonzero(row)
        assert (np.diff(nz) == 1).all()
    for a, b in zip(fb[:-1], fb[1:]):
        assert ((a > 0) & (b > 0)).any() or np.flatnonzero(b)[0] - np.flatnonzero(a)[-1] == 1


def test_too_many_mels_is_a_config_error():
    with pytest.raises(ConfigError):
        mel_filterbank_matrix(DspConfig(n_mels=400))


def test_mel_scale_inverts():
    f = np.array([0.0, 100.0, 1000.0, 16000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


# -- compute_log_mel -----------------------------------------------------------


def test_silence_hits_the_floor():
    s = compute_log_mel(Waveform(np.zeros(3200), 32000), CFG)
    np.testing.assert_array_equal(s.values, np.log(CFG.log_floor))


def test_matches_brute_force_dft():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, 2000)
    s = compute_log_mel(Waveform(x, 32000), CFG)
    ref = oracles.log_mel(x, 32000, 800, 320, 1024, 128, 1e-10)
    np.testing.assert_allclose(s.values, ref, rtol=1e-9)


def test_sine_at_filter_center_peaks_in_that_bin():
    fb = mel_filterbank_matrix(CFG)
    centers = mel_to_hz(np.linspace(0, hz_to_mel(16000), 130))[1:-1]
    for k in (10, 40, 90):
        t = np.arange(4000) / 32000
        x = 0.5 * np.sin(2 * np.pi * centers[k] * t)
        ref = oracles.log_mel(x, 32000, 800, 320, 1024, 128, 1e-10)
        assert np.argmax(ref.mean(axis=0)) == k
        assert np.argmax(compute_log_mel(Waveform(x, 32000), CFG).values.mean(axis=0)) == k
    assert fb.shape[0] == 128


def test_six_seconds_resizes_to_592_frames():
    x = 0.1 * np.sin(np.arange(6 * 32000) * 0.05)
    s = compute_log_mel(Waveform(x, 32000), CFG)
    assert s.shape == (598, 128)
    assert interpolate_frames(s.values, CFG.target_frames).shape == (592, 128)


def test_short_waveform_rejected():
    with pytest.raises(TooShortError):
        compute_log_mel(Waveform(np.zeros(799), 32000), CFG)


def test_wrong_rate_rejected():
    with pytest.raises(ValueError):
        compute_log_mel(Waveform(np.zeros(1600), 16000), CFG)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=800, max_value=20000))
def test_frame_count_formula(n):
    s = compute_log_mel(Waveform(np.zeros(n), 32000), CFG)
    assert s.frames == (n - 800) // 320 + 1 == frame_count(n, CFG)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1.0, 20.0))
def test_louder_never_lowers_energy(seed, c):
    x = np.random.default_rng(seed).uniform(-0.05, 0.05, 2400)
    quiet = compute_log_mel(Waveform(x, 32000), CFG).values
    loud = compute_log_mel(Waveform(x * c, 32000), CFG).values
    assert (loud >= quiet - 1e-12).all()


# -- interpolation ---------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 80), st.integers(0, 1000))
def test_interpolation_matches_reference(t_in, t_out, seed):
    v = np.random.default_rng(seed).normal(size=(t_in, 3))
    np.testing.assert_allclose(interpolate_frames(v, t_out), oracles.interp1d_frames(v, t_out), atol=1e-12)


def test_interpolation_keeps_float32():
    v = np.ones((10, 4), dtype=np.float32)
    assert interpolate_frames(v, 7).dtype == np.float32


# -- normalisation ---------------------------------------------------------------


def test_normalize_examples():
    s = LogMelSpectrogram(np.full((4, 128), 1.5))
    np.testing.assert_array_equal(normalize(s, 1.5, 1.0).values, 0.0)
    x = np.random.default_rng(0).normal(size=(5, 128))
    np.testing.assert_allclose(normalize(LogMelSpectrogram(x), 0.0, 0.5).values, x)


def test_two_constant_spectrograms():
    corpus = [np.full((3, 128), 1.0), np.full((3, 128), 3.0)]
    mean, std = dataset_stats(corpus)
    assert (mean, std) == (2.0, 1.0)
    out = [normalize(LogMelSpectrogram(c), mean, std).values for c in corpus]
    assert set(np.unique(np.concatenate(out))) == {-0.5, 0.5}


def test_normalize_rejects_bad_stats():
    s = LogMelSpectrogram(np.zeros((2, 128)))
    with pytest.raises(ValueError):
        normalize(s, float("nan"), 1.0)
    with pytest.raises(ValueError):
        normalize(s, 0.0, 0.0)


def test_spectrogram_invariants():
    with pytest.raises(ValueError):
        LogMelSpectrogram(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        LogMelSpectrogram(np.zeros((0, 128)))


# -- serialisation ---------------------------------------------------------------


def test_container_round_trip(tmp_path):
    s = LogMelSpectrogram(np.random.default_rng(1).normal(size=(7, 128)).astype(np.float32))
    data = spectrogram_to_bytes(s)
    assert data[:4] == b"LMEL"
    back = spectrogram_from_bytes(data)
    np.testing.assert_array_equal(back.values, s.values)
    spectrogram_to_csv(tmp_path / "s.csv", s)
    assert len((tmp_path / "s.csv").read_text().splitlines()) >= 7


def test_truncated_container_rejected():
    data = spectrogram_to_bytes(LogMelSpectrogram(np.zeros((3, 128), dtype=np.float32)))
    with pytest.raises(DecodeError):
        spectrogram_from_bytes(data[:-4])
