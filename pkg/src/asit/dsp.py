"""Waveform loading, resampling and log-mel feature extraction."""

from __future__ import annotations

import io
import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigError, DecodeError, EmptyInputError, TooShortError

SPEC_MAGIC = b"LMEL"
SPEC_VERSION = 1
_SPEC_HEADER = struct.Struct("<4sHII")

# Windowed-sinc resampler: taps per polyphase branch and Kaiser shape.
RESAMPLE_TAPS = 64
RESAMPLE_KAISER_BETA = 8.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


@dataclass
class DspConfig:
    sample_rate_hz: int = 32000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 128
    fft_size: int = 1024
    log_floor: float = 1e-10
    target_frames: int = 592
    # 1.0 = magnitude spectrum, 2.0 = power spectrum
    spectrum_power: float = 1.0
    # normalisation divides by norm_divisor * std
    norm_divisor: float = 2.0

    @property
    def window_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000))

    def validate(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ConfigError("dsp.sample_rate_hz must be positive")
        if self.window_ms <= 0 or self.hop_ms <= 0:
            raise ConfigError("dsp.window_ms and dsp.hop_ms must be positive")
        if self.n_mels < 1:
            raise ConfigError("dsp.n_mels must be >= 1")
        if self.fft_size < self.window_length:
            raise ConfigError(
                f"dsp.fft_size ({self.fft_size}) must be >= window length ({self.window_length} samples)"
            )
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError("dsp.fft_size must be a power of two")
        if not self.log_floor > 0:
            raise ConfigError("dsp.log_floor must be > 0")
        if self.target_frames < 1:
            raise ConfigError("dsp.target_frames must be >= 1")
        if self.spectrum_power <= 0 or self.norm_divisor <= 0:
            raise ConfigError("dsp.spectrum_power and dsp.norm_divisor must be positive")


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # (T, F)
    frame_hop_ms: float = 10.0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError(f"spectrogram must be a non-empty T x F matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram contains non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape


# -- audio I/O ---------------------------------------------------------------


def read_wav(source) -> Waveform:
    """Decode a 16-bit PCM WAV from a path, raw bytes or a binary file object."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    elif isinstance(source, (str, Path)):
        source = str(source)
    try:
        with wave.open(source, "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise DecodeError(f"not a readable PCM WAV: {exc}") from exc
    if width != 2:
        raise DecodeError(f"only 16-bit PCM is supported, got {8 * width}-bit samples")
    if len(raw) % (2 * n_channels):
        raise DecodeError("truncated sample data")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if pcm.size == 0:
        raise EmptyInputError("audio contains no samples")
    pcm = pcm.reshape(-1, n_channels).mean(axis=1)
    return Waveform(pcm, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


def resample(w: Waveform, target_sr: int) -> Waveform:
    """Band-limited polyphase resampling with a Kaiser-windowed sinc filter."""
    if w.sample_rate == target_sr:
        return w
    g = math.gcd(int(w.sample_rate), int(target_sr))
    up, down = target_sr // g, w.sample_rate // g
    rate = max(up, down)
    taps = signal.firwin(RESAMPLE_TAPS * rate + 1, 1.0 / rate, window=("kaiser", RESAMPLE_KAISER_BETA))
    out = signal.resample_poly(w.samples, up, down, window=taps)
    return Waveform(out, target_sr)


def load_and_resample(source, target_sr: int = 32000) -> Waveform:
    """Read a WAV, downmix to mono, resample to ``target_sr``."""
    return resample(read_wav(source), target_sr)


# -- features ----------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank_matrix(cfg: DspConfig) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, fft_size // 2 + 1)``.

    Filter edges are ``n_mels + 2`` points equally spaced on the mel scale
    between 0 Hz and Nyquist; each filter peaks at 1 on its center.
    """
    sr, n_fft = cfg.sample_rate_hz, cfg.fft_size
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2), cfg.n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"n_mels={cfg.n_mels} is too fine for fft_size={n_fft} at {sr} Hz: "
            f"filter {int(empty[0])} covers no FFT bin"
        )
    return fb


def frame_count(n_samples: int, cfg: DspConfig) -> int:
    win, hop = cfg.window_length, cfg.hop_length
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def compute_log_mel(w: Waveform, cfg: DspConfig) -> LogMelSpectrogram:
    """Hann-windowed STFT -> mel projection -> ``ln(energy + log_floor)``.

    No resizing happens here; the result has ``floor((len - win) / hop) + 1`` frames.
    """
    cfg.validate()
    if w.sample_rate != cfg.sample_rate_hz:
        raise ValueError(f"waveform is at {w.sample_rate} Hz, config expects {cfg.sample_rate_hz} Hz")
    win, hop = cfg.window_length, cfg.hop_length
    if len(w) < win:
        raise TooShortError(f"waveform has {len(w)} samples, shorter than one {win}-sample window")
    n_frames = frame_count(len(w), cfg)
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:n_frames]
    spectrum = np.abs(np.fft.rfft(frames * np.hanning(win), n=cfg.fft_size, axis=1))
    if cfg.spectrum_power != 1.0:
        spectrum = spectrum**cfg.spectrum_power
    mel = spectrum @ mel_filterbank_matrix(cfg).T
    return LogMelSpectrogram(np.log(mel + cfg.log_floor), frame_hop_ms=cfg.hop_ms)


def interpolate_frames(values: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation along axis 0 onto ``length`` frames, end points aligned.

    Output frame ``t`` samples the input at ``t * (T - 1) / (length - 1)``.
    """
    t_in = values.shape[0]
    if length == t_in:
        return values.copy()
    if t_in == 1 or length == 1:
        return np.repeat(values[:1], length, axis=0)
    pos = np.arange(length) * (t_in - 1) / (length - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), t_in - 2)
    frac = (pos - i0)[:, None]
    out = values[i0] * (1.0 - frac) + values[i0 + 1] * frac
    return out.astype(values.dtype, copy=False) if np.issubdtype(values.dtype, np.floating) else out


def resize_frames(s: LogMelSpectrogram, target_frames: int) -> LogMelSpectrogram:
    return LogMelSpectrogram(interpolate_frames(s.values, target_frames), s.frame_hop_ms)


def spectrogram_from_wav(source, cfg: DspConfig) -> LogMelSpectrogram:
    """Full feature path used for datasets: load, resample, log-mel, resize to ``target_frames``."""
    w = load_and_resample(source, cfg.sample_rate_hz)
    return resize_frames(compute_log_mel(w, cfg), cfg.target_frames)


def dataset_stats(spectrograms) -> tuple[float, float]:
    """Mean and (population) standard deviation over every entry of a corpus."""
    total = count = 0.0
    for s in spectrograms:
        v = np.asarray(getattr(s, "values", s), dtype=np.float64)
        total += v.sum()
        count += v.size
    if not count:
        raise EmptyInputError("cannot compute statistics of an empty corpus")
    mean = total / count
    sq = 0.0
    for s in spectrograms:
        v = np.asarray(getattr(s, "values", s), dtype=np.float64)
        sq += ((v - mean) ** 2).sum()
    return float(mean), float(math.sqrt(sq / count))


def normalize(s: LogMelSpectrogram, mean: float, std: float, divisor: float = 2.0) -> LogMelSpectrogram:
    """``(s - mean) / (divisor * std)`` with corpus-level statistics."""
    if not (math.isfinite(mean) and math.isfinite(std)):
        raise ValueError("normalisation statistics must be finite")
    if std <= 0:
        raise ValueError("std must be positive")
    return LogMelSpectrogram((s.values - mean) / (divisor * std), s.frame_hop_ms)


# -- serialisation -----------------------------------------------------------


def spectrogram_to_bytes(s: LogMelSpectrogram) -> bytes:
    """``LMEL`` | u16 version | u32 T | u32 F | T*F little-endian float32, row-major."""
    t, f = s.values.shape
    body = np.ascontiguousarray(s.values, dtype="<f4").tobytes()
    return _SPEC_HEADER.pack(SPEC_MAGIC, SPEC_VERSION, t, f) + body


def spectrogram_from_bytes(data: bytes, frame_hop_ms: float = 10.0) -> LogMelSpectrogram:
    if len(data) < _SPEC_HEADER.size:
        raise DecodeError("spectrogram container truncated")
    magic, version, t, f = _SPEC_HEADER.unpack_from(data)
    if magic != SPEC_MAGIC:
        raise DecodeError(f"bad spectrogram magic {magic!r}")
    if version != SPEC_VERSION:
        raise DecodeError(f"unsupported spectrogram container version {version}")
    expected = _SPEC_HEADER.size + 4 * t * f
    if len(data) != expected:
        raise DecodeError(f"spectrogram payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", offset=_SPEC_HEADER.size).reshape(t, f)
    return LogMelSpectrogram(values.astype(np.float32), frame_hop_ms)


def save_spectrogram(path, s: LogMelSpectrogram) -> None:
    Path(path).write_bytes(spectrogram_to_bytes(s))


def load_spectrogram(path) -> LogMelSpectrogram:
    return spectrogram_from_bytes(Path(path).read_bytes())


def spectrogram_to_csv(path, s: LogMelSpectrogram) -> None:
    """One row per frame, one column per mel bin. Debugging aid."""
    header = ",".join(f"mel{j}" for j in range(s.mel_bins))
    np.savetxt(path, s.values, delimiter=",", header=header, comments="", fmt="%.8g")
