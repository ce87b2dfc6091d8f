"""Seeded synthetic audio corpus standing in for AudioSet at desk scale."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import Waveform, write_wav
from .errors import ConfigError, DataError

CLASSES = ("sine", "chirp", "noise_burst", "am_tone")
NOISE_FLOOR = 1e-3


@dataclass
class SyntheticSpec:
    classes: tuple = CLASSES
    clips_per_class: int = 500
    duration_s: float = 6.0
    sr: int = 16000
    seed: int = 0
    train_fraction: float = 0.8

    def validate(self) -> None:
        unknown = set(self.classes) - set(CLASSES)
        if unknown:
            raise ConfigError(f"unknown synthetic classes {sorted(unknown)}")
        if len(self.classes) < 2:
            raise ConfigError("a synthetic dataset needs at least 2 classes")
        if self.duration_s < 1.0:
            raise ConfigError("synthetic clips must be at least 1 s long")
        if self.clips_per_class < 0 or self.sr <= 0:
            raise ConfigError("clips_per_class must be >= 0 and sr > 0")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")


def _sine(rng, t, sr):
    f = rng.uniform(200.0, 4000.0)
    return np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)), {"freq_hz": f}


def _chirp(rng, t, sr):
    f0 = rng.uniform(200.0, 6000.0)
    f1 = rng.uniform(200.0, 6000.0)
    while abs(f1 - f0) < 1000.0:
        f1 = rng.uniform(200.0, 6000.0)
    return signal.chirp(t, f0=f0, t1=t[-1], f1=f1, method="linear"), {"f0_hz": f0, "f1_hz": f1}


def _noise_burst(rng, t, sr):
    lo = rng.uniform(200.0, 5000.0)
    hi = min(lo + rng.uniform(300.0, 2000.0), 0.45 * sr)
    # bursts of 0.5-2 s, shrunk proportionally for clips under 4 s
    length = rng.uniform(0.5, 2.0) * min(1.0, t[-1] / 4.0)
    onset = rng.uniform(0.0, t[-1] - length)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    noise = signal.sosfilt(sos, rng.standard_normal(len(t)))
    gate = ((t >= onset) & (t < onset + length)).astype(float)
    x = noise * gate
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x, {"band_lo_hz": lo, "band_hi_hz": hi, "onset_s": onset, "length_s": length}


def _am_tone(rng, t, sr):
    fc = rng.uniform(300.0, 4000.0)
    fm = rng.uniform(2.0, 16.0)
    depth = rng.uniform(0.5, 1.0)
    env = (1.0 + depth * np.sin(2 * np.pi * fm * t)) / (1.0 + depth)
    return env * np.sin(2 * np.pi * fc * t), {"carrier_hz": fc, "mod_hz": fm, "depth": depth}


GENERATORS = {"sine": _sine, "chirp": _chirp, "noise_burst": _noise_burst, "am_tone": _am_tone}


def synth_clip(kind: str, rng: np.random.Generator, duration_s: float, sr: int) -> tuple[Waveform, dict]:
    t = np.arange(int(round(duration_s * sr))) / sr
    x, params = GENERATORS[kind](rng, t, sr)
    amp = rng.uniform(0.1, 0.8)
    x = amp * x + NOISE_FLOOR * rng.standard_normal(len(t))
    params["amplitude"] = amp
    return Waveform(np.clip(x, -1.0, 1.0), sr), params


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write WAVs plus ``manifest.csv`` and ``synth_log.csv``; return the manifest path.

    Each clip is seeded by ``(seed, class index, clip index)``, so files are
    byte-identical across runs.
    """
    from .data import ManifestEntry, write_manifest

    spec.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        entries, log_rows = [], []
        n_train = int(round(spec.train_fraction * spec.clips_per_class))
        for label, kind in enumerate(spec.classes):
            cls_idx = CLASSES.index(kind)
            for i in range(spec.clips_per_class):
                rng = np.random.default_rng([spec.seed, cls_idx, i])
                w, params = synth_clip(kind, rng, spec.duration_s, spec.sr)
                name = f"{kind}_{i:04d}.wav"
                write_wav(out_dir / name, w)
                split = "train" if i < n_train else "test"
                entries.append(ManifestEntry(name, (label,), split))
                log_rows.append({"wav_path": name, "class": kind, **{k: f"{v:.6f}" for k, v in params.items()}})
        manifest = out_dir / "manifest.csv"
        write_manifest(manifest, entries)
        keys = ["wav_path", "class"] + sorted({k for r in log_rows for k in r} - {"wav_path", "class"})
        with open(out_dir / "synth_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(log_rows)
        (out_dir / "classes.txt").write_text("\n".join(spec.classes) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset to {out_dir}: {exc}") from exc
    return manifest
