"""Manifests, cached log-mel corpora and seeded two-view batches."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corrupt import CorruptionConfig, apply_corruption, derive_token_mask, make_views
from .dsp import DspConfig, LogMelSpectrogram, dataset_stats, spectrogram_from_wav
from .errors import DataError

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("wav_path", "label_list", "split")


@dataclass(frozen=True)
class ManifestEntry:
    wav_path: str
    labels: tuple
    split: str


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            writer.writerow([e.wav_path, ";".join(str(i) for i in e.labels), e.split])


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest; relative WAV paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(MANIFEST_FIELDS) - set(reader.fieldnames):
            raise DataError(f"{path}: manifest must have columns {MANIFEST_FIELDS}")
        for row in reader:
            wav = Path(row["wav_path"])
            if not wav.is_absolute():
                wav = path.parent / wav
            try:
                labels = tuple(int(x) for x in row["label_list"].split(";") if x.strip())
            except ValueError as exc:
                raise DataError(f"{path}: bad label list {row['label_list']!r}") from exc
            entries.append(ManifestEntry(str(wav), labels, row["split"].strip()))
    return entries


@dataclass
class SpectrogramCorpus:
    """Log-mel spectrograms of a manifest, stacked as ``(N, T, F)`` float32."""

    values: np.ndarray
    labels: list
    splits: np.ndarray
    paths: list
    mean: float = 0.0
    std: float = 1.0
    normalized: bool = False

    def __len__(self):
        return len(self.values)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    @property
    def num_classes(self) -> int:
        return 1 + max((max(l) for l in self.labels if l), default=-1)

    def normalize(self, mean: float, std: float, divisor: float = 2.0) -> None:
        """In place, with externally supplied (training-corpus) statistics."""
        if self.normalized:
            raise DataError("corpus is already normalised")
        self.values -= np.float32(mean)
        self.values /= np.float32(divisor * std)
        self.mean, self.std, self.normalized = mean, std, True


def _cache_key(entries, cfg: DspConfig) -> str:
    h = hashlib.sha256(json.dumps(cfg.__dict__, sort_keys=True).encode())
    for e in entries:
        p = Path(e.wav_path)
        h.update(f"{p}|{p.stat().st_size if p.exists() else -1}".encode())
    return h.hexdigest()[:20]


def load_corpus(entries, cfg: DspConfig, cache_dir=None) -> SpectrogramCorpus:
    entries = list(entries)
    if not entries:
        raise DataError("manifest lists no clips")
    cache = None
    if cache_dir:
        cache = Path(cache_dir) / f"logmel-{_cache_key(entries, cfg)}.npy"
        if cache.exists():
            values = np.load(cache)
            log.info("loaded %d cached spectrograms from %s", len(values), cache)
            return SpectrogramCorpus(values, [e.labels for e in entries], np.array([e.split for e in entries]),
                                     [e.wav_path for e in entries])
    values = np.empty((len(entries), cfg.target_frames, cfg.n_mels), dtype=np.float32)
    for i, e in enumerate(entries):
        values[i] = spectrogram_from_wav(e.wav_path, cfg).values
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache, values)
    return SpectrogramCorpus(values, [e.labels for e in entries], np.array([e.split for e in entries]),
                             [e.wav_path for e in entries])


def corpus_stats(corpus: SpectrogramCorpus, split: str = "train") -> tuple[float, float]:
    """Normalisation statistics over one split (the whole corpus if the split is empty)."""
    idx = corpus.indices(split)
    if not len(idx):
        idx = np.arange(len(corpus))
    return dataset_stats(corpus.values[idx])


@dataclass
class Batch:
    """Both views stacked on the batch axis: rows ``[0, B)`` are view a, ``[B, 2B)`` view b."""

    ids: list
    clean: torch.Tensor  # (2B, T, F)
    corrupted: torch.Tensor  # (2B, T, F)
    pixel_mask: torch.Tensor  # (2B, T, F) bool
    token_mask: torch.Tensor  # (2B, n) bool
    records: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.ids)


def clip_rng(seed: int, clip_id: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, clip_id, epoch])


def make_batch(
    values: np.ndarray,
    ids,
    epoch: int,
    seed: int,
    cfg: CorruptionConfig,
    patch_size: int,
    target_frames: int,
    keep_records: bool = False,
) -> Batch:
    ids = [int(i) for i in ids]
    rngs = [clip_rng(seed, i, epoch) for i in ids]
    pairs = [
        make_views(LogMelSpectrogram(values[i]), rng, target_frames, cfg.crop_min, cfg.crop_max, source_id=i)
        for i, rng in zip(ids, rngs)
    ]
    b = len(ids)
    clean = np.stack([p.view_a.values for p in pairs] + [p.view_b.values for p in pairs])
    corrupted = clean.copy()
    shape = clean.shape[1:]
    n_tokens = len(derive_token_mask(np.zeros(shape, dtype=bool), patch_size))
    if not cfg.enabled:
        # no corruption: plain autoencoding over every pixel and token
        pixel_mask = np.ones(clean.shape, dtype=bool)
        token_mask = np.ones((2 * b, n_tokens), dtype=bool)
        records = []
    else:
        pixel_mask = np.zeros(clean.shape, dtype=bool)
        token_mask = np.zeros((2 * b, n_tokens), dtype=bool)
        records = []
        for v, view in enumerate(("view_a", "view_b")):
            if v == 1 and cfg.single_view:
                break
            for j, (pair, rng) in enumerate(zip(pairs, rngs)):
                x = getattr(pair, view)
                alien = getattr(pairs[(j + 1) % b], view) if b > 1 else (pair.view_b if v == 0 else pair.view_a)
                x_hat, rec = apply_corruption(x, alien, rng, cfg, patch_size)
                row = v * b + j
                corrupted[row] = x_hat.values
                pixel_mask[row] = rec.pixel_mask
                token_mask[row] = rec.token_mask
                if keep_records:
                    records.append(rec)
    return Batch(
        ids=ids,
        clean=torch.from_numpy(clean),
        corrupted=torch.from_numpy(corrupted),
        pixel_mask=torch.from_numpy(pixel_mask),
        token_mask=torch.from_numpy(token_mask),
        records=records,
    )


def epoch_order(indices, epoch: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0, epoch])
    return rng.permutation(np.asarray(indices))


def iterate_batches(values, indices, epoch, seed, batch_size, cfg: CorruptionConfig, patch_size, target_frames,
                    num_workers: int = 0):
    """Yield the epoch's batches in a fixed order.

    With ``num_workers > 0`` batches are assembled on a background thread and
    handed over through a bounded queue; contents do not depend on timing.
    """
    order = epoch_order(indices, epoch, seed)
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]

    def build(chunk):
        return make_batch(values, chunk, epoch, seed, cfg, patch_size, target_frames)

    if num_workers <= 0:
        for chunk in chunks:
            yield build(chunk)
        return

    q: queue.Queue = queue.Queue(maxsize=2 * num_workers)
    done = object()
    stop = threading.Event()

    def producer():
        try:
            for chunk in chunks:
                if stop.is_set():
                    return
                q.put(build(chunk))
        except Exception as exc:  # surfaced on the consumer side
            q.put(exc)
        q.put(done)

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while thread.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                thread.join(timeout=0.05)
