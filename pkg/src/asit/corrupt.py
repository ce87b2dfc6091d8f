"""Two-view augmentation and group-masked corruption of spectrograms."""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field

import numpy as np

from .dsp import LogMelSpectrogram, interpolate_frames
from .errors import ConfigError, TooShortError

ZERO, ALIEN = "zero", "alien"


@dataclass
class CorruptionConfig:
    enabled: bool = True
    zero_ratio: float = 0.7
    alien_ratio: float = 0.3
    alien_prob: float = 0.5
    block_min: int = 8
    block_max: int = 48
    align_to_patches: bool = False
    tolerance: float = 0.02
    # corrupt only view_a when true
    single_view: bool = False
    crop_min: float = 0.6
    crop_max: float = 1.0

    def validate(self) -> None:
        for name in ("zero_ratio", "alien_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"corrupt.{name} must lie in [0, 1), got {r}")
        if not 0.0 <= self.alien_prob <= 1.0:
            raise ConfigError(f"corrupt.alien_prob must lie in [0, 1], got {self.alien_prob}")
        if not 1 <= self.block_min <= self.block_max:
            raise ConfigError("corrupt.block_min must satisfy 1 <= block_min <= block_max")
        if not 0.0 < self.tolerance < 0.5:
            raise ConfigError("corrupt.tolerance must lie in (0, 0.5)")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ConfigError("corrupt.crop_min/crop_max must satisfy 0 < min <= max <= 1")


@dataclass
class ViewPair:
    view_a: LogMelSpectrogram
    view_b: LogMelSpectrogram
    source_id: object = None

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise ValueError(f"view shapes differ: {self.view_a.shape} vs {self.view_b.shape}")


@dataclass
class CorruptionRecord:
    pixel_mask: np.ndarray  # (T, F) bool
    token_mask: np.ndarray  # (n,) bool
    mode: str
    requested_ratio: float
    realized_ratio: float
    blocks: list = field(default_factory=list)  # (top, left, bottom, right), half-open

    def to_dict(self) -> dict:
        def pack(m):
            return {"shape": list(m.shape), "bits": base64.b64encode(np.packbits(m.ravel()).tobytes()).decode()}

        return {
            "pixel_mask": pack(self.pixel_mask),
            "token_mask": pack(self.token_mask),
            "mode": self.mode,
            "requested_ratio": self.requested_ratio,
            "realized_ratio": self.realized_ratio,
            "blocks": [list(map(int, b)) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionRecord":
        def unpack(p):
            n = math.prod(p["shape"])
            bits = np.unpackbits(np.frombuffer(base64.b64decode(p["bits"]), dtype=np.uint8))[:n]
            return bits.astype(bool).reshape(p["shape"])

        return cls(
            unpack(d["pixel_mask"]),
            unpack(d["token_mask"]),
            d["mode"],
            float(d["requested_ratio"]),
            float(d["realized_ratio"]),
            [tuple(b) for b in d["blocks"]],
        )


def crop_and_resize(values: np.ndarray, start: int, length: int, target_frames: int) -> np.ndarray:
    return interpolate_frames(values[start : start + length], target_frames)


def make_views(
    s: LogMelSpectrogram,
    rng: np.random.Generator,
    target_frames: int = 592,
    crop_min: float = 0.6,
    crop_max: float = 1.0,
    source_id=None,
) -> ViewPair:
    """Two independent random time-crops, each stretched back to ``target_frames``."""
    t = s.frames
    if t < max(2, math.ceil(crop_min * target_frames)):
        raise TooShortError(f"spectrogram has {t} frames; need at least {math.ceil(crop_min * target_frames)}")
    views = []
    for _ in range(2):
        length = int(round(rng.uniform(crop_min, crop_max) * t))
        length = min(t, max(2, length))
        start = int(rng.integers(0, t - length + 1))
        views.append(LogMelSpectrogram(crop_and_resize(s.values, start, length, target_frames), s.frame_hop_ms))
    return ViewPair(views[0], views[1], source_id)


def sample_blocks(
    shape: tuple[int, int],
    ratio: float,
    rng: np.random.Generator,
    align_to_patches: bool = False,
    patch_size: int = 16,
    block_min: int = 8,
    block_max: int = 48,
    tolerance: float = 0.02,
    max_rejections: int = 10_000,
) -> list[tuple[int, int, int, int]]:
    """Random rectangles whose union covers ``ratio`` of ``shape`` within ``tolerance``.

    Blocks are accepted while the union stays below ``ratio + tolerance`` and
    sampling stops once it reaches ``ratio``. Repeated rejections shrink the
    upper bound on block size so the band can always be hit.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    rows, cols = shape
    area = rows * cols
    target, ceiling = ratio * area, (ratio + tolerance) * area
    mask = np.zeros(shape, dtype=bool)
    covered, rejections = 0, 0
    blocks = []
    p = patch_size
    while covered < target:
        hi = max(block_min, block_max >> (rejections // 50))
        h, w = (int(v) for v in rng.integers(block_min, hi + 1, size=2))
        if align_to_patches:
            h, w = max(p, round(h / p) * p), max(p, round(w / p) * p)
            top = p * int(rng.integers(0, max(rows - h, 0) // p + 1))
            left = p * int(rng.integers(0, max(cols - w, 0) // p + 1))
        else:
            top = int(rng.integers(0, max(rows - h, 0) + 1))
            left = int(rng.integers(0, max(cols - w, 0) + 1))
        bottom, right = min(rows, top + h), min(cols, left + w)
        fresh = int((~mask[top:bottom, left:right]).sum())
        if fresh == 0:
            continue
        if covered + fresh > ceiling:
            rejections += 1
            if rejections > max_rejections:
                raise RuntimeError(f"could not reach coverage {ratio} +- {tolerance} on shape {shape}")
            continue
        mask[top:bottom, left:right] = True
        covered += fresh
        blocks.append((top, left, bottom, right))
    return blocks


def paint_blocks(shape, blocks) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for top, left, bottom, right in blocks:
        mask[top:bottom, left:right] = True
    return mask


def sample_block_mask(shape, ratio, rng, align_to_patches=False, patch_size=16, **kwargs) -> np.ndarray:
    """Boolean pixel mask built from :func:`sample_blocks`."""
    return paint_blocks(shape, sample_blocks(shape, ratio, rng, align_to_patches, patch_size, **kwargs))


def derive_token_mask(pixel_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Flag token i iff any pixel of its tile is masked. Tiles are row-major; edges zero-padded."""
    p = patch_size
    rows, cols = pixel_mask.shape
    padded = np.pad(pixel_mask, ((0, (-rows) % p), (0, (-cols) % p)))
    gt, gf = padded.shape[0] // p, padded.shape[1] // p
    return padded.reshape(gt, p, gf, p).any(axis=(1, 3)).ravel()


def apply_corruption(
    x: LogMelSpectrogram,
    alien: LogMelSpectrogram,
    rng: np.random.Generator,
    cfg: CorruptionConfig | None = None,
    patch_size: int = 16,
) -> tuple[LogMelSpectrogram, CorruptionRecord]:
    """Pick zero or alien mode, mask a block group, and fill it.

    Unmasked entries of the result are the entries of ``x`` unchanged.
    """
    cfg = cfg or CorruptionConfig()
    if x.shape != alien.shape:
        raise ValueError(f"alien spectrogram shape {alien.shape} differs from input {x.shape}")
    mode = ALIEN if rng.random() < cfg.alien_prob else ZERO
    ratio = cfg.alien_ratio if mode == ALIEN else cfg.zero_ratio
    values = x.values.copy()
    if ratio > 0:
        blocks = sample_blocks(
            x.shape, ratio, rng, cfg.align_to_patches, patch_size, cfg.block_min, cfg.block_max, cfg.tolerance
        )
    else:
        blocks = []
    mask = paint_blocks(x.shape, blocks)
    if mode == ZERO:
        values[mask] = 0.0
    else:
        values[mask] = alien.values[mask]
    rec = CorruptionRecord(
        pixel_mask=mask,
        token_mask=derive_token_mask(mask, patch_size),
        mode=mode,
        requested_ratio=float(ratio),
        realized_ratio=float(mask.mean()),
        blocks=blocks,
    )
    return LogMelSpectrogram(values, x.frame_hop_ms), rec
