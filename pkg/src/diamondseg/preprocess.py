"""Frame preparation: resampling, sanity filtering, crop/resize/denoise, normalization, split."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetTooSmall, EmptyRun, NoForegroundPixels
from .imaging import BACKGROUND, Sample
from .interp import resize_bilinear, resize_nearest

LAPLACIAN_3X3 = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


@dataclass(frozen=True)
class PreprocessConfig:
    window_min: float = 15.0
    blackout_mean_max: float = 10.0
    # calibrated on synthetic runs: clean frames stay near 3e3, uniform noise exceeds 1e5
    laplacian_var_max: float = 15000.0
    crop_pad: int = 8
    target_resolutions: tuple[int, ...] = (64, 128)
    split_test_fraction: float = 0.10
    split_seed: int = 0
    fallback_crop: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if not 0 < self.split_test_fraction < 1:
            raise ValueError("split_test_fraction must lie in (0, 1)")
        if self.window_min < 1:
            raise ValueError("window_min must be >= 1")


@dataclass
class Rejection:
    id: str
    reason: str


def resample(run: list[Sample], window_min: float) -> list[Sample]:
    """Keep the earliest sample of each half-open window ``[k*w, (k+1)*w)``."""
    if not run:
        raise EmptyRun("cannot resample an empty run")
    ordered = sorted(run, key=lambda s: s.timestamp_min)
    kept, last_window = [], None
    for s in ordered:
        window = int(s.timestamp_min // window_min)
        if window != last_window:
            kept.append(s)
            last_window = window
    return kept


def _gray(image: np.ndarray) -> np.ndarray:
    img = image.astype(np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def laplacian_variance(image: np.ndarray) -> float:
    response = ndimage.convolve(_gray(image), LAPLACIAN_3X3, mode="nearest")
    return float(response.var())


def frame_defect(image: np.ndarray, config: PreprocessConfig) -> str | None:
    if _gray(image).mean() < config.blackout_mean_max:
        return "blackout"
    if laplacian_variance(image) > config.laplacian_var_max:
        return "noisy"
    return None


def sanity_filter(samples: list[Sample], config: PreprocessConfig = PreprocessConfig()):
    """Split samples into ``(kept, rejected)``; order is preserved in both."""
    kept, rejected = [], []
    for s in samples:
        reason = frame_defect(s.image, config)
        if reason is None:
            kept.append(s)
        else:
            rejected.append(Rejection(s.id, reason))
    return kept, rejected


def write_reject_report(rejected: list[Rejection], path) -> None:
    lines = ["id,reason"] + [f"{r.id},{r.reason}" for r in rejected]
    Path(path).write_text("\n".join(lines) + "\n")


def foi_bbox(mask: np.ndarray, pad: int) -> tuple[int, int, int, int]:
    """Inclusive ``(r0, r1, c0, c1)`` of non-background pixels, padded and clamped."""
    rows = np.flatnonzero((mask != BACKGROUND).any(axis=1))
    cols = np.flatnonzero((mask != BACKGROUND).any(axis=0))
    if rows.size == 0:
        raise NoForegroundPixels("mask has no FOI pixels")
    h, w = mask.shape
    return (
        max(int(rows[0]) - pad, 0),
        min(int(rows[-1]) + pad, h - 1),
        max(int(cols[0]) - pad, 0),
        min(int(cols[-1]) + pad, w - 1),
    )


def crop_rect(sample: Sample, rect: tuple[int, int, int, int]) -> Sample:
    r0, r1, c0, c1 = rect
    mask = None if sample.mask is None else sample.mask[r0 : r1 + 1, c0 : c1 + 1].copy()
    return sample.with_(image=sample.image[r0 : r1 + 1, c0 : c1 + 1].copy(), mask=mask)


def crop_to_bbox(sample: Sample, pad: int) -> Sample:
    if sample.mask is None:
        raise NoForegroundPixels(f"{sample.id} has no mask to crop by")
    return crop_rect(sample, foi_bbox(sample.mask, pad))


def resize(sample: Sample, target: int) -> Sample:
    """Square resize: bilinear for the image, nearest-neighbour for the mask."""
    h, w = sample.image.shape[:2]
    if (h, w) == (target, target):
        return sample
    image = np.clip(np.floor(resize_bilinear(sample.image, target, target) + 0.5), 0, 255)
    mask = None if sample.mask is None else resize_nearest(sample.mask, target, target)
    return sample.with_(image=image.astype(np.uint8), mask=mask)


def denoise(image: np.ndarray) -> np.ndarray:
    """3x3 median filter with replicated borders."""
    size = (3, 3, 1) if image.ndim == 3 else (3, 3)
    return ndimage.median_filter(image, size=size, mode="nearest")


def normalize(image: np.ndarray) -> np.ndarray:
    return ((image.astype(np.float32) - np.float32(127.5)) / np.float32(127.5)).astype(np.float32)


def denormalize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(image.astype(np.float64) * 127.5 + 127.5 + 0.5), 0, 255).astype(np.uint8)


def split_test_count(n: int, fraction: float) -> int:
    exact = Fraction(str(fraction)) * n
    return int((exact + Fraction(1, 2)) // 1)


def split(dataset: list[Sample], seed: int, test_fraction: float = 0.10):
    """Seeded shuffle into ``(train, test)`` with split tags set; input order kept within each."""
    n = len(dataset)
    if n < 10:
        raise DatasetTooSmall(f"need at least 10 samples, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[: split_test_count(n, test_fraction)].tolist())
    train = [s.with_(split_tag="train") for i, s in enumerate(dataset) if i not in test_idx]
    test = [s.with_(split_tag="test") for i, s in enumerate(dataset) if i in test_idx]
    return train, test


def prepare(sample: Sample, resolution: int, config: PreprocessConfig = PreprocessConfig()) -> Sample:
    """Crop to the FOI box (or the fallback rectangle), resize and denoise one sample."""
    if sample.mask is not None and (sample.mask != BACKGROUND).any():
        out = crop_to_bbox(sample, config.crop_pad)
    elif config.fallback_crop is not None:
        out = crop_rect(sample, config.fallback_crop)
    else:
        out = sample
    out = resize(out, resolution)
    return out.with_(image=denoise(out.image))


@dataclass
class PreprocessResult:
    train: list[Sample]
    test: list[Sample]
    rejected: list[Rejection] = field(default_factory=list)


def preprocess_dataset(samples: list[Sample], resolution: int, config: PreprocessConfig = PreprocessConfig()) -> PreprocessResult:
    """Resample per run, filter, prepare each frame, then split 90:10."""
    runs: dict[str, list[Sample]] = {}
    for s in samples:
        runs.setdefault(s.run_id, []).append(s)
    selected = []
    for run_id in sorted(runs):
        selected.extend(resample(runs[run_id], config.window_min))
    kept, rejected = sanity_filter(selected, config)
    prepared = [prepare(s, resolution, config) for s in kept]
    train, test = split(prepared, config.split_seed, config.split_test_fraction)
    return PreprocessResult(train, test, rejected)


def prepare_split(samples: list[Sample], resolution: int, config: PreprocessConfig = PreprocessConfig()):
    """Filter, prepare and split already-sampled frames (no temporal resampling).

    Returns ``(train, test, rejected)``.
    """
    kept, rejected = sanity_filter(samples, config)
    prepared = [prepare(s, resolution, config) for s in kept]
    train, test = split(prepared, config.split_seed, config.split_test_fraction)
    return train, test, rejected
