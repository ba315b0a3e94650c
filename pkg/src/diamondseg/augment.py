"""Geometric and photometric augmentations with mask-aware semantics."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import fft, ndimage

from .errors import InvalidParameter
from .imaging import BACKGROUND, Sample

GEOMETRIC = ("rotate", "shear", "scale")
PHOTOMETRIC = ("gaussian_noise", "blur", "sharpen", "emboss", "jpeg")
KINDS = GEOMETRIC + PHOTOMETRIC

# standard JPEG luminance quantization table (quality 50)
JPEG_LUMA_Q50 = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

EMBOSS_KERNEL = np.array([[-1, -1, 0], [-1, 0, 1], [0, 1, 1]], dtype=np.float64)

# sampling ranges for randomly drawn transforms
DEFAULT_RANGES = {
    "rotate": (-15.0, 15.0),
    "shear": (-0.2, 0.2),
    "scale": (0.8, 1.2),
    "gaussian_noise": (0.0, 12.0),
    "blur": (0.0, 1.5),
    "sharpen": (0.0, 1.0),
    "emboss": (0.0, 0.0),
    "jpeg": (30, 100),
}


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    value: float = 0.0

    def __post_init__(self):
        k, v = self.kind, self.value
        if k not in KINDS:
            raise InvalidParameter(f"unknown transform {k!r}")
        if not math.isfinite(v):
            raise InvalidParameter("transform parameter must be finite")
        if k == "rotate" and not -180 <= v <= 180:
            raise InvalidParameter("rotation must lie in [-180, 180] degrees")
        if k == "scale" and not 0.5 <= v <= 2.0:
            raise InvalidParameter("scale must lie in [0.5, 2.0]")
        if k == "shear" and abs(v) >= 1.0:
            raise InvalidParameter("shear factor must satisfy |s| < 1")
        if k in ("gaussian_noise", "blur") and v < 0:
            raise InvalidParameter("sigma must be >= 0")
        if k == "sharpen" and v < 0:
            raise InvalidParameter("sharpen amount must be >= 0")
        if k == "jpeg" and not (1 <= v <= 100 and float(v).is_integer()):
            raise InvalidParameter("jpeg quality must be an integer in [1, 100]")

    def __str__(self) -> str:
        return self.kind if self.kind == "emboss" else f"{self.kind}({self.value:g})"


@dataclass(frozen=True)
class AugmentPlan:
    rate: int = 2
    max_transforms_per_copy: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.rate < 1 or int(self.rate) != self.rate:
            raise InvalidParameter("augmentation rate must be an integer >= 1")
        if self.max_transforms_per_copy < 1:
            raise InvalidParameter("max_transforms_per_copy must be >= 1")


# ---------------------------------------------------------------- geometric


def affine_matrix(specs: list[TransformSpec]) -> np.ndarray:
    """Compose geometric specs (applied left to right) into one 2x2 map on (x, y)."""
    m = np.eye(2)
    for spec in specs:
        if spec.kind == "rotate":
            a = math.radians(spec.value)
            step = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        elif spec.kind == "shear":
            step = np.array([[1.0, spec.value], [0.0, 1.0]])
        elif spec.kind == "scale":
            step = np.array([[spec.value, 0.0], [0.0, spec.value]])
        else:
            raise InvalidParameter(f"{spec.kind} is not geometric")
        m = step @ m
    return m


def _source_coords(shape: tuple[int, int], forward: np.ndarray):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    inv = np.linalg.inv(forward)
    sx = inv[0, 0] * xx + inv[0, 1] * yy + cx
    sy = inv[1, 0] * xx + inv[1, 1] * yy + cy
    return sy, sx


def warp_bilinear(image: np.ndarray, forward: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    sy, sx = _source_coords((h, w), forward)
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    out = np.zeros(img.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            wgt = np.where(valid, wy * wx, 0.0)
            out += wgt[:, :, None] * img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return out[:, :, 0] if image.ndim == 2 else out


def warp_nearest(mask: np.ndarray, forward: np.ndarray, fill: int = BACKGROUND) -> np.ndarray:
    h, w = mask.shape
    sy, sx = _source_coords((h, w), forward)
    yi = np.floor(sy + 0.5).astype(np.int64)
    xi = np.floor(sx + 0.5).astype(np.int64)
    valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = np.full_like(mask, fill)
    out[valid] = mask[yi[valid], xi[valid]]
    return out


def apply_geometric(sample: Sample, spec) -> Sample:
    """Apply one composed affine map (about the image center) to image and mask."""
    specs = [spec] if isinstance(spec, TransformSpec) else list(spec)
    forward = affine_matrix(specs)
    if np.allclose(forward, np.eye(2), atol=0, rtol=0):
        return sample
    image = warp_bilinear(sample.image, forward)
    mask = None if sample.mask is None else warp_nearest(sample.mask, forward)
    return sample.with_(image=image, mask=mask)


# -------------------------------------------------------------- photometric


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    img = image.astype(np.float64)
    if sigma == 0:
        return img
    sig = (sigma, sigma, 0) if img.ndim == 3 else sigma
    return ndimage.gaussian_filter(img, sigma=sig, truncate=3.0, mode="nearest")


def jpeg_quant_table(quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMA_Q50 * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _jpeg_plane(plane: np.ndarray, q: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(plane.astype(np.float64), ((0, ph), (0, pw)), mode="edge") - 128.0
    blocks = padded.reshape(padded.shape[0] // 8, 8, padded.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coeffs = fft.dctn(blocks, type=2, norm="ortho", axes=(2, 3))
    coeffs = np.round(coeffs / q) * q
    back = fft.idctn(coeffs, type=2, norm="ortho", axes=(2, 3)) + 128.0
    back = back.transpose(0, 2, 1, 3).reshape(padded.shape)
    return back[:h, :w]


def jpeg_simulate(image: np.ndarray, quality: int) -> np.ndarray:
    """Blockwise DCT quantize/dequantize round trip at the given JPEG quality."""
    if not (1 <= quality <= 100 and float(quality).is_integer()):
        raise InvalidParameter("jpeg quality must be an integer in [1, 100]")
    q = jpeg_quant_table(int(quality))
    if image.ndim == 2:
        return _to_u8(_jpeg_plane(image, q))
    return _to_u8(np.stack([_jpeg_plane(image[:, :, c], q) for c in range(image.shape[2])], axis=2))


def apply_photometric(image: np.ndarray, spec: TransformSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    kind, v = spec.kind, spec.value
    if kind == "gaussian_noise":
        if v == 0:
            return image.copy()
        rng = rng if rng is not None else np.random.default_rng(0)
        return _to_u8(image.astype(np.float64) + rng.normal(0.0, v, size=image.shape))
    if kind == "blur":
        return _to_u8(_blur(image, v))
    if kind == "sharpen":
        img = image.astype(np.float64)
        return _to_u8(img + v * (img - _blur(image, 1.0)))
    if kind == "emboss":
        img = image.astype(np.float64)
        if img.ndim == 3:
            out = np.stack([ndimage.correlate(img[:, :, c], EMBOSS_KERNEL, mode="nearest") for c in range(img.shape[2])], axis=2)
        else:
            out = ndimage.correlate(img, EMBOSS_KERNEL, mode="nearest")
        return _to_u8(out + 128.0)
    if kind == "jpeg":
        return jpeg_simulate(image, int(v))
    raise InvalidParameter(f"{kind} is not photometric")


# ------------------------------------------------------------------ datasets


def draw_transforms(rng: np.random.Generator, max_count: int = 2) -> list[TransformSpec]:
    count = int(rng.integers(1, max_count + 1))
    kinds = [KINDS[i] for i in rng.choice(len(KINDS), size=min(count, len(KINDS)), replace=False)]
    specs = []
    for kind in kinds:
        lo, hi = DEFAULT_RANGES[kind]
        if kind == "jpeg":
            value = float(rng.integers(int(lo), int(hi) + 1))
        else:
            value = float(rng.uniform(lo, hi))
        specs.append(TransformSpec(kind, value))
    return specs


def augment_sample(sample: Sample, specs: list[TransformSpec], rng: np.random.Generator) -> Sample:
    """Apply all geometric specs as one affine, then the photometric ones in order."""
    geometric = [s for s in specs if s.kind in GEOMETRIC]
    out = apply_geometric(sample, geometric) if geometric else sample
    image = out.image
    for s in specs:
        if s.kind in PHOTOMETRIC:
            image = apply_photometric(image, s, rng)
    meta = dict(sample.meta)
    meta["transforms"] = [str(s) for s in geometric] + [str(s) for s in specs if s.kind in PHOTOMETRIC]
    meta["source_id"] = sample.meta.get("source_id", sample.id)
    return out.with_(image=image, meta=meta)


def copy_seed(seed: int, sample_id: str, copy: int) -> list[int]:
    return [int(seed), zlib.crc32(sample_id.encode("utf-8")), int(copy)]


def augment_copies(sample: Sample, copies: int, seed: int, max_transforms: int = 2, first_copy: int = 1) -> list[Sample]:
    out = []
    for k in range(first_copy, first_copy + copies):
        rng = np.random.default_rng(copy_seed(seed, sample.id, k))
        specs = draw_transforms(rng, max_transforms)
        out.append(augment_sample(sample, specs, rng).with_(id=f"{sample.id}_aug{k}"))
    return out


def augment_dataset(dataset: list[Sample], plan: AugmentPlan) -> list[Sample]:
    """Originals followed by ``rate - 1`` augmented copies of every sample."""
    out = list(dataset)
    if plan.rate == 1:
        return out
    for s in dataset:
        out.extend(augment_copies(s, plan.rate - 1, plan.seed, plan.max_transforms_per_copy))
    return out
