"""Image, mask and dataset-manifest carriers plus their on-disk formats.

Images are plain numpy arrays: ``uint8`` of shape ``(H, W)`` (grayscale, the
default) or ``(H, W, 3)``.  Normalized images are ``float32`` arrays of the same
shape.  Masks are ``uint8`` ``(H, W)`` arrays holding class indices.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DimensionMismatch, DuplicateId, MalformedPng, MissingFile, TooManyClasses

BACKGROUND, POCKET_HOLDER, DIAMOND_TOP, DIAMOND_SIDE = 0, 1, 2, 3
NUM_CLASSES = 4
CLASS_NAMES = ("background", "pocket_holder", "diamond_top", "diamond_side")
PALETTE = np.array(
    [
        (0, 0, 0),  # background: black
        (255, 0, 0),  # pocket holder: red
        (255, 105, 180),  # diamond top: pink
        (0, 255, 0),  # diamond side: green
    ],
    dtype=np.uint8,
)
MIN_SIDE = 8
SPLIT_TAGS = ("train", "test", "pool")


def check_image(image: np.ndarray) -> np.ndarray:
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    if image.ndim not in (2, 3) or (image.ndim == 3 and image.shape[2] not in (1, 3)):
        raise ValueError(f"bad image shape {image.shape}")
    if image.shape[0] < MIN_SIDE or image.shape[1] < MIN_SIDE:
        raise ValueError(f"image smaller than {MIN_SIDE}x{MIN_SIDE}: {image.shape}")
    return image


def check_mask(mask: np.ndarray) -> np.ndarray:
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != np.uint8:
        raise ValueError(f"expected uint8 mask, got {mask.dtype}")
    if mask.size and mask.max() >= NUM_CLASSES:
        raise TooManyClasses(f"mask contains class {int(mask.max())}")
    return mask


@dataclass(frozen=True)
class Sample:
    """One timestamped frame of a growth run, optionally labeled."""

    id: str
    run_id: str
    timestamp_min: float
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    split_tag: str = "pool"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.timestamp_min < 0:
            raise ValueError("timestamp_min must be >= 0")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise DimensionMismatch(
                f"mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )

    def with_(self, **changes) -> "Sample":
        return replace(self, **changes)


# --------------------------------------------------------------------------- PNG


def _palette_bytes() -> list[int]:
    pal = PALETTE.reshape(-1).tolist()
    return pal + [0] * (768 - len(pal))


def encode_mask_png(mask: np.ndarray) -> bytes:
    """Encode a class mask as an indexed PNG whose palette index is the class."""
    check_mask(mask)
    img = Image.fromarray(np.ascontiguousarray(mask), mode="P")
    img.putpalette(_palette_bytes())
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, bits=8)
    return buf.getvalue()


def decode_mask_png(data: bytes) -> np.ndarray:
    """Recover class indices from an indexed PNG.

    Raises:
        MalformedPng: the bytes are not a decodable PNG.
        TooManyClasses: a pixel carries palette index > 3.
    """
    try:
        with Image.open(io.BytesIO(data)) as img:
            if img.format != "PNG":
                raise MalformedPng(f"not a PNG stream ({img.format})")
            img.load()
            if img.mode not in ("P", "L"):
                raise MalformedPng(f"expected an indexed PNG, got mode {img.mode}")
            arr = np.array(img, dtype=np.uint8)
    except MalformedPng:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError, EOFError) as exc:
        raise MalformedPng(str(exc)) from exc
    if arr.size and arr.max() >= NUM_CLASSES:
        raise TooManyClasses(f"palette index {int(arr.max())} present")
    return arr


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    return PALETTE[check_mask(mask)]


def encode_image_png(image: np.ndarray) -> bytes:
    check_image(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def decode_image_png(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB") if img.mode in ("P", "RGBA") else img.convert("L")
            return np.array(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError, EOFError) as exc:
        raise MalformedPng(str(exc)) from exc


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float) -> np.ndarray:
    """Blend palette colors over the non-background pixels of ``image``.

    ``out = (1 - alpha) * pixel + alpha * color``, rounded half up.  The result
    is always 3-channel; grayscale input is replicated first.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if image.shape[:2] != mask.shape:
        raise DimensionMismatch(f"image {image.shape[:2]} vs mask {mask.shape}")
    check_mask(mask)
    rgb = image if image.ndim == 3 and image.shape[2] == 3 else np.repeat(
        image.reshape(image.shape[0], image.shape[1], 1), 3, axis=2
    )
    out = rgb.copy()
    fg = mask != BACKGROUND
    blended = (1.0 - alpha) * rgb[fg].astype(np.float64) + alpha * PALETTE[mask[fg]].astype(np.float64)
    out[fg] = np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)
    return out


# ---------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: Optional[str]
    run_id: str
    timestamp_min: float
    split_tag: str = "pool"

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {self.split_tag!r}")


_FIELDS = ("id", "image_path", "mask_path", "run_id", "timestamp_min", "split_tag")


def _check_unique(entries: Iterable[ManifestEntry]) -> None:
    seen: set[str] = set()
    for e in entries:
        if e.id in seen:
            raise DuplicateId(e.id)
        seen.add(e.id)


def dumps_manifest(entries: list[ManifestEntry]) -> str:
    _check_unique(entries)
    lines = []
    for e in entries:
        record = {name: getattr(e, name) for name in _FIELDS}
        record["timestamp_min"] = float(record["timestamp_min"])
        lines.append(json.dumps(record, ensure_ascii=True, separators=(",", ":")))
    return "".join(line + "\n" for line in lines)


def loads_manifest(text: str) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        record = json.loads(line)
        missing = [f for f in _FIELDS if f not in record]
        if missing:
            raise ValueError(f"manifest line {lineno} lacks fields {missing}")
        entries.append(ManifestEntry(**{f: record[f] for f in _FIELDS}))
    _check_unique(entries)
    return entries


def save_manifest(entries: list[ManifestEntry], path) -> None:
    Path(path).write_text(dumps_manifest(entries), encoding="ascii")


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    return loads_manifest(path.read_text(encoding="ascii"))


# ---------------------------------------------------------------- dataset dirs

MANIFEST_NAME = "manifest.jsonl"


def write_dataset(samples: list[Sample], root) -> Path:
    """Write ``images/<id>.png``, ``masks/<id>.png`` and the manifest under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        image_rel = f"images/{s.id}.png"
        (root / image_rel).write_bytes(encode_image_png(s.image))
        mask_rel = None
        if s.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            mask_rel = f"masks/{s.id}.png"
            (root / mask_rel).write_bytes(encode_mask_png(s.mask))
        entries.append(
            ManifestEntry(s.id, image_rel, mask_rel, s.run_id, float(s.timestamp_min), s.split_tag)
        )
    save_manifest(entries, root / MANIFEST_NAME)
    return root / MANIFEST_NAME


def read_dataset(root) -> list[Sample]:
    root = Path(root)
    entries = load_manifest(root / MANIFEST_NAME)
    samples = []
    for e in entries:
        image_file = root / e.image_path
        if not image_file.is_file():
            raise MissingFile(str(image_file))
        mask = None
        if e.mask_path is not None:
            mask_file = root / e.mask_path
            if not mask_file.is_file():
                raise MissingFile(str(mask_file))
            mask = decode_mask_png(mask_file.read_bytes())
        samples.append(
            Sample(
                id=e.id,
                run_id=e.run_id,
                timestamp_min=e.timestamp_min,
                image=decode_image_png(image_file.read_bytes()),
                mask=mask,
                split_tag=e.split_tag,
            )
        )
    return samples
