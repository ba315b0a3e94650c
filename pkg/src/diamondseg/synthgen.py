"""Procedural growth-run generator and simulated annotators.

Frames show a centered diamond (top facet plus a darker side band) growing
inside a circular pocket holder whose opening slowly closes as polycrystalline
deposits creep in from the rim.  Every frame comes with its exact mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyInput, FrameOutOfRange, InvalidSpec
from .imaging import BACKGROUND, DIAMOND_SIDE, DIAMOND_TOP, NUM_CLASSES, POCKET_HOLDER, Sample

SHAPES = ("square", "octagon")


@dataclass(frozen=True)
class GrowthRunSpec:
    seed: int = 0
    frames: int = 60
    frame_interval_min: float = 1.0
    canvas: tuple[int, int] = (72, 72)
    diamond_shape: str = "square"
    initial_diamond_halfwidth: float = 6.0
    lateral_growth_rate: float = 0.12
    side_band_px: float = 3.0
    octagon_cut_fraction: float = 0.4
    pocket_inner_halfwidth: float = 27.0
    pocket_outer_radius: float = 33.0
    pcd_encroachment_rate: float = 0.03
    top_intensity: float = 220.0
    side_intensity_factor: float = 0.6
    holder_intensity: float = 95.0
    background_intensity: float = 30.0
    shading: float = 0.05
    sensor_noise_sigma: float = 1.5
    blackout_frame_prob: float = 0.0
    noise_frame_prob: float = 0.0
    run_id: str = ""

    def __post_init__(self):
        validate_spec(self)

    @property
    def name(self) -> str:
        return self.run_id or f"run{self.seed:04d}"

    def halfwidth(self, t: int) -> float:
        return self.initial_diamond_halfwidth + t * self.lateral_growth_rate

    def pocket_radius(self, t: int) -> float:
        return self.pocket_inner_halfwidth - t * self.pcd_encroachment_rate

    def to_dict(self) -> dict:
        return asdict(self)


def validate_spec(spec: GrowthRunSpec) -> None:
    problems = []
    if spec.frames < 1:
        problems.append("frames must be >= 1")
    if spec.frame_interval_min <= 0:
        problems.append("frame_interval_min must be > 0")
    h, w = spec.canvas
    if h < 8 or w < 8:
        problems.append("canvas must be at least 8x8")
    if spec.diamond_shape not in SHAPES:
        problems.append(f"diamond_shape must be one of {SHAPES}")
    if spec.initial_diamond_halfwidth <= 0 or spec.lateral_growth_rate < 0 or spec.side_band_px < 0:
        problems.append("diamond geometry must be positive")
    if spec.initial_diamond_halfwidth + spec.frames * spec.lateral_growth_rate >= spec.pocket_inner_halfwidth:
        problems.append("diamond would outgrow the pocket opening")
    if spec.pocket_outer_radius <= spec.pocket_inner_halfwidth:
        problems.append("pocket_outer_radius must exceed pocket_inner_halfwidth")
    if spec.pcd_encroachment_rate < 0:
        problems.append("pcd_encroachment_rate must be >= 0")
    if not 0 < spec.side_intensity_factor <= 1:
        problems.append("side_intensity_factor must lie in (0, 1]")
    side = spec.side_intensity_factor * spec.top_intensity
    if not (0 <= spec.background_intensity < spec.holder_intensity < side <= spec.top_intensity <= 255):
        problems.append("intensities must satisfy background < holder < side <= top <= 255")
    for name in ("blackout_frame_prob", "noise_frame_prob"):
        if not 0 <= getattr(spec, name) <= 1:
            problems.append(f"{name} must lie in [0, 1]")
    if problems:
        raise InvalidSpec("; ".join(problems))


# ------------------------------------------------------------------ geometry


def diamond_halfplanes(shape: str, halfwidth: float, cut_fraction: float = 0.4):
    """Return ``(normals, offsets)`` so that the polygon is ``normals @ p <= offsets``.

    Coordinates are relative to the canvas center, ``p = (x, y)``.
    """
    axis = np.array([(1, 0), (-1, 0), (0, 1), (0, -1)], dtype=np.float64)
    if shape == "square":
        return axis, np.full(4, halfwidth)
    cut = cut_fraction * halfwidth
    diag = np.array([(1, 1), (1, -1), (-1, 1), (-1, -1)], dtype=np.float64) / math.sqrt(2.0)
    return np.vstack([axis, diag]), np.concatenate(
        [np.full(4, halfwidth), np.full(4, (2 * halfwidth - cut) / math.sqrt(2.0))]
    )


def diamond_vertices(shape: str, halfwidth: float, cut_fraction: float = 0.4) -> np.ndarray:
    """Polygon vertices (x, y) relative to the center, counter-clockwise."""
    h = halfwidth
    if shape == "square":
        return np.array([(h, -h), (h, h), (-h, h), (-h, -h)], dtype=np.float64)
    c = cut_fraction * h
    return np.array(
        [(h, -(h - c)), (h, h - c), (h - c, h), (-(h - c), h),
         (-h, h - c), (-h, -(h - c)), (-(h - c), -h), (h - c, -h)],
        dtype=np.float64,
    )


def _pixel_offsets(canvas: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = canvas
    ys = np.arange(h, dtype=np.float64) + 0.5 - h / 2.0
    xs = np.arange(w, dtype=np.float64) + 0.5 - w / 2.0
    return np.meshgrid(xs, ys)


def _inside(normals, offsets, x, y) -> np.ndarray:
    proj = normals[:, 0, None, None] * x + normals[:, 1, None, None] * y
    return np.all(proj <= offsets[:, None, None] + 1e-9, axis=0)


def render_mask(spec: GrowthRunSpec, t: int) -> np.ndarray:
    if not 0 <= t < spec.frames:
        raise FrameOutOfRange(f"frame {t} outside [0, {spec.frames})")
    x, y = _pixel_offsets(spec.canvas)
    r = np.hypot(x, y)
    mask = np.full(spec.canvas, BACKGROUND, dtype=np.uint8)
    mask[(r >= spec.pocket_radius(t)) & (r < spec.pocket_outer_radius)] = POCKET_HOLDER
    normals, offsets = diamond_halfplanes(spec.diamond_shape, spec.halfwidth(t), spec.octagon_cut_fraction)
    mask[_inside(normals, offsets + spec.side_band_px, x, y)] = DIAMOND_SIDE
    mask[_inside(normals, offsets, x, y)] = DIAMOND_TOP
    return mask


def render_frame(spec: GrowthRunSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Render frame ``t``: a grayscale image and its exact class mask."""
    mask = render_mask(spec, t)
    base = np.array(
        [
            spec.background_intensity,
            spec.holder_intensity,
            spec.top_intensity,
            spec.side_intensity_factor * spec.top_intensity,
        ]
    )[mask]
    x, y = _pixel_offsets(spec.canvas)
    rmax = math.hypot(spec.canvas[0] / 2.0, spec.canvas[1] / 2.0)
    shaded = base * (1.0 - spec.shading * (x * x + y * y) / (rmax * rmax))
    rng = np.random.default_rng([spec.seed, t, 0])
    if spec.sensor_noise_sigma > 0:
        shaded = shaded + rng.normal(0.0, spec.sensor_noise_sigma, size=shaded.shape)
    image = np.clip(np.floor(shaded + 0.5), 0, 255).astype(np.uint8)
    return image, mask


def generate_run(spec: GrowthRunSpec) -> list[Sample]:
    """All frames of a run, with blackout/noise frames injected per the spec."""
    samples = []
    for t in range(spec.frames):
        image, mask = render_frame(spec, t)
        rng = np.random.default_rng([spec.seed, t, 1])
        roll = rng.random()
        kind = "clean"
        if roll < spec.blackout_frame_prob:
            image = np.zeros_like(image)
            kind = "blackout"
        elif roll < spec.blackout_frame_prob + spec.noise_frame_prob:
            image = rng.integers(0, 256, size=image.shape, dtype=np.uint8)
            kind = "noise"
        samples.append(
            Sample(
                id=f"{spec.name}_f{t:04d}",
                run_id=spec.name,
                timestamp_min=t * spec.frame_interval_min,
                image=image,
                mask=mask,
                meta={"frame_kind": kind, "t": t},
            )
        )
    return samples


def random_run_spec(seed: int, frames: int = 60, **overrides) -> GrowthRunSpec:
    """A run spec with seeded per-run variation of shape, growth and optics."""
    rng = np.random.default_rng([seed, 99])
    top = float(rng.uniform(200, 240))
    params = dict(
        seed=seed,
        frames=frames,
        diamond_shape=SHAPES[int(rng.integers(0, 2))],
        initial_diamond_halfwidth=float(rng.uniform(4.5, 7.5)),
        lateral_growth_rate=float(rng.uniform(4.0, 7.0)) / frames,
        pocket_inner_halfwidth=float(rng.uniform(26.0, 28.0)),
        pocket_outer_radius=float(rng.uniform(32.0, 34.0)),
        pcd_encroachment_rate=float(rng.uniform(0.0, 1.0)) / frames,
        top_intensity=top,
        side_intensity_factor=float(rng.uniform(0.55, 0.65)),
        holder_intensity=float(rng.uniform(85, 105)),
        background_intensity=float(rng.uniform(20, 40)),
    )
    params.update(overrides)
    return GrowthRunSpec(**params)


def make_corpus(n_runs: int, frames: int, seed: int = 0, **overrides) -> list[Sample]:
    samples: list[Sample] = []
    for k in range(n_runs):
        samples.extend(generate_run(random_run_spec(seed * 1000 + k, frames=frames, **overrides)))
    return samples


# ---------------------------------------------------------------- annotators


@dataclass(frozen=True)
class AnnotatorNoiseSpec:
    boundary_jitter_px: float = 1.25
    region_flip_prob: float = 0.02
    pixel_noise_prob: float = 0.005

    def __post_init__(self):
        if self.boundary_jitter_px < 0:
            raise InvalidSpec("boundary_jitter_px must be >= 0")
        for p in (self.region_flip_prob, self.pixel_noise_prob):
            if not 0 <= p <= 1:
                raise InvalidSpec("probabilities must lie in [0, 1]")


ZERO_NOISE = AnnotatorNoiseSpec(0.0, 0.0, 0.0)


def _jitter_boundaries(gt: np.ndarray, radius_max: float, rng: np.random.Generator) -> np.ndarray:
    out = gt.copy()
    radii = rng.uniform(0.0, radius_max, size=NUM_CLASSES)
    grow = rng.random(NUM_CLASSES) < 0.5
    # erosions first: vacated pixels take the class of the nearest outside pixel
    for c in range(NUM_CLASSES):
        r = radii[c]
        region = gt == c
        if grow[c] or r < 1.0 or not region.any() or region.all():
            continue
        dist, (iy, ix) = ndimage.distance_transform_edt(region, return_indices=True)
        vacated = region & (dist <= r)
        out[vacated] = gt[iy[vacated], ix[vacated]]
    for c in range(NUM_CLASSES):
        r = radii[c]
        region = gt == c
        if not grow[c] or r < 1.0 or not region.any():
            continue
        dist = ndimage.distance_transform_edt(~region)
        out[(dist > 0) & (dist <= r)] = c
    return out


def _flip_regions(mask: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    out = mask.copy()
    eight = np.ones((3, 3), dtype=bool)
    for c in range(NUM_CLASSES):
        labels, count = ndimage.label(mask == c, structure=eight)
        for k in range(1, count + 1):
            if rng.random() >= prob:
                continue
            region = labels == k
            ring = ndimage.binary_dilation(region, structure=eight) & ~region
            neighbours = sorted(set(np.unique(mask[ring]).tolist()) - {c})
            if neighbours:
                out[region] = neighbours[int(rng.integers(0, len(neighbours)))]
    return out


def simulate_annotator(gt: np.ndarray, noise: AnnotatorNoiseSpec, seed) -> np.ndarray:
    """A noisy labeler's version of ``gt``: boundary jitter, region mix-ups, speckle."""
    rng = np.random.default_rng(seed)
    out = gt.copy()
    if noise.boundary_jitter_px > 0:
        out = _jitter_boundaries(out, noise.boundary_jitter_px, rng)
    if noise.region_flip_prob > 0:
        out = _flip_regions(out, noise.region_flip_prob, rng)
    if noise.pixel_noise_prob > 0:
        flip = rng.random(out.shape) < noise.pixel_noise_prob
        shift = rng.integers(1, NUM_CLASSES, size=out.shape).astype(np.uint8)
        out = np.where(flip, (out + shift) % NUM_CLASSES, out).astype(np.uint8)
    return out


def consensus(masks: list[np.ndarray]) -> np.ndarray:
    """Per-pixel majority vote; ties go to the lowest class index."""
    if not masks:
        raise EmptyInput("consensus needs at least one mask")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise DimensionMismatch(f"{m.shape} vs {shape}")
    votes = np.zeros((NUM_CLASSES,) + shape, dtype=np.int32)
    for m in masks:
        for c in range(NUM_CLASSES):
            votes[c] += m == c
    return votes.argmax(axis=0).astype(np.uint8)
