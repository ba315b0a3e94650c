"""Derived features from masks: areas, diamond-to-holder gap, and crystal shape."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np
from scipy import ndimage, spatial

from .errors import DegenerateContour, EmptyComponent, MissingRegion
from .imaging import DIAMOND_SIDE, DIAMOND_TOP, POCKET_HOLDER

DIAMOND = (DIAMOND_TOP, DIAMOND_SIDE)
SHAPES = ("square", "octahedral", "rounded", "irregular")

# clockwise in image coordinates (row axis points down), starting west
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))


@dataclass(frozen=True)
class ShapeRules:
    epsilon_fraction: float = 0.02
    rounded_circularity: float = 0.945
    octagon_vertices: tuple[int, ...] = (7, 8, 9)


def connected_components(mask: np.ndarray, cls) -> list[np.ndarray]:
    """8-connected components of ``mask == cls`` (or ``isin(cls)``) as ``(k, 2)`` row/col arrays.

    Components are ordered by their first pixel in raster order.
    """
    classes = (cls,) if np.isscalar(cls) else tuple(cls)
    labels, count = ndimage.label(np.isin(mask, classes), structure=np.ones((3, 3), dtype=bool))
    comps = []
    for k in range(1, count + 1):
        rows, cols = np.nonzero(labels == k)
        comps.append(np.stack([rows, cols], axis=1))
    comps.sort(key=lambda c: (int(c[0, 0]), int(c[0, 1])))
    return comps


def trace_contour(component: np.ndarray) -> np.ndarray:
    """Clockwise Moore-neighbour boundary trace from the first pixel in raster order.

    A single pixel is reported as the four corners of its unit square.
    """
    pts = np.asarray(component)
    if pts.size == 0:
        raise EmptyComponent("cannot trace an empty component")
    r0, c0 = pts.min(axis=0)
    grid = np.zeros(tuple(pts.max(axis=0) - (r0, c0) + 3), dtype=bool)
    grid[pts[:, 0] - r0 + 1, pts[:, 1] - c0 + 1] = True
    if len(pts) == 1:
        r, c = int(pts[0, 0]), int(pts[0, 1])
        return np.array([(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)])

    fg = np.argwhere(grid)
    start = (int(fg[0, 0]), int(fg[0, 1]))
    start_dir = 0  # entered from the west during the raster scan
    contour = [start]
    p, back = start, start_dir
    while True:
        found = None
        for i in range(8):
            d = (back + i) % 8
            q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if grid[q]:
                found = (q, d)
                break
        if found is None:  # isolated pixel, unreachable for len > 1
            break
        q, d = found
        # next scan starts from the neighbour preceding q, expressed relative to q
        prev = (d - 1) % 8
        b = (p[0] + _MOORE[prev][0] - q[0], p[1] + _MOORE[prev][1] - q[1])
        back = _MOORE.index(b)
        if q == start and back == start_dir:
            break
        if q == start and len(contour) > 1 and contour[1] == _peek_next(grid, q, back):
            break
        contour.append(q)
        p = q
    out = np.array(contour)
    out[:, 0] += r0 - 1
    out[:, 1] += c0 - 1
    return out


def _peek_next(grid, p, back):
    for i in range(8):
        d = (back + i) % 8
        q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
        if grid[q]:
            return q
    return None


def contour_length(contour: np.ndarray) -> float:
    """Closed polyline length (unit axis steps, sqrt(2) diagonal steps)."""
    steps = np.diff(np.vstack([contour, contour[:1]]), axis=0).astype(np.float64)
    return float(np.hypot(steps[:, 0], steps[:, 1]).sum())


def area(mask: np.ndarray, classes) -> int:
    classes = (classes,) if np.isscalar(classes) else tuple(classes)
    return int(np.isin(mask, classes).sum()) if classes else 0


def _boundary(region: np.ndarray) -> np.ndarray:
    """Region pixels with at least one 8-neighbour outside the region (or off-canvas)."""
    inner = ndimage.binary_erosion(region, structure=np.ones((3, 3), dtype=bool), border_value=0)
    return region & ~inner


def gap(mask: np.ndarray) -> tuple[float, float]:
    """Distance from each diamond boundary pixel to the nearest holder pixel: ``(min, mean)``."""
    diamond = np.isin(mask, DIAMOND)
    holder = mask == POCKET_HOLDER
    if not diamond.any() or not holder.any():
        raise MissingRegion("gap needs both diamond and pocket-holder pixels")
    edge = np.argwhere(_boundary(diamond))
    tree = spatial.cKDTree(np.argwhere(holder))
    dist, _ = tree.query(edge)
    return float(dist.min()), float(dist.mean())


# ---------------------------------------------------------------- simplify


def _point_line_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    norm = math.hypot(ab[0], ab[1])
    if norm == 0:
        return np.hypot(points[:, 0] - a[0], points[:, 1] - a[1])
    return np.abs(ab[0] * (points[:, 1] - a[1]) - ab[1] * (points[:, 0] - a[0])) / norm


def _dp_open(points: np.ndarray, epsilon: float) -> list[int]:
    """Indices kept by Douglas-Peucker on an open polyline (endpoints always kept)."""
    keep = {0, len(points) - 1}
    stack = [(0, len(points) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        d = _point_line_distance(points[i + 1 : j], points[i], points[j])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            m = i + 1 + k
            keep.add(m)
            stack.append((i, m))
            stack.append((m, j))
    return sorted(keep)


def douglas_peucker(contour: np.ndarray, epsilon: float) -> np.ndarray:
    """Simplify a closed contour, splitting it at its two mutually most distant points."""
    pts = np.asarray(contour, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateContour("need at least 3 contour points")
    if epsilon <= 0:
        return np.asarray(contour).copy()
    dists = spatial.distance.cdist(pts, pts)
    a, b = np.unravel_index(int(np.argmax(dists)), dists.shape)
    a, b = sorted((int(a), int(b)))
    first = pts[a : b + 1]
    second = np.vstack([pts[b:], pts[: a + 1]])
    keep_first = [a + i for i in _dp_open(first, epsilon)]
    keep_second = [(b + i) % len(pts) for i in _dp_open(second, epsilon)]
    order = keep_first[:-1] + keep_second[:-1]
    return np.asarray(contour)[order]


# ------------------------------------------------------------------ shapes


# Raw 8-connected chain lengths overstate staircase edges by up to ~8%, which is
# enough to push a digital disc below a regular octagon. Straightening the contour
# at one pixel recovers digital straight segments exactly; adding pi offsets the
# pixel-centre path out to the pixel-edge boundary that the pixel count measures.
PERIMETER_EPSILON = 1.0


def perimeter(contour: np.ndarray) -> float:
    """Pixel-edge perimeter estimate of a traced contour."""
    if len(contour) < 3:
        return contour_length(contour) + math.pi
    return contour_length(douglas_peucker(contour, PERIMETER_EPSILON)) + math.pi


def circularity(component: np.ndarray, contour: np.ndarray) -> float:
    """``4*pi*A / P**2`` with ``A`` the pixel count and ``P`` from :func:`perimeter`."""
    p = perimeter(contour)
    return 4.0 * math.pi * len(component) / (p * p)


def classify_shape(mask: np.ndarray, rules: ShapeRules = ShapeRules()) -> tuple[str, int, float]:
    """Shape of the largest diamond-top component: ``(class, vertices, circularity)``."""
    comps = connected_components(mask, DIAMOND_TOP)
    if not comps:
        raise MissingRegion("no diamond-top pixels")
    largest = max(comps, key=len)
    contour = trace_contour(largest)
    circ = circularity(largest, contour)
    if len(contour) < 3:
        return "irregular", len(contour), circ
    vertices = len(douglas_peucker(contour, rules.epsilon_fraction * contour_length(contour)))
    if circ >= rules.rounded_circularity:
        return "rounded", vertices, circ
    if vertices == 4:
        return "square", vertices, circ
    if vertices in rules.octagon_vertices:
        return "octahedral", vertices, circ
    return "irregular", vertices, circ


# ------------------------------------------------------------ run features


@dataclass
class DerivedFeatures:
    area_diamond_px: int
    area_top_px: int
    area_side_px: int
    area_pocket_px: int
    gap_min_px: float | None = None
    gap_mean_px: float | None = None
    shape: str | None = None
    circularity: float | None = None
    polygon_vertices: int | None = None
    flags: list[str] = field(default_factory=list)


def frame_features(mask: np.ndarray, rules: ShapeRules = ShapeRules()) -> DerivedFeatures:
    """Features of one mask; missing regions become flags instead of errors."""
    feats = DerivedFeatures(
        area_diamond_px=area(mask, DIAMOND),
        area_top_px=area(mask, DIAMOND_TOP),
        area_side_px=area(mask, DIAMOND_SIDE),
        area_pocket_px=area(mask, POCKET_HOLDER),
    )
    try:
        feats.gap_min_px, feats.gap_mean_px = gap(mask)
    except MissingRegion:
        feats.flags.append("no_gap")
    try:
        feats.shape, feats.polygon_vertices, feats.circularity = classify_shape(mask, rules)
    except MissingRegion:
        feats.flags.append("no_top")
    return feats


@dataclass
class FeatureRow:
    timestamp_min: float
    features: DerivedFeatures
    rate_diamond: float | None = None
    rate_top: float | None = None
    rate_pocket: float | None = None


def run_features(predictions, rules: ShapeRules = ShapeRules()) -> list[FeatureRow]:
    """Per-frame features plus first-difference area rates (px per minute).

    ``predictions`` holds ``(timestamp, mask)`` or ``(timestamp, mask, flags)`` items.
    Rows keep input order; a row whose features failed keeps its flags and is never dropped.
    """
    rows: list[FeatureRow] = []
    for item in predictions:
        t, mask = item[0], item[1]
        extra = list(item[2]) if len(item) > 2 else []
        feats = frame_features(mask, rules)
        feats.flags = extra + feats.flags
        row = FeatureRow(float(t), feats)
        if rows:
            prev = rows[-1]
            dt = row.timestamp_min - prev.timestamp_min
            if dt > 0:
                row.rate_diamond = (feats.area_diamond_px - prev.features.area_diamond_px) / dt
                row.rate_top = (feats.area_top_px - prev.features.area_top_px) / dt
                row.rate_pocket = (feats.area_pocket_px - prev.features.area_pocket_px) / dt
        rows.append(row)
    return rows


def growth_slope(rows: list[FeatureRow], attr: str = "area_diamond_px") -> float:
    """Least-squares slope of an area column against time (px per minute)."""
    t = np.array([r.timestamp_min for r in rows], dtype=np.float64)
    a = np.array([getattr(r.features, attr) for r in rows], dtype=np.float64)
    if len(t) < 2 or np.ptp(t) == 0:
        return 0.0
    dt = t - t.mean()
    return float((dt * (a - a.mean())).sum() / (dt * dt).sum())


FEATURE_COLUMNS = (
    "run_id", "timestamp_min", "area_diamond", "area_top", "area_side", "area_pocket", "gap_min", "gap_mean",
    "shape", "circularity", "vertices", "rate_diamond", "rate_top", "rate_pocket", "flags",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def features_to_csv(runs) -> str:
    """CSV of ``{run_id: rows}`` (or a bare row list, written with an empty run id)."""
    if not isinstance(runs, dict):
        runs = {"": runs}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FEATURE_COLUMNS)
    for run_id, r in ((k, r) for k, rows in runs.items() for r in rows):
        f = r.features
        writer.writerow([_fmt(v) for v in (
            run_id, r.timestamp_min, f.area_diamond_px, f.area_top_px, f.area_side_px, f.area_pocket_px,
            f.gap_min_px, f.gap_mean_px, f.shape, f.circularity, f.polygon_vertices,
            r.rate_diamond, r.rate_top, r.rate_pocket, ";".join(f.flags),
        )])
    return buf.getvalue()


def area_chart_svg(rows: list[FeatureRow], width: int = 640, height: int = 320, title: str = "") -> str:
    """Line chart of top, side and pocket area against time."""
    series = {
        "diamond top": ([r.features.area_top_px for r in rows], "#ff69b4"),
        "diamond side": ([r.features.area_side_px for r in rows], "#00a000"),
        "pocket holder": ([r.features.area_pocket_px for r in rows], "#ff0000"),
    }
    t = [r.timestamp_min for r in rows]
    pad = 40
    t0, t1 = (min(t), max(t)) if t else (0.0, 1.0)
    top = max([max(v) for v, _ in series.values() if v] + [1])
    sx = (width - 2 * pad) / ((t1 - t0) or 1.0)
    sy = (height - 2 * pad) / top

    def xy(ti, a):
        return f"{pad + (ti - t0) * sx:.1f},{height - pad - a * sy:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">time (min)</text>',
        f'<text x="12" y="{pad - 10}" font-size="12">area (px), max {top}</text>',
    ]
    if title:
        parts.append(f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>')
    for i, (label, (vals, colour)) in enumerate(series.items()):
        pts = " ".join(xy(ti, a) for ti, a in zip(t, vals))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 110}" y="{pad + 14 * i}" font-size="12" fill="{colour}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
