import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from diamondseg import geometry as g
from diamondseg.errors import DegenerateContour, EmptyComponent, MissingRegion
from diamondseg.synthgen import (
    AnnotatorNoiseSpec, GrowthRunSpec, diamond_halfplanes, random_run_spec, render_mask, simulate_annotator,
)


def flood_components(binary):
    """8-connected components by explicit BFS, ordered by first pixel in raster order."""
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    h, w = binary.shape
    for r in range(h):
        for c in range(w):
            if binary[r, c] and not seen[r, c]:
                queue, pix = deque([(r, c)]), []
                seen[r, c] = True
                while queue:
                    y, x = queue.popleft()
                    pix.append((y, x))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and binary[yy, xx] and not seen[yy, xx]:
                                seen[yy, xx] = True
                                queue.append((yy, xx))
                comps.append(sorted(pix))
    return comps


def brute_gap(mask):
    """All boundary-pixel / holder-pixel pairs; boundary found by scanning each 3x3 neighbourhood."""
    diamond = np.isin(mask, (2, 3))
    h, w = mask.shape
    edge = []
    for r, c in np.argwhere(diamond):
        if any(not (0 <= r + dy < h and 0 <= c + dx < w) or not diamond[r + dy, c + dx]
               for dy in (-1, 0, 1) for dx in (-1, 0, 1)):
            edge.append((r, c))
    edge = np.array(edge, dtype=np.float64)
    holder = np.argwhere(mask == 1).astype(np.float64)
    d = np.sqrt(((edge[:, None, :] - holder[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return float(d.min()), float(d.mean())


def random_gap_mask(seed):
    """A 64x64 synthetic frame at a random time, half of them through a noisy annotator."""
    r = np.random.default_rng([seed, 3])
    spec = random_run_spec(seed, frames=60, canvas=(64, 64))
    m = render_mask(spec, int(r.integers(0, 60)))
    if seed % 2:
        m = simulate_annotator(m, AnnotatorNoiseSpec(), [seed, 4])
    return m


def shape_mask(kind, size, cy=40.3, cx=40.7, n=96):
    yy, xx = np.mgrid[0:n, 0:n]
    m = np.zeros((n, n), np.uint8)
    if kind == "disc":
        m[(xx - cx) ** 2 + (yy - cy) ** 2 <= size * size] = 2
        return m
    normals, offsets = diamond_halfplanes(kind, size, 0.4)
    pts = np.stack([xx - cx, yy - cy], -1).astype(float)
    m[np.all(pts @ np.asarray(normals).T <= np.asarray(offsets), axis=-1)] = 2
    return m


blobs = arrays(np.uint8, (12, 12), elements=st.integers(0, 3))


@given(blobs)
@settings(max_examples=40, deadline=None)
def test_components_match_flood_fill(mask):
    got = [sorted(map(tuple, c.tolist())) for c in g.connected_components(mask, 2)]
    assert got == flood_components(mask == 2)


def test_components_basic():
    m = np.zeros((10, 10), np.uint8)
    assert g.connected_components(m, 2) == []
    m[1:3, 6:8] = 2
    m[5:7, 1:3] = 2
    comps = g.connected_components(m, 2)
    assert len(comps) == 2 and comps[0][0].tolist() == [1, 6]


def test_contour_block_and_pixel():
    block = np.argwhere(np.ones((3, 3), bool))
    c = g.trace_contour(block)
    assert len(c) == 8
    assert c[0].tolist() == [0, 0] and c[1].tolist() == [0, 1]  # clockwise: east along the top
    single = g.trace_contour(np.array([[4, 7]]))
    assert single.tolist() == [[4, 7], [4, 8], [5, 8], [5, 7]]
    with pytest.raises(EmptyComponent):
        g.trace_contour(np.zeros((0, 2), int))


@given(blobs)
@settings(max_examples=60, deadline=None)
def test_contour_properties(mask):
    for comp in g.connected_components(mask, 1):
        c = g.trace_contour(comp)
        steps = np.abs(np.diff(np.vstack([c, c[:1]]), axis=0))
        if len(comp) == 1:
            assert len(c) == 4
            continue
        assert steps.max() <= 1  # consecutive points (and last/first) are 8-adjacent
        assert len(set(map(tuple, c.tolist()))) <= len(comp)
        members = set(map(tuple, comp.tolist()))
        assert set(map(tuple, c.tolist())) <= members
        assert tuple(c[0]) == min(members)


def test_area_partition(rng):
    m = rng.integers(0, 4, (20, 30)).astype(np.uint8)
    assert g.area(m, (0, 1, 2, 3)) == 600
    assert g.area(m, (2, 3)) == g.area(m, 2) + g.area(m, 3) == int(np.isin(m, (2, 3)).sum())
    block = np.zeros((20, 20), np.uint8)
    block[:10, :10] = 2
    assert g.area(block, 2) == 100 and g.area(block, 1) == 0


def test_gap_examples():
    m = np.ones((64, 64), np.uint8)  # holder everywhere ...
    m[13:51, 13:51] = 0  # ... except inside the square whose holder edge spans rows/cols 12..51
    m[22:42, 22:42] = 2  # centred 20x20 diamond
    assert g.gap(m)[0] == 10.0
    touch = np.zeros((10, 10), np.uint8)
    touch[:, :3] = 1
    touch[2:6, 3:6] = 2
    assert g.gap(touch)[0] == 1.0
    with pytest.raises(MissingRegion):
        g.gap(np.full((5, 5), 2, np.uint8))


def test_gap_matches_brute_force():
    for seed in range(20):
        m = random_gap_mask(seed)
        got, want = g.gap(m), brute_gap(m)
        assert got[0] == want[0]
        assert got[1] == pytest.approx(want[1], rel=1e-12)


def test_douglas_peucker():
    line = g.trace_contour(np.array([[0, c] for c in range(10)]))
    assert len(g.douglas_peucker(line, 0.5)) == 2
    sq = g.trace_contour(np.argwhere(np.ones((21, 21), bool)))
    assert len(g.douglas_peucker(sq, 0)) == len(sq)
    simplified = g.douglas_peucker(sq, 0.02 * g.contour_length(sq))
    assert len(simplified) == 4
    assert set(map(tuple, simplified.tolist())) <= set(map(tuple, sq.tolist()))
    with pytest.raises(DegenerateContour):
        g.douglas_peucker(np.array([[0, 0], [0, 1]]), 1.0)


def test_shape_examples():
    sq = np.zeros((40, 40), np.uint8)
    sq[5:26, 5:26] = 2
    assert g.classify_shape(sq)[:2] == ("square", 4)
    assert g.classify_shape(shape_mask("octagon", 15))[0] == "octahedral"
    assert g.classify_shape(shape_mask("disc", 15))[0] == "rounded"
    with pytest.raises(MissingRegion):
        g.classify_shape(np.zeros((5, 5), np.uint8))


def test_shape_uses_largest_component():
    m = np.zeros((60, 60), np.uint8)
    m[10:31, 10:31] = 2
    m[50:53, 50:52] = 2  # speckle
    assert g.classify_shape(m)[0] == "square"


def test_shape_invariances():
    for kind in ("square", "octagon", "disc"):
        m = shape_mask(kind, 17)
        base = g.classify_shape(m)
        for k in range(1, 4):
            assert g.classify_shape(np.rot90(m, k))[0] == base[0]
        assert g.classify_shape(np.roll(m, (3, -4), axis=(0, 1))) == base


def test_circularity_range():
    for kind in ("square", "octagon", "disc"):
        for size in (10, 20, 30):
            circ = g.classify_shape(shape_mask(kind, size))[2]
            assert 0 < circ <= 1.1


def test_run_features_growth_and_flags():
    spec = GrowthRunSpec(frames=30)
    items = [(t, render_mask(spec, t)) for t in range(30)]
    items.append((30, np.zeros((72, 72), np.uint8), ["blackout"]))
    rows = g.run_features(items)
    assert len(rows) == 31
    assert g.growth_slope(rows[:-1]) > 0
    assert rows[-1].features.flags == ["blackout", "no_gap", "no_top"]
    assert rows[0].rate_diamond is None
    csv_text = g.features_to_csv(rows)
    assert csv_text.splitlines()[0].split(",") == list(g.FEATURE_COLUMNS)
    assert len(csv_text.splitlines()) == 32


def test_run_features_constant_masks():
    m = render_mask(GrowthRunSpec(), 0)
    rows = g.run_features([(t, m) for t in range(5)])
    assert all(r.rate_diamond == 0 for r in rows[1:])
    assert g.growth_slope(rows) == 0


def test_area_chart_svg_is_xml():
    import xml.dom.minidom

    rows = g.run_features([(t, render_mask(GrowthRunSpec(frames=5), t)) for t in range(5)])
    xml.dom.minidom.parseString(g.area_chart_svg(rows, title="run & co"))
