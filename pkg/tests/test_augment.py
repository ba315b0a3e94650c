import numpy as np
import pytest

from diamondseg.augment import (
    AugmentPlan, TransformSpec, apply_geometric, apply_photometric, augment_copies, augment_dataset,
    jpeg_simulate,
)
from diamondseg.errors import InvalidParameter
from diamondseg.imaging import Sample

from conftest import make_sample


def block_sample(n=64, lo=27, hi=37):
    mask = np.zeros((n, n), np.uint8)
    mask[lo:hi, lo:hi] = 2
    return Sample("b", "r", 0.0, (mask * 100).astype(np.uint8), mask)


def test_rotate_zero_identity():
    s = make_sample(size=32)
    out = apply_geometric(s, TransformSpec("rotate", 0.0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_rotate_90_preserves_counts():
    s = make_sample(size=32)
    out = apply_geometric(s, TransformSpec("rotate", 90.0))
    assert np.array_equal(np.bincount(out.mask.ravel(), minlength=4), np.bincount(s.mask.ravel(), minlength=4))


def test_scale_two_block():
    out = apply_geometric(block_sample(), TransformSpec("scale", 2.0))
    assert 380 <= int((out.mask == 2).sum()) <= 420


def test_geometric_mask_labels_stay_valid(rng):
    s = make_sample(size=40)
    for spec in ([TransformSpec("rotate", 13.0)], [TransformSpec("shear", 0.15), TransformSpec("scale", 1.1)]):
        out = apply_geometric(s, spec)
        assert set(np.unique(out.mask)) <= set(np.unique(s.mask)) | {0}


def test_photometric_identities(rng):
    img = rng.integers(0, 256, (24, 24), dtype=np.uint8)
    assert np.array_equal(apply_photometric(img, TransformSpec("gaussian_noise", 0.0)), img)
    assert np.array_equal(apply_photometric(img, TransformSpec("sharpen", 0.0)), img)
    const = np.full((16, 16), 90, np.uint8)
    assert np.array_equal(apply_photometric(const, TransformSpec("blur", 1.2)), const)
    assert (apply_photometric(const, TransformSpec("emboss")) == 128).all()


def test_jpeg_properties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        img = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        assert np.abs(jpeg_simulate(img, 100).astype(int) - img).max() <= 1
    for q in (5, 50, 95):
        out = jpeg_simulate(np.full((20, 20), 133, np.uint8), q).astype(int)
        assert out.max() - out.min() <= 1
    edge = np.zeros((16, 16), np.uint8)
    edge[:, 5:] = 255
    assert not np.array_equal(jpeg_simulate(edge, 5), edge)


def test_invalid_parameters():
    for kind, value in (("rotate", 200.0), ("scale", 3.0), ("shear", 1.0), ("blur", -1.0), ("jpeg", 0), ("jpeg", 50.5), ("warp", 1.0)):
        with pytest.raises(InvalidParameter):
            TransformSpec(kind, value)
    with pytest.raises(InvalidParameter):
        AugmentPlan(rate=0)


def test_dataset_rates_and_determinism():
    data = [make_sample(f"s{i}", size=16, seed=i) for i in range(200)]
    out = augment_dataset(data, AugmentPlan(rate=5, seed=1))
    assert len(out) == 1000
    assert [s.id for s in out[:200]] == [s.id for s in data]
    assert augment_dataset(data, AugmentPlan(rate=1)) == data
    again = augment_dataset(data[:10], AugmentPlan(rate=3, seed=1))
    first = augment_dataset(data[:10], AugmentPlan(rate=3, seed=1))
    assert all(np.array_equal(a.image, b.image) and a.meta == b.meta for a, b in zip(first, again))


def test_copies_are_labeled_by_source():
    s = make_sample("orig", size=16)
    copies = augment_copies(s, 4, seed=0, first_copy=5)
    assert [c.id for c in copies] == [f"orig_aug{k}" for k in range(5, 9)]
    assert all(c.meta["source_id"] == "orig" and c.meta["transforms"] for c in copies)
