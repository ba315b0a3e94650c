"""Separable 1-D interpolation operators shared by resizing and upsampling."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=128)
def _linear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers: output i samples input coordinate (i + 0.5) * n_in / n_out - 0.5
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def linear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``(n_out, n_in)`` matrix of 1-D linear interpolation, borders clamped."""
    return _linear_matrix(int(n_in), int(n_out)).astype(dtype, copy=False)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    src = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(src, 0, n_in - 1)


def resize_bilinear(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the two leading axes of ``array`` (float64 result)."""
    mh = linear_matrix(array.shape[0], out_h)
    mw = linear_matrix(array.shape[1], out_w)
    a = array.astype(np.float64)
    return np.einsum("ij,jk...,lk->il...", mh, a, mw, optimize=True)


def resize_nearest(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = nearest_indices(array.shape[0], out_h)
    cols = nearest_indices(array.shape[1], out_w)
    return array[rows][:, cols]
