"""Banded cosine-similarity matrices between descriptor lines.

Entry (i, j) compares reference descriptor i with positive descriptor j and
is valid only inside the disparity band 0 <= i - j <= d_max. Everything
else is banned: flagged in ``valid`` and holding the finite sentinel
``BANNED`` so that sums stay finite while any max still ignores it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

BANNED = -1e9


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [W, W] float64
    valid: np.ndarray  # [W, W] bool
    d_max: int

    @property
    def width(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.values.copy(), self.valid.copy(), self.d_max)

    def banned(self, mask: np.ndarray) -> "SimilarityMatrix":
        """A copy with the cells in ``mask`` additionally banned."""
        valid = self.valid & ~mask
        values = np.where(valid, self.values, BANNED)
        return SimilarityMatrix(values, valid, self.d_max)

    def row_argmax(self) -> np.ndarray:
        """Lowest-index argmax of every row, or -1 for rows with no valid cell."""
        idx = np.argmax(np.where(self.valid, self.values, -np.inf), axis=1)
        return np.where(self.valid.any(axis=1), idx, -1)

    def col_argmax(self) -> np.ndarray:
        idx = np.argmax(np.where(self.valid, self.values, -np.inf), axis=0)
        return np.where(self.valid.any(axis=0), idx, -1)


@dataclass(frozen=True)
class ValidityRanges:
    """Rows and columns guaranteed to contain a true match (0-based)."""
    rows: np.ndarray
    cols: np.ndarray

    @classmethod
    def for_band(cls, width: int, d_max: int) -> "ValidityRanges":
        if d_max >= width:
            raise ConfigError(f"d_max={d_max} leaves no guaranteed rows for width {width}")
        return cls(np.arange(d_max, width), np.arange(0, width - d_max))


def band_mask(width: int, d_max: int) -> np.ndarray:
    i = np.arange(width)[:, None]
    j = np.arange(width)[None, :]
    diff = i - j
    return (diff >= 0) & (diff <= d_max)


def build_banded_similarity(a: np.ndarray, b: np.ndarray, d_max: int) -> SimilarityMatrix:
    """Dot products a_i . b_j on the band only: W * (d_max + 1) of them at most."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"descriptor lines must share shape [W, D], got {a.shape}, {b.shape}")
    width = a.shape[0]
    if not 0 < d_max < width:
        raise ConfigError(f"need 0 < d_max < W, got d_max={d_max}, W={width}")
    values = np.full((width, width), BANNED)
    idx = np.arange(width)
    for d in range(d_max + 1):
        i = idx[d:]
        values[i, i - d] = np.einsum("ij,ij->i", a[d:], b[:width - d])
    return SimilarityMatrix(values, band_mask(width, d_max), d_max)


def similarity_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray,
                        valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the two descriptor lines from d(loss)/dS."""
    if valid is not None:
        grad = np.where(valid, grad, 0.0)
    return grad @ np.asarray(b, dtype=np.float64), grad.T @ np.asarray(a, dtype=np.float64)


def _neighbourhood(centres: np.ndarray, width: int, radius: int) -> np.ndarray:
    """Boolean [len(centres), width] with True where |k - centre| <= radius."""
    k = np.arange(width)[None, :]
    return np.abs(k - centres[:, None]) <= radius


def mask_row_maxima(s: SimilarityMatrix, t_sup: int = 0) -> SimilarityMatrix:
    """Ban each row's maximum and the valid cells within ``t_sup`` columns of it."""
    jstar = s.row_argmax()
    mask = _neighbourhood(jstar, s.width, t_sup) & (jstar >= 0)[:, None]
    return s.banned(mask)


def mask_col_maxima(s: SimilarityMatrix, t_sup: int = 0) -> SimilarityMatrix:
    istar = s.col_argmax()
    mask = (_neighbourhood(istar, s.width, t_sup) & (istar >= 0)[:, None]).T
    return s.banned(mask)


def suppress_path_neighborhood(s: SimilarityMatrix, cells: Iterable[tuple[int, int]],
                               t_sup: int) -> SimilarityMatrix:
    """Ban, around every path cell (i, j), the cells of row i within ``t_sup``
    columns of j and the cells of column j within ``t_sup`` rows of i."""
    cells = np.asarray(list(cells), dtype=np.int64).reshape(-1, 2)
    if len(cells) == 0:
        return s.copy()
    rows, cols = cells[:, 0], cells[:, 1]
    w = s.width
    inside = (rows >= 0) & (rows < w) & (cols >= 0) & (cols < w)
    if not inside.all() or not s.valid[rows, cols].all():
        bad = cells[~(inside & s.valid[np.clip(rows, 0, w - 1), np.clip(cols, 0, w - 1)])][0]
        raise ContractError(f"path cell {tuple(int(v) for v in bad)} lies outside the band")
    mask = np.zeros((w, w), dtype=bool)
    k = np.arange(w)
    for i, j in zip(rows, cols):
        mask[i, np.abs(k - j) <= t_sup] = True
        mask[np.abs(k - i) <= t_sup, j] = True
    return s.banned(mask)
