"""Hinge losses on similarity matrices.

Every loss returns a :class:`LossResult` holding the scalar value and the
subgradient with respect to each input matrix (dense [W, W] arrays, zero
outside active cells). A hinge exactly at its kink counts as inactive.

Matrix keys used in ``grads``: ``"rp"`` (reference vs positive line),
``"rn"`` (reference vs negative line) and ``"np"`` (negative vs positive).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .similarity import SimilarityMatrix, ValidityRanges, mask_col_maxima, \
    mask_row_maxima, suppress_path_neighborhood


class Method(str, Enum):
    MIL = "MIL"
    CONTRASTIVE = "CONTRASTIVE"
    MIL_CONTRASTIVE = "MIL_CONTRASTIVE"
    CONTRASTIVE_DP = "CONTRASTIVE_DP"

    @property
    def needs_negative(self) -> bool:
        return self in (Method.MIL, Method.MIL_CONTRASTIVE)


@dataclass(frozen=True)
class LossConfig:
    method: Method = Method.CONTRASTIVE_DP
    mu: float = 0.2
    t_sup: int = 2
    t_occ: int = 3

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not self.mu > 0:
            raise ConfigError(f"margin mu must be positive, got {self.mu}")
        if self.t_sup < 0:
            raise ConfigError(f"t_sup must be >= 0, got {self.t_sup}")
        if self.t_occ < 1:
            raise ConfigError(f"t_occ must be >= 1, got {self.t_occ}")


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray]
    diagnostics: dict[str, int] = field(default_factory=dict)

    def __add__(self, other: "LossResult") -> "LossResult":
        grads = {k: v.copy() for k, v in self.grads.items()}
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g.copy()
        diag = dict(self.diagnostics)
        for k, v in other.diagnostics.items():
            diag[k] = diag.get(k, 0) + v
        return LossResult(self.value + other.value, grads, diag)


def _ranges_for(s: SimilarityMatrix, ranges: ValidityRanges | None) -> ValidityRanges:
    r = ranges if ranges is not None else ValidityRanges.for_band(s.width, s.d_max)
    if len(r.rows) == 0 or len(r.cols) == 0:
        raise ConfigError("empty row or column range: W must exceed d_max")
    return r


def _hinge_rows(grad_pos, grad_neg, pos, neg, rows, pos_idx, neg_idx, mu, weight):
    """Row-wise hinge max(0, neg[i, neg_idx] - pos[i, pos_idx] + mu)."""
    h = neg.values[rows, neg_idx] - pos.values[rows, pos_idx] + mu
    active = h > 0
    np.add.at(grad_pos, (rows[active], pos_idx[active]), -weight)
    np.add.at(grad_neg, (rows[active], neg_idx[active]), weight)
    return float(h[active].sum() * weight)


def mil_loss(s_rp: SimilarityMatrix, s_rn: SimilarityMatrix, s_np: SimilarityMatrix,
             ranges: ValidityRanges | None = None, mu: float = 0.2) -> LossResult:
    """Best positive match must beat the best negative match by ``mu``,
    row-wise against the reference-negative matrix and column-wise against
    the negative-positive matrix."""
    if not (s_rp.values.shape == s_rn.values.shape == s_np.values.shape):
        raise ShapeError("MIL matrices must share the same width")
    r = _ranges_for(s_rp, ranges)
    g = {k: np.zeros_like(s_rp.values) for k in ("rp", "rn", "np")}
    rows, cols = r.rows, r.cols
    value = _hinge_rows(g["rp"], g["rn"], s_rp, s_rn, rows,
                        s_rp.row_argmax()[rows], s_rn.row_argmax()[rows], mu, 1.0 / len(rows))
    # column terms are the row terms of the transposed problem
    gt_rp, gt_np = g["rp"].T, g["np"].T
    value += _hinge_rows(gt_rp, gt_np, _transposed(s_rp), _transposed(s_np), cols,
                         s_rp.col_argmax()[cols], s_np.col_argmax()[cols], mu, 1.0 / len(cols))
    return LossResult(value, g)


def _transposed(s: SimilarityMatrix) -> SimilarityMatrix:
    return SimilarityMatrix(s.values.T, s.valid.T, s.d_max)


def _contrastive_rows(s: SimilarityMatrix, masked: SimilarityMatrix, grad: np.ndarray,
                      rows: np.ndarray, mu: float, weight: float) -> tuple[float, int]:
    best = s.row_argmax()[rows]
    second = masked.row_argmax()[rows]
    ok = second >= 0
    assert not np.any((best == second) & ok), "masked maximum coincides with the maximum"
    value = _hinge_rows(grad, grad, s, masked, rows[ok], best[ok], second[ok], mu, weight)
    return value, int((~ok).sum())


def contrastive_loss(s_rp: SimilarityMatrix, ranges: ValidityRanges | None = None,
                     mu: float = 0.2, t_sup: int = 2) -> LossResult:
    """Best match must beat the second best (outside radius ``t_sup``) by ``mu``.

    Rows or columns with nothing left after suppression contribute zero and
    are counted in ``diagnostics["suppressed"]``.
    """
    r = _ranges_for(s_rp, ranges)
    grad = np.zeros_like(s_rp.values)
    v_rows, n_rows = _contrastive_rows(s_rp, mask_row_maxima(s_rp, t_sup), grad, r.rows,
                                       mu, 1.0 / len(r.rows))
    col_masked = _transposed(mask_col_maxima(s_rp, t_sup))
    v_cols, n_cols = _contrastive_rows(_transposed(s_rp), col_masked, grad.T, r.cols,
                                       mu, 1.0 / len(r.cols))
    return LossResult(v_rows + v_cols, {"rp": grad}, {"suppressed": n_rows + n_cols})


def mil_contrastive_loss(s_rp, s_rn, s_np, ranges: ValidityRanges | None = None,
                         mu: float = 0.2, t_sup: int = 2) -> LossResult:
    return mil_loss(s_rp, s_rn, s_np, ranges, mu) + contrastive_loss(s_rp, ranges, mu, t_sup)


def contrastive_dp_loss(s_rp: SimilarityMatrix, cells: Sequence[tuple[int, int]],
                        mu: float = 0.2, t_sup: int = 2) -> LossResult:
    """Every matched cell must beat the best competitor in its row and in its
    column by ``mu``; competitors are searched after suppressing the
    ``t_sup`` neighbourhood of all matched cells.

    ``cells`` are the kept cells of a match path; the path itself is treated
    as a constant. An empty path gives zero loss and ``diagnostics["degenerate"] = 1``.
    """
    grad = np.zeros_like(s_rp.values)
    cells = np.asarray(list(cells), dtype=np.int64).reshape(-1, 2)
    if len(cells) == 0:
        return LossResult(0.0, {"rp": grad}, {"degenerate": 1})
    masked = suppress_path_neighborhood(s_rp, cells, t_sup)
    rows, cols = cells[:, 0], cells[:, 1]
    weight = 1.0 / len(cells)
    value = 0.0

    comp = masked.row_argmax()[rows]
    ok = comp >= 0
    r, c, k = rows[ok], cols[ok], comp[ok]
    h = masked.values[r, k] - s_rp.values[r, c] + mu
    act = h > 0
    np.add.at(grad, (r[act], c[act]), -weight)
    np.add.at(grad, (r[act], k[act]), weight)
    value += float(h[act].sum() * weight)

    comp = masked.col_argmax()[cols]
    ok = comp >= 0
    r, c, k = rows[ok], cols[ok], comp[ok]
    h = masked.values[k, c] - s_rp.values[r, c] + mu
    act = h > 0
    np.add.at(grad, (r[act], c[act]), -weight)
    np.add.at(grad, (k[act], c[act]), weight)
    value += float(h[act].sum() * weight)
    return LossResult(value, {"rp": grad}, {"degenerate": 0})
