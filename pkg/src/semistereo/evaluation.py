"""Winner-take-all disparity prediction, 3-pixel error rate, and
similarity-matrix rendering."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import GroundTruthDisparity, StereoPair, write_pgm
from .embedding import EmbeddingNetwork, standardize
from .errors import DataError
from .similarity import SimilarityMatrix

THRESHOLD = 3.0


def wta_disparity(s: SimilarityMatrix) -> np.ndarray:
    """i - argmax_j S[i, j] over valid j (lowest j on ties); -1 for empty rows."""
    j = s.row_argmax()
    return np.where(j >= 0, np.arange(s.width) - j, -1)


def cost_volume(left_desc: np.ndarray, right_desc: np.ndarray, d_max: int) -> np.ndarray:
    """Cosine similarities [rows, W, d_max + 1] between left descriptor (r, i)
    and right descriptor (r, i - d); -inf where i - d < 0."""
    rows, width, _ = left_desc.shape
    vol = np.full((rows, width, d_max + 1), -np.inf)
    left = left_desc.astype(np.float64)
    right = right_desc.astype(np.float64)
    for d in range(min(d_max, width - 1) + 1):
        vol[:, d:, d] = np.einsum("rif,rif->ri", left[:, d:], right[:, :width - d])
    return vol


def wta_from_volume(vol: np.ndarray) -> np.ndarray:
    """Argmax disparity per (row, column); ties go to the larger disparity,
    i.e. the lower matched column, consistent with :func:`wta_disparity`."""
    nd = vol.shape[2]
    return nd - 1 - np.argmax(vol[:, :, ::-1], axis=2)


def predict_disparity_map(net: EmbeddingNetwork, pair: StereoPair) -> np.ndarray:
    """WTA disparity in image coordinates; NaN where no descriptor exists."""
    left = net.embed_image(standardize(pair.left))
    right = net.embed_image(standardize(pair.right))
    disp = wta_from_volume(cost_volume(left, right, pair.d_max))
    half = (net.patch_size - 1) // 2
    out = np.full(pair.shape, np.nan)
    out[half:half + disp.shape[0], half:half + disp.shape[1]] = disp
    return out


@dataclass
class WtaReport:
    errors: int = 0
    evaluated_pixels: int = 0
    border_excluded: int = 0
    per_line: list[tuple[int, int, int]] = field(default_factory=list)
    threshold: float = THRESHOLD

    @property
    def defined(self) -> bool:
        return self.evaluated_pixels > 0

    @property
    def error_rate(self) -> float:
        return self.errors / self.evaluated_pixels if self.defined else float("nan")

    def merge(self, other: "WtaReport") -> "WtaReport":
        return WtaReport(self.errors + other.errors,
                         self.evaluated_pixels + other.evaluated_pixels,
                         self.border_excluded + other.border_excluded,
                         self.per_line + other.per_line, self.threshold)

    def key_values(self) -> str:
        rate = f"{self.error_rate:.4f}" if self.defined else "undefined"
        return (f"wta_error={rate}\nerrors={self.errors}\n"
                f"evaluated_pixels={self.evaluated_pixels}\n"
                f"border_excluded={self.border_excluded}\n")

    def table(self) -> str:
        rate = f"{100 * self.error_rate:.2f} %" if self.defined else "undefined"
        rows = [("WTA error (> %g px)" % self.threshold, rate),
                ("erroneous pixels", str(self.errors)),
                ("evaluated pixels", str(self.evaluated_pixels)),
                ("excluded (no descriptor)", str(self.border_excluded))]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def wta_error_rate(pred: np.ndarray, gt: GroundTruthDisparity,
                   threshold: float = THRESHOLD, patch_size: int | None = None) -> WtaReport:
    """Fraction of known, visible pixels with |pred - gt| > threshold.

    Pixels where ``pred`` is NaN (no reference descriptor) are excluded and
    counted in ``border_excluded``. With ``patch_size`` set, pixels whose true
    match falls left of the first right-image descriptor are excluded too.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.values.shape:
        raise DataError(f"prediction {pred.shape} and ground truth {gt.values.shape} differ")
    candidate = gt.evaluable()
    has_pred = np.isfinite(pred)
    if patch_size is not None:
        half = (patch_size - 1) // 2
        cols = np.arange(pred.shape[1])[None, :]
        has_pred &= (cols - np.nan_to_num(gt.values, nan=0.0)) >= half
    usable = candidate & has_pred
    wrong = usable & (np.abs(np.where(usable, pred - np.nan_to_num(gt.values), 0)) > threshold)
    per_line = [(int(r), int(wrong[r].sum()), int(usable[r].sum()))
                for r in range(pred.shape[0]) if usable[r].any()]
    return WtaReport(int(wrong.sum()), int(usable.sum()), int((candidate & ~has_pred).sum()),
                     per_line, threshold)


def similarity_to_gray(s: SimilarityMatrix) -> np.ndarray:
    """8-bit rendering: valid range [min, max] maps to [255, 0] (dark = similar),
    banned cells are white. A constant matrix renders black."""
    img = np.full(s.values.shape, 255, dtype=np.uint8)
    if not s.valid.any():
        return img
    v = s.values[s.valid]
    lo, hi = float(v.min()), float(v.max())
    if hi > lo:
        img[s.valid] = np.rint(255.0 * (hi - v) / (hi - lo)).astype(np.uint8)
    else:
        img[s.valid] = 0
    return img


def dump_similarity_image(s: SimilarityMatrix, out_path: str | Path) -> None:
    try:
        write_pgm(out_path, similarity_to_gray(s))
    except OSError as exc:
        raise DataError(f"{out_path}: cannot write similarity image ({exc})") from exc
