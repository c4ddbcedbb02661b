"""Maximum-average monotone path through a banded similarity matrix.

A path moves from row 0 to the last row of the matrix using right (0, 1),
down (1, 0) and diagonal (1, 1) steps, staying inside the valid band. Its
score is the *mean* of the visited cells, so long paths are not favoured
over short ones. The ratio objective is solved by Dinkelbach iteration:
each round runs a max-sum DP on ``S - lam`` and resets ``lam`` to the mean of
the path it found, until the max-sum value reaches zero.

Indices are 0-based: row i is the reference descriptor, column j the
positive descriptor, disparity is i - j.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TextIO

import numba
import numpy as np

from .errors import ContractError, MatcherError
from .similarity import SimilarityMatrix

STEPS = ((0, 1), (1, 0), (1, 1))
MAX_DINKELBACH_ITERS = 50
ORACLE_MAX_WIDTH = 12

_START, _DIAG, _RIGHT, _DOWN = 0, 1, 2, 3


@dataclass
class MatchPath:
    cells: np.ndarray  # [n, 2] int64 (row, col)
    mean_energy: float
    kept: np.ndarray = None  # [n] bool
    lambdas: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        if self.kept is None:
            self.kept = np.ones(len(self.cells), dtype=bool)

    def __len__(self):
        return len(self.cells)

    def kept_cells(self) -> np.ndarray:
        return self.cells[self.kept]


@numba.njit(cache=True)
def _max_sum_path(values, valid, d_max, lam):
    """Max-sum DP over band coordinates (row i, disparity d = i - j).

    Returns (best total, end row, end disparity, choice table). Predecessor
    ties prefer diagonal, then right, then down.
    """
    w = values.shape[0]
    nd = d_max + 1
    neg = -np.inf
    score = np.full((w, nd), neg)
    choice = np.zeros((w, nd), dtype=np.int8)
    for i in range(w):
        # j increases as d decreases, so sweep d downwards for right steps
        for d in range(nd - 1, -1, -1):
            j = i - d
            if j < 0 or not valid[i, j]:
                continue
            best = neg
            how = -1
            if i == 0 and j < max(d_max, 1):
                best = 0.0
                how = _START
            if i > 0 and j > 0 and score[i - 1, d] > best:
                best = score[i - 1, d]
                how = _DIAG
            if d + 1 < nd and score[i, d + 1] > best:
                best = score[i, d + 1]
                how = _RIGHT
            if i > 0 and d > 0 and score[i - 1, d - 1] > best:
                best = score[i - 1, d - 1]
                how = _DOWN
            if how >= 0:
                score[i, d] = best + values[i, j] - lam
                choice[i, d] = how
    last = w - 1
    best_total = neg
    best_d = -1
    # lowest column wins ties, i.e. the largest disparity
    for d in range(nd - 1, -1, -1):
        if score[last, d] > best_total:
            best_total = score[last, d]
            best_d = d
    return best_total, best_d, choice


def _backtrack(choice: np.ndarray, end_row: int, end_d: int) -> np.ndarray:
    cells = []
    i, d = end_row, end_d
    while True:
        cells.append((i, i - d))
        how = choice[i, d]
        if how == _START:
            break
        if how == _DIAG:
            i -= 1
        elif how == _RIGHT:
            d += 1
        else:
            i -= 1
            d -= 1
    return np.array(cells[::-1], dtype=np.int64)


def _path_mean(values: np.ndarray, cells: np.ndarray) -> float:
    return float(np.mean(values[cells[:, 0], cells[:, 1]]))


def max_average_path(s: SimilarityMatrix, tol: float = 1e-9) -> MatchPath:
    """Feasible path of maximal mean cell value (Dinkelbach iteration).

    ``lambdas`` on the result records the non-decreasing sequence of means
    visited by the iteration.
    """
    values = np.ascontiguousarray(s.values, dtype=np.float64)
    valid = np.ascontiguousarray(s.valid)
    w = s.width
    if not valid[0, :max(s.d_max, 1)].any():
        raise MatcherError("no valid start cell in the first row")
    total, end_d, choice = _max_sum_path(values, valid, s.d_max, 0.0)
    if end_d < 0:
        raise MatcherError("no feasible path reaches the last row")
    cells = _backtrack(choice, w - 1, end_d)
    lam = _path_mean(values, cells)
    lambdas = [lam]
    for _ in range(MAX_DINKELBACH_ITERS):
        total, end_d, choice = _max_sum_path(values, valid, s.d_max, lam)
        if total <= tol:
            break
        candidate = _backtrack(choice, w - 1, end_d)
        new_lam = _path_mean(values, candidate)
        if new_lam <= lam + tol * 1e-3:
            break
        cells, lam = candidate, new_lam
        lambdas.append(lam)
    else:
        raise MatcherError(f"Dinkelbach did not converge in {MAX_DINKELBACH_ITERS} iterations")
    return MatchPath(cells, lam, lambdas=lambdas)


def brute_force_path_oracle(s: SimilarityMatrix) -> MatchPath:
    """Exhaustive enumeration of feasible paths; the first maximal mean found
    in depth-first order (diagonal, right, down) wins. Only for W <= 12."""
    w = s.width
    if w > ORACLE_MAX_WIDTH:
        raise MatcherError(f"oracle refuses W={w} > {ORACLE_MAX_WIDTH}")
    values = s.values.tolist()
    valid = s.valid.tolist()
    best = [-np.inf, None]
    trail: list[tuple[int, int]] = []

    def visit(i, j, total):
        trail.append((i, j))
        if i == w - 1 or j == w - 1:
            mean = total / len(trail)
            if mean > best[0]:
                best[0], best[1] = mean, list(trail)
        for di, dj in ((1, 1), (0, 1), (1, 0)):
            ni, nj = i + di, j + dj
            if ni < w and nj < w and valid[ni][nj]:
                visit(ni, nj, total + values[ni][nj])
        trail.pop()

    for j0 in range(max(s.d_max, 1)):
        if j0 < w and valid[0][j0]:
            visit(0, j0, values[0][j0])
    if best[1] is None:
        raise MatcherError("no feasible path")
    cells = np.array(best[1], dtype=np.int64)
    return MatchPath(cells, _path_mean(s.values, cells))


def validate_path(path: MatchPath, s: SimilarityMatrix) -> list[str]:
    """List every violated path invariant (empty when the path is feasible)."""
    problems = []
    cells = path.cells
    if len(cells) == 0:
        return ["empty path"]
    w = s.width
    i0, j0 = cells[0]
    if i0 != 0 or not 0 <= j0 < max(s.d_max, 1):
        problems.append(f"start cell {(int(i0), int(j0))} not in the start set")
    for i, j in cells:
        if not (0 <= i < w and 0 <= j < w and s.valid[i, j]):
            problems.append(f"cell {(int(i), int(j))} outside the band")
    for a, b in zip(cells[:-1], cells[1:]):
        step = (int(b[0] - a[0]), int(b[1] - a[1]))
        if step not in STEPS:
            problems.append(f"illegal step {step} at {(int(a[0]), int(a[1]))}")
    last_i, last_j = cells[-1]
    if last_i != w - 1 and last_j != w - 1:
        problems.append(f"path ends at {(int(last_i), int(last_j))}, not on the boundary")
    mean = _path_mean(s.values, cells) if not problems else np.nan
    if not problems and abs(mean - path.mean_energy) > 1e-9:
        problems.append(f"mean_energy {path.mean_energy} != achieved mean {mean}")
    if len(path.kept) != len(cells):
        problems.append("kept mask length differs from path length")
    return problems


def filter_occluded_segments(path: MatchPath, t_occ: int) -> MatchPath:
    """Drop cells entered by a run of more than ``t_occ`` consecutive right
    steps or consecutive down steps; the cell a run starts from stays."""
    cells = path.cells
    kept = np.ones(len(cells), dtype=bool)
    steps = [tuple(v) for v in np.diff(cells, axis=0).tolist()]
    n = 0
    while n < len(steps):
        if steps[n] == (1, 1):
            n += 1
            continue
        end = n
        while end < len(steps) and steps[end] == steps[n]:
            end += 1
        if end - n > t_occ:
            kept[n + 1:end + 1] = False
        n = end
    return MatchPath(cells.copy(), path.mean_energy, kept, list(path.lambdas))


def path_to_disparities(path: MatchPath, width: int | None = None) -> np.ndarray:
    """Disparity i - j per reference row from the kept cells; -1 where unassigned.

    A row holding several kept cells takes the first of them.
    """
    if width is None:
        width = int(path.cells[:, 0].max()) + 1 if len(path) else 0
    disp = np.full(width, -1, dtype=np.int64)
    for (i, j), keep in zip(path.cells, path.kept):
        if keep and disp[i] < 0:
            disp[i] = i - j
    return disp


def write_path(path: MatchPath, fh: TextIO) -> None:
    for (i, j), keep in zip(path.cells, path.kept):
        fh.write(f"{i} {j} {int(keep)}\n")
