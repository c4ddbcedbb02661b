"""Stereo pairs, line triplets, ground truth and dataset manifests.

Ground truth is only ever returned as :class:`GroundTruthDisparity`; the
training code never calls :func:`load_ground_truth`.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError, FormatError, RectificationError, SamplingError

log = logging.getLogger(__name__)


class GtFormat(str, Enum):
    UINT16_PNG_X256 = "UINT16_PNG_X256"
    PFM = "PFM"


class Occlusion(IntEnum):
    UNKNOWN = 0
    VISIBLE = 1
    OCCLUDED = 2


@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    id: str
    d_max: int

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise RectificationError(
                f"pair {self.id}: left {self.left.shape} and right {self.right.shape} differ")
        if self.d_max >= self.left.shape[1]:
            raise DataError(f"pair {self.id}: d_max={self.d_max} >= width {self.left.shape[1]}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape


@dataclass
class LineTriplet:
    reference_band: np.ndarray  # [1, s, W]
    positive_band: np.ndarray
    negative_band: np.ndarray
    row: int
    negative_row: int


@dataclass
class GroundTruthDisparity:
    values: np.ndarray  # [H, W] float64, NaN where unknown
    known: np.ndarray  # [H, W] bool
    occlusion: np.ndarray  # [H, W] uint8 of Occlusion

    @property
    def has_occlusion_mask(self) -> bool:
        return bool(np.any(self.occlusion != Occlusion.UNKNOWN))

    def evaluable(self) -> np.ndarray:
        """KNOWN and VISIBLE pixels. Without an occlusion mask every known
        pixel counts as visible, as in non-occluded-only ground truth files."""
        if not self.has_occlusion_mask:
            return self.known.copy()
        return self.known & (self.occlusion == Occlusion.VISIBLE)


# --- raster I/O -----------------------------------------------------------

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Binary (P5) or ASCII (P2) graymap; returns raw integer samples and maxval."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    for _ in range(4):
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated graymap header", pos)
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P2"):
        raise FormatError(f"{path}: unsupported graymap magic {magic!r}", 0)
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError(f"{path}: non-numeric graymap header", pos) from None
    if not 0 < maxval < 65536 or width <= 0 or height <= 0:
        raise FormatError(f"{path}: invalid graymap header values", pos)
    if magic == b"P2":
        img = np.array(data[pos:].split(), dtype=np.int64)
        if img.size != width * height:
            raise FormatError(f"{path}: expected {width * height} samples", pos)
        return img.reshape(height, width), maxval
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(data) - pos < need:
        raise FormatError(f"{path}: pixel data truncated", len(data))
    img = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return img.reshape(height, width).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_pgm(path: str | Path, image: np.ndarray, maxval: int | None = None) -> None:
    image = np.asarray(image)
    if maxval is None:
        maxval = 65535 if image.dtype == np.uint16 else 255
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(np.ascontiguousarray(image, dtype=dtype).tobytes())


def read_gray(path: str | Path) -> np.ndarray:
    """Read a raster as float64 intensities in [0, 1]. Colour input is
    converted with ITU-R 601 luma."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.suffix.lower() in (".pgm", ".pnm"):
        raw, maxval = read_pgm(path)
        return raw.astype(np.float64) / maxval
    try:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I;16L"):
                return np.asarray(im, dtype=np.float64) / 65535.0
            if im.mode == "I":
                arr = np.asarray(im, dtype=np.float64)
                return arr / (65535.0 if arr.max() > 255 else 255.0)
            if im.mode == "F":
                return np.asarray(im, dtype=np.float64)
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc


def write_gray_png(path: str | Path, image: np.ndarray) -> None:
    """Write [0, 1] intensities as an 8-bit PNG or graymap, by suffix."""
    img8 = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if Path(path).suffix.lower() == ".pgm":
        write_pgm(path, img8)
    else:
        Image.fromarray(img8).save(path)


def read_pfm(path: str | Path) -> np.ndarray:
    """Single-channel PFM ('Pf'); rows are stored bottom-up. A negative scale
    means little-endian floats."""
    data = Path(path).read_bytes()
    lines, pos = [], 0
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated PFM header", pos)
        lines.append(data[pos:end].strip())
        pos = end + 1
    if lines[0] != b"Pf":
        if lines[0] == b"PF":
            raise FormatError(f"{path}: colour PFM is not a disparity map", 0)
        raise FormatError(f"{path}: bad PFM magic {lines[0]!r}", 0)
    try:
        width, height = (int(v) for v in lines[1].split())
    except ValueError:
        raise FormatError(f"{path}: bad PFM dimensions", len(lines[0]) + 1) from None
    try:
        scale = float(lines[2])
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale", pos - len(lines[2]) - 1) from None
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be non-zero", pos - len(lines[2]) - 1)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    if len(data) - pos < 4 * width * height:
        raise FormatError(f"{path}: PFM data truncated", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return np.flipud(arr.reshape(height, width)).astype(np.float32)


def write_pfm(path: str | Path, values: np.ndarray, little_endian: bool = True) -> None:
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n{scale}\n".encode())
        fh.write(np.ascontiguousarray(np.flipud(values), dtype=dtype).tobytes())


# --- stereo pairs and ground truth ----------------------------------------

def load_stereo_pair(left_path: str | Path, right_path: str | Path, d_max: int,
                     pair_id: str | None = None) -> StereoPair:
    left = read_gray(left_path)
    right = read_gray(right_path)
    if left.shape != right.shape:
        raise RectificationError(f"{left_path} {left.shape} and {right_path} {right.shape} "
                                 "do not have identical dimensions")
    return StereoPair(left, right, pair_id or Path(left_path).stem, d_max)


def occlusion_companion(gt_path: str | Path) -> Path | None:
    """``disp.png`` -> ``disp.occ.png`` or ``disp.occ.pgm`` if present."""
    gt_path = Path(gt_path)
    for suffix in (".png", ".pgm"):
        cand = gt_path.with_name(gt_path.stem + ".occ" + suffix)
        if cand.exists():
            return cand
    return None


def write_occlusion_mask(path: str | Path, occlusion: np.ndarray) -> None:
    """Graymap convention: 255 visible, 128 occluded, 0 unknown."""
    out = np.zeros(occlusion.shape, dtype=np.uint8)
    out[occlusion == Occlusion.VISIBLE] = 255
    out[occlusion == Occlusion.OCCLUDED] = 128
    if Path(path).suffix.lower() == ".pgm":
        write_pgm(path, out)
    else:
        Image.fromarray(out).save(path)


def _read_occlusion(path: Path, shape) -> np.ndarray:
    raw = np.rint(read_gray(path) * 255).astype(np.int64)
    if raw.shape != shape:
        raise DataError(f"{path}: occlusion mask {raw.shape} does not match disparity {shape}")
    occ = np.full(shape, Occlusion.UNKNOWN, dtype=np.uint8)
    occ[raw >= 192] = Occlusion.VISIBLE
    occ[(raw >= 64) & (raw < 192)] = Occlusion.OCCLUDED
    return occ


def load_ground_truth(path: str | Path, fmt: GtFormat | str) -> GroundTruthDisparity:
    path = Path(path)
    fmt = GtFormat(fmt)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if fmt is GtFormat.UINT16_PNG_X256:
        try:
            with Image.open(path) as im:
                if im.mode not in ("I;16", "I;16B", "I;16L", "I"):
                    raise FormatError(f"{path}: expected a 16-bit gray PNG, got mode {im.mode}", 0)
                raw = np.asarray(im, dtype=np.int64)
        except UnidentifiedImageError as exc:
            raise FormatError(f"{path}: not a PNG ({exc})", 0) from exc
        known = raw != 0
        values = np.where(known, raw / 256.0, np.nan)
    else:
        raw = read_pfm(path).astype(np.float64)
        known = np.isfinite(raw)
        values = np.where(known, raw, np.nan)
    occ_path = occlusion_companion(path)
    if occ_path is not None:
        occlusion = _read_occlusion(occ_path, values.shape)
    else:
        occlusion = np.full(values.shape, Occlusion.UNKNOWN, dtype=np.uint8)
    return GroundTruthDisparity(values, known, occlusion)


def write_uint16_disparity(path: str | Path, disparity: np.ndarray, known=None) -> None:
    """KITTI-style encoding: round(d * 256) as uint16, 0 for unknown."""
    enc = np.clip(np.rint(np.asarray(disparity, dtype=np.float64) * 256.0), 1, 65535)
    if known is None:
        known = np.isfinite(disparity)
    enc = np.where(known, enc, 0).astype(np.uint16)
    Image.fromarray(enc).save(path)


# --- line triplets --------------------------------------------------------

def valid_center_rows(height: int, patch_size: int) -> np.ndarray:
    half = (patch_size - 1) // 2
    return np.arange(half, height - half)


def negative_rows(rows: np.ndarray, height: int, patch_size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """For every row, a uniform draw among valid rows at distance >= patch_size."""
    candidates = valid_center_rows(height, patch_size)
    out = np.empty(len(rows), dtype=np.int64)
    for n, r in enumerate(rows):
        allowed = candidates[np.abs(candidates - r) >= patch_size]
        if len(allowed) == 0:
            raise SamplingError(f"no negative row at distance >= {patch_size} from row {r}")
        out[n] = allowed[rng.integers(len(allowed))]
    return out


def _band(image: np.ndarray, row: int, patch_size: int) -> np.ndarray:
    half = (patch_size - 1) // 2
    return image[None, row - half:row + half + 1, :]


def sample_line_triplets(pair: StereoPair, rng_seed: int, count: int | None = None,
                         patch_size: int = 9, exhaustive: bool = False,
                         negative_pair: StereoPair | None = None) -> list[LineTriplet]:
    """Cut (reference, positive, negative) bands from a stereo pair.

    The reference band comes from the left image and the positive band from
    the same row of the right image. The negative band is another row of the
    right image (of ``negative_pair`` when given), at least ``patch_size``
    rows away. ``exhaustive`` yields every valid row once, in order.
    """
    height = pair.shape[0]
    if height < 3 * patch_size:
        raise SamplingError(f"image height {height} < 3 * patch size {patch_size}")
    rng = np.random.default_rng(rng_seed)
    centers = valid_center_rows(height, patch_size)
    if exhaustive:
        rows = centers
    else:
        if count is None:
            raise SamplingError("count is required unless exhaustive=True")
        rows = centers[rng.integers(len(centers), size=count)]
    neg_source = negative_pair if negative_pair is not None else pair
    if neg_source.shape != pair.shape:
        raise SamplingError("negative pair must have the same dimensions")
    negs = negative_rows(rows, height, patch_size, rng)
    return [LineTriplet(_band(pair.left, r, patch_size), _band(pair.right, r, patch_size),
                        _band(neg_source.right, n, patch_size), int(r), int(n))
            for r, n in zip(rows, negs)]


# --- manifests ------------------------------------------------------------

@dataclass
class ManifestEntry:
    left: Path
    right: Path
    d_max: int
    gt: Path | None = None
    gt_format: GtFormat | None = None

    @property
    def id(self) -> str:
        return self.left.stem

    def load_pair(self) -> StereoPair:
        return load_stereo_pair(self.left, self.right, self.d_max, self.id)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """One record per line: ``left right [gt gt_format] d_max``. Relative
    paths resolve against the manifest's directory; ``#`` starts a comment."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    base = path.parent
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 5):
            raise DataError(f"{path}:{lineno}: expected 3 or 5 fields, got {len(parts)}")
        try:
            d_max = int(parts[-1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: d_max must be an integer") from None
        gt, fmt = None, None
        if len(parts) == 5:
            gt = base / parts[2]
            try:
                fmt = GtFormat(parts[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unknown gt format {parts[3]!r}") from None
        entries.append(ManifestEntry(base / parts[0], base / parts[1], d_max, gt, fmt))
    return entries


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    base = Path(path).parent

    def rel(p: Path) -> str:
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    with open(path, "w") as fh:
        for e in entries:
            fields = [rel(e.left), rel(e.right)]
            if e.gt is not None:
                fields += [rel(e.gt), GtFormat(e.gt_format).value]
            fields.append(str(e.d_max))
            fh.write(" ".join(fields) + "\n")
