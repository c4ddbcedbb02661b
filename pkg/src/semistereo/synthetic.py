"""Synthetic rectified stereo pairs with exact integer disparities.

A scene is a textured background plane plus a few fronto-parallel
rectangles, each at its own disparity. The right view is rendered by
shifting every layer left by its disparity, nearer layers (larger
disparity) drawn last. Left pixels hidden in the right view are marked
occluded in the ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import GtFormat, ManifestEntry, Occlusion, write_gray_png, write_manifest, \
    write_occlusion_mask, write_uint16_disparity
from .errors import ConfigError

TEXTURE_SIGMA = 2.0
NOISE = 0.2


@dataclass
class SyntheticPair:
    left: np.ndarray
    right: np.ndarray
    disparity: np.ndarray  # [H, W] int, left-image coordinates
    occlusion: np.ndarray  # [H, W] uint8 of Occlusion


def _texture(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    t = gaussian_filter(rng.standard_normal(shape), sigma)
    t = (t - t.mean()) / (4.0 * t.std()) + 0.5
    return np.clip(t, 0.0, 1.0)


def make_pair(rng: np.random.Generator, height: int, width: int, d_max: int,
              perturb: bool = False, n_objects: int = 3,
              constant_disparity: int | None = None,
              noise: float = NOISE, texture_sigma: float = TEXTURE_SIGMA) -> SyntheticPair:
    """Render one pair.

    ``constant_disparity`` gives a single plane and no objects. ``noise`` is
    the std of independent Gaussian sensor noise added to each view (texture
    std is 0.25 before clipping).
    """
    if d_max >= width / 4:
        raise ConfigError(f"d_max={d_max} must be below width/4={width / 4}")
    if constant_disparity is not None:
        layers = [(int(constant_disparity), np.ones((height, width), dtype=bool))]
    else:
        background = int(rng.integers(0, d_max // 2 + 1))
        layers = [(background, np.ones((height, width), dtype=bool))]
        for _ in range(n_objects):
            h = int(rng.integers(height // 5, height // 2 + 1))
            w = int(rng.integers(width // 8, width // 3 + 1))
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            region = np.zeros((height, width), dtype=bool)
            region[y:y + h, x:x + w] = True
            layers.append((int(rng.integers(background, d_max + 1)), region))
    # stable sort: equal disparities keep generation order
    layers.sort(key=lambda layer: layer[0])
    textures = [_texture(rng, (height, width + d_max), texture_sigma) for _ in layers]

    left = np.empty((height, width))
    disparity = np.empty((height, width), dtype=np.int64)
    right = np.empty((height, width))
    right_disp = np.full((height, width), -1, dtype=np.int64)
    cols = np.arange(width)
    for (d, region), tex in zip(layers, textures):
        left[region] = tex[:, :width][region]
        disparity[region] = d
        # right pixel x shows left-coordinate x + d of this layer
        src = cols + d
        covered = np.zeros((height, width), dtype=bool)
        inside = src < width
        covered[:, inside] = region[:, src[inside]]
        if region.all():
            covered[:] = True  # background plane extends beyond the left frame
        right[covered] = tex[:, src][covered]
        right_disp[covered] = d

    # a left pixel is visible when its right-view location shows its own layer
    target = cols[None, :] - disparity
    inframe = target >= 0
    shown = np.full((height, width), -1, dtype=np.int64)
    rows = np.repeat(np.arange(height)[:, None], width, axis=1)
    shown[inframe] = right_disp[rows[inframe], target[inframe]]
    occlusion = np.where(inframe & (shown == disparity), Occlusion.VISIBLE,
                         Occlusion.OCCLUDED).astype(np.uint8)

    if perturb:
        gain = rng.uniform(0.7, 1.3)
        bias = rng.uniform(-0.15, 0.15)
        right = np.clip(gain * (right - 0.5) + 0.5 + bias, 0.0, 1.0)
    if noise > 0:
        right = np.clip(right + rng.normal(0.0, noise, right.shape), 0.0, 1.0)
        left = np.clip(left + rng.normal(0.0, noise, left.shape), 0.0, 1.0)
    return SyntheticPair(left, right, disparity, occlusion)


def make_synthetic_dataset(out_dir: str | Path, seed: int = 0, n_pairs: int = 20,
                           height: int = 128, width: int = 256, d_max: int = 16,
                           perturb: bool = True, noise: float = NOISE,
                           texture_sigma: float = TEXTURE_SIGMA,
                           constant_disparity: int | None = None) -> Path:
    """Write ``left/``, ``right/``, ``disp/`` (KITTI-style uint16 PNG plus
    ``.occ.png`` companion masks) and ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("left", "right", "disp"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for n in range(n_pairs):
        pair = make_pair(rng, height, width, d_max, perturb=perturb, noise=noise,
                         texture_sigma=texture_sigma, constant_disparity=constant_disparity)
        name = f"{n:03d}.png"
        write_gray_png(out / "left" / name, pair.left)
        write_gray_png(out / "right" / name, pair.right)
        write_uint16_disparity(out / "disp" / name, pair.disparity,
                               known=np.ones(pair.disparity.shape, dtype=bool))
        write_occlusion_mask(out / "disp" / f"{n:03d}.occ.png", pair.occlusion)
        entries.append(ManifestEntry(out / "left" / name, out / "right" / name, d_max,
                                     out / "disp" / name, GtFormat.UINT16_PNG_X256))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest
