"""Rendering of inference results as an image strip.

One inference produces six 8-bit PPM panels, always in the same order:
input image, ground-truth depth, initial prediction, sparse input depth,
merged instance mask, final completed depth.  Depth panels share a fixed
256-entry colormap shipped as a text asset, so the same depth value always
renders to the same bytes.  Alongside the panels the two predictions are
written as raw 16-bit PGMs for lossless re-reading.
"""

from __future__ import annotations

import os
from importlib import resources

import numpy as np

from .netpbm import FormatError, write_depth_pgm, write_ppm

PANEL_FILES = (
    "panel_1_rgb.ppm",
    "panel_2_gt_depth.ppm",
    "panel_3_init_depth.ppm",
    "panel_4_sparse_depth.ppm",
    "panel_5_mask.ppm",
    "panel_6_final_depth.ppm",
)
RAW_FILES = ("d_init.pgm", "d_final.pgm")

_lut_cache = None


def load_colormap() -> np.ndarray:
    """Read the packaged 256-entry lookup table as (256, 3) uint8."""
    global _lut_cache
    if _lut_cache is not None:
        return _lut_cache
    text = resources.files("maskdepth").joinpath(
        "assets/depth_colormap.txt").read_text(encoding="ascii")
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 3:
            raise FormatError(
                f"depth_colormap.txt line {lineno}: expected 3 fields, got {len(parts)}")
        rows.append([int(p) for p in parts])
    arr = np.array(rows, dtype=np.int64)
    if arr.shape != (256, 3):
        raise FormatError(
            f"depth_colormap.txt: expected 256 entries, got {arr.shape[0]}")
    if arr.min() < 0 or arr.max() > 255:
        raise FormatError("depth_colormap.txt: values outside 0..255")
    _lut_cache = arr.astype(np.uint8)
    return _lut_cache


def colorize_depth(depth_m: np.ndarray, max_depth: float) -> np.ndarray:
    """Map an (H, W) depth in meters to a (3, H, W) image in [0, 1].

    Depth maps linearly onto the table over [0, max_depth]; zero depth
    marks a missing measurement and is drawn black, not table color 0.
    """
    d = np.asarray(depth_m, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"colorize_depth expects (H, W), got {d.shape}")
    lut = load_colormap()
    idx = np.clip(np.rint(d / float(max_depth) * 255.0), 0, 255).astype(np.int64)
    rgb = lut[idx].astype(np.float64) / 255.0
    rgb[d <= 0.0] = 0.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def mask_panel(mask: np.ndarray) -> np.ndarray:
    """Render an (H, W) [0, 1] mask as a grayscale (3, H, W) image."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"mask_panel expects (H, W), got {m.shape}")
    return np.repeat(np.clip(m, 0.0, 1.0)[None], 3, axis=0)


def write_strip(out_dir, rgb: np.ndarray, gt: np.ndarray, sparse: np.ndarray,
                mask: np.ndarray, d_init: np.ndarray, d_final: np.ndarray,
                max_depth: float) -> list:
    """Write the six panels plus the two raw depth files; returns all paths."""
    os.makedirs(out_dir, exist_ok=True)
    panels = (
        np.asarray(rgb, dtype=np.float64),
        colorize_depth(gt, max_depth),
        colorize_depth(d_init, max_depth),
        colorize_depth(sparse, max_depth),
        mask_panel(mask),
        colorize_depth(d_final, max_depth),
    )
    paths = []
    for name, img in zip(PANEL_FILES, panels):
        path = os.path.join(out_dir, name)
        write_ppm(path, img)
        paths.append(path)
    for name, depth in zip(RAW_FILES, (d_init, d_final)):
        path = os.path.join(out_dir, name)
        write_depth_pgm(path, depth)
        paths.append(path)
    return paths
