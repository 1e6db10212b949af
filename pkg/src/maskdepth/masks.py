"""Instance mask merging and the segmentation-input provider.

The network consumes a single merged foreground map, not per-instance masks.
Merging is a pixelwise maximum over the instance stack, which for crisp 0/1
masks is exactly a logical OR and for soft masks keeps the strongest
prediction per pixel.

Two sources can feed that map:

- ``ground_truth``: merge the sample's own instance masks.
- ``file``: read a precomputed (possibly soft) mask from an 8-bit PGM in
  the sample directory, e.g. the output of an external segmentation model.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .netpbm import FormatError, read_gray_pgm

MASK_MODES = ("ground_truth", "file")
DEFAULT_MASK_FILE = "pred_mask.pgm"


def merge_masks(masks, height: int, width: int) -> np.ndarray:
    """Pixelwise maximum over an instance mask stack.

    An empty stack merges to all-background.  Shapes must agree.
    """
    merged = np.zeros((height, width), dtype=np.float64)
    for i, m in enumerate(masks):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (height, width):
            raise ValueError(
                f"mask {i} has shape {m.shape}, expected {(height, width)}")
        if m.min() < 0.0 or m.max() > 1.0:
            raise ValueError(f"mask {i} has values outside [0, 1]")
        np.maximum(merged, m, out=merged)
    return merged


@dataclass
class MaskSource:
    """Where the merged segmentation map comes from."""

    mode: str = "ground_truth"
    file_name: str = DEFAULT_MASK_FILE

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ValueError(
                f"mask mode must be one of {MASK_MODES}, got {self.mode!r}")


def merged_mask_for(sample, source: MaskSource, sample_dir=None) -> np.ndarray:
    """Produce the (H, W) merged foreground map for one sample."""
    if source.mode == "ground_truth":
        return merge_masks(sample.masks, sample.height, sample.width)
    path = os.path.join(sample_dir or "", source.file_name)
    if sample_dir is None or not os.path.exists(path):
        raise FormatError(f"{path}: mask file required by file mode is missing")
    mask = read_gray_pgm(path)
    if mask.shape != (sample.height, sample.width):
        raise FormatError(
            f"{path}: mask is {mask.shape[1]}x{mask.shape[0]}, sample is "
            f"{sample.width}x{sample.height}")
    return mask
