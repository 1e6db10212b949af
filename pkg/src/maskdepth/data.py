"""Procedural scene generation and sample directory I/O.

Every scene is a simple synthetic range image: a ground ramp receding toward
the horizon, a sky band with no depth measurements, and a handful of floating
rectangles and ellipses at distinct constant depths.  Each pixel's depth is
the nearest surface covering it, and each object's instance mask marks
exactly the pixels where that object is the nearest surface, so masks are
pairwise disjoint by construction.

Determinism: a scene depends only on ``(seed, index)``.  RGB values are
quantized to the 8-bit grid and depths to centimeters before anything is
returned, so a written-then-reread sample reproduces the arrays bit for bit.

On disk each sample is a directory::

    <root>/scene_0007/
        rgb.ppm        8-bit color
        depth.pgm      16-bit depth, centimeters, 0 = no measurement
        inst_000.pgm   one 8-bit 0/255 mask per visible instance
        ...
        manifest.txt   key=value description of the above

and the dataset root carries a ``split.txt`` assigning scenes to train/val
by index order (first 80% train).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .netpbm import (FormatError, read_depth_pgm, read_gray_pgm, read_ppm,
                     write_depth_pgm, write_mask_pgm, write_ppm)

SPLIT_FILE = "split.txt"
TRAIN_FRACTION = 0.8

_SKY_COLOR = np.array([0.53, 0.77, 0.92])
_GROUND_COLOR = np.array([0.42, 0.47, 0.35])
_OBJECT_PALETTE = np.array([
    [0.85, 0.30, 0.25],
    [0.25, 0.45, 0.85],
    [0.90, 0.75, 0.20],
    [0.55, 0.25, 0.70],
    [0.20, 0.70, 0.55],
    [0.90, 0.50, 0.70],
    [0.60, 0.60, 0.20],
    [0.35, 0.75, 0.85],
])


@dataclass
class Sample:
    """One scene held in memory, depths in meters."""

    scene_id: str
    rgb: np.ndarray            # (3, H, W) float in [0, 1]
    depth: np.ndarray          # (H, W) float meters, 0 where unmeasured
    masks: list = field(default_factory=list)  # list of (H, W) float 0/1

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def _quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb * 255.0), 0, 255) / 255.0


def _quantize_depth(depth: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(depth * 100.0), 0, 65535) / 100.0


def generate_scene(seed: int, index: int, height: int = 256, width: int = 512,
                   objects: int = 6, max_depth: float = 80.0) -> Sample:
    """Build one procedural scene deterministically from (seed, index)."""
    if height < 16 or width < 16:
        raise ValueError(f"scene size {height}x{width} too small (min 16x16)")
    if objects < 1:
        raise ValueError(f"objects must be >= 1, got {objects}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))

    ys = np.arange(height)[:, None].astype(np.float64)
    xs = np.arange(width)[None, :].astype(np.float64)

    # ground ramp: far at the horizon row, near at the bottom edge
    horizon = int(height * rng.uniform(0.25, 0.4))
    near = rng.uniform(2.0, 5.0)
    far = rng.uniform(0.6, 0.9) * max_depth
    ramp_span = max(height - 1 - horizon, 1)
    ground = far + (near - far) * (ys - horizon) / ramp_span
    depth = np.where(ys >= horizon, ground, np.inf)  # sky is "no surface"
    depth = np.broadcast_to(depth, (height, width)).copy()

    owner = np.full((height, width), -1, dtype=np.int64)  # -1 = background

    for k in range(objects):
        kind = rng.choice(("rect", "ellipse"))
        cy = rng.uniform(0.15, 0.85) * height
        cx = rng.uniform(0.1, 0.9) * width
        ry = rng.uniform(0.06, 0.18) * height
        rx = rng.uniform(0.05, 0.16) * width
        # distinct depths, always nearer than the ground at the object's row
        local_ground = ground[min(max(int(cy), horizon), height - 1), 0]
        obj_depth = rng.uniform(0.2, 0.85) * min(local_ground, max_depth - 5.0)
        obj_depth = max(obj_depth, 1.0)
        if kind == "rect":
            cover = (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
        else:
            cover = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
        wins = cover & (obj_depth < depth)
        depth[wins] = obj_depth
        owner[wins] = k

    visible = [k for k in range(objects) if (owner == k).any()]
    if not visible:
        # virtually impossible, but keep the invariant airtight: one
        # deterministic fallback box in the image center
        obj_depth = 2.0
        cover = (np.abs(ys - height / 2) <= height // 6) & \
                (np.abs(xs - width / 2) <= width // 6)
        wins = cover & (obj_depth < depth)
        depth[wins] = obj_depth
        owner[wins] = 0
        visible = [0]

    # colors: flat per surface with mild depth shading, then 8-bit quantized
    rgb = np.empty((3, height, width))
    rgb[:] = _SKY_COLOR[:, None, None]
    shade = 1.0 - 0.35 * np.clip(depth, 0.0, max_depth) / max_depth
    on_ground = np.isfinite(depth) & (owner < 0)
    for c in range(3):
        rgb[c][on_ground] = _GROUND_COLOR[c] * shade[on_ground]
    for slot, k in enumerate(visible):
        color = _OBJECT_PALETTE[slot % len(_OBJECT_PALETTE)]
        sel = owner == k
        for c in range(3):
            rgb[c][sel] = color[c] * shade[sel]

    depth = np.where(np.isfinite(depth), depth, 0.0)  # sky: no measurement
    masks = [(owner == k).astype(np.float64) for k in visible]
    return Sample(scene_id=f"scene_{index:04d}",
                  rgb=_quantize_rgb(rgb),
                  depth=_quantize_depth(depth),
                  masks=masks)


def sparsify(depth: np.ndarray, keep_prob: float,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Bernoulli-subsample measured pixels into (sparse_depth, validity).

    Each pixel with a measurement survives independently with probability
    ``keep_prob``; unmeasured pixels never appear.  The validity map is
    float 0/1 and the sparse map is 0 wherever validity is 0.  The endpoints
    are exact: 0 keeps nothing, 1 keeps every measured pixel.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in [0, 1], got {keep_prob}")
    draw = rng.random(depth.shape) < keep_prob
    validity = ((depth > 0) & draw).astype(depth.dtype)
    return depth * validity, validity


# ---------------------------------------------------------------------------
# sample directory I/O
# ---------------------------------------------------------------------------

def write_sample(sample_dir, sample: Sample) -> list:
    """Write one sample directory; returns the paths written."""
    os.makedirs(sample_dir, exist_ok=True)
    paths = []
    rgb_path = os.path.join(sample_dir, "rgb.ppm")
    write_ppm(rgb_path, sample.rgb)
    paths.append(rgb_path)
    depth_path = os.path.join(sample_dir, "depth.pgm")
    write_depth_pgm(depth_path, sample.depth)
    paths.append(depth_path)
    for i, mask in enumerate(sample.masks):
        mask_path = os.path.join(sample_dir, f"inst_{i:03d}.pgm")
        write_mask_pgm(mask_path, mask)
        paths.append(mask_path)
    manifest = os.path.join(sample_dir, "manifest.txt")
    with open(manifest, "w", encoding="ascii") as f:
        f.write(f"scene={sample.scene_id}\n")
        f.write(f"width={sample.width}\n")
        f.write(f"height={sample.height}\n")
        f.write("rgb=rgb.ppm\n")
        f.write("depth=depth.pgm\n")
        f.write(f"instances={len(sample.masks)}\n")
        for i in range(len(sample.masks)):
            f.write(f"mask_{i:03d}=inst_{i:03d}.pgm\n")
    paths.append(manifest)
    return paths


def _parse_keyvalue(path) -> dict:
    out = {}
    with open(path, "r", encoding="ascii") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: line {ln} is not key=value: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def read_sample(sample_dir) -> Sample:
    """Load one sample directory, validating the manifest against the files."""
    manifest_path = os.path.join(sample_dir, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise FormatError(f"{manifest_path}: missing manifest")
    meta = _parse_keyvalue(manifest_path)
    for key in ("scene", "width", "height", "rgb", "depth", "instances"):
        if key not in meta:
            raise FormatError(f"{manifest_path}: missing field {key}")
    w, h = int(meta["width"]), int(meta["height"])
    rgb = read_ppm(os.path.join(sample_dir, meta["rgb"]))
    depth = read_depth_pgm(os.path.join(sample_dir, meta["depth"]))
    if rgb.shape[1:] != (h, w):
        raise FormatError(
            f"{manifest_path}: rgb is {rgb.shape[2]}x{rgb.shape[1]}, manifest says {w}x{h}")
    if depth.shape != (h, w):
        raise FormatError(
            f"{manifest_path}: depth is {depth.shape[1]}x{depth.shape[0]}, manifest says {w}x{h}")
    n = int(meta["instances"])
    masks = []
    for i in range(n):
        key = f"mask_{i:03d}"
        if key not in meta:
            raise FormatError(f"{manifest_path}: missing field {key}")
        mask = read_gray_pgm(os.path.join(sample_dir, meta[key]))
        if mask.shape != (h, w):
            raise FormatError(
                f"{manifest_path}: {key} is {mask.shape[1]}x{mask.shape[0]}, "
                f"manifest says {w}x{h}")
        masks.append(mask)
    return Sample(scene_id=meta["scene"], rgb=rgb, depth=depth, masks=masks)


# ---------------------------------------------------------------------------
# dataset level
# ---------------------------------------------------------------------------

@dataclass
class DatasetIndex:
    root: str
    train_ids: list
    val_ids: list


def split_by_index(scene_ids: list) -> tuple[list, list]:
    """First floor(0.8 * n) scenes train, the rest val, in index order."""
    n_train = int(len(scene_ids) * TRAIN_FRACTION)
    return list(scene_ids[:n_train]), list(scene_ids[n_train:])


def generate_dataset(root, count: int, seed: int = 0, height: int = 256,
                     width: int = 512, objects: int = 6) -> DatasetIndex:
    """Generate ``count`` scenes under ``root`` plus the split file."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    os.makedirs(root, exist_ok=True)
    scene_ids = []
    for i in range(count):
        sample = generate_scene(seed, i, height=height, width=width, objects=objects)
        write_sample(os.path.join(root, sample.scene_id), sample)
        scene_ids.append(sample.scene_id)
    train_ids, val_ids = split_by_index(scene_ids)
    with open(os.path.join(root, SPLIT_FILE), "w", encoding="ascii") as f:
        for sid in train_ids:
            f.write(f"{sid}=train\n")
        for sid in val_ids:
            f.write(f"{sid}=val\n")
    return DatasetIndex(root=str(root), train_ids=train_ids, val_ids=val_ids)


def load_dataset_index(root) -> DatasetIndex:
    split_path = os.path.join(root, SPLIT_FILE)
    if not os.path.exists(split_path):
        raise FormatError(f"{split_path}: missing split file")
    entries = _parse_keyvalue(split_path)
    train_ids, val_ids = [], []
    for sid, part in entries.items():
        if part == "train":
            train_ids.append(sid)
        elif part == "val":
            val_ids.append(sid)
        else:
            raise FormatError(f"{split_path}: {sid} has unknown split {part!r}")
    return DatasetIndex(root=str(root), train_ids=train_ids, val_ids=val_ids)


def load_samples(index: DatasetIndex, split: str) -> list:
    ids = {"train": index.train_ids, "val": index.val_ids}.get(split)
    if ids is None:
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    return [read_sample(os.path.join(index.root, sid)) for sid in ids]
