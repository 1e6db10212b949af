"""Binary netpbm codecs: P6 color images and P5 grayscale maps.

Three fixed encodings are used throughout the project:

- RGB images: P6, maxval 255, one byte per channel.
- Depth maps: P5, maxval 65535, two bytes per pixel big-endian, storing
  centimeters (meters rounded to the nearest cm, saturating at 655.35 m).
  Depth 0 means "no measurement".
- Binary masks: P5, maxval 255, pixels written as 0 or 255.

Readers accept whitespace and ``#`` comments between header tokens, per the
format family's grammar, and raise :class:`FormatError` naming the file and
the offending field.
"""

from __future__ import annotations

import numpy as np

DEPTH_UNIT_PER_METER = 100  # stored value = centimeters
MAX_DEPTH_VALUE = 65535


class FormatError(ValueError):
    """A netpbm or dataset file violated its expected format."""


def _read_token(buf: bytes, pos: int, path, field: str) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"{path}: truncated header while reading {field}")
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def _read_header(buf: bytes, path, expect_magic: str):
    magic, pos = _read_token(buf, 0, path, "magic")
    if magic.decode("ascii", "replace") != expect_magic:
        raise FormatError(
            f"{path}: bad magic {magic!r} (field magic, expected {expect_magic})")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos, path, name)
        try:
            val = int(tok)
        except ValueError:
            raise FormatError(f"{path}: non-numeric {name} {tok!r}") from None
        if val <= 0:
            raise FormatError(f"{path}: {name} must be positive, got {val}")
        fields.append(val)
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing raster separator after maxval")
    return fields[0], fields[1], fields[2], pos + 1


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a (3, H, W) float array in [0, 1] as an 8-bit P6 file."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"write_ppm expects (3, H, W), got {rgb.shape}")
    _, h, w = rgb.shape
    raster = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raster.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read an 8-bit P6 file into a (3, H, W) float array in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    w, h, maxval, pos = _read_header(buf, path, "P6")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (field maxval, expected 255)")
    need = w * h * 3
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_depth_pgm(path, depth_m: np.ndarray) -> None:
    """Write an (H, W) float array of meters as a 16-bit P5 file in cm."""
    if depth_m.ndim != 2:
        raise ValueError(f"write_depth_pgm expects (H, W), got {depth_m.shape}")
    h, w = depth_m.shape
    cm = np.clip(np.rint(depth_m * DEPTH_UNIT_PER_METER), 0, MAX_DEPTH_VALUE)
    raster = cm.astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{MAX_DEPTH_VALUE}\n".encode("ascii"))
        f.write(raster.tobytes())


def read_depth_pgm(path) -> np.ndarray:
    """Read a 16-bit P5 depth file into an (H, W) float array of meters."""
    with open(path, "rb") as f:
        buf = f.read()
    w, h, maxval, pos = _read_header(buf, path, "P5")
    if maxval != MAX_DEPTH_VALUE:
        raise FormatError(
            f"{path}: maxval {maxval} unsupported (field maxval, expected {MAX_DEPTH_VALUE})")
    need = w * h * 2
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    cm = np.frombuffer(raster, dtype=">u2").reshape(h, w)
    return cm.astype(np.float64) / DEPTH_UNIT_PER_METER


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Write an (H, W) array as an 8-bit P5 file with values 0 or 255."""
    if mask.ndim != 2:
        raise ValueError(f"write_mask_pgm expects (H, W), got {mask.shape}")
    h, w = mask.shape
    raster = np.where(np.asarray(mask) > 0.5, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(raster.tobytes())


def read_gray_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file into an (H, W) float array in [0, 1].

    Used both for crisp instance masks (values land on exactly 0 or 1) and
    for soft externally-predicted masks.
    """
    with open(path, "rb") as f:
        buf = f.read()
    w, h, maxval, pos = _read_header(buf, path, "P5")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (field maxval, expected 255)")
    need = w * h
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    return arr.astype(np.float64) / 255.0
