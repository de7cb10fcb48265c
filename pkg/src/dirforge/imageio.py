"""Portable graymap (P5, 16-bit) and raw float32 image files.

PGM pixels map ``[0, PIXEL_MAX]`` linearly onto ``[0, 65535]`` (big-endian,
as the format requires); provenance goes in a ``#`` comment line.  The raw
sidecar keeps full float32 values, ``[n, 256]`` little-endian.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from . import world

MAXVAL = 65535


def write_pgm(path, image, comment: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    grid = world.as_grid(np.clip(image, 0.0, world.PIXEL_MAX))
    values = np.round(grid / world.PIXEL_MAX * MAXVAL).astype(">u2")
    head = "P5\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{world.SIZE} {world.SIZE}\n{MAXVAL}\n"
    path.write_bytes(head.encode("ascii") + values.tobytes())
    return path


def read_pgm(path) -> tuple[np.ndarray, list[str]]:
    """Return the flattened image in pixel units and any comment lines."""
    data = Path(path).read_bytes()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        tok = m.group(1)
        pos = m.end()
        if tok.startswith(b"#"):
            comments.append(tok[1:].strip().decode("utf-8", "replace"))
        else:
            tokens.append(tok)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    if (width, height) != (world.SIZE, world.SIZE):
        raise ValueError(f"{path}: expected {world.SIZE}x{world.SIZE}, got {width}x{height}")
    return raster.astype(np.float64) / maxval * world.PIXEL_MAX, comments


def write_raw(path, images) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(np.atleast_2d(images), dtype="<f4").tobytes())
    return path


def read_raw(path) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size % world.N_PIXELS:
        raise ValueError(f"{path}: {raw.size} floats is not a whole number of {world.N_PIXELS}-pixel images")
    return raw.reshape(-1, world.N_PIXELS).astype(np.float64)


def read_images(path) -> np.ndarray:
    """Load ``[n, 256]`` images from a ``.pgm`` or raw ``.f32`` file."""
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm(path)[0][None, :]
    return read_raw(path)
