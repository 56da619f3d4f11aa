"""8-bit binary PGM (P5) reading and writing.

Images travel through the pipeline as float64 arrays in [0, 1];
quantization to and from the 0..255 byte range happens only here.
Writes go to a temp file first and are promoted atomically.
"""

from __future__ import annotations

import os

import numpy as np


class PgmFormatError(ValueError):
    pass


def _read_token(f) -> bytes:
    """Next whitespace-delimited header token, skipping # comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise PgmFormatError("unexpected end of PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a float64 array scaled to [0, 1]."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"P5":
            raise PgmFormatError(f"{path}: expected P5 magic, got {magic!r}")
        width = int(_read_token(f))
        height = int(_read_token(f))
        maxval = int(_read_token(f))
        if not 0 < maxval < 256:
            raise PgmFormatError(f"{path}: unsupported maxval {maxval} (8-bit only)")
        data = f.read(width * height)
        if len(data) != width * height:
            raise PgmFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(data, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray):
    """Quantize a [0, 1] float image to 8 bits and write it atomically."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PgmFormatError(f"expected a 2-d image, got shape {img.shape}")
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = quantized.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(quantized.tobytes())
    os.replace(tmp, path)
