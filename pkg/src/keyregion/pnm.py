"""Binary PPM (P6) and PGM (P5) files, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Quantize values in [0, 1] to uint8."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip an image through 8-bit storage."""
    return to_bytes(image).astype(np.float64) / 255.0


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a C×H×W image (C = 3, values in [0, 1]) as P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected 3×H×W image, got shape {image.shape}")
    _, h, w = image.shape
    payload = to_bytes(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(payload)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an H×W map with values in [0, 1] as P5."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected H×W map, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(to_bytes(image).tobytes())


def _read_header(data: bytes):
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 (returns 3×H×W) or P5 (returns H×W) file as floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), offset = _read_header(data)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported magic {magic!r}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=offset)
    img = raster.astype(np.float64) / 255.0
    if channels == 1:
        return img.reshape(h, w)
    return img.reshape(h, w, 3).transpose(2, 0, 1).copy()
