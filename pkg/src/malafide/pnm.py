"""Strict 8-bit binary PGM (P5) / PPM (P6) reading and writing."""

from __future__ import annotations

import os

import numpy as np

_WHITESPACE = b" \t\n\r\v\f"


class ImageFormatError(ValueError):
    """Raised for malformed PGM/PPM data; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def quantize(image) -> np.ndarray:
    """Map values in [0, 1] to bytes with ``round(v * 255)``, halves rounding up."""
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected an H x W x 1 or H x W x 3 image, got shape {img.shape}")
    payload = quantize(img)
    h, w, c = payload.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    return header + payload.tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse a P5/P6 byte string into an ``H x W x C`` float64 image."""
    if len(data) < 2:
        raise ImageFormatError("truncated magic number", len(data))
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"unsupported magic number {magic!r}", 0)

    pos = 2
    values = []
    for field in ("width", "height", "maxval"):
        if pos >= len(data):
            raise ImageFormatError(f"truncated header before {field}", pos)
        if data[pos] not in _WHITESPACE:
            raise ImageFormatError(f"expected whitespace before {field}", pos)
        pos += 1
        start = pos
        while pos < len(data) and 0x30 <= data[pos] <= 0x39:
            pos += 1
        if pos == start:
            raise ImageFormatError(f"expected decimal digits for {field}", start)
        token = data[start:pos]
        if len(token) > 1 and token[0] == 0x30:
            raise ImageFormatError(f"leading zero in {field}", start)
        values.append(int(token))
    width, height, maxval = values
    if width == 0 or height == 0:
        raise ImageFormatError("zero image dimension", 3)
    if maxval != 255:
        raise ImageFormatError(f"unsupported max value {maxval}", pos - len(str(maxval)))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ImageFormatError("expected a single whitespace after max value", pos)
    pos += 1

    expected = width * height * channels
    payload = data[pos:]
    if len(payload) < expected:
        raise ImageFormatError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}", len(data)
        )
    if len(payload) > expected:
        raise ImageFormatError(f"{len(payload) - expected} trailing bytes after payload", pos + expected)
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float64) / 255.0


def save_image(image, path) -> None:
    data = encode_pnm(image)
    with open(path, "wb") as f:
        f.write(data)


def load_image(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as f:
        data = f.read()
    return decode_pnm(data)
