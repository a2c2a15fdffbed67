"""Binary PGM (P5) / PPM (P6) reading and writing; optional PNG input."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ImageFormatError
from .imageops import ImageBuffer, quantize_u8

PathLike = Union[str, os.PathLike]


def encode_pnm(img: ImageBuffer) -> bytes:
    data = img.data if img.depth == "u8" else quantize_u8(img.data * 255.0)
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + np.ascontiguousarray(data).tobytes()


def write_pnm(path: PathLike, img: ImageBuffer) -> None:
    Path(path).write_bytes(encode_pnm(img))


def _header_tokens(buf: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def decode_pnm(buf: bytes) -> ImageBuffer:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"not a binary PGM/PPM file (magic {magic!r})")
    tokens, offset = _header_tokens(buf, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError(f"malformed PNM header {tokens!r}") from None
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM (maxval 255) is supported, got maxval {maxval}")
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    pixels = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=offset)
    if pixels.size < n:
        raise ImageFormatError(f"PNM data truncated: expected {n} bytes, found {pixels.size}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return ImageBuffer(pixels[:n].reshape(shape).copy())


def read_image(path: PathLike) -> ImageBuffer:
    """Read PGM/PPM, or PNG when Pillow is installed."""
    buf = Path(path).read_bytes()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    return decode_pnm(buf)


def _read_png(path: PathLike) -> ImageBuffer:
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - depends on environment
        raise ImageFormatError("PNG input needs Pillow (pip install 'artifact[png]')") from None
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "1"):
            return ImageBuffer(np.asarray(im.convert("L"), dtype=np.uint8).copy())
        return ImageBuffer(np.asarray(im.convert("RGB"), dtype=np.uint8).copy())
