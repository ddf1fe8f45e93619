"""Binary PPM/PGM frame I/O and bilinear resizing.

The canonical video interface is a directory of numbered P6 PPM frames (plus
P5 PGM occlusion masks where present); both formats are bit-exact and
dependency-free.  Codec decoding is an external preprocessing step.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    BadMagicError,
    InvalidDimensionsError,
    TruncatedFileError,
    UnsupportedMaxvalError,
)


def _parse_pnm_header(blob: bytes, magic: bytes):
    if blob[:2] != magic:
        raise BadMagicError(f"expected {magic!r} header, got {blob[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(blob):
            raise TruncatedFileError("header ended before width/height/maxval")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            pos = blob.find(b"\n", pos)
            if pos < 0:
                raise TruncatedFileError("unterminated header comment")
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end:end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise BadMagicError(f"unexpected byte {ch!r} in header")
    # exactly one whitespace byte separates maxval from the payload
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise TruncatedFileError("missing whitespace after maxval")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise InvalidDimensionsError(f"header declares {width}x{height}")
    if maxval != 255:
        raise UnsupportedMaxvalError(f"only maxval 255 is supported, got {maxval}")
    return width, height, pos + 1


def read_ppm(blob: bytes) -> np.ndarray:
    """P6 bytes -> float32 array (3, h, w) scaled to [0, 1]."""
    width, height, offset = _parse_pnm_header(blob, b"P6")
    expected = 3 * width * height
    payload = blob[offset:offset + expected]
    if len(payload) < expected:
        raise TruncatedFileError(f"pixel payload {len(payload)} < {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_ppm(image: np.ndarray) -> bytes:
    """(3, h, w) floats -> P6 bytes; clamps to [0, 1], rounds half up."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise InvalidDimensionsError(f"expected (3, h, w), got {image.shape}")
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = image.shape[1:]
    return b"P6\n%d %d\n255\n" % (w, h) + quantized.transpose(1, 2, 0).tobytes()


def read_pgm(blob: bytes) -> np.ndarray:
    """P5 bytes -> uint8 array (h, w)."""
    width, height, offset = _parse_pnm_header(blob, b"P5")
    expected = width * height
    payload = blob[offset:offset + expected]
    if len(payload) < expected:
        raise TruncatedFileError(f"pixel payload {len(payload)} < {expected} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(image: np.ndarray) -> bytes:
    """(h, w) uint8 -> P5 bytes."""
    if image.ndim != 2:
        raise InvalidDimensionsError(f"expected (h, w), got {image.shape}")
    h, w = image.shape
    return b"P5\n%d %d\n255\n" % (w, h) + image.astype(np.uint8).tobytes()


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (c, h, w) float array using half-pixel centers."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(image.dtype)[None, :, None]
    fx = (xs - x0).astype(image.dtype)[None, None, :]
    top = (1 - fx) * image[:, y0][:, :, x0] + fx * image[:, y0][:, :, x1]
    bottom = (1 - fx) * image[:, y1][:, :, x0] + fx * image[:, y1][:, :, x1]
    return ((1 - fy) * top + fy * bottom).astype(image.dtype)
