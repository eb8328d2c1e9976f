"""Image file I/O: 8-bit RGB PNG plus a raw portable format.

Raw layout: magic "MDIM" | u32 H | u32 W | H*W*3 bytes row-major RGB.
In memory an image is a float array of shape (H, W, 3) with values in [0, 1];
the 8-bit mapping is round(v * 255).
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

RAW_MAGIC = b"MDIM"
_RAW_HEADER = struct.Struct("<4sII")


class ImageFormatError(ValueError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    check_image(img)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ImageFormatError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ImageFormatError("image values must lie in [0, 1]")


def save_png(path: str, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def png_bytes(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_raw(path: str, img: np.ndarray) -> None:
    data = to_uint8(img)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, h, w))
        f.write(data.tobytes())


def load_raw(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_RAW_HEADER.size)
        if len(header) != _RAW_HEADER.size:
            raise ImageFormatError(f"{path}: truncated header")
        magic, h, w = _RAW_HEADER.unpack(header)
        if magic != RAW_MAGIC:
            raise ImageFormatError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
        body = f.read()
    expected = h * w * 3
    if len(body) != expected:
        raise ImageFormatError(f"{path}: expected {expected} pixel bytes, found {len(body)}")
    return from_uint8(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))
