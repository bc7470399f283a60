"""Reading and writing images and binary masks.

Arrays are float32 (C, H, W) in [0, 1] on the way in, and are quantized to
8-bit on the way out. PNG (and anything else Pillow knows) is handled by
Pillow; `.ppm` files use a self-contained binary P6 codec so fixtures can be
produced without any imaging library at all.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from .errors import DataError
from .preprocess import BinaryMask

PathLike = Union[str, Path]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0,1] float image to bytes with round-half-up behavior."""
    x = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 PPMs are supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3)


def _write_ppm(path: Path, hwc: np.ndarray) -> None:
    h, w, _ = hwc.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(hwc.tobytes())


def read_image(path: PathLike) -> np.ndarray:
    """Load an RGB image as float32 (3, H, W) in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        if path.suffix.lower() == ".ppm":
            hwc = _read_ppm(path)
        else:
            with Image.open(path) as im:
                hwc = np.asarray(im.convert("RGB"))
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return from_uint8(hwc.transpose(2, 0, 1))


def write_image(path: PathLike, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as an 8-bit RGB file."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected (3,H,W) image, got {image.shape}")
    hwc = to_uint8(image).transpose(1, 2, 0)
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, hwc)
    else:
        Image.fromarray(hwc, mode="RGB").save(path)


def mask_path_for(image_path: PathLike) -> Path:
    """`foo/img_001.png` -> `foo/img_001.mask.png`."""
    p = Path(image_path)
    return p.with_name(p.stem + ".mask.png")


def read_mask(path: PathLike) -> BinaryMask:
    path = Path(path)
    if not path.exists():
        raise DataError(f"mask not found: {path}")
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"))
    except Exception as exc:
        raise DataError(f"unreadable mask {path}: {exc}") from exc
    return BinaryMask(gray > 127)


def write_mask(path: PathLike, mask: BinaryMask) -> None:
    raw = np.where(mask.bits, np.uint8(255), np.uint8(0))
    Image.fromarray(raw, mode="L").save(Path(path))


def write_gray(path: PathLike, image: np.ndarray) -> None:
    """Write a 2D float image in [0, 1] as 8-bit grayscale."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DataError(f"expected 2D image, got {image.shape}")
    raw = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(raw, mode="L").save(Path(path))
