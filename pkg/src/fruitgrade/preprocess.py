"""Image preprocessing: pixel scaling, resizing, mask-driven cropping, and
the random augmentation policy applied during training.

Images are float32 arrays shaped (C, H, W). Values are in [0, 1] until a
scaling scheme maps them to network inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError

FIXED_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
FIXED_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ScalingScheme:
    """One of the three pixel scaling schemes.

    `simple` shifts bytes to [-0.5, 0.5]; `dataset` standardizes with stats
    measured on the training set; `fixed` uses the conventional RGB constants.
    """

    kind: str
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    @classmethod
    def simple(cls) -> "ScalingScheme":
        return cls("simple")

    @classmethod
    def dataset(cls, mean: np.ndarray, std: np.ndarray) -> "ScalingScheme":
        return cls("dataset", np.asarray(mean, np.float32), np.asarray(std, np.float32))

    @classmethod
    def fixed(cls) -> "ScalingScheme":
        return cls("fixed", FIXED_MEAN.copy(), FIXED_STD.copy())


def scale_pixels(image: np.ndarray, scheme: ScalingScheme) -> np.ndarray:
    """Map byte pixel values (0..255, shape (C,H,W)) to network inputs."""
    x = np.asarray(image, dtype=np.float32)
    if x.min() < 0 or x.max() > 255:
        raise ValueError("byte image values must lie in [0, 255]")
    return scale_unit(x / np.float32(255.0), scheme)


def scale_unit(image: np.ndarray, scheme: ScalingScheme) -> np.ndarray:
    """Same mapping as scale_pixels but for images already in [0, 1]."""
    x = np.asarray(image, dtype=np.float32)
    if scheme.kind == "simple":
        return x - np.float32(0.5)
    if scheme.kind in ("dataset", "fixed"):
        if scheme.mean is None or scheme.std is None:
            raise ValueError(f"{scheme.kind} scaling needs mean/std")
        if np.any(scheme.std <= 0):
            raise ValueError("scaling std has a zero (or negative) channel")
        return (x - scheme.mean[:, None, None]) / scheme.std[:, None, None]
    raise ValueError(f"unknown scaling scheme: {scheme.kind!r}")


def compute_dataset_stats(images: Iterable[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std over all pixels, in [0,1] units."""
    total = None
    total_sq = None
    count = 0
    n_images = 0
    for img in images:
        x = np.asarray(img, dtype=np.float64)
        if x.ndim != 3:
            raise DimensionError("expected (C,H,W) images")
        if total is None:
            total = np.zeros(x.shape[0])
            total_sq = np.zeros(x.shape[0])
        total += x.sum(axis=(1, 2))
        total_sq += (x * x).sum(axis=(1, 2))
        count += x.shape[1] * x.shape[2]
        n_images += 1
    if n_images == 0:
        raise ValueError("cannot compute stats of an empty image set")
    if n_images < 2:
        raise ValueError("need at least 2 training images for dataset stats")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return mean.astype(np.float32), np.sqrt(var).astype(np.float32)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _bilinear_sample(image: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Sample (C,H,W) image at fractional coordinates, replicating borders."""
    _, h, w = image.shape
    yy = np.clip(yy, 0.0, h - 1.0)
    xx = np.clip(xx, 0.0, w - 1.0)
    y0 = np.floor(yy).astype(np.intp)
    x0 = np.floor(xx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (yy - y0).astype(np.float32)
    wx = (xx - x0).astype(np.float32)
    p00 = image[:, y0, x0]
    p01 = image[:, y0, x1]
    p10 = image[:, y1, x0]
    p11 = image[:, y1, x1]
    top = p00 * (1.0 - wx) + p01 * wx
    bot = p10 * (1.0 - wx) + p11 * wx
    return (top * (1.0 - wy) + bot * wy).astype(np.float32)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C,H,W) image using half-pixel-center sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target extents must be positive")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise DimensionError("expected (C,H,W) image")
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(image, yy, xx)


def rotate_bilinear(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center; out-of-frame samples replicate borders."""
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_x = cos * dx - sin * dy + cx
    src_y = sin * dx + cos * dy + cy
    return _bilinear_sample(image, src_y, src_x)


def zoom_bilinear(image: np.ndarray, factor: float) -> np.ndarray:
    """Zoom about the center; factor > 1 magnifies, < 1 shrinks into frame."""
    if factor <= 0:
        raise ValueError("zoom factor must be positive")
    image = np.asarray(image, dtype=np.float32)
    _, h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    src_y = (yy - cy) / factor + cy
    src_x = (xx - cx) / factor + cx
    return _bilinear_sample(image, src_y, src_x)


# ---------------------------------------------------------------------------
# masks, cropping, splash
# ---------------------------------------------------------------------------

@dataclass
class BinaryMask:
    """Per-pixel foreground flags, same dimensions as the paired image."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise DimensionError("mask must be 2D")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def foreground_fraction(self) -> float:
        return float(self.bits.mean())


def mask_to_bbox(mask: BinaryMask) -> Tuple[int, int, int, int]:
    """Tightest rectangle (x_min, y_min, x_max, y_max), inclusive, covering
    all foreground pixels."""
    ys, xs = np.nonzero(mask.bits)
    if ys.size == 0:
        raise ValueError("mask has no foreground pixels")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def crop_to_bbox(image: np.ndarray, bbox: Tuple[int, int, int, int],
                 margin: float = 0.0) -> np.ndarray:
    """Crop to an inclusive rectangle, expanded by margin x side-length per
    side and clamped to the image borders."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError("expected (C,H,W) image")
    _, h, w = image.shape
    x_min, y_min, x_max, y_max = bbox
    if x_max < x_min or y_max < y_min:
        raise ValueError(f"degenerate bbox {bbox}")
    if x_min < 0 or y_min < 0 or x_max >= w or y_max >= h:
        raise ValueError(f"bbox {bbox} outside {w}x{h} image")
    bw = x_max - x_min + 1
    bh = y_max - y_min + 1
    x0 = max(0, int(np.floor(x_min - margin * bw)))
    x1 = min(w - 1, int(np.ceil(x_max + margin * bw)))
    y0 = max(0, int(np.floor(y_min - margin * bh)))
    y1 = min(h - 1, int(np.ceil(y_max + margin * bh)))
    return image[:, y0:y1 + 1, x0:x1 + 1].copy()


def apply_splash(image: np.ndarray, mask: BinaryMask, fill: Sequence[float]) -> np.ndarray:
    """Replace background pixels with a fill color; foreground is untouched."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[1:] != mask.bits.shape:
        raise DimensionError(
            f"mask {mask.bits.shape} does not match image {image.shape[1:]}")
    fill_arr = np.asarray(fill, dtype=np.float32).reshape(-1, 1, 1)
    if fill_arr.shape[0] != image.shape[0]:
        raise DimensionError("fill color channel count mismatch")
    return np.where(mask.bits[None, :, :], image, fill_arr)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    """Random perturbation ranges; every draw is uniform within its range."""

    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    brightness_range: Tuple[float, float] = (-0.20, 0.20)
    contrast_range: Tuple[float, float] = (-0.10, 0.10)
    rotation_range_deg: Tuple[float, float] = (-20.0, 20.0)
    zoom_range: Tuple[float, float] = (0.8, 1.25)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(hflip_prob=0.0, vflip_prob=0.0, brightness_range=(0.0, 0.0),
                   contrast_range=(0.0, 0.0), rotation_range_deg=(0.0, 0.0),
                   zoom_range=(1.0, 1.0))


def augment(image: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator) -> np.ndarray:
    """Apply the perturbation stack in fixed order: flips, brightness,
    contrast, rotation, zoom. Output keeps the input shape; values are
    clamped back to [0, 1].

    All six random draws happen unconditionally so the rng stream advances
    identically regardless of which stages end up active.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[1] < 2 or image.shape[2] < 2:
        raise DimensionError("augment expects a (C,H,W) image with spatial dims >= 2")

    u_h = rng.random()
    u_v = rng.random()
    d_bright = rng.uniform(*policy.brightness_range)
    d_contrast = rng.uniform(*policy.contrast_range)
    angle = rng.uniform(*policy.rotation_range_deg)
    zoom = rng.uniform(*policy.zoom_range)

    out = image
    if u_h < policy.hflip_prob:
        out = out[:, :, ::-1]
    if u_v < policy.vflip_prob:
        out = out[:, ::-1, :]
    if d_bright != 0.0:
        out = out * np.float32(1.0 + d_bright)
    if d_contrast != 0.0:
        m = np.float32(out.mean())
        out = (out - m) * np.float32(1.0 + d_contrast) + m
    if angle != 0.0:
        out = rotate_bilinear(out, angle)
    if zoom != 1.0:
        out = zoom_bilinear(out, zoom)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
