"""Edge-based foreground segmentation.

The classic recipe: Gaussian blur, Sobel gradients, non-maximum suppression
across four quantized gradient directions, then double-threshold hysteresis.
On top of the edge map we fill the enclosed region to get a foreground mask
for cropping (fruit against a plainish background).
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .errors import DimensionError
from .preprocess import BinaryMask

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float32)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps with radius 3*sigma (rounded, at least 1)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2D image with edge-replicated borders."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DimensionError("expected a 2D image")
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    pad = np.pad(image, ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(image)
    for i, tap in enumerate(k):
        out += tap * pad[:, i:i + image.shape[1]]
    pad = np.pad(out, ((r, r), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i, tap in enumerate(k):
        out += tap * pad[i:i + image.shape[0], :]
    return out


def _correlate3(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    pad = np.pad(image, 1, mode="edge")
    h, w = image.shape
    out = np.zeros_like(image)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * pad[dy:dy + h, dx:dx + w]
    return out


def sobel_gradients(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical derivative estimates (gx, gy)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DimensionError("expected a 2D image")
    return _correlate3(image, SOBEL_X), _correlate3(image, SOBEL_Y)


def _nonmax_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep a pixel only if its magnitude is >= both neighbors along the
    (quantized) gradient direction."""
    h, w = mag.shape
    pad = np.pad(mag, 1, mode="constant")
    center = pad[1:h + 1, 1:w + 1]

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # neighbor offsets per direction bucket
    east = pad[1:h + 1, 2:w + 2]
    west = pad[1:h + 1, 0:w]
    north = pad[0:h, 1:w + 1]
    south = pad[2:h + 2, 1:w + 1]
    ne = pad[0:h, 2:w + 2]
    sw = pad[2:h + 2, 0:w]
    nw = pad[0:h, 0:w]
    se = pad[2:h + 2, 2:w + 2]

    horiz = (angle < 22.5) | (angle >= 157.5)
    diag1 = (angle >= 22.5) & (angle < 67.5)
    vert = (angle >= 67.5) & (angle < 112.5)
    diag2 = (angle >= 112.5) & (angle < 157.5)

    keep = np.zeros_like(mag, dtype=bool)
    keep |= horiz & (center >= east) & (center >= west)
    keep |= diag1 & (center >= ne) & (center >= sw)
    keep |= vert & (center >= north) & (center >= south)
    keep |= diag2 & (center >= nw) & (center >= se)
    keep &= mag > 0
    return np.where(keep, mag, 0.0).astype(np.float32)


def _dilate8(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    pad = np.pad(mask, 1, mode="constant")
    out = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            out |= pad[dy:dy + h, dx:dx + w]
    return out


def _hysteresis(nms: np.ndarray, low: float, high: float) -> np.ndarray:
    strong = nms >= high
    weak = nms >= low
    edges = strong.copy()
    while True:
        grown = _dilate8(edges) & weak
        if np.array_equal(grown, edges):
            return edges
        edges = grown


def canny_edges(image: np.ndarray, low: float = 0.1, high: float = 0.3,
                sigma: float = 1.4) -> BinaryMask:
    """Edge map of a 2D grayscale image in [0,1].

    Thresholds are relative to the peak gradient magnitude, so they live in
    [0,1] regardless of image contrast. A perfectly flat image has no edges.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DimensionError("expected a 2D grayscale image")
    if not (0.0 <= low <= high):
        raise ValueError("thresholds must satisfy 0 <= low <= high")

    blurred = gaussian_blur(image, sigma)
    gx, gy = sobel_gradients(blurred)
    mag = np.hypot(gx, gy).astype(np.float32)
    peak = float(mag.max())
    if peak <= 0.0:
        return BinaryMask(np.zeros(image.shape, dtype=bool))
    mag /= np.float32(peak)
    nms = _nonmax_suppress(mag, gx, gy)
    return BinaryMask(_hysteresis(nms, low, high))


def fill_enclosed(edges: BinaryMask) -> BinaryMask:
    """Foreground = everything not reachable from the border without crossing
    an edge pixel. Edge pixels themselves count as foreground."""
    blocked = edges.bits
    h, w = blocked.shape
    outside = np.zeros((h, w), dtype=bool)
    seed = np.zeros((h, w), dtype=bool)
    seed[0, :] = seed[-1, :] = True
    seed[:, 0] = seed[:, -1] = True
    frontier = seed & ~blocked
    outside |= frontier
    while frontier.any():
        grown = _dilate4(outside) & ~blocked & ~outside
        outside |= grown
        frontier = grown
    return BinaryMask(~outside)


def _dilate4(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def segment_foreground(image: np.ndarray, low: float = 0.1, high: float = 0.3,
                       sigma: float = 1.4, close_radius: int = 1) -> BinaryMask:
    """Full segmentation: edges of the luma image, then region filling.

    Accepts (C,H,W) in [0,1] (averaged to grayscale) or a 2D image.
    Non-maximum suppression leaves pixel-scale notches where the gradient
    direction crosses an octant boundary (corners, 45-degree arcs), so the
    fill runs on edges dilated `close_radius` times and the result is eroded
    back by the same amount — a morphological closing of the contour.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image.mean(axis=0)
    edges = canny_edges(image, low=low, high=high, sigma=sigma)
    bits = edges.bits
    for _ in range(close_radius):
        bits = _dilate8(bits)
    filled = fill_enclosed(BinaryMask(bits)).bits
    for _ in range(close_radius):
        filled = ~_dilate4(~filled)
    return BinaryMask(filled | edges.bits)
