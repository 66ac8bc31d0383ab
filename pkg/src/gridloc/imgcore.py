"""Pixel rasters, color conversions and the small geometry types shared by all stages.

Images are plain numpy arrays: ``(H, W, 3)`` uint8 for RGB, ``(H, W)`` uint8
for grayscale, ``(H, W)`` bool for binary masks.  Image coordinates follow the
usual convention: origin at the top-left pixel center, x to the right, y down.
World coordinates are right-handed with the heading measured counter-clockwise;
the handedness flip between the two lives entirely in :mod:`gridloc.locate`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class InvalidImageError(ValueError):
    """Raised when an image array has the wrong shape, dtype or channel count."""


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: position in meters, heading in degrees in [-180, 180)."""

    x: float
    y: float
    theta_deg: float

    def __post_init__(self):
        object.__setattr__(self, "theta_deg", wrap_angle_deg(self.theta_deg))


@dataclass(frozen=True)
class LineSegment:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x0 == self.x1 and self.y0 == self.y1:
            raise ValueError("degenerate segment: endpoints coincide")

    @property
    def p0(self) -> np.ndarray:
        return np.array([self.x0, self.y0])

    @property
    def p1(self) -> np.ndarray:
        return np.array([self.x1, self.y1])


def wrap_angle_deg(a: float) -> float:
    """Wrap an angle to the half-open interval [-180, 180)."""
    return float((a + 180.0) % 360.0 - 180.0)


def angle_diff_deg(a: float, b: float) -> float:
    """Signed circular difference a - b, wrapped to [-180, 180)."""
    return wrap_angle_deg(a - b)


def require_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidImageError(f"expected (H, W, 3) RGB image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise InvalidImageError(f"expected uint8 samples, got {img.dtype}")
    return img


def require_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise InvalidImageError(f"expected (H, W) grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise InvalidImageError(f"expected uint8 samples, got {img.dtype}")
    return img


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Luminance conversion: round(0.299 R + 0.587 G + 0.114 B)."""
    img = require_rgb(img)
    f = img.astype(np.float32)
    lum = 0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]
    return np.rint(lum).clip(0, 255).astype(np.uint8)


def rgb_to_hsv(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone HSV: hue in [0, 360) (0 for gray pixels), saturation and value in [0, 1]."""
    img = require_rgb(img)
    f = img.astype(np.float32) / 255.0
    r, g, b = f[..., 0], f[..., 1], f[..., 2]
    v = np.max(f, axis=-1)
    c = v - np.min(f, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / v, 0.0)
        hr = np.where(c > 0, ((g - b) / c) % 6.0, 0.0)
        hg = np.where(c > 0, (b - r) / c + 2.0, 0.0)
        hb = np.where(c > 0, (r - g) / c + 4.0, 0.0)
    h = np.where(v == r, hr, np.where(v == g, hg, hb))
    h = np.where(c > 0, h * 60.0, 0.0) % 360.0
    return h.astype(np.float32), s.astype(np.float32), v.astype(np.float32)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`; used by the scene renderer."""
    h = np.asarray(h, dtype=np.float32) % 360.0
    s = np.asarray(s, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    m = v - c
    sector = np.floor(hp).astype(np.int32) % 6
    r = np.choose(sector, [c, x, np.zeros_like(c), np.zeros_like(c), x, c])
    g = np.choose(sector, [x, c, c, x, np.zeros_like(c), np.zeros_like(c)])
    b = np.choose(sector, [np.zeros_like(c), np.zeros_like(c), x, c, c, x])
    rgb = np.stack([r + m, g + m, b + m], axis=-1)
    return np.rint(rgb * 255.0).clip(0, 255).astype(np.uint8)


def load_png(path: str | Path) -> np.ndarray:
    """Read a PNG as uint8; RGB stays (H, W, 3), single channel stays (H, W)."""
    with Image.open(path) as im:
        if im.mode in ("L",):
            return np.asarray(im, dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Write an RGB, grayscale or binary image as lossless PNG (masks as {0, 255})."""
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.ndim == 2:
        Image.fromarray(img, mode="L").save(path, format="PNG")
    elif img.ndim == 3 and img.shape[2] == 3:
        Image.fromarray(img, mode="RGB").save(path, format="PNG")
    else:
        raise InvalidImageError(f"cannot serialize image of shape {img.shape}")
