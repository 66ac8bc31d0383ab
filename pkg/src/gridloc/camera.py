"""Fisheye undistortion, homography estimation and the top-down perspective warp.

The lens model is a radial distortion on top of the ideal pinhole projection:
a ray at angle theta from the optical axis lands at normalized radius

    r(theta) = tan(theta) * P(theta),
    P(theta) = 1 + k1 theta^2 + k2 theta^4 + k3 theta^6 + k4 theta^8

so that zero coefficients give exactly the pinhole camera and undistortion is
the identity.  Undistortion resamples the frame into the ideal pinhole view,
which is projectively related to the floor plane (straight lines stay
straight).  Unprojecting a distorted pixel into a ray requires inverting
r(theta); that is done by Newton iteration.  Monotonicity of the mapping over
the calibrated field of view is checked when the model is constructed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Degenerate geometric configuration (collinear points, singular matrix...)."""


class CameraConfigError(ValueError):
    """Invalid camera parameters (non-monotonic distortion, bad intrinsics)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraConfigError("principal point must lie inside the image")


@dataclass(frozen=True)
class FisheyeDistortion:
    """Radial distortion polynomial in the ray angle, validated for monotonicity."""

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    max_theta_rad: float = np.deg2rad(78.0)

    def __post_init__(self):
        th = np.linspace(0.0, self.max_theta_rad, 4096)
        if np.any(np.diff(th * self.poly(th)) <= 0):
            raise CameraConfigError(
                "angular distortion polynomial is not monotonic over the field of view")
        if np.any(np.diff(self.radius(th)) <= 0):
            raise CameraConfigError(
                "radial mapping is not monotonic over the field of view")

    def poly(self, theta: np.ndarray | float) -> np.ndarray:
        t2 = np.asarray(theta, dtype=np.float64) ** 2
        return 1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4)))

    def radius(self, theta: np.ndarray | float) -> np.ndarray:
        """Normalized image radius (r / f) of a ray at angle theta."""
        theta = np.asarray(theta, dtype=np.float64)
        return np.tan(theta) * self.poly(theta)

    def angle(self, radius: np.ndarray | float, tol: float = 1e-10,
              max_iter: int = 20) -> np.ndarray:
        """Invert radius(theta) by Newton iteration (tol in radians)."""
        r = np.asarray(radius, dtype=np.float64)
        theta = np.arctan(r)  # exact for k = 0
        for _ in range(max_iter):
            t = np.tan(theta)
            p = self.poly(theta)
            t2 = theta * theta
            dp = 2.0 * theta * (self.k1 + t2 * (2.0 * self.k2 + t2 * (3.0 * self.k3 + t2 * 4.0 * self.k4)))
            f = t * p - r
            fp = (1.0 + t * t) * p + t * dp
            step = f / fp
            theta = theta - step
            if np.all(np.abs(step) < tol):
                break
        return theta


def fisheye_project(points_cam: np.ndarray, intr: CameraIntrinsics,
                    dist: FisheyeDistortion) -> np.ndarray:
    """Project camera-frame 3D points (z forward) to distorted pixel coordinates."""
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    rxy = np.hypot(p[:, 0], p[:, 1])
    theta = np.arctan2(rxy, p[:, 2])
    rn = dist.radius(theta)
    with np.errstate(invalid="ignore"):
        scale = np.where(rxy > 0, rn / np.where(rxy > 0, rxy, 1.0), 0.0)
    u = intr.fx * p[:, 0] * scale + intr.cx
    v = intr.fy * p[:, 1] * scale + intr.cy
    return np.stack([u, v], axis=-1)


def fisheye_unproject(pixels: np.ndarray, intr: CameraIntrinsics,
                      dist: FisheyeDistortion) -> np.ndarray:
    """Unproject distorted pixels to unit ray directions in the camera frame."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    a = (px[:, 0] - intr.cx) / intr.fx
    b = (px[:, 1] - intr.cy) / intr.fy
    rn = np.hypot(a, b)
    theta = dist.angle(rn)
    with np.errstate(invalid="ignore"):
        s = np.where(rn > 0, np.sin(theta) / np.where(rn > 0, rn, 1.0), 0.0)
    d = np.stack([a * s, b * s, np.cos(theta)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _bilinear_sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample img at float coords; out of bounds returns 0 (black).

    Works on (H, W) or (H, W, C) uint8 images; returns float32.
    """
    h, w = img.shape[:2]
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int32)
    y0 = np.floor(yc).astype(np.int32)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0).astype(np.float32)
    fy = (yc - y0).astype(np.float32)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    im = img.astype(np.float32)
    out = (im[y0, x0] * (1 - fx) * (1 - fy)
           + im[y0, x1] * fx * (1 - fy)
           + im[y1, x0] * (1 - fx) * fy
           + im[y1, x1] * fx * fy)
    out[~valid] = 0.0
    return out


def undistort_map(intr: CameraIntrinsics, dist: FisheyeDistortion) -> tuple[np.ndarray, np.ndarray]:
    """Source-pixel lookup map for undistortion (computed once, reused per frame).

    Output pixel (u, v) is an ideal pinhole ray through the same intrinsics;
    the map gives where that ray lands in the distorted source frame.
    """
    u, v = np.meshgrid(np.arange(intr.width, dtype=np.float64),
                       np.arange(intr.height, dtype=np.float64))
    a = (u - intr.cx) / intr.fx
    b = (v - intr.cy) / intr.fy
    theta = np.arctan(np.hypot(a, b))
    scale = dist.poly(theta)  # r_src = tan(theta) P(theta) = r_pinhole P(theta)
    sx = intr.fx * a * scale + intr.cx
    sy = intr.fy * b * scale + intr.cy
    return sx.astype(np.float32), sy.astype(np.float32)


def undistort_image(img: np.ndarray, intr: CameraIntrinsics, dist: FisheyeDistortion,
                    maps: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Resample a distorted frame into the pinhole view (bilinear; outside source = black)."""
    if maps is None:
        maps = undistort_map(intr, dist)
    sx, sy = maps
    return np.rint(_bilinear_sample(img, sx, sy)).clip(0, 255).astype(np.uint8)


def undistort_points(pixels: np.ndarray, intr: CameraIntrinsics,
                     dist: FisheyeDistortion) -> np.ndarray:
    """Map distorted pixel coordinates to their pinhole-view positions."""
    d = fisheye_unproject(pixels, intr, dist)
    u = intr.fx * d[:, 0] / d[:, 2] + intr.cx
    v = intr.fy * d[:, 1] / d[:, 2] + intr.cy
    return np.stack([u, v], axis=-1)


def pinhole_project(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Ideal pinhole projection (the undistorted-view coordinates)."""
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    u = intr.fx * p[:, 0] / p[:, 2] + intr.cx
    v = intr.fy * p[:, 1] / p[:, 2] + intr.cy
    return np.stack([u, v], axis=-1)


def normalize_homography(h: np.ndarray, det_eps: float = 1e-12) -> np.ndarray:
    """Scale so the bottom-right entry is 1, enforcing invertibility."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise GeometryError("homography must be 3x3")
    if abs(np.linalg.det(h)) < det_eps:
        raise GeometryError("homography is singular")
    if abs(h[2, 2]) < det_eps:
        raise GeometryError("homography cannot be normalized (h33 ~ 0)")
    return h / h[2, 2]


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    """Hartley conditioning: centroid to origin, mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.mean(np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]))
    s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
    return np.array([[s, 0.0, -s * c[0]],
                     [0.0, s, -s * c[1]],
                     [0.0, 0.0, 1.0]])


def estimate_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact 4-point direct linear transform.

    Points are conditioned (Hartley normalization), the 8x8 system in
    h11..h32 is solved exactly, and the result is denormalized.  Raises
    GeometryError when three of the four points are collinear.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    ts = _normalizing_transform(src)
    td = _normalizing_transform(dst)
    sn = (np.column_stack([src, np.ones(4)]) @ ts.T)[:, :2]
    dn = (np.column_stack([dst, np.ones(4)]) @ td.T)[:, :2]

    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(sn, dn)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h8 = np.linalg.solve(a, b)
        h8 += np.linalg.solve(a, b - a @ h8)  # one refinement step for exactness
    except np.linalg.LinAlgError as e:
        raise GeometryError(f"degenerate point configuration: {e}") from e
    hn = np.append(h8, 1.0).reshape(3, 3)
    return normalize_homography(np.linalg.inv(td) @ hn @ ts)


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a homography to one (2,) point or an (N, 2) array, with perspective division."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = p.reshape(-1, 2)
    q = np.column_stack([p, np.ones(len(p))]) @ np.asarray(h, dtype=np.float64).T
    w = q[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise GeometryError("point maps to infinity (w ~ 0)")
    out = q[:, :2] / w[:, None]
    return out[0] if single else out


def warp_map(h: np.ndarray, out_width: int, out_height: int) -> tuple[np.ndarray, np.ndarray]:
    """Source-pixel lookup map for warp_perspective with a fixed homography."""
    hinv = np.linalg.inv(normalize_homography(h))
    u, v = np.meshgrid(np.arange(out_width, dtype=np.float64),
                       np.arange(out_height, dtype=np.float64))
    w = hinv[2, 0] * u + hinv[2, 1] * v + hinv[2, 2]
    sx = (hinv[0, 0] * u + hinv[0, 1] * v + hinv[0, 2]) / w
    sy = (hinv[1, 0] * u + hinv[1, 1] * v + hinv[1, 2]) / w
    return sx.astype(np.float32), sy.astype(np.float32)


def warp_perspective(img: np.ndarray, h: np.ndarray, out_width: int, out_height: int,
                     maps: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Output pixel p is img sampled at H^-1 p (bilinear; outside source = black)."""
    if maps is None:
        maps = warp_map(h, out_width, out_height)
    sx, sy = maps
    return np.rint(_bilinear_sample(img, sx, sy)).clip(0, 255).astype(np.uint8)
