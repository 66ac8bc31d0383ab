"""Binary and grayscale image-processing primitives, implemented from scratch.

Everything here is pure numpy (no OpenCV/scipy image routines): Canny edges,
rectangular morphology, a (rho, theta) Hough accumulator with peak suppression
and supporting segments, outer-border contour tracing, Ramer-Douglas-Peucker
polygon simplification and iterative sub-pixel corner refinement.

Binary images are bool arrays; the area outside the image is background for
all morphological operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HoughLine:
    """A peak of the Hough accumulator plus the extremal supporting pixels."""

    rho: float
    theta: float  # radians in [0, pi)
    votes: int
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def angle_deg(self) -> float:
        """Direction of the line itself (not its normal), in degrees mod 180."""
        return float(np.rad2deg(self.theta + np.pi / 2.0) % 180.0)


def rect_se(width: int, height: int) -> np.ndarray:
    """Rectangular structuring element with center anchor; dimensions must be odd."""
    if width < 1 or height < 1 or width % 2 == 0 or height % 2 == 0:
        raise ValueError(f"structuring element must have odd positive dims, got {width}x{height}")
    return np.ones((height, width), dtype=bool)


def _as_se(se) -> np.ndarray:
    se = np.asarray(se, dtype=bool)
    if se.ndim != 2 or se.shape[0] % 2 == 0 or se.shape[1] % 2 == 0:
        raise ValueError("structuring element must be 2D with odd dimensions")
    return se


def dilate(mask: np.ndarray, se) -> np.ndarray:
    """Minkowski dilation; pixels outside the image are background."""
    se = _as_se(se)
    mask = np.asarray(mask, dtype=bool)
    ah, aw = se.shape[0] // 2, se.shape[1] // 2
    padded = np.pad(mask, ((ah, ah), (aw, aw)), constant_values=False)
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dy, dx in zip(*np.nonzero(se)):
        out |= padded[dy:dy + h, dx:dx + w]
    return out


def erode(mask: np.ndarray, se) -> np.ndarray:
    """Minkowski erosion; pixels outside the image are background."""
    se = _as_se(se)
    mask = np.asarray(mask, dtype=bool)
    ah, aw = se.shape[0] // 2, se.shape[1] // 2
    padded = np.pad(mask, ((ah, ah), (aw, aw)), constant_values=False)
    out = np.ones_like(mask)
    h, w = mask.shape
    for dy, dx in zip(*np.nonzero(se)):
        out &= padded[dy:dy + h, dx:dx + w]
    return out


def open_mask(mask: np.ndarray, se) -> np.ndarray:
    """Erosion followed by dilation (speckle removal)."""
    return dilate(erode(mask, se), se)


def close_mask(mask: np.ndarray, se) -> np.ndarray:
    """Dilation followed by erosion (gap filling)."""
    return erode(dilate(mask, se), se)


_GAUSS_SIGMA = 1.4
_GAUSS_TAPS = np.exp(-np.arange(-2.0, 3.0) ** 2 / (2.0 * _GAUSS_SIGMA ** 2))
_GAUSS_TAPS = (_GAUSS_TAPS / _GAUSS_TAPS.sum()).astype(np.float32)


def _conv1d(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img, dtype=np.float32)
    for i, t in enumerate(taps):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + img.shape[axis])
        out += t * p[tuple(sl)]
    return out


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel derivatives of a float32/uint8 image (reflect border)."""
    f = np.asarray(gray, dtype=np.float32)
    smooth = np.array([1.0, 2.0, 1.0], dtype=np.float32)
    diff = np.array([-1.0, 0.0, 1.0], dtype=np.float32)
    gx = _conv1d(_conv1d(f, smooth, axis=0), diff, axis=1)
    gy = _conv1d(_conv1d(f, diff, axis=0), smooth, axis=1)
    return gx, gy


def canny(gray: np.ndarray, low_threshold: float, high_threshold: float) -> np.ndarray:
    """Classic Canny edge detector.

    5x5 Gaussian smoothing (sigma 1.4), Sobel gradients, non-maximum
    suppression along the quantized gradient direction and double-threshold
    hysteresis with 8-connectivity.  Thresholds apply to the raw 3x3 Sobel
    gradient magnitude of the 8-bit image.
    """
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError("canny expects a single-channel image")
    if not (0 < low_threshold < high_threshold):
        raise ValueError("thresholds must satisfy 0 < low < high")
    f = gray.astype(np.float32)
    f = _conv1d(_conv1d(f, _GAUSS_TAPS, axis=0), _GAUSS_TAPS, axis=1)
    gx, gy = sobel_gradients(f)
    mag = np.hypot(gx, gy)

    # quantize gradient direction into 4 bins: 0 deg, 45, 90, 135 (mod 180)
    angle = np.arctan2(gy, gx)
    sector = np.round(angle / (np.pi / 4.0)).astype(np.int32) % 4

    padded = np.pad(mag, 1, constant_values=0.0)
    h, w = mag.shape

    def shifted(dy: int, dx: int) -> np.ndarray:
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    # neighbor offsets along the gradient for each sector (dx, dy)
    offs = {0: (1, 0), 1: (1, 1), 2: (0, 1), 3: (-1, 1)}
    nms = np.zeros_like(mag, dtype=bool)
    for s, (dx, dy) in offs.items():
        sel = sector == s
        keep = (mag > shifted(dy, dx)) & (mag >= shifted(-dy, -dx))
        nms |= sel & keep
    nms &= mag > 0

    strong = nms & (mag >= high_threshold)
    weak = nms & (mag >= low_threshold)

    # grow strong seeds through weak pixels (8-connected) to fixpoint
    edges = strong.copy()
    se3 = np.ones((3, 3), dtype=bool)
    while True:
        grown = dilate(edges, se3) & weak
        if np.array_equal(grown, edges):
            break
        edges = grown
    return edges


def hough_lines(mask: np.ndarray, rho_res: float = 1.0,
                theta_res: float = np.deg2rad(0.25), min_votes: int = 100,
                suppress_rho: float = 10.0, suppress_theta: float = np.deg2rad(2.0),
                support_tol: float = 1.5, max_lines: int = 200) -> list[HoughLine]:
    """Line detection on a binary image via a (rho, theta) accumulator.

    Peaks at or above ``min_votes`` are returned in descending vote order;
    peaks within ``suppress_rho``/``suppress_theta`` of an accepted stronger
    peak are merged away.  Each line carries the extremal supporting
    foreground pixels as its segment endpoints.
    """
    if rho_res <= 0 or theta_res <= 0:
        raise ValueError("resolutions must be positive")
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return []
    xs_f = xs.astype(np.float32)
    ys_f = ys.astype(np.float32)

    n_theta = int(np.ceil(np.pi / theta_res))
    thetas = np.arange(n_theta) * theta_res
    max_rho = float(np.hypot(mask.shape[1] - 1, mask.shape[0] - 1))
    n_rho = int(np.ceil(2.0 * max_rho / rho_res)) + 1
    acc = np.zeros((n_rho, n_theta), dtype=np.int32)

    cos_t = np.cos(thetas).astype(np.float32)
    sin_t = np.sin(thetas).astype(np.float32)
    for k in range(n_theta):
        rho = xs_f * cos_t[k] + ys_f * sin_t[k]
        idx = np.round((rho + max_rho) / rho_res).astype(np.int64)
        np.clip(idx, 0, n_rho - 1, out=idx)
        acc[:, k] += np.bincount(idx, minlength=n_rho).astype(np.int32)

    ri, ti = np.nonzero(acc >= min_votes)
    if len(ri) == 0:
        return []
    votes = acc[ri, ti]
    order = np.argsort(-votes, kind="stable")
    ri, ti, votes = ri[order], ti[order], votes[order]
    rhos = ri * rho_res - max_rho

    accepted: list[tuple[float, float, int]] = []
    for rho, ti_k, v in zip(rhos, ti, votes):
        theta = float(thetas[ti_k])
        suppressed = False
        for arho, atheta, _ in accepted:
            if _line_close(rho, theta, arho, atheta, suppress_rho, suppress_theta):
                suppressed = True
                break
        if not suppressed:
            accepted.append((float(rho), theta, int(v)))
            if len(accepted) >= max_lines:
                break

    lines = []
    for rho, theta, v in accepted:
        c, s = np.cos(theta), np.sin(theta)
        d = np.abs(xs_f * c + ys_f * s - rho)
        support = d <= support_tol
        if not np.any(support):
            continue
        t = -xs_f[support] * s + ys_f[support] * c
        i0, i1 = np.argmin(t), np.argmax(t)
        sx, sy = xs_f[support], ys_f[support]
        lines.append(HoughLine(rho, theta, v,
                               float(sx[i0]), float(sy[i0]), float(sx[i1]), float(sy[i1])))
    return lines


def _line_close(r1: float, t1: float, r2: float, t2: float,
                rho_tol: float, theta_tol: float) -> bool:
    """(rho, theta) proximity with the (r, t) ~ (-r, t + pi) identification."""
    if abs(t1 - t2) <= theta_tol and abs(r1 - r2) <= rho_tol:
        return True
    # wrapped representation of line 2
    t2w = t2 - np.pi if t2 >= np.pi / 2 else t2 + np.pi
    return abs(t1 - t2w) <= theta_tol and abs(r1 + r2) <= rho_tol


def draw_segment(mask: np.ndarray, x0: float, y0: float, x1: float, y1: float,
                 thickness: float, value: bool = True) -> None:
    """Set all pixels within thickness/2 of the segment (in place)."""
    h, w = mask.shape
    r = thickness / 2.0
    lo_x = max(0, int(np.floor(min(x0, x1) - r - 1)))
    hi_x = min(w - 1, int(np.ceil(max(x0, x1) + r + 1)))
    lo_y = max(0, int(np.floor(min(y0, y1) - r - 1)))
    hi_y = min(h - 1, int(np.ceil(max(y0, y1) + r + 1)))
    if lo_x > hi_x or lo_y > hi_y:
        return
    xs = np.arange(lo_x, hi_x + 1, dtype=np.float32)
    ys = np.arange(lo_y, hi_y + 1, dtype=np.float32)
    px, py = np.meshgrid(xs, ys)
    ax, ay = px - x0, py - y0
    ux, uy = x1 - x0, y1 - y0
    seg_len2 = ux * ux + uy * uy
    if seg_len2 == 0:
        d2 = ax * ax + ay * ay
    else:
        t = np.clip((ax * ux + ay * uy) / seg_len2, 0.0, 1.0)
        dx = ax - t * ux
        dy = ay - t * uy
        d2 = dx * dx + dy * dy
    sel = d2 <= r * r
    mask[lo_y:hi_y + 1, lo_x:hi_x + 1][sel] = value


def draw_line(mask: np.ndarray, point: tuple[float, float], angle_rad: float,
              thickness: float, value: bool = True) -> None:
    """Draw an infinite line (clipped to the image) through a point (in place)."""
    h, w = mask.shape
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    span = float(np.hypot(w, h)) + thickness
    x0 = point[0] - span * c
    y0 = point[1] - span * s
    x1 = point[0] + span * c
    y1 = point[1] + span * s
    draw_segment(mask, x0, y0, x1, y1, thickness, value)


# Moore neighborhood in clockwise order, starting East (dx, dy)
_MOORE = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]


def find_contours(mask: np.ndarray) -> list[np.ndarray]:
    """Outer boundaries of 8-connected foreground components (Moore tracing).

    Returns one (N, 2) int array of (x, y) border pixels per component, in
    tracing order with no repeated consecutive points.  Borders of interior
    holes may additionally be emitted for hollow shapes; callers filter by
    shape as needed.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    padded = np.pad(mask, 1, constant_values=False)
    visited = np.zeros_like(padded, dtype=bool)

    west = np.zeros_like(mask)
    west[:, 1:] = mask[:, :-1]
    cand_y, cand_x = np.nonzero(mask & ~west)

    contours = []
    for sy, sx in zip(cand_y + 1, cand_x + 1):  # padded coordinates
        if visited[sy, sx]:
            continue
        contour = _trace_border(padded, visited, sx, sy)
        contours.append(np.array(contour, dtype=np.int32) - 1)  # back to image coords
    return contours


def _trace_border(padded: np.ndarray, visited: np.ndarray, sx: int, sy: int) -> list:
    """Moore-neighbor tracing with Jacob's stopping criterion (padded coords)."""
    contour = [(sx, sy)]
    visited[sy, sx] = True
    cx, cy = sx, sy
    backtrack = 4  # entered the start pixel from the West (scan direction)
    first_dir = None
    for _ in range(4 * padded.size):
        found = None
        for i in range(1, 9):
            d = (backtrack + i) % 8
            if padded[cy + _MOORE[d][1], cx + _MOORE[d][0]]:
                found = d
                break
        if found is None:
            return contour  # isolated pixel
        if (cx, cy) == (sx, sy):
            if first_dir is None:
                first_dir = found
            elif found == first_dir:
                # loop closed: drop the re-appended start pixel
                return contour[:-1] if contour[-1] == (sx, sy) else contour
        cx += _MOORE[found][0]
        cy += _MOORE[found][1]
        backtrack = (found + 4) % 8
        contour.append((cx, cy))
        visited[cy, cx] = True
    return contour


def approx_poly(contour: np.ndarray, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification of a closed contour.

    The contour is split at its two most distant points (double-sweep
    diameter) and each half is simplified; every original point ends up
    within ``epsilon`` of the returned polygon, whose vertices are a
    subsequence of the input points.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pts = np.asarray(contour, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n <= 2:
        return pts.copy()

    # double-sweep farthest-pair estimate
    d0 = np.sum((pts - pts[0]) ** 2, axis=1)
    a = int(np.argmax(d0))
    da = np.sum((pts - pts[a]) ** 2, axis=1)
    b = int(np.argmax(da))
    a, b = min(a, b), max(a, b)

    keep = np.zeros(n, dtype=bool)
    keep[a] = keep[b] = True
    _rdp_segment(pts, a, b, epsilon, keep)
    # wrap-around half: b .. n-1, 0 .. a  (trace as one chain via index list)
    wrap_idx = np.concatenate([np.arange(b, n), np.arange(0, a + 1)])
    wrap_keep = np.zeros(len(wrap_idx), dtype=bool)
    wrap_keep[0] = wrap_keep[-1] = True
    _rdp_segment(pts[wrap_idx], 0, len(wrap_idx) - 1, epsilon, wrap_keep)
    keep[wrap_idx[wrap_keep]] = True
    return pts[keep]


def _rdp_segment(pts: np.ndarray, i0: int, i1: int, epsilon: float, keep: np.ndarray) -> None:
    stack = [(i0, i1)]
    while stack:
        s, e = stack.pop()
        if e <= s + 1:
            continue
        seg = pts[s:e + 1]
        d = _perp_dist(seg[1:-1], pts[s], pts[e])
        if len(d) == 0:
            continue
        imax = int(np.argmax(d))
        if d[imax] > epsilon:
            m = s + 1 + imax
            keep[m] = True
            stack.append((s, m))
            stack.append((m, e))


def _perp_dist(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    L = np.hypot(ab[0], ab[1])
    if L == 0:
        return np.hypot(points[:, 0] - a[0], points[:, 1] - a[1])
    return np.abs((points[:, 0] - a[0]) * ab[1] - (points[:, 1] - a[1]) * ab[0]) / L


def corner_subpix(gray: np.ndarray, corners: np.ndarray, half_window: int,
                  max_iter: int = 40, eps: float = 0.001) -> tuple[np.ndarray, np.ndarray]:
    """Iterative gradient-orthogonality corner refinement.

    Solves sum(grad grad^T) q = sum((grad grad^T) p) over the window around the
    current estimate until the shift drops below ``eps`` px or ``max_iter``
    iterations.  Returns (refined (N, 2) array, ok (N,) bool).  Corners whose
    window touches the border, sees no gradient, or would drift farther than
    ``half_window`` are returned unrefined with ok=False.
    """
    gray = np.asarray(gray, dtype=np.float32)
    corners = np.atleast_2d(np.asarray(corners, dtype=np.float64)).copy()
    n = len(corners)
    ok = np.ones(n, dtype=bool)
    if n == 0:
        return corners, ok

    h, w = gray.shape
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) * 0.5
    gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) * 0.5

    r = np.arange(-half_window, half_window + 1, dtype=np.float64)
    wy, wx = np.meshgrid(r, r, indexing="ij")
    wx = wx.ravel()
    wy = wy.ravel()

    start = corners.copy()
    margin = half_window + 2  # window plus bilinear reach
    inside = ((start[:, 0] >= margin) & (start[:, 0] <= w - 1 - margin)
              & (start[:, 1] >= margin) & (start[:, 1] <= h - 1 - margin))
    ok &= inside

    active = ok.copy()
    saw_structure = np.zeros(n, dtype=bool)
    pos = corners.copy()
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.nonzero(active)[0]
        px = pos[idx, 0, None] + wx[None, :]
        py = pos[idx, 1, None] + wy[None, :]
        sgx = _sample_grid(gx, px, py)
        sgy = _sample_grid(gy, px, py)
        gxx = np.sum(sgx * sgx, axis=1)
        gxy = np.sum(sgx * sgy, axis=1)
        gyy = np.sum(sgy * sgy, axis=1)
        bx = np.sum(sgx * sgx * px + sgx * sgy * py, axis=1)
        by = np.sum(sgx * sgy * px + sgy * sgy * py, axis=1)
        det = gxx * gyy - gxy * gxy
        scale = gxx + gyy
        singular = det <= 1e-12 * np.maximum(scale * scale, 1e-30)
        saw_structure[idx] |= ~singular
        nx = np.where(singular, pos[idx, 0], (gyy * bx - gxy * by) / np.where(singular, 1.0, det))
        ny = np.where(singular, pos[idx, 1], (gxx * by - gxy * bx) / np.where(singular, 1.0, det))
        shift = np.hypot(nx - pos[idx, 0], ny - pos[idx, 1])
        pos[idx, 0] = nx
        pos[idx, 1] = ny
        active[idx[(shift < eps) | singular]] = False

    drift = np.max(np.abs(pos - start), axis=1)
    ok &= saw_structure & (drift <= half_window)
    result = np.where(ok[:, None], pos, start)
    return result, ok


def _sample_grid(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sampling of a float image at (N, K) coordinate arrays."""
    h, w = img.shape
    x0 = np.floor(x).astype(np.int32)
    y0 = np.floor(y).astype(np.int32)
    x0 = np.clip(x0, 0, w - 2)
    y0 = np.clip(y0, 0, h - 2)
    fx = x - x0
    fy = y - y0
    return (img[y0, x0] * (1 - fx) * (1 - fy)
            + img[y0, x0 + 1] * fx * (1 - fy)
            + img[y0 + 1, x0] * (1 - fx) * fy
            + img[y0 + 1, x0 + 1] * fx * fy)
