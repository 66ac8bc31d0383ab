"""Frame-level detectors: floor tags, laser crosshair, chessboard squares.

All detectors operate on the perspective-rectified top-down view in which one
floor square nominally maps to ``SQUARE_PX`` x ``SQUARE_PX`` pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imgproc
from .camera import GeometryError, apply_homography, estimate_homography
from .imgcore import rgb_to_gray, rgb_to_hsv

SQUARE_PX = 300  # side of one floor square in the top-down view

# ---------------------------------------------------------------------------
# Binary floor tags
#
# A tag is an 8x8 cell grid: a 1-cell dark border ring, inside it a 1-cell
# light quiet ring, and a central 4x4 data payload carrying 8 id bits plus an
# 8-bit checksum (complement of id XOR 0xA5).  Payload bits are scattered over
# the 4x4 cells in a fixed pattern chosen so that no rotation of any codeword
# is itself a codeword; decoding therefore recovers both id and orientation.
# ---------------------------------------------------------------------------

TAG_CELLS = 8
# cell index (row-major in the 4x4 data block) of payload bit k
_CELL_OF_BIT = (3, 2, 8, 7, 10, 4, 0, 12, 5, 11, 15, 1, 14, 13, 9, 6)


def tag_checksum(tag_id: int) -> int:
    return (~(tag_id ^ 0xA5)) & 0xFF


def encode_tag_grid(tag_id: int) -> np.ndarray:
    """4x4 bool data grid (True = dark cell) for a tag id in 0..255."""
    if not 0 <= tag_id <= 255:
        raise ValueError("tag id must be in 0..255")
    payload = (tag_id << 8) | tag_checksum(tag_id)
    grid = np.zeros(16, dtype=bool)
    for k in range(16):
        grid[_CELL_OF_BIT[k]] = bool((payload >> (15 - k)) & 1)
    return grid.reshape(4, 4)


def decode_tag_grid(bits: np.ndarray) -> tuple[int, int] | None:
    """Decode a sampled 4x4 data grid.

    Tries all four orientations; returns (id, rotation) where ``rotation`` is
    the number of quarter turns (counter-clockwise on screen) by which the tag
    appears rotated, or None if no orientation verifies the checksum or more
    than one does.
    """
    bits = np.asarray(bits, dtype=bool).reshape(4, 4)
    hits = []
    for r in range(4):
        cand = np.rot90(bits, k=-r) if r else bits
        flat = cand.reshape(-1)
        payload = 0
        for k in range(16):
            payload = (payload << 1) | int(flat[_CELL_OF_BIT[k]])
        tag_id = payload >> 8
        if payload & 0xFF == tag_checksum(tag_id):
            hits.append((tag_id, r))
    if len(hits) != 1:
        return None
    return hits[0]


def validate_codebook() -> None:
    """Exhaustive uniqueness check: 256 ids x 4 rotations, no pattern collisions."""
    seen: dict[bytes, tuple[int, int]] = {}
    for tag_id in range(256):
        grid = encode_tag_grid(tag_id)
        for r in range(4):
            key = np.rot90(grid, k=r).tobytes()
            if key in seen:
                raise AssertionError(
                    f"codebook collision: id {tag_id} rot {r} vs {seen[key]}")
            seen[key] = (tag_id, r)
    for tag_id in range(256):
        for r in range(4):
            got = decode_tag_grid(np.rot90(encode_tag_grid(tag_id), k=r))
            if got != (tag_id, r):
                raise AssertionError(f"round-trip failed: id {tag_id} rot {r} -> {got}")


def tag_bitmap(tag_id: int) -> np.ndarray:
    """Full 8x8 cell bitmap (True = dark): border ring, quiet ring, data block."""
    cells = np.zeros((TAG_CELLS, TAG_CELLS), dtype=bool)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True
    cells[2:6, 2:6] = encode_tag_grid(tag_id)
    return cells


def tag_image(tag_id: int, cell_px: int = 32) -> np.ndarray:
    """Printable grayscale tag: the 8x8 pattern inside a 1-cell white margin."""
    cells = tag_bitmap(tag_id)
    side = (TAG_CELLS + 2) * cell_px
    img = np.full((side, side), 255, dtype=np.uint8)
    block = np.where(cells, 0, 255).astype(np.uint8)
    pattern = np.kron(block, np.ones((cell_px, cell_px), dtype=np.uint8))
    img[cell_px:-cell_px, cell_px:-cell_px] = pattern
    return img


# ---------------------------------------------------------------------------
# Detection result types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TagDetection:
    tag_id: int
    corners: np.ndarray          # (4, 2) px, tag-frame order TL, TR, BR, BL
    square_center: np.ndarray    # (2,) px, center of the square carrying the tag
    rotation: int                # quarter turns the tag appears rotated in the image


@dataclass(frozen=True)
class CrosshairDetection:
    center: np.ndarray           # (2,) px, sub-pixel
    vertical_angle_deg: float    # direction of the forward (vertical) arm, mod 180
    horizontal_angle_deg: float
    quality: str                 # "detected" | "fallback"


@dataclass(frozen=True)
class SquareDetection:
    corners: np.ndarray          # (4, 2) px sub-pixel, counter-clockwise on screen
    center: np.ndarray
    virtual: bool = False


@dataclass(frozen=True)
class DetectorParams:
    """All tunable detector thresholds (see the pipeline config file)."""

    canny_low: float = 50.0
    canny_high: float = 150.0
    hough_rho_res: float = 1.0
    hough_theta_res_deg: float = 0.25
    hough_suppress_rho: float = 10.0
    hough_suppress_theta_deg: float = 2.0
    square_min_votes: int = 100
    line_thickness: float = 3.0
    open_se: int = 3
    poly_epsilon: float = 10.0
    side_ratio_min: float = 0.95
    side_ratio_max: float = 1.05
    square_area_min: float = 50_000.0
    square_area_max: float = 110_000.0
    corner_expand_px: float = 13.0
    subpix_half_window: int = 16
    # crosshair
    green_min: int = 120
    sat_min: float = 0.35
    hue_lo_deg: float = 70.0
    hue_hi_deg: float = 170.0
    hue_value_min: float = 150.0
    min_line_density: float = 0.5   # votes per px of segment length
    crosshair_min_votes: int = 40
    crosshair_se: int = 5
    crosshair_suppress_rho: float = 2.0
    crosshair_suppress_theta_deg: float = 0.6
    search_radius: int = 150
    deviation_max_px: float = 60.0
    fallback_window: int = 5
    crosshair_mask_thickness: float = 9.0
    # tags
    tag_dark_threshold: int = 50
    tag_poly_epsilon: float = 8.0
    tag_area_min: float = 8_000.0
    tag_area_max: float = 45_000.0
    tag_side_ratio_min: float = 0.9
    tag_side_ratio_max: float = 1.1
    tag_mask_margin: int = 8        # extra pad beyond the sticker overhang
    tag_sticker_ratio: float = 1.25  # sticker side / detected border side

    def hough_theta_res(self) -> float:
        return float(np.deg2rad(self.hough_theta_res_deg))

    def hough_suppress_theta(self) -> float:
        return float(np.deg2rad(self.hough_suppress_theta_deg))

    def tag_margin_px(self, quad: np.ndarray) -> int:
        """Mask margin covering the white sticker overhang around the border quad."""
        side = float(np.mean(side_lengths(quad)))
        return int(np.ceil(side * (self.tag_sticker_ratio - 1.0) / 2.0)) + self.tag_mask_margin


# ---------------------------------------------------------------------------
# Quadrilateral helpers
# ---------------------------------------------------------------------------

def order_quad(corners: np.ndarray, clockwise_on_screen: bool) -> np.ndarray:
    """Order 4 corners by angle around the centroid.

    With ``clockwise_on_screen=True`` the order is ascending math angle, which
    on a y-down image runs TL, TR, BR, BL for an axis-aligned square.
    """
    c = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    m = c.mean(axis=0)
    ang = np.arctan2(c[:, 1] - m[1], c[:, 0] - m[0])
    order = np.argsort(ang)
    if not clockwise_on_screen:
        order = order[::-1]
    start = int(np.argmin(ang[order]))
    return c[np.roll(order, -start)]


def quad_area(corners: np.ndarray) -> float:
    c = np.asarray(corners, dtype=np.float64)
    x, y = c[:, 0], c[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def is_convex(corners: np.ndarray) -> bool:
    c = np.asarray(corners, dtype=np.float64)
    e = np.roll(c, -1, axis=0) - c
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross > 0) or np.all(cross < 0))


def side_lengths(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    e = np.roll(c, -1, axis=0) - c
    return np.hypot(e[:, 0], e[:, 1])


def expand_quad(corners: np.ndarray, offset: float) -> np.ndarray:
    """Move each corner outward so that both adjacent edges shift by ``offset``.

    Solves v . n1 = v . n2 = offset per corner, with n1, n2 the outward unit
    normals of the adjacent edges; for a square this is the corner diagonal
    scaled by offset * sqrt(2).
    """
    c = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    m = c.mean(axis=0)
    out = c.copy()
    for i in range(4):
        p_prev = c[(i - 1) % 4]
        p_next = c[(i + 1) % 4]
        n1 = _outward_normal(p_prev, c[i], m)
        n2 = _outward_normal(c[i], p_next, m)
        a = np.array([n1, n2])
        try:
            v = np.linalg.solve(a, np.array([offset, offset]))
        except np.linalg.LinAlgError:
            d = c[i] - m
            v = offset * np.sqrt(2.0) * d / max(np.hypot(*d), 1e-9)
        out[i] = c[i] + v
    return out


def _outward_normal(a: np.ndarray, b: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    e = b - a
    n = np.array([-e[1], e[0]])
    n /= max(np.hypot(*n), 1e-12)
    if np.dot(n, (a + b) / 2.0 - centroid) < 0:
        n = -n
    return n


# ---------------------------------------------------------------------------
# Tag detection and masking
# ---------------------------------------------------------------------------

def detect_tags(topdown: np.ndarray, params: DetectorParams | None = None) -> list[TagDetection]:
    """Locate and decode floor tags in a top-down RGB frame.

    Dark border quadrilaterals are found via thresholding, contour tracing and
    polygon simplification; each candidate is rectified to the canonical cell
    grid, its cells sampled by majority, and the payload decoded at the single
    orientation whose checksum verifies.  Undecodable candidates are dropped.
    """
    params = params or DetectorParams()
    gray = rgb_to_gray(topdown)
    dark = gray < params.tag_dark_threshold
    tags = []
    for contour in imgproc.find_contours(dark):
        if len(contour) < 8:
            continue
        poly = imgproc.approx_poly(contour, params.tag_poly_epsilon)
        if len(poly) != 4 or not is_convex(poly):
            continue
        area = quad_area(poly)
        if not params.tag_area_min <= area <= params.tag_area_max:
            continue
        sides = side_lengths(poly)
        ratios = sides / sides.mean()
        if ratios.min() < params.tag_side_ratio_min or ratios.max() > params.tag_side_ratio_max:
            continue
        quad = order_quad(poly, clockwise_on_screen=True)
        decoded = _decode_tag_quad(gray, quad)
        if decoded is None:
            continue
        tag_id, rotation, corners = decoded
        tags.append(TagDetection(tag_id=tag_id, corners=corners,
                                 square_center=corners.mean(axis=0), rotation=rotation))
    return tags


def _decode_tag_quad(gray: np.ndarray, quad: np.ndarray) -> tuple[int, int, np.ndarray] | None:
    """Rectify a candidate border quad, sample cells, decode, reorder corners."""
    side = 16.0 * TAG_CELLS  # canonical rectified resolution, 16 px per cell
    dst = np.array([[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]])
    try:
        h = estimate_homography(quad, dst)
        hinv = np.linalg.inv(h)
    except (GeometryError, np.linalg.LinAlgError):
        return None
    cell = side / TAG_CELLS
    # sample a 4x4 probe grid inside the central half of every cell
    probe = (np.arange(4) + 0.5) / 4.0 * 0.5 + 0.25
    cx = (np.add.outer(np.arange(TAG_CELLS), probe) * cell).reshape(-1)
    xs = np.tile(cx, TAG_CELLS * 4)
    ys = np.repeat(cx, TAG_CELLS * 4)
    pts = apply_homography(hinv, np.column_stack([xs, ys]))
    vals = imgproc._sample_grid(gray.astype(np.float32), pts[:, 0][None, :], pts[:, 1][None, :])[0]
    # reshape to (row cell, row probe, col cell, col probe) -> [row, col] means
    means = vals.reshape(TAG_CELLS, 4, TAG_CELLS, 4).mean(axis=(1, 3))
    thresh = (means.min() + means.max()) / 2.0
    dark_cells = means < thresh
    border = np.concatenate([dark_cells[0, :], dark_cells[-1, :],
                             dark_cells[1:-1, 0], dark_cells[1:-1, -1]])
    quiet = np.concatenate([dark_cells[1, 1:-1], dark_cells[-2, 1:-1],
                            dark_cells[2:-2, 1], dark_cells[2:-2, -2]])
    if not border.all() or quiet.any():
        return None
    result = decode_tag_grid(dark_cells[2:6, 2:6])
    if result is None:
        return None
    tag_id, rotation = result
    # corner i of the sampled frame shows tag-frame corner (i + rotation) % 4;
    # reorder so index 0 is the tag-frame top-left
    corners = np.array([quad[(i - rotation) % 4] for i in range(4)])
    return tag_id, rotation, corners


def mask_region(img: np.ndarray, quad: np.ndarray, margin: int) -> np.ndarray:
    """Replace the expanded bounding box of a quad with the surrounding mean color.

    The fill color is the mean over a 10 px ring around the expanded box;
    pixels outside the box are untouched.
    """
    out = np.array(img, copy=True)
    h, w = img.shape[:2]
    quad = np.asarray(quad, dtype=np.float64).reshape(-1, 2)
    x0 = max(0, int(np.floor(quad[:, 0].min())) - margin)
    x1 = min(w - 1, int(np.ceil(quad[:, 0].max())) + margin)
    y0 = max(0, int(np.floor(quad[:, 1].min())) - margin)
    y1 = min(h - 1, int(np.ceil(quad[:, 1].max())) + margin)
    if x0 > x1 or y0 > y1:
        return out
    rx0, rx1 = max(0, x0 - 10), min(w - 1, x1 + 10)
    ry0, ry1 = max(0, y0 - 10), min(h - 1, y1 + 10)
    ring = np.zeros((h, w), dtype=bool)
    ring[ry0:ry1 + 1, rx0:rx1 + 1] = True
    ring[y0:y1 + 1, x0:x1 + 1] = False
    if np.any(ring):
        fill = img[ring].mean(axis=0)
    else:
        fill = img[y0:y1 + 1, x0:x1 + 1].mean(axis=(0, 1))
    out[y0:y1 + 1, x0:x1 + 1] = np.rint(fill).astype(img.dtype)
    return out


# ---------------------------------------------------------------------------
# Crosshair detection
# ---------------------------------------------------------------------------

def crosshair_mask(rgb: np.ndarray, params: DetectorParams | None = None) -> np.ndarray:
    """Laser-pixel mask: AND of green-level, saturation, hue-window and
    hue-plus-scaled-value tests."""
    params = params or DetectorParams()
    h, s, v = rgb_to_hsv(rgb)
    m = rgb[..., 1] >= params.green_min
    m &= s >= params.sat_min
    m &= (h >= params.hue_lo_deg) & (h <= params.hue_hi_deg)
    m &= (h + v * 360.0) >= params.hue_value_min
    return m


def _average_cluster_line(lines: list[imgproc.HoughLine], axis_deg: float):
    """Average segment endpoints over a cluster; returns (A, B) or None."""
    if not lines:
        return None
    d = np.array([np.cos(np.deg2rad(axis_deg)), np.sin(np.deg2rad(axis_deg))])
    starts, ends = [], []
    for ln in lines:
        p0 = np.array([ln.x0, ln.y0])
        p1 = np.array([ln.x1, ln.y1])
        if np.dot(p1 - p0, d) < 0:
            p0, p1 = p1, p0
        starts.append(p0)
        ends.append(p1)
    a = np.mean(starts, axis=0)
    b = np.mean(ends, axis=0)
    if np.hypot(*(b - a)) < 1e-9:
        return None
    return a, b


def _intersect(a1: np.ndarray, b1: np.ndarray, a2: np.ndarray, b2: np.ndarray) -> np.ndarray | None:
    d1 = b1 - a1
    d2 = b2 - a2
    den = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(den) < 1e-9:
        return None
    t = ((a2[0] - a1[0]) * d2[1] - (a2[1] - a1[1]) * d2[0]) / den
    return a1 + t * d1


def _ang_dist_mod180(a: float, b: float) -> float:
    d = abs(a - b) % 180.0
    return min(d, 180.0 - d)


def detect_crosshair(rgb: np.ndarray,
                     prior: CrosshairDetection | None = None,
                     params: DetectorParams | None = None,
                     history: list[np.ndarray] | None = None,
                     expected_vertical_deg: float | None = None) -> CrosshairDetection:
    """Find the laser crosshair center and arm directions.

    Pipeline: color mask, Canny inside the search region around the prior (or
    the full frame without one), dilation and closing, Hough lines, clustering
    into the two arm directions, endpoint averaging per cluster and
    intersection of the two averaged lines.  When either arm is missing or the
    center deviates too far from the prior, the result is flagged ``fallback``
    and the center is the mean of the recent detected centers.
    """
    params = params or DetectorParams()
    h, w = rgb.shape[:2]
    if expected_vertical_deg is None:
        expected_vertical_deg = prior.vertical_angle_deg if prior else 90.0

    if prior is not None:
        r = params.search_radius
        x0 = int(np.clip(prior.center[0] - r, 0, w - 1))
        x1 = int(np.clip(prior.center[0] + r, 1, w))
        y0 = int(np.clip(prior.center[1] - r, 0, h - 1))
        y1 = int(np.clip(prior.center[1] + r, 1, h))
        crop = rgb[y0:y1, x0:x1]
        origin = np.array([x0, y0], dtype=np.float64)
    else:
        crop = rgb
        origin = np.zeros(2)

    mask = crosshair_mask(crop, params)
    result = None
    if mask.any():
        edges = imgproc.canny(mask.astype(np.uint8) * 255, params.canny_low, params.canny_high)
        se = imgproc.rect_se(params.crosshair_se, params.crosshair_se)
        band = imgproc.close_mask(imgproc.dilate(edges, se), se)
        # light peak suppression: keep several parallel lines per arm so the
        # endpoint averaging recovers the stripe center with sub-pixel accuracy
        lines = imgproc.hough_lines(
            band, params.hough_rho_res, params.hough_theta_res(),
            params.crosshair_min_votes, params.crosshair_suppress_rho,
            np.deg2rad(params.crosshair_suppress_theta_deg))
        vert = [ln for ln in lines if _ang_dist_mod180(ln.angle_deg, expected_vertical_deg) <= 45.0]
        horiz = [ln for ln in lines if ln not in vert]
        av = _average_cluster_line(vert, expected_vertical_deg)
        ah = _average_cluster_line(horiz, expected_vertical_deg + 90.0)
        if av is not None and ah is not None:
            center = _intersect(av[0], av[1], ah[0], ah[1])
            if center is not None:
                center = center + origin
                va = float(np.rad2deg(np.arctan2(av[1][1] - av[0][1], av[1][0] - av[0][0]))) % 180.0
                ha = float(np.rad2deg(np.arctan2(ah[1][1] - ah[0][1], ah[1][0] - ah[0][0]))) % 180.0
                result = CrosshairDetection(center, va, ha, "detected")

    if result is not None:
        perp = abs(_ang_dist_mod180(result.vertical_angle_deg, result.horizontal_angle_deg) - 90.0)
        in_frame = (0 <= result.center[0] < w) and (0 <= result.center[1] < h)
        deviates = (prior is not None
                    and np.hypot(*(result.center - prior.center)) > params.deviation_max_px)
        if perp <= 5.0 and in_frame and not deviates:
            return result

    # fallback: average of the recent detected centers (or the prior)
    if history:
        center = np.mean(np.asarray(history[-params.fallback_window:], dtype=np.float64), axis=0)
    elif prior is not None:
        center = np.asarray(prior.center, dtype=np.float64)
    else:
        center = np.array([w / 2.0, h / 2.0])
    va = prior.vertical_angle_deg if prior else float(expected_vertical_deg % 180.0)
    ha = prior.horizontal_angle_deg if prior else float((expected_vertical_deg + 90.0) % 180.0)
    return CrosshairDetection(center, va, ha, "fallback")


# ---------------------------------------------------------------------------
# Chessboard square detection
# ---------------------------------------------------------------------------

def find_grid_cells(gray: np.ndarray, params: DetectorParams,
                    edge_veto: list[tuple[np.ndarray, float]] | None = None,
                    veto_quads: list[np.ndarray] | None = None,
                    area_band: tuple[float, float] | None = None,
                    min_votes: int | None = None,
                    refine: bool = True) -> list[SquareDetection]:
    """Shared square-extraction machinery.

    Canny edges (with optional line/box vetoes applied to the edge map), Hough
    lines re-rasterized as thick segments, morphological opening, inversion,
    contour tracing, polygon simplification and the four-sided/side-ratio/area
    filter, then outward corner expansion and sub-pixel refinement against the
    unmasked grayscale frame.
    """
    lo, hi = area_band if area_band else (params.square_area_min, params.square_area_max)
    votes = min_votes if min_votes is not None else params.square_min_votes
    edges = imgproc.canny(gray, params.canny_low, params.canny_high)
    if edge_veto:
        for (point, angle_deg) in edge_veto:
            imgproc.draw_line(edges, (float(point[0]), float(point[1])),
                              np.deg2rad(angle_deg), params.crosshair_mask_thickness,
                              value=False)
    if veto_quads:
        for quad in veto_quads:
            q = np.asarray(quad)
            m = params.tag_margin_px(q)
            x0 = int(np.floor(q[:, 0].min())) - m
            x1 = int(np.ceil(q[:, 0].max())) + m
            y0 = int(np.floor(q[:, 1].min())) - m
            y1 = int(np.ceil(q[:, 1].max())) + m
            edges[max(0, y0):y1 + 1, max(0, x0):x1 + 1] = False

    lines = imgproc.hough_lines(
        edges, params.hough_rho_res, params.hough_theta_res(), votes,
        params.hough_suppress_rho, params.hough_suppress_theta())
    # drop sparse alignments (e.g. corner saddles on a diagonal): genuine grid
    # lines have near-contiguous support
    lines = [ln for ln in lines
             if ln.votes >= params.min_line_density * max(np.hypot(ln.x1 - ln.x0, ln.y1 - ln.y0), 1.0)]
    if not lines:
        return []
    line_img = np.zeros_like(edges)
    for ln in lines:
        imgproc.draw_segment(line_img, ln.x0, ln.y0, ln.x1, ln.y1, params.line_thickness)
    se = imgproc.rect_se(params.open_se, params.open_se)
    opened = imgproc.open_mask(line_img, se)
    cells = ~opened

    detections = []
    all_corners = []
    for contour in imgproc.find_contours(cells):
        if len(contour) < 8:
            continue
        poly = imgproc.approx_poly(contour, params.poly_epsilon)
        if len(poly) != 4 or not is_convex(poly):
            continue
        area = quad_area(poly)
        if not lo <= area <= hi:
            continue
        sides = side_lengths(poly)
        ratios = sides / sides.mean()
        if ratios.min() < params.side_ratio_min or ratios.max() > params.side_ratio_max:
            continue
        quad = order_quad(poly, clockwise_on_screen=False)
        all_corners.append(expand_quad(quad, params.corner_expand_px))
    if not all_corners:
        return []

    corners = np.concatenate(all_corners, axis=0)
    if refine:
        refined, ok = imgproc.corner_subpix(gray, corners, params.subpix_half_window)
        corners = np.where(ok[:, None], refined, corners)
    for i in range(len(all_corners)):
        quad = corners[4 * i:4 * i + 4]
        detections.append(SquareDetection(corners=quad, center=quad.mean(axis=0),
                                          virtual=False))
    return detections


def detect_squares(topdown_gray: np.ndarray, crosshair: CrosshairDetection | None,
                   tags: list[TagDetection],
                   params: DetectorParams | None = None) -> list[SquareDetection]:
    """Detect chessboard squares in the top-down grayscale frame.

    The extended crosshair arms and the tag boxes are erased from the edge map
    before line extraction so that laser and tag edges cannot corrupt the
    grid; detected cell corners are pushed outward by the configured offset
    and refined to sub-pixel accuracy on the original frame.
    """
    params = params or DetectorParams()
    veto_lines = []
    if crosshair is not None:
        veto_lines.append((crosshair.center, crosshair.vertical_angle_deg))
        veto_lines.append((crosshair.center, crosshair.horizontal_angle_deg))
    veto_quads = [t.corners for t in tags]
    return find_grid_cells(topdown_gray, params, edge_veto=veto_lines,
                           veto_quads=veto_quads)


# ---------------------------------------------------------------------------
# Lattice fitting and virtual squares
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SquareLattice:
    """Least-squares grid model: center(i, j) = origin + i * u + j * v."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    indices: dict = field(default_factory=dict)  # lattice (i, j) -> detected square

    def center(self, i: float, j: float) -> np.ndarray:
        return self.origin + i * self.u + j * self.v

    def cell_corners(self, i: int, j: int) -> np.ndarray:
        """Corners of cell (i, j), counter-clockwise on screen."""
        raw = [self.center(i + di, j + dj)
               for di, dj in ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5))]
        return order_quad(np.array(raw), clockwise_on_screen=False)

    def locate(self, point: np.ndarray) -> tuple[float, float]:
        """Continuous lattice coordinates of an image point."""
        m = np.column_stack([self.u, self.v])
        s = np.linalg.solve(m, np.asarray(point, dtype=np.float64) - self.origin)
        return float(s[0]), float(s[1])


def fit_square_lattice(detected: list[SquareDetection]) -> SquareLattice:
    """Fit the two lattice basis vectors and origin to all detected corners."""
    if not detected:
        raise ValueError("cannot fit a lattice to zero squares")
    ref_edges = None
    group_a, group_b = [], []
    for sq in detected:
        c = sq.corners
        for k in range(4):
            e = c[(k + 1) % 4] - c[k]
            if ref_edges is None:
                ref_edges = e
            if _ang_dist_mod180(np.rad2deg(np.arctan2(e[1], e[0])),
                                np.rad2deg(np.arctan2(ref_edges[1], ref_edges[0]))) <= 45.0:
                group_a.append(e if np.dot(e, ref_edges) >= 0 else -e)
            else:
                group_b.append(e)
    u = np.mean(group_a, axis=0)
    ref_b = group_b[0]
    v = np.mean([e if np.dot(e, ref_b) >= 0 else -e for e in group_b], axis=0)

    # integer cell assignment from the rough basis
    origin = detected[0].center
    m = np.column_stack([u, v])
    try:
        minv = np.linalg.inv(m)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"degenerate lattice basis: {e}") from e
    assign = {}
    for sq in detected:
        ij = minv @ (sq.center - origin)
        key = (int(np.rint(ij[0])), int(np.rint(ij[1])))
        assign.setdefault(key, sq)

    # weighted least squares over all corners: corner = O + (i+di) u + (j+dj) v
    rows, rhs = [], []
    for (i, j), sq in assign.items():
        for corner in sq.corners:
            ij = minv @ (corner - origin)
            di = 0.5 if ij[0] - i > 0 else -0.5
            dj = 0.5 if ij[1] - j > 0 else -0.5
            rows.append([1.0, 0.0, i + di, 0.0, j + dj, 0.0])
            rows.append([0.0, 1.0, 0.0, i + di, 0.0, j + dj])
            rhs.extend(corner)
    sol, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    lattice = SquareLattice(origin=sol[0:2], u=sol[2:4], v=sol[4:6], indices=dict(assign))
    return lattice


def extend_virtual_squares(detected: list[SquareDetection],
                           bounds: tuple[int, int],
                           lattice: SquareLattice | None = None) -> list[SquareDetection]:
    """Add virtual squares for every lattice cell intersecting the frame.

    ``bounds`` is (width, height) of the top-down frame.  Detected squares are
    returned unchanged; cells of the fitted lattice without a detected
    counterpart are synthesized with ``virtual=True``.
    """
    if not detected:
        raise ValueError("need at least one detected square")
    if lattice is None:
        lattice = fit_square_lattice(detected)
    w, h = bounds
    out = list(detected)
    corners_lattice = [lattice.locate(np.array(p, dtype=np.float64))
                       for p in ((0, 0), (w, 0), (w, h), (0, h))]
    ii = [c[0] for c in corners_lattice]
    jj = [c[1] for c in corners_lattice]
    for i in range(int(np.floor(min(ii))) - 1, int(np.ceil(max(ii))) + 2):
        for j in range(int(np.floor(min(jj))) - 1, int(np.ceil(max(jj))) + 2):
            if (i, j) in lattice.indices:
                continue
            quad = lattice.cell_corners(i, j)
            if quad[:, 0].max() < 0 or quad[:, 0].min() >= w:
                continue
            if quad[:, 1].max() < 0 or quad[:, 1].min() >= h:
                continue
            out.append(SquareDetection(corners=quad, center=quad.mean(axis=0), virtual=True))
    return out
