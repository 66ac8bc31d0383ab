"""Frame-processing chain: undistort, warp to the top-down view, detect tags,
crosshair and squares, and feed the tracker.

The homography is estimated once at startup from the most central detected
square of the undistorted first frame (per-frame re-estimation available for
robustness experiments) and reused together with precomputed resampling maps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .camera import (GeometryError, apply_homography, estimate_homography,
                     undistort_image, undistort_map, warp_map, warp_perspective)
from .config import PipelineConfig
from .detect import (SQUARE_PX, CrosshairDetection, DetectorParams,
                     detect_crosshair, detect_squares, detect_tags,
                     extend_virtual_squares, find_grid_cells, mask_region,
                     order_quad)
from .imgcore import rgb_to_gray, save_png
from .locate import FrameDetections, FrameEstimate, Tracker

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    """Unrecoverable pipeline state (no bootstrap geometry)."""


@dataclass
class FrameDiagnostics:
    frame_index: int
    n_tags: int
    n_squares: int
    n_virtual: int
    crosshair_quality: str
    source: str


class Pipeline:
    """Stateful localization pipeline over an ordered frame sequence."""

    def __init__(self, config: PipelineConfig):
        self.cfg = config
        self._undistort_maps = undistort_map(config.intrinsics, config.distortion)
        self._h: np.ndarray | None = None
        self._warp_maps = None
        self.tracker = Tracker(config.floor_map, replace(config.tracker))
        self._prior: CrosshairDetection | None = None
        self._centers: list[np.ndarray] = []
        self._forward_hint_td: float | None = None
        self.debug_dir = None

    # ------------------------------------------------------------------
    @property
    def homography(self) -> np.ndarray | None:
        return self._h

    def _bootstrap_params(self) -> tuple[DetectorParams, tuple[float, float]]:
        cfg = self.cfg
        nominal = cfg.intrinsics.fx * cfg.floor_map.square_size / cfg.camera_height
        band = (0.45 * nominal * nominal, 2.2 * nominal * nominal)
        params = replace(cfg.detector, corner_expand_px=2.0,
                         subpix_half_window=max(6, int(round(nominal / 24.0))),
                         square_area_min=band[0], square_area_max=band[1])
        return params, band

    def _estimate_homography(self, undistorted: np.ndarray) -> np.ndarray | None:
        """Map the most central detected square to the axis-aligned top-down cell."""
        gray = rgb_to_gray(undistorted)
        params, band = self._bootstrap_params()
        squares = find_grid_cells(gray, params, area_band=band)
        if not squares:
            return None
        c = np.array([self.cfg.intrinsics.cx, self.cfg.intrinsics.cy])
        central = min(squares, key=lambda s: float(np.hypot(*(s.center - c))))
        quad = order_quad(central.corners, clockwise_on_screen=True)
        m = self.cfg.topdown_size / 2.0
        hp = SQUARE_PX / 2.0
        dst = np.array([[m - hp, m - hp], [m + hp, m - hp],
                        [m + hp, m + hp], [m - hp, m + hp]])
        try:
            return estimate_homography(quad, dst)
        except GeometryError:
            return None

    def _adopt_homography(self, h: np.ndarray) -> None:
        old = self._h
        self._h = h
        self._warp_maps = warp_map(h, self.cfg.topdown_size, self.cfg.topdown_size)
        # the forward-arm hint is configured in the undistorted frame; carry it
        # into the top-down frame through the local linearization of H
        c = np.array([self.cfg.intrinsics.cx, self.cfg.intrinsics.cy])
        a = np.deg2rad(self.cfg.tracker.forward_hint_image_deg)
        d = np.array([np.cos(a), np.sin(a)])
        p0 = apply_homography(h, c)
        p1 = apply_homography(h, c + 8.0 * d)
        v = p1 - p0
        self._forward_hint_td = float(np.rad2deg(np.arctan2(v[1], v[0])))
        self.tracker.params.forward_hint_image_deg = self._forward_hint_td
        if old is not None and self._prior is not None:
            # keep the crosshair prior meaningful across re-estimation
            p = apply_homography(h, apply_homography(np.linalg.inv(old), self._prior.center))
            self._prior = replace(self._prior, center=p)

    # ------------------------------------------------------------------
    def process(self, frame: np.ndarray, frame_index: int,
                timestamp: float) -> tuple[FrameEstimate, FrameDiagnostics]:
        cfg = self.cfg
        undistorted = undistort_image(frame, cfg.intrinsics, cfg.distortion,
                                      maps=self._undistort_maps)
        if self._h is None or cfg.per_frame_homography:
            h = self._estimate_homography(undistorted)
            if h is not None:
                self._adopt_homography(h)
        if self._h is None:
            log.warning("frame %d: no homography yet (no central square found)",
                        frame_index)
            est = self.tracker.step(FrameDetections(crosshair=_dummy_crosshair()),
                                    frame_index, timestamp)
            return est, FrameDiagnostics(frame_index, 0, 0, 0, "fallback", est.source)

        topdown = warp_perspective(undistorted, self._h, cfg.topdown_size,
                                   cfg.topdown_size, maps=self._warp_maps)

        tags = detect_tags(topdown, cfg.detector)
        masked = topdown
        for tag in tags:
            masked = mask_region(masked, tag.corners, cfg.detector.tag_margin_px(tag.corners))

        cross = detect_crosshair(masked, prior=self._prior, params=cfg.detector,
                                 history=self._centers,
                                 expected_vertical_deg=self._forward_hint_td)
        if cross.quality == "detected":
            self._prior = cross
            self._centers.append(np.asarray(cross.center))
            if len(self._centers) > 4 * cfg.detector.fallback_window:
                del self._centers[:-2 * cfg.detector.fallback_window]

        gray = rgb_to_gray(masked)
        squares = detect_squares(gray, cross, tags, cfg.detector)
        n_detected = len(squares)
        if squares:
            bounds = (cfg.topdown_size, cfg.topdown_size)
            try:
                squares = extend_virtual_squares(squares, bounds)
            except (ValueError, np.linalg.LinAlgError):
                pass

        det = FrameDetections(crosshair=cross, squares=squares, tags=tags)
        est = self.tracker.step(det, frame_index, timestamp)

        if self.debug_dir is not None:
            self._dump_debug(frame_index, topdown, masked, cross)
        diag = FrameDiagnostics(frame_index, len(tags), n_detected,
                                len(squares) - n_detected, cross.quality, est.source)
        return est, diag

    def _dump_debug(self, frame_index: int, topdown, masked, cross) -> None:
        from .detect import crosshair_mask
        base = self.debug_dir / f"frame_{frame_index:06d}"
        save_png(f"{base}_topdown.png", topdown)
        save_png(f"{base}_masked.png", masked)
        save_png(f"{base}_laser_mask.png", crosshair_mask(masked, self.cfg.detector))


def _dummy_crosshair() -> CrosshairDetection:
    return CrosshairDetection(center=np.zeros(2), vertical_angle_deg=0.0,
                              horizontal_angle_deg=90.0, quality="fallback")
