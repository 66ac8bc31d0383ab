"""Pose estimation: local square coordinates, global resolution via floor tags,
heading disambiguation and the frame-to-frame tracker.

Conventions
-----------
World frame: right-handed, x east, y north, heading counter-clockwise in
degrees.  Grid cell (c, r) covers [origin + (c, r) * s, origin + (c+1, r+1) * s].

Top-down image frame: x right, y down.  Seen from above the image is the floor
with the y axis flipped, so a counter-clockwise rotation on the floor appears
clockwise in the image.  That single handedness flip lives here and nowhere
else: if e_x is the image direction of the grid +x axis then the image
direction of grid +y is e_x rotated by -90 degrees in image coordinates, and
the heading is (image angle of e_x) - (image angle of the forward arm).

The tracker maintains the crosshair's grid cell index and in-cell position
under one grid labeling.  Before any tag has been decoded the labeling is
anchored to the first frame and reported poses are relative to the initial
pose ([0, 0, 0] by convention); the first decoded tag re-labels the grid to
world cells and rigidly corrects the buffered history in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detect import (SQUARE_PX, CrosshairDetection, SquareDetection,
                     SquareLattice, TagDetection, fit_square_lattice)
from .imgcore import Pose2D, angle_diff_deg, wrap_angle_deg


class LocalizationError(RuntimeError):
    """Inconsistent geometry fed to the pose solver (square-assignment bug)."""


class GridMismatchError(LocalizationError):
    """Center-to-center offset is not close to an integer number of squares."""


@dataclass(frozen=True)
class FloorMap:
    """Tag placement table and world coordinates of the grid."""

    square_size: float = 1.0 / 6.0  # meters
    tag_cells: dict = field(default_factory=dict)  # tag id -> (col, row)
    origin: tuple[float, float] = (0.0, 0.0)       # world xy of cell (0,0) SW corner

    def __post_init__(self):
        if self.square_size <= 0:
            raise ValueError("square size must be positive")
        cells = list(self.tag_cells.values())
        if len(set(map(tuple, cells))) != len(cells):
            raise ValueError("tag placements must be unique per cell")

    def cell_center_world(self, col: int, row: int) -> np.ndarray:
        return np.array([self.origin[0] + (col + 0.5) * self.square_size,
                         self.origin[1] + (row + 0.5) * self.square_size])


@dataclass(frozen=True)
class FrameEstimate:
    pose: Pose2D
    source: str          # "measured" | "virtual-square" | "motion-model"
    frame_index: int
    timestamp: float
    quality: str = "detected"   # crosshair quality: "detected" | "fallback"


@dataclass
class FrameDetections:
    crosshair: CrosshairDetection
    squares: list[SquareDetection] = field(default_factory=list)  # incl. virtual
    tags: list[TagDetection] = field(default_factory=list)
    lattice: SquareLattice | None = None


def max_velocity(square_size: float, fps: float) -> float:
    """Fastest alias-free speed for square tracking: fps * square_size / 2."""
    if square_size <= 0 or fps <= 0:
        raise ValueError("square size and frame rate must be positive")
    return fps * square_size / 2.0


def heading_from_lines(vertical_angle_deg: float, grid_x_angle_deg: float) -> float:
    """Signed difference between the forward-arm and grid-x directions, both in
    a common counter-clockwise frame, wrapped to [-180, 180)."""
    return wrap_angle_deg(vertical_angle_deg - grid_x_angle_deg)


def disambiguate_heading(measured_mod90_deg: float, predicted_deg: float) -> float:
    """Resolve the 90-degree grid ambiguity by nearest-neighbor assignment.

    Returns measured + k * 90 (k integer) minimizing circular distance to the
    prediction; exact ties pick the smaller k.  Result wrapped to [-180, 180).
    """
    best_k = 0
    best_d = np.inf
    for k in range(-6, 7):
        cand = measured_mod90_deg + 90.0 * k
        d = abs(angle_diff_deg(cand, predicted_deg))
        if d < best_d - 1e-12:
            best_d = d
            best_k = k
    return wrap_angle_deg(measured_mod90_deg + 90.0 * best_k)


def local_position(crosshair_center: np.ndarray, square_corners: np.ndarray,
                   tol: float = 0.05, max_iter: int = 25) -> tuple[float, float]:
    """Bilinear inverse mapping of a point against 4 ordered square corners.

    Corners are ordered P1 (origin), P2 (+u), P3 (+u+v), P4 (+v).  Raises
    LocalizationError when the point falls outside [0,1]^2 beyond ``tol``.
    """
    p = np.asarray(crosshair_center, dtype=np.float64)
    c = np.asarray(square_corners, dtype=np.float64).reshape(4, 2)
    p1, p2, p3, p4 = c
    uv = np.array([0.5, 0.5])
    for _ in range(max_iter):
        u, v = uv
        b = (1 - u) * (1 - v) * p1 + u * (1 - v) * p2 + u * v * p3 + (1 - u) * v * p4
        r = b - p
        if np.hypot(*r) < 1e-13:
            break
        du = -(1 - v) * p1 + (1 - v) * p2 + v * p3 - v * p4
        dv = -(1 - u) * p1 - u * p2 + u * p3 + (1 - u) * p4
        try:
            uv = uv - np.linalg.solve(np.column_stack([du, dv]), r)
        except np.linalg.LinAlgError as e:
            raise LocalizationError(f"degenerate square corners: {e}") from e
    u, v = float(uv[0]), float(uv[1])
    if not (-tol <= u <= 1 + tol and -tol <= v <= 1 + tol):
        raise LocalizationError(
            f"crosshair local position ({u:.3f}, {v:.3f}) outside its square")
    return u, v


def resolve_global(local_uv: tuple[float, float], square_index_delta: tuple[int, int],
                   tag: TagDetection, floor_map: FloorMap) -> np.ndarray:
    """World position of the crosshair given its square's offset from a tag square."""
    if tag.tag_id not in floor_map.tag_cells:
        raise LocalizationError(f"tag id {tag.tag_id} not present in the floor map")
    tc, tr = floor_map.tag_cells[tag.tag_id]
    col = tc + square_index_delta[0]
    row = tr + square_index_delta[1]
    s = floor_map.square_size
    return np.array([floor_map.origin[0] + (col + local_uv[0]) * s,
                     floor_map.origin[1] + (row + local_uv[1]) * s])


def cell_offset_from_centers(from_center_px: np.ndarray, to_center_px: np.ndarray,
                             e_x: np.ndarray, e_y: np.ndarray,
                             pitch_px: float = float(SQUARE_PX),
                             tol: float = 0.2) -> tuple[int, int]:
    """Integer square offset between two square centers in the top-down image.

    Projects the pixel offset onto the grid axis unit directions and divides
    by the nominal square pitch; raises GridMismatchError when either
    component is farther than ``tol`` squares from an integer.
    """
    d = np.asarray(to_center_px, dtype=np.float64) - np.asarray(from_center_px, dtype=np.float64)
    fx = float(np.dot(d, e_x)) / pitch_px
    fy = float(np.dot(d, e_y)) / pitch_px
    dc, dr = int(np.rint(fx)), int(np.rint(fy))
    if abs(fx - dc) > tol or abs(fy - dr) > tol:
        raise GridMismatchError(
            f"center offset ({fx:.3f}, {fy:.3f}) squares is not integral")
    return dc, dr


def _angle_of(v: np.ndarray) -> float:
    return float(np.rad2deg(np.arctan2(v[1], v[0])))


def _unit(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    return np.array([np.cos(r), np.sin(r)])


def _rot_image_minus90(v: np.ndarray) -> np.ndarray:
    """Image direction of grid +y given the image direction of grid +x."""
    return np.array([v[1], -v[0]])


def order_square_for_grid(corners: np.ndarray, e_x: np.ndarray,
                          e_y: np.ndarray) -> np.ndarray:
    """Order 4 corners as P1..P4 with P1 at the (-x, -y) grid corner,
    P2 along +x, P4 along +y."""
    c = np.asarray(corners, dtype=np.float64).reshape(4, 2)
    m = c.mean(axis=0)
    rel = c - m
    su = rel @ e_x
    sv = rel @ e_y
    ordered = np.zeros((4, 2))
    slot = {(False, False): 0, (True, False): 1, (True, True): 2, (False, True): 3}
    seen = set()
    for k in range(4):
        idx = slot[(bool(su[k] > 0), bool(sv[k] > 0))]
        if idx in seen:
            raise LocalizationError("square corners do not span the grid quadrants")
        seen.add(idx)
        ordered[idx] = c[k]
    return ordered


def grid_x_angle_from_square(ordered: np.ndarray) -> float:
    """Mean image angle of the square's two grid-x edges (P1->P2 and P4->P3)."""
    d1 = ordered[1] - ordered[0]
    d2 = ordered[2] - ordered[3]
    d = d1 / max(np.hypot(*d1), 1e-12) + d2 / max(np.hypot(*d2), 1e-12)
    return _angle_of(d)


@dataclass
class TrackerParams:
    jump_threshold_px: float = 150.0
    forward_hint_image_deg: float = 0.0   # image angle of the forward arm at startup
    cell_offset_tol: float = 0.2


@dataclass
class _Measurement:
    e_x: np.ndarray
    e_y: np.ndarray
    u: float
    v: float
    square_center_px: np.ndarray
    heading: float          # floor-orientation heading under this labeling
    virtual: bool


class Tracker:
    """Sequential pose tracker over per-frame detections.

    Frames must be fed in timestamp order.  ``trajectory`` holds every emitted
    estimate; the first decoded tag rigidly corrects the buffered history in
    place and switches the tracker to world coordinates.
    """

    def __init__(self, floor_map: FloorMap, params: TrackerParams | None = None):
        self.floor_map = floor_map
        self.params = params or TrackerParams()
        self.status = "uninitialized"            # -> "relative" -> "global"
        self.trajectory: list[FrameEstimate] = []
        self.last_timestamp: float | None = None
        self.axis_angle_img: float | None = None     # image angle of grid +x
        self.forward_angle_img: float | None = None  # signed image angle, forward arm
        self.cell: tuple[int, int] | None = None     # crosshair cell, current labeling
        self.local_uv: tuple[float, float] | None = None
        self.heading: float | None = None            # heading in current labeling
        self._rel_anchor: tuple[np.ndarray, float] | None = None  # (grid pos, heading)

    # ------------------------------------------------------------------
    def step(self, det: FrameDetections, frame_index: int,
             timestamp: float) -> FrameEstimate:
        if self.last_timestamp is not None and timestamp <= self.last_timestamp:
            raise ValueError(
                f"non-monotonic timestamp {timestamp} after {self.last_timestamp}")
        self.last_timestamp = timestamp

        tags = [t for t in det.tags if t.tag_id in self.floor_map.tag_cells]
        if det.lattice is None:
            real = [s for s in det.squares if not s.virtual]
            if real:
                try:
                    det.lattice = fit_square_lattice(real)
                except (ValueError, np.linalg.LinAlgError):
                    det.lattice = None

        if det.lattice is None:
            est = self._motion_model(frame_index, timestamp, det.crosshair.quality)
        else:
            est = self._measure(det, tags, frame_index, timestamp)
        self.trajectory.append(est)
        return est

    # ------------------------------------------------------------------
    def _measure(self, det: FrameDetections, tags: list[TagDetection],
                 frame_index: int, timestamp: float) -> FrameEstimate:
        lattice = det.lattice
        cross = det.crosshair

        # forward-arm direction with sign continuity
        hint = (self.forward_angle_img if self.forward_angle_img is not None
                else self.params.forward_hint_image_deg)
        fwd = cross.vertical_angle_deg
        if abs(angle_diff_deg(fwd, hint)) > 90.0:
            fwd += 180.0
        fwd = wrap_angle_deg(fwd)

        if self.status == "uninitialized" and tags:
            # adopt world axes immediately so initialization is already global
            self.axis_angle_img = _angle_of(self._tag_axis(tags))

        axis_ref = (_unit(self.axis_angle_img) if self.axis_angle_img is not None
                    else _unit(hint))
        try:
            meas = self._measure_under_axes(lattice, cross, axis_ref, fwd)
        except LocalizationError:
            return self._motion_model(frame_index, timestamp, cross.quality)

        if self.status == "uninitialized":
            self._initialize(meas, tags)
        else:
            self._unwrap_cell(meas)
        self.forward_angle_img = fwd
        self.axis_angle_img = _angle_of(meas.e_x)

        # heading: tags pin the labeling exactly; otherwise nearest-neighbor
        # assignment of the 90-degree-ambiguous measurement to the prediction
        if tags and self.status == "global":
            heading = meas.heading
        else:
            predicted = self._predicted_heading()
            heading = (meas.heading if predicted is None
                       else disambiguate_heading(meas.heading % 90.0, predicted))
        self.heading = heading
        self.local_uv = (meas.u, meas.v)

        # absolute re-anchor from any visible tag (kills accumulated drift)
        if tags:
            try:
                self._anchor_cell(tags, lattice, meas, fwd, frame_index, timestamp)
            except GridMismatchError:
                pass

        gx = self.cell[0] + self.local_uv[0]
        gy = self.cell[1] + self.local_uv[1]
        pose = self._emit_pose(gx, gy, self.heading)
        source = "virtual-square" if meas.virtual else "measured"
        return FrameEstimate(pose, source, frame_index, timestamp, cross.quality)

    # ------------------------------------------------------------------
    def _measure_under_axes(self, lattice: SquareLattice, cross: CrosshairDetection,
                            axis_ref: np.ndarray, fwd_img_deg: float) -> _Measurement:
        e_x = self._snap_axis_to_lattice(axis_ref, lattice)
        e_y = _rot_image_minus90(e_x)
        # lattice coordinates are cell-center based: cell (i, j) covers [i-.5, i+.5]
        fi, fj = lattice.locate(cross.center)
        ci, cj = int(np.rint(fi)), int(np.rint(fj))
        square = lattice.indices.get((ci, cj))
        virtual = square is None or square.virtual
        corners = square.corners if square is not None else lattice.cell_corners(ci, cj)
        ordered = order_square_for_grid(corners, e_x, e_y)
        u, v = local_position(cross.center, ordered)
        grid_x_img = grid_x_angle_from_square(ordered)
        # floor orientation flips the sign of image angles
        heading = heading_from_lines(-fwd_img_deg, -grid_x_img)
        return _Measurement(e_x=e_x, e_y=e_y, u=u, v=v,
                            square_center_px=ordered.mean(axis=0),
                            heading=heading, virtual=virtual)

    def _snap_axis_to_lattice(self, ref: np.ndarray, lattice: SquareLattice) -> np.ndarray:
        cands = [lattice.u, -lattice.u, lattice.v, -lattice.v]
        best = max(cands, key=lambda c: float(np.dot(c, ref)) / max(np.hypot(*c), 1e-12))
        n = np.hypot(*best)
        if n < 1e-9:
            raise LocalizationError("degenerate lattice axis")
        return best / n

    def _tag_axis(self, tags: list[TagDetection]) -> np.ndarray:
        dirs = []
        for t in tags:
            d = t.corners[1] - t.corners[0]  # tag TL -> TR edge = world +x
            n = np.hypot(*d)
            if n > 1e-9:
                dirs.append(d / n)
        m = np.mean(dirs, axis=0)
        return m / max(np.hypot(*m), 1e-12)

    # ------------------------------------------------------------------
    def _initialize(self, meas: _Measurement, tags: list[TagDetection]) -> None:
        self.cell = (0, 0)
        self.local_uv = (meas.u, meas.v)
        self.heading = meas.heading
        if tags:
            self.status = "global"   # cell is re-anchored from the tag right after
        else:
            self.status = "relative"
            g0 = np.array([meas.u, meas.v], dtype=np.float64)
            self._rel_anchor = (g0, meas.heading)

    def _unwrap_cell(self, meas: _Measurement) -> None:
        thr = self.params.jump_threshold_px / float(SQUARE_PX)
        cu, cv = self.cell
        lu, lv = self.local_uv
        du = meas.u - lu
        dv = meas.v - lv
        if du < -thr:
            cu += 1
        elif du > thr:
            cu -= 1
        if dv < -thr:
            cv += 1
        elif dv > thr:
            cv -= 1
        self.cell = (cu, cv)

    def _predicted_heading(self) -> float | None:
        if self.heading is None:
            return None
        if len(self.trajectory) >= 2:
            a, b = self.trajectory[-2], self.trajectory[-1]
            rate = angle_diff_deg(b.pose.theta_deg, a.pose.theta_deg)
            return self.heading + rate
        return self.heading

    # ------------------------------------------------------------------
    def _anchor_cell(self, tags: list[TagDetection], lattice: SquareLattice,
                     meas: _Measurement, fwd_img_deg: float,
                     frame_index: int, timestamp: float) -> None:
        """Set the crosshair cell absolutely from the nearest decoded tag;
        upgrade relative tracking to global with a retroactive correction."""
        tag = min(tags, key=lambda t: float(np.hypot(*(t.square_center - meas.square_center_px))))
        if self.status == "global":
            dc, dr = cell_offset_from_centers(
                tag.square_center, meas.square_center_px, meas.e_x, meas.e_y,
                tol=self.params.cell_offset_tol)
            tc, tr = self.floor_map.tag_cells[tag.tag_id]
            self.cell = (tc + dc, tr + dr)
            return

        # relative -> global: measure again under the world axes from the tag
        w_axis = self._tag_axis(tags)
        e_x = self._snap_axis_to_lattice(w_axis, lattice)
        e_y = _rot_image_minus90(e_x)
        dc, dr = cell_offset_from_centers(
            tag.square_center, meas.square_center_px, e_x, e_y,
            tol=self.params.cell_offset_tol)
        tc, tr = self.floor_map.tag_cells[tag.tag_id]
        wcell = (tc + dc, tr + dr)

        # relabel the in-cell position and heading under the world axes
        k = int(np.rint(angle_diff_deg(_angle_of(meas.e_x), _angle_of(e_x)) / 90.0)) % 4
        u, v = meas.u, meas.v
        for _ in range(k):
            u, v = v, 1.0 - u   # quarter-turn relabeling of in-cell coordinates
        heading_w = wrap_angle_deg(meas.heading + 90.0 * k)

        if self.status == "relative" and self.trajectory:
            # rigid correction of the buffered relative history
            gx = self.cell[0] + meas.u
            gy = self.cell[1] + meas.v
            rel_pose = self._emit_pose(gx, gy, self.heading)
            s = self.floor_map.square_size
            wx = self.floor_map.origin[0] + (wcell[0] + u) * s
            wy = self.floor_map.origin[1] + (wcell[1] + v) * s
            alpha = angle_diff_deg(heading_w, rel_pose.theta_deg)
            ca, sa = np.cos(np.deg2rad(alpha)), np.sin(np.deg2rad(alpha))
            tx = wx - (ca * rel_pose.x - sa * rel_pose.y)
            ty = wy - (sa * rel_pose.x + ca * rel_pose.y)
            self.trajectory = [
                FrameEstimate(Pose2D(ca * e.pose.x - sa * e.pose.y + tx,
                                     sa * e.pose.x + ca * e.pose.y + ty,
                                     e.pose.theta_deg + alpha),
                              e.source, e.frame_index, e.timestamp, e.quality)
                for e in self.trajectory]

        self.cell = wcell
        self.local_uv = (u, v)
        self.heading = heading_w
        self.axis_angle_img = _angle_of(e_x)
        self.status = "global"
        self._rel_anchor = None

    # ------------------------------------------------------------------
    def _emit_pose(self, gx: float, gy: float, heading: float) -> Pose2D:
        s = self.floor_map.square_size
        if self.status == "global":
            return Pose2D(self.floor_map.origin[0] + gx * s,
                          self.floor_map.origin[1] + gy * s, heading)
        g0, th0 = self._rel_anchor
        dx = (gx - g0[0]) * s
        dy = (gy - g0[1]) * s
        c, si = np.cos(np.deg2rad(th0)), np.sin(np.deg2rad(th0))
        return Pose2D(c * dx + si * dy, -si * dx + c * dy, heading - th0)

    def _pose_to_grid(self, pose: Pose2D) -> tuple[float, float, float]:
        """Inverse of _emit_pose: (gx, gy, heading-in-labeling)."""
        s = self.floor_map.square_size
        if self.status == "global":
            return ((pose.x - self.floor_map.origin[0]) / s,
                    (pose.y - self.floor_map.origin[1]) / s, pose.theta_deg)
        g0, th0 = self._rel_anchor
        c, si = np.cos(np.deg2rad(th0)), np.sin(np.deg2rad(th0))
        dx = c * pose.x - si * pose.y
        dy = si * pose.x + c * pose.y
        return g0[0] + dx / s, g0[1] + dy / s, pose.theta_deg + th0

    # ------------------------------------------------------------------
    def _motion_model(self, frame_index: int, timestamp: float,
                      quality: str) -> FrameEstimate:
        if len(self.trajectory) >= 2:
            a, b = self.trajectory[-2], self.trajectory[-1]
            dt_prev = b.timestamp - a.timestamp
            scale = (timestamp - b.timestamp) / dt_prev if dt_prev > 0 else 1.0
            x = b.pose.x + (b.pose.x - a.pose.x) * scale
            y = b.pose.y + (b.pose.y - a.pose.y) * scale
            th = wrap_angle_deg(
                b.pose.theta_deg + angle_diff_deg(b.pose.theta_deg, a.pose.theta_deg) * scale)
            pose = Pose2D(x, y, th)
        elif self.trajectory:
            pose = self.trajectory[-1].pose
        else:
            pose = Pose2D(0.0, 0.0, 0.0)

        if self.status != "uninitialized" and self.cell is not None:
            gx, gy, heading = self._pose_to_grid(pose)
            new_cell = (int(np.floor(gx)), int(np.floor(gy)))
            # grid axes rotate opposite to the robot in the image
            if self.heading is not None and self.axis_angle_img is not None:
                self.axis_angle_img = wrap_angle_deg(
                    self.axis_angle_img - angle_diff_deg(heading, self.heading))
            self.cell = new_cell
            self.local_uv = (gx - new_cell[0], gy - new_cell[1])
            self.heading = heading
        return FrameEstimate(pose, "motion-model", frame_index, timestamp, quality)
