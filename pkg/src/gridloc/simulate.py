"""Synthetic scene renderer and trajectory generator with exact ground truth.

Renders the chessboard floor, floor tags, flat occluder patches and the laser
crosshair through the same lens model the pipeline undoes, with supersampling,
an illumination gradient and Gaussian noise.  Ground truth (crosshair pose,
per-square corner positions in world / raw-frame / pinhole-frame coordinates)
is computed analytically.

The projection here is implemented independently of :mod:`gridloc.camera` so
that agreement between the two is itself testable; only the parameter
dataclasses are shared.

Geometry: the camera hangs at ``height`` above the floor looking straight
down, image x along robot forward, image y along robot right (right-handed
with z down).  The laser crosshair center sits at ``laser_offset`` (forward,
left) from the camera in the robot frame; one arm runs along robot forward,
the other across.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics, FisheyeDistortion
from .detect import TAG_CELLS, tag_bitmap
from .imgcore import Pose2D


class SceneError(ValueError):
    """Scene specification problem (pose outside floor, bad parameters)."""


def fov_focal_length(width_px: int, fov_deg: float, dist: FisheyeDistortion) -> float:
    """Focal length such that the stated field of view spans the image width."""
    half = np.deg2rad(fov_deg / 2.0)
    rn = np.tan(half) * float(dist.poly(half))
    return width_px / 2.0 / rn


def default_camera(width: int = 1920, height: int = 1200, fov_deg: float = 150.0,
                   k=(0.05, 0.0, 0.0, 0.0)) -> tuple[CameraIntrinsics, FisheyeDistortion]:
    dist = FisheyeDistortion(*k)
    f = fov_focal_length(width, fov_deg, dist)
    intr = CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)
    return intr, dist


def default_tag_layout(n_cells: int = 36, margin: int = 2, spacing: int = 2) -> dict:
    """Tags every ``spacing``-th cell in both axes (id -> (col, row))."""
    placements = {}
    cols = range(margin, n_cells - margin, spacing)
    rows = range(margin, n_cells - margin, spacing)
    tag_id = 0
    for r in rows:
        for c in cols:
            if tag_id > 255:
                return placements
            placements[tag_id] = (c, r)
            tag_id += 1
    return placements


@dataclass(frozen=True)
class Occlusion:
    shape: str                  # "disk" | "rect"
    center: tuple[float, float]  # world meters
    size: float                 # radius (disk) or half side (rect)
    color: tuple[int, int, int] = (128, 128, 128)
    first_frame: int = 0
    last_frame: int | None = None

    def active(self, frame_index: int) -> bool:
        if frame_index < self.first_frame:
            return False
        return self.last_frame is None or frame_index <= self.last_frame


@dataclass(frozen=True)
class SceneSpec:
    square_size: float = 1.0 / 6.0
    n_cells: int = 36                               # floor is n_cells x n_cells squares
    color_a: tuple[int, int, int] = (30, 90, 205)   # cells with even (col+row): blue
    color_b: tuple[int, int, int] = (235, 235, 235)
    tag_cells: dict = field(default_factory=default_tag_layout)  # id -> (col, row)
    tag_size: float = 0.10                          # sticker side, m
    intrinsics: CameraIntrinsics | None = None
    distortion: FisheyeDistortion | None = None
    camera_height: float = 0.20
    fps: float = 25.0 / 3.0
    laser_offset: tuple[float, float] = (0.03, 0.0)  # (forward, left), m
    arm_length: float = 0.12                         # half length of each arm, m
    line_width: float = 0.004                        # on-floor FWHM-ish width, m
    laser_color: tuple[int, int, int] = (40, 255, 40)
    laser_enabled: bool = True
    noise_sigma: float = 0.0                         # gray levels
    illumination_amplitude: float = 0.0              # relative, across image x
    laser_jitter_pos: float = 0.0                    # m, per-frame random offset
    laser_jitter_deg: float = 0.0
    occlusions: tuple[Occlusion, ...] = ()
    supersample: int = 2                             # per-axis; 2 -> 4 samples/px
    seed: int = 0

    def __post_init__(self):
        if self.camera_height <= 0:
            raise SceneError("camera height must be positive")
        if not self.arm_length < self.square_size:
            raise SceneError("crosshair arm must fit inside one square")
        if self.intrinsics is None or self.distortion is None:
            intr, dist = default_camera()
            object.__setattr__(self, "intrinsics", self.intrinsics or intr)
            object.__setattr__(self, "distortion", self.distortion or dist)

    @property
    def extent(self) -> float:
        return self.n_cells * self.square_size


@dataclass(frozen=True)
class GroundTruthRecord:
    frame_index: int
    timestamp: float
    pose: Pose2D                        # nominal crosshair world pose
    crosshair_raw_px: np.ndarray        # (2,) distorted-frame position
    crosshair_pinhole_px: np.ndarray    # (2,) undistorted-frame position
    square_corners: dict                # (col,row) -> {"world","raw_px","pinhole_px"}


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def generate_trajectory(kind: str, duration_s: float, fps: float, speed: float,
                        center: tuple[float, float] = (3.0, 3.0),
                        heading_deg: float = 30.0,
                        radius: float = 0.8,
                        amplitude: tuple[float, float] = (0.9, 0.9),
                        waypoints: list[tuple[float, float]] | None = None,
                        speed_bound: float | None = None) -> list[tuple[float, Pose2D]]:
    """C1-continuous pose samples at the camera rate; heading follows velocity.

    ``speed`` is the path speed (peak speed for the lissajous).  A speed above
    ``speed_bound`` only warns: the aliasing negative controls need it.
    """
    if duration_s <= 0 or fps <= 0 or speed <= 0:
        raise SceneError("duration, fps and speed must be positive")
    if speed_bound is not None and speed > speed_bound:
        warnings.warn(f"requested speed {speed:.3f} m/s exceeds the tracking "
                      f"bound {speed_bound:.3f} m/s", stacklevel=2)
    n = int(np.floor(duration_s * fps)) + 1
    t = np.arange(n) / fps
    cx, cy = center

    if kind == "line":
        d = np.deg2rad(heading_deg)
        x = cx + speed * t * np.cos(d)
        y = cy + speed * t * np.sin(d)
        th = np.full(n, heading_deg)
    elif kind == "arc":
        omega = speed / radius
        ang = omega * t
        x = cx + radius * np.cos(ang)
        y = cy + radius * np.sin(ang)
        th = np.rad2deg(ang + np.pi / 2.0)
    elif kind == "lissajous":
        ax, ay = amplitude
        # scale the base rate so the peak path speed equals `speed`
        fine = np.linspace(0.0, 2.0 * np.pi, 4096)
        vx = 2.0 * ax * np.cos(2.0 * fine + 0.9)
        vy = 3.0 * ay * np.cos(3.0 * fine)
        w = speed / float(np.max(np.hypot(vx, vy)))
        x = cx + ax * np.sin(2.0 * w * t + 0.9)
        y = cy + ay * np.sin(3.0 * w * t)
        dx = 2.0 * w * ax * np.cos(2.0 * w * t + 0.9)
        dy = 3.0 * w * ay * np.cos(3.0 * w * t)
        th = np.rad2deg(np.arctan2(dy, dx))
    elif kind == "waypoint-spline":
        pts = np.asarray(waypoints if waypoints else
                         [(cx - 1, cy - 1), (cx + 1, cy - 0.5), (cx + 1, cy + 1),
                          (cx - 0.5, cy + 1), (cx - 1, cy - 1)], dtype=np.float64)
        x, y, th = _catmull_rom(pts, n)
    else:
        raise SceneError(f"unknown trajectory kind: {kind}")
    return [(float(t[i]), Pose2D(float(x[i]), float(y[i]), float(th[i])))
            for i in range(n)]


def _catmull_rom(pts: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = len(pts)
    if m < 2:
        raise SceneError("waypoint spline needs at least 2 waypoints")
    padded = np.vstack([pts[0], pts, pts[-1]])
    u = np.linspace(0.0, m - 1.0, n, endpoint=True) * (1 - 1e-9)
    seg = np.floor(u).astype(int)
    s = (u - seg)[:, None]
    p0 = padded[seg]
    p1 = padded[seg + 1]
    p2 = padded[seg + 2]
    p3 = padded[seg + 3]
    pos = 0.5 * ((2 * p1) + (-p0 + p2) * s + (2 * p0 - 5 * p1 + 4 * p2 - p3) * s ** 2
                 + (-p0 + 3 * p1 - 3 * p2 + p3) * s ** 3)
    vel = 0.5 * ((-p0 + p2) + 2 * (2 * p0 - 5 * p1 + 4 * p2 - p3) * s
                 + 3 * (-p0 + 3 * p1 - 3 * p2 + p3) * s ** 2)
    th = np.rad2deg(np.arctan2(vel[:, 1], vel[:, 0]))
    return pos[:, 0], pos[:, 1], th


# ---------------------------------------------------------------------------
# Renderer
# ---------------------------------------------------------------------------

class Simulator:
    """Caches per-camera ray tables and per-scene textures across frames."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self._q = self._pixel_floor_offsets()
        self._tag_grid = self._build_tag_grid()
        self._tag_patterns = self._build_tag_patterns()

    # -- independent lens math (kept separate from gridloc.camera) --------

    def _poly(self, theta: np.ndarray) -> np.ndarray:
        d = self.scene.distortion
        return np.polyval(np.array([d.k4, d.k3, d.k2, d.k1, 1.0]), theta * theta)

    def _radius_from_angle(self, theta: np.ndarray) -> np.ndarray:
        return np.tan(theta) * self._poly(theta)

    def _angle_from_radius(self, rn: np.ndarray) -> np.ndarray:
        d = self.scene.distortion
        theta = np.arctan(rn)
        dcoef = np.array([4.0 * d.k4, 3.0 * d.k3, 2.0 * d.k2, d.k1])
        for _ in range(25):
            p = self._poly(theta)
            tant = np.tan(theta)
            dp = 2.0 * theta * np.polyval(dcoef, theta * theta)
            f = tant * p - rn
            fp = (1.0 + tant * tant) * p + tant * dp
            step = f / fp
            theta -= step
            if np.max(np.abs(step)) < 1e-12:
                break
        return theta

    def _pixel_floor_offsets(self) -> np.ndarray:
        """(2, H*ss, W*ss) float32: floor offset per unit height for every
        subsample, in camera-aligned axes (forward, right).

        The per-pixel scale 1 / P(theta(rn)) is a smooth 1-D function of the
        normalized radius, so it is tabulated densely once and interpolated
        instead of running the inversion on every subsample.
        """
        intr = self.scene.intrinsics
        ss = self.scene.supersample
        w, h = intr.width, intr.height
        sub = (np.arange(w * ss, dtype=np.float64) + 0.5) / ss - 0.5
        u = (sub - intr.cx) / intr.fx
        sub_y = (np.arange(h * ss, dtype=np.float64) + 0.5) / ss - 0.5
        v = (sub_y - intr.cy) / intr.fy
        uu, vv = np.meshgrid(u, v)
        rn = np.hypot(uu, vv)

        theta_grid = np.linspace(0.0, np.arctan(float(rn.max())) * 1.02 + 1e-3, 32768)
        rn_grid = self._radius_from_angle(theta_grid)
        scale_grid = 1.0 / self._poly(theta_grid)
        scale = np.interp(rn, rn_grid, scale_grid)
        return np.stack([(uu * scale).astype(np.float32),
                         (vv * scale).astype(np.float32)])

    def project_world(self, points_xy: np.ndarray, pose: Pose2D) -> np.ndarray:
        """Distorted-frame pixels of world floor points for a crosshair pose."""
        cam, fwd, left = self._camera_frame(pose)
        p = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
        d = p - cam[None, :]
        xc = d @ fwd
        yc = -(d @ left)      # image y axis is robot right
        zc = self.scene.camera_height
        r = np.hypot(xc, yc)
        theta = np.arctan2(r, zc)
        rn = self._radius_from_angle(theta)
        intr = self.scene.intrinsics
        with np.errstate(invalid="ignore"):
            k = np.where(r > 0, rn / np.where(r > 0, r, 1.0), 0.0)
        return np.stack([intr.fx * xc * k + intr.cx,
                         intr.fy * yc * k + intr.cy], axis=-1)

    def pinhole_world(self, points_xy: np.ndarray, pose: Pose2D) -> np.ndarray:
        """Undistorted (pinhole) frame pixels of world floor points."""
        cam, fwd, left = self._camera_frame(pose)
        p = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
        d = p - cam[None, :]
        xc = d @ fwd
        yc = -(d @ left)
        zc = self.scene.camera_height
        intr = self.scene.intrinsics
        return np.stack([intr.fx * xc / zc + intr.cx,
                         intr.fy * yc / zc + intr.cy], axis=-1)

    def _camera_frame(self, pose: Pose2D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        th = np.deg2rad(pose.theta_deg)
        fwd = np.array([np.cos(th), np.sin(th)])
        left = np.array([-np.sin(th), np.cos(th)])
        off = self.scene.laser_offset
        cam = np.array([pose.x, pose.y]) - off[0] * fwd - off[1] * left
        return cam, fwd, left

    # -- floor pattern ------------------------------------------------------

    def _build_tag_grid(self) -> np.ndarray:
        n = self.scene.n_cells
        grid = np.full((n, n), -1, dtype=np.int16)
        for idx, (tag_id, (c, r)) in enumerate(sorted(self.scene.tag_cells.items())):
            if not (0 <= c < n and 0 <= r < n):
                raise SceneError(f"tag {tag_id} cell {(c, r)} outside the floor")
            grid[c, r] = idx
        return grid

    def _build_tag_patterns(self) -> np.ndarray:
        """(n_tags, 10, 10) bool, True = dark; includes the white sticker margin."""
        ids = [tag_id for tag_id, _ in sorted(self.scene.tag_cells.items())]
        pats = np.zeros((max(len(ids), 1), TAG_CELLS + 2, TAG_CELLS + 2), dtype=bool)
        for k, tag_id in enumerate(ids):
            pats[k, 1:-1, 1:-1] = tag_bitmap(tag_id)
        return pats

    def _sample_floor(self, fx: np.ndarray, fy: np.ndarray, frame_index: int,
                      laser_pose: Pose2D | None) -> np.ndarray:
        """RGB (float32) of analytic floor points (arrays of any shape)."""
        sc = self.scene
        inv_s = np.float32(1.0 / sc.square_size)
        s = sc.square_size
        col = np.floor(fx * inv_s).astype(np.int32)
        row = np.floor(fy * inv_s).astype(np.int32)
        inside = ((col >= 0) & (col < sc.n_cells)) & ((row >= 0) & (row < sc.n_cells))
        parity = ((col + row) & 1).astype(np.int8)
        colors = np.array([sc.color_a, sc.color_b], dtype=np.float32)
        rgb = colors[parity]
        rgb[~inside] = 0.0

        # tags: white sticker with the dark cell pattern
        ci = np.clip(col, 0, sc.n_cells - 1)
        ri = np.clip(row, 0, sc.n_cells - 1)
        tag_idx = np.where(inside, self._tag_grid[ci, ri], np.int16(-1))
        cand = np.nonzero(tag_idx >= 0)
        if len(cand[0]):
            lx = fx[cand] - (col[cand] + 0.5) * s
            ly = fy[cand] - (row[cand] + 0.5) * s
            half = sc.tag_size / 2.0
            on = (np.abs(lx) <= half) & (np.abs(ly) <= half)
            if np.any(on):
                sel = tuple(a[on] for a in cand)
                tx = (lx[on] + half) / sc.tag_size          # west -> east
                ty = (half - ly[on]) / sc.tag_size          # north -> south
                n_cells = TAG_CELLS + 2
                cc = np.clip((tx * n_cells).astype(np.int32), 0, n_cells - 1)
                rr = np.clip((ty * n_cells).astype(np.int32), 0, n_cells - 1)
                dark = self._tag_patterns[tag_idx[sel], rr, cc]
                val = np.where(dark[:, None], 20.0, 245.0).astype(np.float32)
                rgb[sel] = val

        # flat occluder patches
        for occ in sc.occlusions:
            if not occ.active(frame_index):
                continue
            ox, oy = occ.center
            reach = occ.size * (1.5 if occ.shape == "rect" else 1.0)
            box = np.nonzero((np.abs(fx - ox) <= reach) & (np.abs(fy - oy) <= reach))
            if not len(box[0]):
                continue
            if occ.shape == "disk":
                hit = np.hypot(fx[box] - ox, fy[box] - oy) <= occ.size
            else:
                hit = (np.abs(fx[box] - ox) <= occ.size) & (np.abs(fy[box] - oy) <= occ.size)
            sel = tuple(a[hit] for a in box)
            rgb[sel] = np.array(occ.color, dtype=np.float32)

        # laser crosshair, composited over everything
        if laser_pose is not None:
            th = np.deg2rad(laser_pose.theta_deg)
            fwd = np.array([np.cos(th), np.sin(th)])
            left = np.array([-np.sin(th), np.cos(th)])
            sigma = sc.line_width / 2.0
            reach = sc.arm_length + 4.0 * sigma
            dx = fx - laser_pose.x
            dy = fy - laser_pose.y
            box = np.nonzero((np.abs(dx) <= reach) & (np.abs(dy) <= reach))
            if len(box[0]):
                df = dx[box] * fwd[0] + dy[box] * fwd[1]
                dl = dx[box] * left[0] + dy[box] * left[1]
                i1 = np.exp(-0.5 * (dl / sigma) ** 2) * (np.abs(df) <= sc.arm_length)
                i2 = np.exp(-0.5 * (df / sigma) ** 2) * (np.abs(dl) <= sc.arm_length)
                inten = np.maximum(i1, i2).astype(np.float32)
                lc = np.array(sc.laser_color, dtype=np.float32)
                rgb[box] = rgb[box] * (1.0 - inten[:, None]) + lc[None, :] * inten[:, None]
        return rgb

    # -- frame rendering ----------------------------------------------------

    def render_frame(self, pose: Pose2D, frame_index: int = 0,
                     timestamp: float | None = None
                     ) -> tuple[np.ndarray, GroundTruthRecord]:
        sc = self.scene
        cam, fwd, left = self._camera_frame(pose)
        margin = 0.05 * sc.extent
        if not (margin <= cam[0] <= sc.extent - margin
                and margin <= cam[1] <= sc.extent - margin):
            raise SceneError(f"camera position {cam} outside the floor extent")

        rng = np.random.default_rng([sc.seed, frame_index])
        laser_pose = None
        if sc.laser_enabled:
            jx = jy = jth = 0.0
            if sc.laser_jitter_pos > 0:
                jx, jy = rng.normal(0.0, sc.laser_jitter_pos, 2)
            if sc.laser_jitter_deg > 0:
                jth = rng.normal(0.0, sc.laser_jitter_deg)
            laser_pose = Pose2D(pose.x + jx, pose.y + jy, pose.theta_deg + jth)

        h = sc.camera_height
        qf, qr = self._q  # camera-aligned (forward, right) offsets per height
        floor_x = qf * np.float32(h * fwd[0])
        floor_x -= qr * np.float32(h * left[0])
        floor_x += np.float32(cam[0])
        floor_y = qf * np.float32(h * fwd[1])
        floor_y -= qr * np.float32(h * left[1])
        floor_y += np.float32(cam[1])
        rgb = self._sample_floor(floor_x, floor_y, frame_index, laser_pose)

        ss = sc.supersample
        hh, ww = sc.intrinsics.height, sc.intrinsics.width
        img = rgb.reshape(hh, ss, ww, ss, 3).mean(axis=(1, 3), dtype=np.float32)

        if sc.illumination_amplitude > 0:
            ramp = 1.0 + sc.illumination_amplitude * (
                np.arange(ww, dtype=np.float32) / (ww - 1) - 0.5) * 2.0
            img *= ramp[None, :, None]
        if sc.noise_sigma > 0:
            img += rng.standard_normal(img.shape, dtype=np.float32) * np.float32(sc.noise_sigma)
        frame = np.rint(np.clip(img, 0, 255)).astype(np.uint8)

        gt = self.ground_truth(pose, frame_index,
                               timestamp if timestamp is not None else frame_index / sc.fps)
        return frame, gt

    def ground_truth(self, pose: Pose2D, frame_index: int, timestamp: float) -> GroundTruthRecord:
        sc = self.scene
        cam, _, _ = self._camera_frame(pose)
        center = np.array([pose.x, pose.y])
        raw = self.project_world(center[None, :], pose)[0]
        pin = self.pinhole_world(center[None, :], pose)[0]

        corners = {}
        s = sc.square_size
        reach = 1.2 * sc.camera_height * float(np.max(np.abs(self._q)))
        c0 = int(np.floor((cam[0] - reach) / s))
        c1 = int(np.ceil((cam[0] + reach) / s))
        r0 = int(np.floor((cam[1] - reach) / s))
        r1 = int(np.ceil((cam[1] + reach) / s))
        for c in range(max(0, c0), min(sc.n_cells, c1)):
            for r in range(max(0, r0), min(sc.n_cells, r1)):
                world = np.array([[c, r], [c + 1, r], [c + 1, r + 1], [c, r + 1]],
                                 dtype=np.float64) * s
                corners[(c, r)] = {
                    "world": world,
                    "raw_px": self.project_world(world, pose),
                    "pinhole_px": self.pinhole_world(world, pose),
                }
        return GroundTruthRecord(frame_index=frame_index, timestamp=timestamp,
                                 pose=pose, crosshair_raw_px=raw,
                                 crosshair_pinhole_px=pin, square_corners=corners)


def scene_with_occlusions(scene: SceneSpec, fraction: float, region: tuple[float, float, float, float],
                          seed: int = 1234, radius_cells: float = 0.38) -> SceneSpec:
    """Cover ``fraction`` of the squares inside a world region with gray disks."""
    rng = np.random.default_rng(seed)
    s = scene.square_size
    x0, y0, x1, y1 = region
    cells = [(c, r)
             for c in range(int(np.floor(x0 / s)), int(np.ceil(x1 / s)))
             for r in range(int(np.floor(y0 / s)), int(np.ceil(y1 / s)))]
    n_pick = int(round(fraction * len(cells)))
    picked = rng.choice(len(cells), size=n_pick, replace=False)
    occs = [Occlusion(shape="disk",
                      center=((cells[i][0] + 0.5) * s, (cells[i][1] + 0.5) * s),
                      size=radius_cells * s)
            for i in picked]
    return replace(scene, occlusions=tuple(occs))
