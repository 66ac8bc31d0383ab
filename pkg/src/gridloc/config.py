"""Configuration files: pipeline parameters and scene specifications.

Both are YAML with explicit sections.  Every run writes the fully resolved
parameter set next to its outputs so results are reproducible from the dump
alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .camera import CameraConfigError, CameraIntrinsics, FisheyeDistortion
from .detect import DetectorParams
from .locate import FloorMap, TrackerParams
from .simulate import Occlusion, SceneSpec, default_camera


class ConfigError(ValueError):
    """Malformed or inconsistent configuration file."""


@dataclass(frozen=True)
class SmoothingParams:
    window_size: int = 20
    degree: int = 5

    def __post_init__(self):
        if self.window_size <= self.degree + 1:
            raise ConfigError("smoothing window must exceed degree + 1")


@dataclass
class PipelineConfig:
    intrinsics: CameraIntrinsics
    distortion: FisheyeDistortion
    floor_map: FloorMap
    detector: DetectorParams = field(default_factory=DetectorParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    camera_height: float = 0.20
    fps: float = 25.0 / 3.0
    topdown_size: int = 1232
    per_frame_homography: bool = False

    def __post_init__(self):
        if self.camera_height <= 0 or self.fps <= 0:
            raise ConfigError("camera height and fps must be positive")
        if self.topdown_size < 400:
            raise ConfigError("top-down view too small to hold one square")


def _build(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad [{section}] section: {e}") from e


def _camera_from_dict(d: dict) -> tuple[CameraIntrinsics, FisheyeDistortion]:
    d = dict(d)
    dist_keys = {k: float(d.pop(k, 0.0)) for k in ("k1", "k2", "k3", "k4")}
    try:
        intr = _build(CameraIntrinsics, d, "camera")
        dist = FisheyeDistortion(**dist_keys)
    except CameraConfigError as e:
        raise ConfigError(str(e)) from e
    return intr, dist


def _floor_from_dict(d: dict) -> FloorMap:
    tags = {int(k): (int(v[0]), int(v[1])) for k, v in (d.get("tags") or {}).items()}
    try:
        return FloorMap(square_size=float(d.get("square_size", 1.0 / 6.0)),
                        tag_cells=tags,
                        origin=tuple(d.get("origin", (0.0, 0.0))))
    except ValueError as e:
        raise ConfigError(f"bad [floor] section: {e}") from e


def load_pipeline_config(path: str | Path) -> PipelineConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read pipeline config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("pipeline config must be a mapping")
    if "camera" not in raw:
        raise ConfigError("pipeline config needs a [camera] section")
    intr, dist = _camera_from_dict(raw["camera"])
    floor = _floor_from_dict(raw.get("floor", {}))
    detector = _build(DetectorParams, raw.get("detector", {}) or {}, "detector")
    tracker = _build(TrackerParams, raw.get("tracker", {}) or {}, "tracker")
    smoothing = _build(SmoothingParams, raw.get("smoothing", {}) or {}, "smoothing")
    pl = dict(raw.get("pipeline", {}) or {})
    return PipelineConfig(intrinsics=intr, distortion=dist, floor_map=floor,
                          detector=detector, tracker=tracker, smoothing=smoothing,
                          **pl)


def pipeline_config_to_dict(cfg: PipelineConfig) -> dict:
    cam = dataclasses.asdict(cfg.intrinsics)
    cam.update({k: getattr(cfg.distortion, k) for k in ("k1", "k2", "k3", "k4")})
    return {
        "camera": cam,
        "floor": {
            "square_size": cfg.floor_map.square_size,
            "origin": list(cfg.floor_map.origin),
            "tags": {int(k): list(v) for k, v in sorted(cfg.floor_map.tag_cells.items())},
        },
        "detector": dataclasses.asdict(cfg.detector),
        "tracker": dataclasses.asdict(cfg.tracker),
        "smoothing": dataclasses.asdict(cfg.smoothing),
        "pipeline": {
            "camera_height": cfg.camera_height,
            "fps": cfg.fps,
            "topdown_size": cfg.topdown_size,
            "per_frame_homography": cfg.per_frame_homography,
        },
    }


def save_pipeline_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(pipeline_config_to_dict(cfg), sort_keys=True),
                          encoding="utf-8")


def pipeline_config_for_scene(scene: SceneSpec, **overrides) -> PipelineConfig:
    """Pipeline config consistent with a scene (same camera, floor and rates)."""
    floor = FloorMap(square_size=scene.square_size,
                     tag_cells=dict(scene.tag_cells), origin=(0.0, 0.0))
    return PipelineConfig(intrinsics=scene.intrinsics, distortion=scene.distortion,
                          floor_map=floor, camera_height=scene.camera_height,
                          fps=scene.fps, **overrides)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

def scene_to_dict(scene: SceneSpec) -> dict:
    cam = dataclasses.asdict(scene.intrinsics)
    cam.update({k: getattr(scene.distortion, k) for k in ("k1", "k2", "k3", "k4")})
    return {
        "square_size": scene.square_size,
        "n_cells": scene.n_cells,
        "color_a": list(scene.color_a),
        "color_b": list(scene.color_b),
        "tags": {int(k): list(v) for k, v in sorted(scene.tag_cells.items())},
        "tag_size": scene.tag_size,
        "camera": cam,
        "camera_height": scene.camera_height,
        "fps": scene.fps,
        "laser": {
            "offset": list(scene.laser_offset),
            "arm_length": scene.arm_length,
            "line_width": scene.line_width,
            "color": list(scene.laser_color),
            "enabled": scene.laser_enabled,
            "jitter_pos": scene.laser_jitter_pos,
            "jitter_deg": scene.laser_jitter_deg,
        },
        "noise_sigma": scene.noise_sigma,
        "illumination_amplitude": scene.illumination_amplitude,
        "occlusions": [dataclasses.asdict(o) for o in scene.occlusions],
        "supersample": scene.supersample,
        "seed": scene.seed,
    }


def scene_from_dict(raw: dict) -> SceneSpec:
    raw = dict(raw or {})
    kwargs = {}
    if "camera" in raw:
        intr, dist = _camera_from_dict(raw.pop("camera"))
        kwargs["intrinsics"] = intr
        kwargs["distortion"] = dist
    else:
        kwargs["intrinsics"], kwargs["distortion"] = default_camera()
    laser = raw.pop("laser", {}) or {}
    if "offset" in laser:
        kwargs["laser_offset"] = tuple(laser["offset"])
    for src, dst in (("arm_length", "arm_length"), ("line_width", "line_width"),
                     ("enabled", "laser_enabled"), ("jitter_pos", "laser_jitter_pos"),
                     ("jitter_deg", "laser_jitter_deg")):
        if src in laser:
            kwargs[dst] = laser[src]
    if "color" in laser:
        kwargs["laser_color"] = tuple(laser["color"])
    if "tags" in raw:
        kwargs["tag_cells"] = {int(k): (int(v[0]), int(v[1]))
                               for k, v in (raw.pop("tags") or {}).items()}
    if "occlusions" in raw:
        kwargs["occlusions"] = tuple(
            Occlusion(shape=o["shape"], center=tuple(o["center"]), size=float(o["size"]),
                      color=tuple(o.get("color", (128, 128, 128))),
                      first_frame=int(o.get("first_frame", 0)),
                      last_frame=o.get("last_frame"))
            for o in raw.pop("occlusions") or [])
    for k in ("color_a", "color_b"):
        if k in raw:
            kwargs[k] = tuple(raw.pop(k))
    for k in ("square_size", "n_cells", "tag_size", "camera_height", "fps",
              "noise_sigma", "illumination_amplitude", "supersample", "seed"):
        if k in raw:
            kwargs[k] = raw.pop(k)
    unknown = set(raw)
    if unknown:
        raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
    try:
        return SceneSpec(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"bad scene: {e}") from e


def load_scene(path: str | Path) -> SceneSpec:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read scene config {path}: {e}") from e
    return scene_from_dict(raw or {})


def save_scene(scene: SceneSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(scene_to_dict(scene), sort_keys=True),
                          encoding="utf-8")
