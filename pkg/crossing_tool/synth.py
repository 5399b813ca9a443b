"""Synthetic street scenes with a controllable crossing rule.

Every track hides three binary cues:

* ``toward``: the pedestrian walks toward the road centre line faster than
  ``TOWARD_THRESHOLD`` (visible in pedestrian coordinates),
* ``crosswalk``: a crosswalk stripe is painted next to the pedestrian
  (visible in the map rasters),
* ``facing``: the pedestrian faces the road (visible as a red, horizontally
  striped texture in the camera frame; blue and vertical otherwise).

The label rule picks which cues decide the label; every other cue is drawn
independently of it.  ``joint`` is the majority vote of all three.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from contextlib import suppress
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .constants import FRAME_RATE_HZ, INPUT_SIZE, MAP_EXTENT_M, MAX_WORKERS
from .dataset import write_dataset
from .imagery import write_sprite_sheet
from .model import ConfigError
from .pipeline import CROSSING, NOT_CROSSING, CameraMeta, FrameRecord, Track

LABEL_RULES = ("ped_motion_only", "map_dependent", "scene_dependent", "joint")

ROAD_HALF_WIDTH_M = 3.5
EGO_LANE_Y_M = -1.75
CROSSWALK_HALF_WIDTH_M = 1.5
DOT_RADIUS_M = 0.8
TOWARD_THRESHOLD = 0.3  # m/s toward the centre line

# semantic class ids of 2d rasters
CLASS_ROAD, CLASS_CROSSWALK, CLASS_PEDESTRIAN, CLASS_VEHICLE = 1, 2, 3, 4


class ScenarioError(ValueError):
    """Raised when a scenario config cannot produce the requested dataset."""


@dataclass(frozen=True)
class ScenarioConfig:
    n_tracks: int = 100
    seed: int = 0
    label_rule: str = "joint"
    noise_level: float = 0.05
    frame_rate: float = FRAME_RATE_HZ
    world_extent: float = MAP_EXTENT_M
    mode: str = "3d"
    balance: tuple[float, float] = (0.4, 0.6)
    min_frames: int = 26
    max_frames: int = 30
    map_size: tuple[int, int] = INPUT_SIZE
    camera_width: int = 64
    camera_height: int = 48

    def __post_init__(self):
        object.__setattr__(self, "balance", tuple(float(b) for b in self.balance))
        object.__setattr__(self, "map_size", tuple(int(s) for s in self.map_size))
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"Unknown label rule '{self.label_rule}'. Use one of: {', '.join(LABEL_RULES)}")
        if self.mode not in ("2d", "3d"):
            raise ConfigError(f"Unknown mode '{self.mode}'. Use '2d' or '3d'")
        if self.n_tracks < 1:
            raise ConfigError(f"n_tracks must be positive, got {self.n_tracks}")
        if not 0.0 <= self.noise_level < 0.5:
            raise ConfigError(f"noise_level must lie in [0, 0.5), got {self.noise_level}")
        if self.frame_rate <= 0 or self.world_extent <= 0:
            raise ConfigError("frame_rate and world_extent must be positive")
        low, high = self.balance
        if not 0.0 <= low <= high <= 1.0:
            raise ConfigError(f"balance bounds must satisfy 0 <= low <= high <= 1, got {self.balance}")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(f"track length bounds [{self.min_frames}, {self.max_frames}] are invalid")
        if min(self.map_size) < 1 or self.camera_width < 8 or self.camera_height < 8:
            raise ConfigError("raster sizes are too small")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown scenario config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class Cues:
    toward: bool
    crosswalk: bool
    facing: bool


def rule_label(rule: str, cues: Cues) -> int:
    if rule == "ped_motion_only":
        return int(cues.toward)
    if rule == "map_dependent":
        return int(cues.crosswalk)
    if rule == "scene_dependent":
        return int(cues.facing)
    return int(cues.toward + cues.crosswalk + cues.facing >= 2)


def _draw_cues(rule: str, label: int, rng: np.random.Generator) -> Cues:
    while True:
        cues = Cues(*(bool(b) for b in rng.random(3) < 0.5))
        if rule_label(rule, cues) == label:
            return cues


def _class_counts(config: ScenarioConfig) -> int:
    low, high = config.balance
    n = config.n_tracks
    positives = int(round(n * (low + high) / 2.0))
    if not low <= positives / n <= high:
        feasible = [k for k in range(n + 1) if low <= k / n <= high]
        if not feasible:
            raise ScenarioError(f"No positive count out of {n} tracks lies within balance {config.balance}")
        positives = min(feasible, key=lambda k: abs(k / n - (low + high) / 2.0))
    return positives


# Rendering


def _map_grid(config: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Ego-relative (forward, left) metres of every map pixel centre."""
    height, width = config.map_size
    rows, cols = np.mgrid[0:height, 0:width]
    extent = config.world_extent
    forward = (cols + 0.5) * extent / width - extent / 2.0
    left = extent / 2.0 - (rows + 0.5) * extent / height
    return forward, left


def render_map(
    config: ScenarioConfig, ped: np.ndarray, ego: np.ndarray, crosswalk_x: float | None
) -> np.ndarray:
    """Ego-centred raster: 3 uint8 channels (road, crosswalk, agents) or 1 channel of class ids in 2d."""
    forward, left = _map_grid(config)
    xs, ys = ego[0] + forward, ego[1] + left
    road = np.abs(ys) <= ROAD_HALF_WIDTH_M
    walk = np.zeros_like(road)
    if crosswalk_x is not None:
        walk = road & (np.abs(xs - crosswalk_x) <= CROSSWALK_HALF_WIDTH_M)
    ped_dot = (xs - ped[0]) ** 2 + (ys - ped[1]) ** 2 <= DOT_RADIUS_M**2
    ego_dot = forward**2 + left**2 <= DOT_RADIUS_M**2
    if config.mode == "3d":
        agents = np.where(ped_dot, 255, np.where(ego_dot, 128, 0))
        return np.stack([road * 255, walk * 255, agents]).astype(np.uint8)
    classes = np.zeros(road.shape, dtype=np.uint8)
    classes[road] = CLASS_ROAD
    classes[walk] = CLASS_CROSSWALK
    classes[ego_dot] = CLASS_VEHICLE
    classes[ped_dot] = CLASS_PEDESTRIAN
    return classes[None]


def camera_box(config: ScenarioConfig, ped: np.ndarray, ego: np.ndarray) -> tuple[float, float, float, float]:
    """Pedestrian box in a forward camera that keeps the pedestrian in frame."""
    width, height = config.camera_width, config.camera_height
    ahead = max(float(ped[0] - ego[0]), 1.0)
    box_h = float(np.clip(72.0 / ahead, 8.0, 0.7 * height))
    box_w = 0.4 * box_h
    lateral = float(np.clip((ped[1] - ego[1]) / (config.world_extent / 2.0), -1.0, 1.0))
    centre = width / 2.0 - (width / 2.0 - box_w) * lateral
    bottom = min(height / 2.0 + box_h / 2.0 + 4.0, height - 1.0)
    return centre - box_w / 2.0, bottom - box_h, centre + box_w / 2.0, bottom


def render_scene(config: ScenarioConfig, box: tuple[float, float, float, float], facing: bool) -> np.ndarray:
    width, height = config.camera_width, config.camera_height
    image = np.full((3, height, width), 110, dtype=np.uint8)
    image[:, height // 2 :] = 60
    x1, y1, x2, y2 = box
    top, bottom = max(0, int(np.floor(y1))), min(height, int(np.ceil(y2)))
    left, right = max(0, int(np.floor(x1))), min(width, int(np.ceil(x2)))
    rows, cols = np.mgrid[top:bottom, left:right]
    if facing:
        stripes = (rows // 2) % 2 == 0
        image[0, top:bottom, left:right] = np.where(stripes, 255, 80)
        image[2, top:bottom, left:right] = 30
    else:
        stripes = (cols // 2) % 2 == 0
        image[0, top:bottom, left:right] = 30
        image[2, top:bottom, left:right] = np.where(stripes, 255, 80)
    image[1, top:bottom, left:right] = 50
    return image


# Generation


@dataclass
class _TrackPlan:
    track: Track
    maps: list[np.ndarray]
    scenes: list[np.ndarray]


def _plan_track(
    config: ScenarioConfig, number: int, label: int, cues: Cues, rng: np.random.Generator
) -> _TrackPlan:
    track_id = f"t{number:04d}"
    length = int(rng.integers(config.min_frames, config.max_frames + 1))
    times = np.arange(length) / config.frame_rate

    side = 1.0 if rng.random() < 0.5 else -1.0
    start = np.array([rng.uniform(8.0, 12.0), side * rng.uniform(7.5, 10.0)])
    drift, curve = rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1)
    if cues.toward:
        lateral_speed = -side * rng.uniform(0.6, 1.2)
    elif rng.random() < 0.5:
        lateral_speed = side * rng.uniform(0.3, 0.8)
    else:
        lateral_speed = rng.uniform(-0.1, 0.1)
    crosswalk_x = start[0] + rng.uniform(-2.0, 2.0) if cues.crosswalk else None
    ego_speed = rng.uniform(0.5, 2.0)

    peds = np.stack([start[0] + drift * times + 0.5 * curve * times**2, start[1] + lateral_speed * times], axis=1)
    egos = np.stack([ego_speed * times, np.full(length, EGO_LANE_Y_M)], axis=1)

    frames, maps, scenes = [], [], []
    for k in range(length):
        box = camera_box(config, peds[k], egos[k])
        maps.append(render_map(config, peds[k], egos[k], crosswalk_x))
        scenes.append(render_scene(config, box, cues.facing))
        frames.append(
            FrameRecord(
                time=float(times[k]),
                box2d=box,
                ped_global=tuple(float(v) for v in peds[k]),
                ego_global=tuple(float(v) for v in egos[k]),
                ego_speed=float(ego_speed),
                map_raster=f"maps/{track_id}.png#{k}/{length}",
                scene_image=f"scenes/{track_id}.png#{k}/{length}",
            )
        )
    track = Track(
        track_id=track_id,
        frame_rate=config.frame_rate,
        frames=tuple(frames),
        label=CROSSING if label else NOT_CROSSING,
        camera_meta=CameraMeta(config.camera_width, config.camera_height),
        crossing_frame=length - 1 if label else None,
    )
    return _TrackPlan(track, maps, scenes)


def build_scenario(config: ScenarioConfig) -> list[_TrackPlan]:
    rng = np.random.default_rng(config.seed)
    n = config.n_tracks
    positives = _class_counts(config)
    clean = np.zeros(n, dtype=np.int64)
    clean[rng.permutation(n)[:positives]] = 1

    plans = []
    for number in range(n):
        cues = _draw_cues(config.label_rule, int(clean[number]), rng)
        plans.append(_plan_track(config, number, int(clean[number]), cues, rng))

    # balanced flips keep the class balance within one track
    flips = int(round(config.noise_level * n))
    pos_idx, neg_idx = np.flatnonzero(clean == 1), np.flatnonzero(clean == 0)
    to_neg = rng.permutation(pos_idx)[: min(flips // 2, pos_idx.size)]
    to_pos = rng.permutation(neg_idx)[: min(flips - to_neg.size, neg_idx.size)]
    observed = clean.copy()
    observed[to_neg], observed[to_pos] = 0, 1
    fraction = observed.mean()
    if not config.balance[0] <= fraction <= config.balance[1]:
        raise ScenarioError(f"Positive fraction {fraction:.3f} after label noise leaves balance {config.balance}")

    for number in np.concatenate([to_neg, to_pos]).tolist():
        plan = plans[number]
        crossing = bool(observed[number])
        last = len(plan.track.frames) - 1
        plan.track = replace(
            plan.track,
            label=CROSSING if crossing else NOT_CROSSING,
            crossing_frame=last if crossing else None,
        )
    return plans


def generate(
    config: ScenarioConfig,
    out_path: Path,
    *,
    on_track: Callable[[Track], None] | None = None,
) -> list[Track]:
    """Write the dataset file and its sprite sheets under ``maps/`` and ``scenes/`` beside it.

    If any write fails, sheets this call created are removed again.
    """
    out_path = Path(out_path)
    root = out_path.parent
    plans = build_scenario(config)
    created: list[Path] = []

    def write(plan: _TrackPlan) -> None:
        for kind, frames in (("maps", plan.maps), ("scenes", plan.scenes)):
            path = root / kind / f"{plan.track.track_id}.png"
            fresh = not path.exists()
            write_sprite_sheet(path, frames)
            if fresh:
                created.append(path)
        if on_track:
            on_track(plan.track)

    tracks = [p.track for p in plans]
    try:
        with ThreadPoolExecutor(max_workers=MAX_WORKERS) as exe:
            list(exe.map(write, plans))
        write_dataset(out_path, tracks)
    except BaseException:
        for path in created:
            path.unlink(missing_ok=True)
        for kind in ("maps", "scenes"):
            with suppress(OSError):
                (root / kind).rmdir()
        raise
    return tracks


def toward_speed(track: Track) -> float:
    """Mean lateral speed toward the road centre line over the whole track."""
    first, last = track.frames[0], track.frames[-1]
    lateral = (last.ped_global[1] - first.ped_global[1]) / (last.time - first.time)
    return -lateral if first.ped_global[1] > 0 else lateral


def crosswalk_visible(raster: np.ndarray, mode: str = "3d") -> bool:
    if mode == "3d":
        return bool((raster[1] > 0).any())
    return bool((raster == CLASS_CROSSWALK).any())
