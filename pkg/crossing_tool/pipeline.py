"""Track records to model-ready observation samples.

A track is clipped at its crossing event (or kept whole when no crossing
happens), 5-frame windows ending 1-2 s before the event are enumerated with 50%
overlap, and every window becomes one :class:`ObservationSample`: channel
stacked maps and scene crops plus pedestrian and ego-vehicle motion features.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .constants import (
    BEV_CHANNELS,
    CROP_SCALE,
    DRIVER_ACTIONS,
    FRAME_RATE_HZ,
    INPUT_SIZE,
    INTERP_FACTOR,
    MAP_EXTENT_M,
    MAX_WORKERS,
    OBS_LEN,
    SCENE_CHANNELS,
    SEMANTIC_CLASSES,
    SPEED_SCALE,
    TRAIN_FRACTION,
    TTE_MAX_S,
    TTE_MIN_S,
    WINDOW_OVERLAP,
)
from .imagery import ImageRef, ImageStore, crop_square, one_hot, resample

MODES = ("2d", "3d")
CROSSING = "crossing"
NOT_CROSSING = "not_crossing"


class TrackError(ValueError):
    """Raised when track content violates the record invariants."""


Box = tuple[float, float, float, float]


def _check_box(box: Sequence[float]) -> Box:
    if len(box) != 4:
        raise TrackError(f"box2d needs 4 values [x1, y1, x2, y2], got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        raise TrackError(f"box2d {list(box)} must satisfy x1 < x2 and y1 < y2")
    return x1, y1, x2, y2


@dataclass(frozen=True)
class FrameRecord:
    time: float
    box2d: Box
    ped_global: tuple[float, ...] | None = None
    ego_global: tuple[float, ...] | None = None
    ego_speed: float | None = None
    driver_action: int | None = None
    map_raster: str | None = None
    scene_image: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "box2d", _check_box(self.box2d))
        for name in ("ped_global", "ego_global"):
            value = getattr(self, name)
            if value is not None:
                if len(value) not in (2, 3):
                    raise TrackError(f"{name} needs 2 or 3 coordinates, got {len(value)}")
                object.__setattr__(self, name, tuple(float(v) for v in value))
        if self.driver_action is not None and not 0 <= self.driver_action < len(DRIVER_ACTIONS):
            raise TrackError(f"driver_action must lie in [0, {len(DRIVER_ACTIONS)}), got {self.driver_action}")


@dataclass(frozen=True)
class CameraMeta:
    width: int
    height: int


@dataclass(frozen=True)
class CameraView:
    name: str
    box2d: Box
    width: int
    height: int
    scene_image: str | None = None


@dataclass(frozen=True)
class Track:
    track_id: str
    frame_rate: float
    frames: tuple[FrameRecord, ...]
    label: str
    camera_meta: CameraMeta
    crossing_frame: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise TrackError(f"track {self.track_id}: no frames")
        if self.frame_rate <= 0:
            raise TrackError(f"track {self.track_id}: frame_rate must be positive")
        times = [f.time for f in self.frames]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise TrackError(f"track {self.track_id}: frame times must be strictly increasing")
        if self.label not in (CROSSING, NOT_CROSSING):
            raise TrackError(f"track {self.track_id}: label must be '{CROSSING}' or '{NOT_CROSSING}'")
        if (self.crossing_frame is not None) != (self.label == CROSSING):
            raise TrackError(f"track {self.track_id}: crossing_frame must be set exactly for crossing tracks")
        if self.crossing_frame is not None and not 0 <= self.crossing_frame < len(self.frames):
            raise TrackError(
                f"track {self.track_id}: crossing_frame {self.crossing_frame} outside [0, {len(self.frames)})"
            )

    @property
    def is_crossing(self) -> bool:
        return self.label == CROSSING

    @property
    def event_frame(self) -> int:
        return self.crossing_frame if self.crossing_frame is not None else len(self.frames) - 1


@dataclass
class ObservationSample:
    map_stack: np.ndarray  # [C_m * T, H, W]
    scene_stack: np.ndarray  # [3 * T, H, W]
    ped_motion: np.ndarray  # [T, D_p]
    veh_motion: np.ndarray  # [T, D_v]
    label: int
    tte: float
    track_id: str = ""
    window_index: int = 0


@dataclass(frozen=True)
class SampleSpec:
    mode: str = "3d"
    obs_len: int = OBS_LEN
    map_size: tuple[int, int] = INPUT_SIZE
    scene_size: tuple[int, int] = INPUT_SIZE
    overlap: float = WINDOW_OVERLAP
    tte_range: tuple[float, float] = (TTE_MIN_S, TTE_MAX_S)

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrackError(f"Unknown mode '{self.mode}'. Use one of: {', '.join(MODES)}")

    @property
    def map_channels_per_step(self) -> int:
        return SEMANTIC_CLASSES if self.mode == "2d" else BEV_CHANNELS


# Event clipping and windows


def clip_track(track: Track) -> Track:
    """Cut a crossing track right after its crossing frame; other tracks pass through."""
    if track.crossing_frame is None:
        return track
    if track.crossing_frame < 0:
        raise TrackError(f"track {track.track_id}: crossing_frame precedes the first frame")
    return replace(track, frames=track.frames[: track.crossing_frame + 1])


@dataclass(frozen=True)
class Window:
    start: int
    end: int
    tte: float


def _window_bounds(
    event_frame: int, frame_rate: float, obs_len: int, tte_range: tuple[float, float], overlap: float
) -> tuple[int, int, int]:
    if not math.isclose(frame_rate, FRAME_RATE_HZ):
        raise TrackError(
            f"observation windows need {FRAME_RATE_HZ:g} Hz frames, got {frame_rate:g} Hz; "
            "upsample keyframe tracks with interpolate_track (crossing interpolate)"
        )
    near = int(round(tte_range[0] * frame_rate))
    far = int(round(tte_range[1] * frame_rate))
    stride = max(1, math.ceil(obs_len * (1.0 - overlap)))
    return max(obs_len - 1, event_frame - far), event_frame - near, stride


def observation_windows(
    track: Track,
    obs_len: int = OBS_LEN,
    tte_range: tuple[float, float] = (TTE_MIN_S, TTE_MAX_S),
    overlap: float = WINDOW_OVERLAP,
) -> list[Window]:
    """Windows whose last frame lies 1-2 s before the event, earliest first."""
    event = track.event_frame
    first, last, stride = _window_bounds(event, track.frame_rate, obs_len, tte_range, overlap)
    return [
        Window(end - obs_len + 1, end, (event - end) / track.frame_rate)
        for end in range(first, last + 1, stride)
    ]


def window_count(
    event_frame: int,
    frame_rate: float,
    obs_len: int = OBS_LEN,
    tte_range: tuple[float, float] = (TTE_MIN_S, TTE_MAX_S),
    overlap: float = WINDOW_OVERLAP,
) -> int:
    first, last, stride = _window_bounds(event_frame, frame_rate, obs_len, tte_range, overlap)
    return (last - first) // stride + 1 if last >= first else 0


# Geometry and motion


@dataclass(frozen=True)
class CropRegion:
    square: Box
    clamped: Box

    @property
    def side(self) -> float:
        return self.square[2] - self.square[0]


def crop_box(box2d: Sequence[float], image_extents: tuple[int, int]) -> CropRegion:
    """Scale the box 1.5x about its centre, make it square on the scaled height, clamp to the image."""
    try:
        x1, y1, x2, y2 = _check_box(box2d)
    except TrackError as exc:
        raise TrackError(f"degenerate box: {exc}") from None
    width, height = image_extents
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    half = (y2 - y1) * CROP_SCALE / 2.0
    square = (cx - half, cy - half, cx + half, cy + half)
    clamped = (max(0.0, square[0]), max(0.0, square[1]), min(float(width), square[2]), min(float(height), square[3]))
    return CropRegion(square, clamped)


def extract_scene(image: np.ndarray, box2d: Sequence[float], size: tuple[int, int]) -> np.ndarray:
    """Square 1.5x crop around the box, edge-replicated past the border, resampled to ``size``."""
    _, height, width = image.shape
    region = crop_box(box2d, (width, height))
    left, top = math.floor(region.square[0]), math.floor(region.square[1])
    side = max(1, int(round(region.side)))
    left = min(max(left, -side + 1), width - 1)
    top = min(max(top, -side + 1), height - 1)
    patch = crop_square(np.asarray(image, dtype=np.float64), left, top, side)
    scale = 255.0 if image.dtype == np.uint8 else 1.0
    return resample(patch, size) / scale


def compute_velocity(coords: np.ndarray) -> np.ndarray:
    """Displacement of every position from the first one."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords - coords[0]


def _lerp(a: Sequence[float], b: Sequence[float], w: float) -> tuple[float, ...]:
    return tuple(x + (y - x) * w for x, y in zip(a, b))


def interpolate_boxes(keyframes: Sequence[FrameRecord], factor: int = INTERP_FACTOR) -> list[FrameRecord]:
    """Insert ``factor - 1`` evenly timed frames between consecutive keyframes.

    Time, global coordinates and box corners are interpolated linearly; ego
    speed too when both ends carry it.  Imagery references and discrete
    attributes come from the nearest keyframe.
    """
    if len(keyframes) < 2:
        raise TrackError("interpolate_boxes needs at least 2 keyframes")
    for k, (a, b) in enumerate(zip(keyframes, keyframes[1:])):
        if b.time <= a.time:
            raise TrackError(f"keyframe {k + 1} at t={b.time} is not after keyframe {k} at t={a.time}")
    for k, frame in enumerate(keyframes):
        if frame.ped_global is None:
            raise TrackError(f"keyframe {k} has no ped_global coordinates")

    frames: list[FrameRecord] = []
    for a, b in zip(keyframes, keyframes[1:]):
        frames.append(a)
        for step in range(1, factor):
            w = step / factor
            near = a if w <= 0.5 else b
            frames.append(
                FrameRecord(
                    time=a.time + (b.time - a.time) * w,
                    box2d=_lerp(a.box2d, b.box2d, w),
                    ped_global=_lerp(a.ped_global, b.ped_global, w),
                    ego_global=(
                        _lerp(a.ego_global, b.ego_global, w)
                        if a.ego_global is not None and b.ego_global is not None
                        else near.ego_global
                    ),
                    ego_speed=(
                        a.ego_speed + (b.ego_speed - a.ego_speed) * w
                        if a.ego_speed is not None and b.ego_speed is not None
                        else near.ego_speed
                    ),
                    driver_action=near.driver_action,
                    map_raster=near.map_raster,
                    scene_image=near.scene_image,
                )
            )
    frames.append(keyframes[-1])
    return frames


def interpolate_track(track: Track, factor: int = INTERP_FACTOR) -> Track:
    return replace(
        track,
        frame_rate=track.frame_rate * factor,
        frames=tuple(interpolate_boxes(track.frames, factor)),
        crossing_frame=None if track.crossing_frame is None else track.crossing_frame * factor,
    )


def rebase_track(track: Track, source: Path, target: Path) -> Track:
    """Rewrite imagery references read from ``source`` so they resolve from ``target``."""

    def move(ref: str | None) -> str | None:
        return None if ref is None else str(ImageRef.parse(ref).rebased(source, target))

    frames = tuple(replace(f, map_raster=move(f.map_raster), scene_image=move(f.scene_image)) for f in track.frames)
    return replace(track, frames=frames)


def stack_channels(images: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-step ``[C, H, W]`` images on the channel axis, oldest first."""
    if not images:
        raise TrackError("stack_channels needs at least one image")
    extents = images[0].shape[1:]
    for step, image in enumerate(images):
        if image.ndim != 3 or image.shape[1:] != extents:
            raise TrackError(f"image {step} has shape {image.shape}, expected [C, {extents[0]}, {extents[1]}]")
    return np.concatenate([np.asarray(i, dtype=np.float64) for i in images], axis=0)


def unstack_channels(stacked: np.ndarray, steps: int) -> list[np.ndarray]:
    if stacked.shape[0] % steps:
        raise TrackError(f"{stacked.shape[0]} channels do not split into {steps} steps")
    return list(np.split(stacked, steps, axis=0))


def select_camera(views: Sequence[CameraView]) -> CameraView:
    """The view showing the largest fraction of the pedestrian box; the first one on ties."""
    if not views:
        raise TrackError("select_camera needs at least one view")

    def visible(view: CameraView) -> float:
        x1, y1, x2, y2 = view.box2d
        w = max(0.0, min(x2, view.width) - max(x1, 0.0))
        h = max(0.0, min(y2, view.height) - max(y1, 0.0))
        return (w * h) / ((x2 - x1) * (y2 - y1))

    best = views[0]
    for view in views[1:]:
        if visible(view) > visible(best):
            best = view
    return best


# Sample assembly


def pedestrian_features(frames: Sequence[FrameRecord], mode: str, camera: CameraMeta) -> np.ndarray:
    if mode == "2d":
        extent = np.array([camera.width, camera.height, camera.width, camera.height], dtype=np.float64)
        coords = np.array([f.box2d for f in frames]) / extent
    else:
        if any(f.ped_global is None for f in frames):
            raise TrackError("3d pedestrian motion needs ped_global on every frame")
        coords = np.array([f.ped_global for f in frames]) / MAP_EXTENT_M
    return np.concatenate([coords, compute_velocity(coords)], axis=1)


def vehicle_features(frames: Sequence[FrameRecord], mode: str) -> np.ndarray:
    if mode == "3d":
        if any(f.ego_global is None for f in frames):
            raise TrackError("3d ego motion needs ego_global on every frame")
        coords = np.array([f.ego_global for f in frames]) / MAP_EXTENT_M
        return np.concatenate([coords, compute_velocity(coords)], axis=1)
    if all(f.ego_speed is not None for f in frames):
        return np.array([[f.ego_speed / SPEED_SCALE] for f in frames])
    if all(f.driver_action is not None for f in frames):
        codes = np.array([f.driver_action for f in frames])
        return (codes[:, None] == np.arange(len(DRIVER_ACTIONS))[None, :]).astype(np.float64)
    raise TrackError("2d ego motion needs ego_speed (or driver_action) on every frame")


def _map_step(frame: FrameRecord, store: ImageStore, spec: SampleSpec) -> np.ndarray:
    height, width = spec.map_size
    if frame.map_raster is None:
        if spec.mode == "3d":
            raise TrackError("3d samples need a map_raster on every frame")
        return np.zeros((SEMANTIC_CLASSES, height, width))
    raster = store.load(frame.map_raster)
    if spec.mode == "2d":
        if raster.shape[0] != 1:
            raise TrackError(f"semantic map {frame.map_raster} must have 1 channel, has {raster.shape[0]}")
        return one_hot(resample(raster, spec.map_size, nearest=True), SEMANTIC_CLASSES)
    if raster.shape[0] != BEV_CHANNELS:
        raise TrackError(f"BEV map {frame.map_raster} must have {BEV_CHANNELS} channels, has {raster.shape[0]}")
    scale = 255.0 if raster.dtype == np.uint8 else 1.0
    return resample(raster, spec.map_size) / scale


def _scene_step(frame: FrameRecord, store: ImageStore, spec: SampleSpec) -> np.ndarray:
    if frame.scene_image is None:
        return np.zeros((SCENE_CHANNELS, *spec.scene_size))
    image = store.load(frame.scene_image)
    if image.shape[0] != SCENE_CHANNELS:
        raise TrackError(f"scene image {frame.scene_image} must have {SCENE_CHANNELS} channels")
    return extract_scene(image, frame.box2d, spec.scene_size)


def sample_observations(track: Track, store: ImageStore, spec: SampleSpec = SampleSpec()) -> list[ObservationSample]:
    clipped = clip_track(track)
    label = 1 if clipped.is_crossing else 0
    samples = []
    for number, window in enumerate(observation_windows(clipped, spec.obs_len, spec.tte_range, spec.overlap)):
        frames = clipped.frames[window.start : window.end + 1]
        samples.append(
            ObservationSample(
                map_stack=stack_channels([_map_step(f, store, spec) for f in frames]),
                scene_stack=stack_channels([_scene_step(f, store, spec) for f in frames]),
                ped_motion=pedestrian_features(frames, spec.mode, clipped.camera_meta),
                veh_motion=vehicle_features(frames, spec.mode),
                label=label,
                tte=window.tte,
                track_id=clipped.track_id,
                window_index=number,
            )
        )
    return samples


def prepare_samples(
    tracks: Sequence[Track],
    store: ImageStore,
    spec: SampleSpec = SampleSpec(),
    *,
    workers: int = MAX_WORKERS,
    on_track: Callable[[Track], None] | None = None,
) -> list[ObservationSample]:
    """Samples of every track, in track order; tracks are processed concurrently."""

    def run(track: Track) -> list[ObservationSample]:
        try:
            result = sample_observations(track, store, spec)
        except TrackError as exc:
            raise TrackError(f"track {track.track_id}: {exc}") from exc
        if on_track:
            on_track(track)
        return result

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(tracks) or 1))) as exe:
        per_track = list(exe.map(run, tracks))
    samples = [s for group in per_track for s in group]
    if samples:
        dims = {(s.ped_motion.shape, s.veh_motion.shape) for s in samples}
        if len(dims) > 1:
            raise TrackError(f"samples disagree on motion feature shapes: {sorted(dims)}")
    return samples


def split_tracks(
    tracks: Sequence[Track], train_fraction: float = TRAIN_FRACTION, seed: int = 0
) -> tuple[list[Track], list[Track]]:
    """Seeded track-level split; both parts keep input order."""
    n = len(tracks)
    if n < 2:
        return list(tracks), []
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, max(1, int(round(n * train_fraction))))
    chosen = set(order[:n_train].tolist())
    train = [t for i, t in enumerate(tracks) if i in chosen]
    test = [t for i, t in enumerate(tracks) if i not in chosen]
    return train, test


def summarize_tracks(tracks: Iterable[Track]) -> dict[str, int]:
    tracks = list(tracks)
    crossing = sum(t.is_crossing for t in tracks)
    return {"tracks": len(tracks), "crossing": crossing, "non_crossing": len(tracks) - crossing}


def summarize_samples(samples: Sequence[ObservationSample]) -> dict[str, float]:
    positives = sum(s.label for s in samples)
    return {
        "samples": len(samples),
        "positives": positives,
        "negatives": len(samples) - positives,
        "positive_fraction": positives / len(samples) if samples else 0.0,
    }
