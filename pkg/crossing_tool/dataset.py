"""Newline-delimited JSON track datasets.

One track per line::

    {"format_version": 1, "track_id": "t0", "frame_rate": 10.0,
     "label": "crossing", "crossing_frame": 25,
     "camera_meta": {"width": 1920, "height": 1080},
     "frames": [{"time": 0.0, "box2d": [x1, y1, x2, y2],
                 "ped_global": [x, y], "ego_global": [x, y], "ego_speed": 4.2,
                 "driver_action": 1, "map_raster": "maps/t0.png#0/30",
                 "scene_image": "scenes/t0.png#0/30"}, ...]}

Optional frame fields may be omitted or null.  A frame may carry
``"cameras": [{"name", "box2d", "width", "height", "scene_image"}, ...]``
instead of ``box2d``/``scene_image``; the best view is selected on load.
"""

import json
import math
from pathlib import Path
from typing import Any, Iterable

from .constants import DATASET_FORMAT_VERSION, DRIVER_ACTIONS
from .pipeline import MODES, CameraMeta, CameraView, FrameRecord, Track, TrackError, select_camera
from .storage import write_text


class DatasetError(ValueError):
    """Raised when a dataset record violates the schema."""

    def __init__(self, index: int, field: str, reason: str):
        super().__init__(f"record {index}: field '{field}': {reason}")
        self.index = index
        self.field = field
        self.reason = reason


def _number(value: Any, index: int, field: str, where: str = "") -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise DatasetError(index, field, f"expected a finite number{where}, got {value!r}")
    return float(value)


def _numbers(value: Any, index: int, field: str, sizes: tuple[int, ...], where: str = "") -> tuple[float, ...]:
    if not isinstance(value, list) or len(value) not in sizes:
        expected = " or ".join(map(str, sizes))
        raise DatasetError(index, field, f"expected a list of {expected} numbers{where}, got {value!r}")
    return tuple(_number(v, index, field, where) for v in value)


def _positive_int(value: Any, index: int, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise DatasetError(index, field, f"expected a positive integer, got {value!r}")
    return value


def _optional_str(value: Any, index: int, field: str, where: str) -> str | None:
    if value is not None and not isinstance(value, str):
        raise DatasetError(index, field, f"expected a string reference{where}, got {value!r}")
    return value


def _parse_view(raw: Any, index: int, where: str) -> CameraView:
    if not isinstance(raw, dict):
        raise DatasetError(index, "cameras", f"expected an object per view{where}")
    for key in ("box2d", "width", "height"):
        if key not in raw:
            raise DatasetError(index, key, f"missing in camera view{where}")
    try:
        return CameraView(
            name=str(raw.get("name", "")),
            box2d=_numbers(raw["box2d"], index, "box2d", (4,), where),
            width=_positive_int(raw["width"], index, "width"),
            height=_positive_int(raw["height"], index, "height"),
            scene_image=_optional_str(raw.get("scene_image"), index, "scene_image", where),
        )
    except TrackError as exc:
        raise DatasetError(index, "box2d", f"{exc}{where}") from None


def _parse_frame(raw: Any, index: int, number: int, mode: str | None) -> tuple[FrameRecord, CameraMeta | None]:
    where = f" in frame {number}"
    if not isinstance(raw, dict):
        raise DatasetError(index, "frames", f"expected an object{where}")
    if "time" not in raw:
        raise DatasetError(index, "time", f"missing{where}")
    camera = None
    scene_image = _optional_str(raw.get("scene_image"), index, "scene_image", where)
    if raw.get("cameras"):
        if not isinstance(raw["cameras"], list):
            raise DatasetError(index, "cameras", f"expected a list of views{where}")
        view = select_camera([_parse_view(v, index, where) for v in raw["cameras"]])
        box = view.box2d
        scene_image = view.scene_image
        camera = CameraMeta(view.width, view.height)
    elif "box2d" not in raw or raw["box2d"] is None:
        raise DatasetError(index, "box2d", f"missing{where}")
    else:
        box = _numbers(raw["box2d"], index, "box2d", (4,), where)

    values: dict[str, Any] = {}
    for key in ("ped_global", "ego_global"):
        if raw.get(key) is not None:
            values[key] = _numbers(raw[key], index, key, (2, 3), where)
    if raw.get("ego_speed") is not None:
        values["ego_speed"] = _number(raw["ego_speed"], index, "ego_speed", where)
    action = raw.get("driver_action")
    if action is not None:
        if isinstance(action, bool) or not isinstance(action, int) or not 0 <= action < len(DRIVER_ACTIONS):
            raise DatasetError(index, "driver_action", f"expected an integer in [0, {len(DRIVER_ACTIONS)}){where}")
        values["driver_action"] = action
    values["map_raster"] = _optional_str(raw.get("map_raster"), index, "map_raster", where)

    if mode == "2d" and "ego_speed" not in values and "driver_action" not in values:
        raise DatasetError(index, "ego_speed", f"required in 2d mode{where}")
    if mode == "3d":
        for key in ("ped_global", "ego_global", "map_raster"):
            if values.get(key) is None:
                raise DatasetError(index, key, f"required in 3d mode{where}")

    try:
        frame = FrameRecord(
            time=_number(raw["time"], index, "time", where), box2d=box, scene_image=scene_image, **values
        )
    except TrackError as exc:
        raise DatasetError(index, "box2d", f"{exc}{where}") from None
    return frame, camera


def parse_record(record: Any, index: int, mode: str | None = None) -> Track:
    if not isinstance(record, dict):
        raise DatasetError(index, "<record>", "expected a JSON object")
    version = record.get("format_version")
    if version is None:
        raise DatasetError(index, "format_version", "missing")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(index, "format_version", f"unsupported version {version!r}")
    for key in ("track_id", "frame_rate", "label", "frames"):
        if key not in record:
            raise DatasetError(index, key, "missing")
    if not isinstance(record["track_id"], str) or not record["track_id"]:
        raise DatasetError(index, "track_id", "expected a non-empty string")
    frame_rate = _number(record["frame_rate"], index, "frame_rate")
    if frame_rate <= 0:
        raise DatasetError(index, "frame_rate", "must be positive")
    crossing_frame = record.get("crossing_frame")
    if crossing_frame is not None and (isinstance(crossing_frame, bool) or not isinstance(crossing_frame, int)):
        raise DatasetError(index, "crossing_frame", f"expected an integer or null, got {crossing_frame!r}")
    if not isinstance(record["frames"], list) or not record["frames"]:
        raise DatasetError(index, "frames", "expected a non-empty list")

    parsed = [_parse_frame(raw, index, n, mode) for n, raw in enumerate(record["frames"])]
    frames = [frame for frame, _ in parsed]
    views = [camera for _, camera in parsed if camera is not None]

    meta = record.get("camera_meta")
    if meta is not None:
        if not isinstance(meta, dict):
            raise DatasetError(index, "camera_meta", "expected an object with width and height")
        camera_meta = CameraMeta(
            _positive_int(meta.get("width"), index, "camera_meta"),
            _positive_int(meta.get("height"), index, "camera_meta"),
        )
    elif views:
        camera_meta = views[0]
    else:
        raise DatasetError(index, "camera_meta", "missing")
    if any(v != camera_meta for v in views):
        raise DatasetError(index, "cameras", f"selected views disagree with camera extents {camera_meta}")

    try:
        return Track(
            track_id=record["track_id"],
            frame_rate=frame_rate,
            frames=tuple(frames),
            label=record["label"],
            camera_meta=camera_meta,
            crossing_frame=crossing_frame,
        )
    except TrackError as exc:
        field = "label" if "label" in str(exc) else "crossing_frame" if "crossing_frame" in str(exc) else "frames"
        raise DatasetError(index, field, str(exc)) from None


def load_dataset(path: Path, mode: str | None = None) -> list[Track]:
    """Validated tracks of an NDJSON file; ``mode`` adds the 2d or 3d field requirements."""
    if mode is not None and mode not in MODES:
        raise ValueError(f"Unknown mode '{mode}'. Use one of: {', '.join(MODES)}")
    text = Path(path).read_text(encoding="utf-8")
    tracks = []
    seen: set[str] = set()
    for index, line in enumerate(l for l in text.splitlines() if l.strip()):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(index, "<json>", str(exc)) from None
        track = parse_record(record, index, mode)
        if track.track_id in seen:
            raise DatasetError(index, "track_id", f"duplicate id '{track.track_id}'")
        seen.add(track.track_id)
        tracks.append(track)
    return tracks


def _frame_to_record(frame: FrameRecord) -> dict[str, Any]:
    record: dict[str, Any] = {"time": frame.time, "box2d": list(frame.box2d)}
    for key in ("ped_global", "ego_global"):
        value = getattr(frame, key)
        if value is not None:
            record[key] = list(value)
    for key in ("ego_speed", "driver_action", "map_raster", "scene_image"):
        value = getattr(frame, key)
        if value is not None:
            record[key] = value
    return record


def track_to_record(track: Track) -> dict[str, Any]:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "track_id": track.track_id,
        "frame_rate": track.frame_rate,
        "label": track.label,
        "crossing_frame": track.crossing_frame,
        "camera_meta": {"width": track.camera_meta.width, "height": track.camera_meta.height},
        "frames": [_frame_to_record(f) for f in track.frames],
    }


def dumps_tracks(tracks: Iterable[Track]) -> str:
    return "".join(json.dumps(track_to_record(t), sort_keys=True, separators=(",", ":")) + "\n" for t in tracks)


def write_dataset(path: Path, tracks: Iterable[Track]) -> None:
    write_text(Path(path), dumps_tracks(tracks))
