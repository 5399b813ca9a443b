import json

import pytest

from crossing_tool.dataset import DatasetError, dumps_tracks, load_dataset, parse_record, write_dataset
from crossing_tool.pipeline import CROSSING, NOT_CROSSING, CameraMeta


def record(**overrides):
    data = {
        "format_version": 1,
        "track_id": "r",
        "frame_rate": 10.0,
        "label": NOT_CROSSING,
        "camera_meta": {"width": 100, "height": 80},
        "frames": [{"time": 0.0, "box2d": [1, 2, 3, 4], "ego_speed": 3.0}],
    }
    data.update(overrides)
    return data


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_empty_file(tmp_path):
    path = tmp_path / "empty.ndjson"
    path.write_text("\n\n", encoding="utf-8")
    assert load_dataset(path) == []


class TestGolden:
    def test_known_values(self, golden_path):
        a, b, c = load_dataset(golden_path, "3d")
        assert a.track_id == "a" and a.label == CROSSING and a.crossing_frame == 2
        assert a.frame_rate == 2.0
        assert a.frames[0].box2d == (100.0, 100.0, 140.0, 180.0)
        assert [f.ped_global for f in a.frames] == [(10.0, 6.0), (10.0, 5.5), (10.0, 5.0)]
        assert a.frames[2].scene_image == "scenes/a.png#2/3"
        assert a.camera_meta == CameraMeta(1920, 1080)
        assert [f.driver_action for f in b.frames] == [2, 3]
        assert [f.ego_speed for f in b.frames] == [6.5, 6.0]
        assert b.frames[1].map_raster == "maps/b.rawt#1"
        assert c.crossing_frame is None and not c.is_crossing
        assert len(c.frames) == 4
        assert c.frames[3].ped_global == (3.0, 7.0, 0.0)

    def test_write_and_reload(self, golden_path, tmp_path):
        tracks = load_dataset(golden_path)
        out = tmp_path / "copy.ndjson"
        write_dataset(out, tracks)
        assert load_dataset(out) == tracks
        assert out.read_text(encoding="utf-8") == dumps_tracks(tracks)


class TestSchemaErrors:
    def test_missing_box_names_field_and_index(self, tmp_path):
        bad = record(frames=[{"time": 0.0, "ego_speed": 1.0}])
        path = write_lines(tmp_path / "d.ndjson", [record(track_id="ok"), bad])
        with pytest.raises(DatasetError, match="record 1: field 'box2d'") as info:
            load_dataset(path)
        assert info.value.index == 1
        assert info.value.field == "box2d"

    def test_format_version_required(self):
        data = record()
        del data["format_version"]
        with pytest.raises(DatasetError, match="format_version"):
            parse_record(data, 0)
        with pytest.raises(DatasetError, match="unsupported version 2"):
            parse_record(record(format_version=2), 0)

    @pytest.mark.parametrize("key", ["track_id", "frame_rate", "label", "frames"])
    def test_required_keys(self, key):
        data = record()
        del data[key]
        with pytest.raises(DatasetError, match=f"field '{key}': missing"):
            parse_record(data, 4)

    def test_2d_mode_needs_speed_or_action(self):
        data = record(frames=[{"time": 0.0, "box2d": [1, 2, 3, 4]}])
        parse_record(data, 0)
        with pytest.raises(DatasetError, match="field 'ego_speed': required in 2d mode in frame 0"):
            parse_record(data, 0, "2d")
        data["frames"][0]["driver_action"] = 1
        assert parse_record(data, 0, "2d").frames[0].driver_action == 1

    def test_3d_mode_needs_globals_and_maps(self):
        data = record(frames=[{"time": 0.0, "box2d": [1, 2, 3, 4], "ped_global": [1, 2], "ego_global": [0, 0]}])
        with pytest.raises(DatasetError, match="field 'map_raster'"):
            parse_record(data, 0, "3d")

    def test_bad_box(self):
        with pytest.raises(DatasetError, match="field 'box2d'"):
            parse_record(record(frames=[{"time": 0.0, "box2d": [3, 2, 1, 4]}]), 0)
        with pytest.raises(DatasetError, match="list of 4 numbers"):
            parse_record(record(frames=[{"time": 0.0, "box2d": [1, 2, 3]}]), 0)

    def test_non_numeric_value(self):
        with pytest.raises(DatasetError, match="field 'ego_speed'"):
            parse_record(record(frames=[{"time": 0.0, "box2d": [1, 2, 3, 4], "ego_speed": "fast"}]), 0)

    def test_crossing_track_needs_crossing_frame(self):
        with pytest.raises(DatasetError, match="field 'crossing_frame'"):
            parse_record(record(label=CROSSING), 0)

    def test_unknown_label(self):
        with pytest.raises(DatasetError, match="field 'label'"):
            parse_record(record(label="maybe"), 0)

    def test_duplicate_ids(self, tmp_path):
        path = write_lines(tmp_path / "d.ndjson", [record(), record()])
        with pytest.raises(DatasetError, match="record 1: field 'track_id': duplicate id 'r'"):
            load_dataset(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "d.ndjson"
        path.write_text('{"format_version": 1,\n', encoding="utf-8")
        with pytest.raises(DatasetError, match="field '<json>'"):
            load_dataset(path)

    def test_missing_camera_meta(self):
        data = record()
        del data["camera_meta"]
        with pytest.raises(DatasetError, match="field 'camera_meta'"):
            parse_record(data, 0)


class TestCameras:
    def test_best_view_supplies_box_and_extents(self):
        views = [
            {"name": "front", "box2d": [90, 0, 110, 40], "width": 100, "height": 80, "scene_image": "front.png"},
            {"name": "left", "box2d": [10, 0, 30, 40], "width": 100, "height": 80, "scene_image": "left.png"},
        ]
        data = record(frames=[{"time": 0.0, "cameras": views, "ego_speed": 1.0}])
        del data["camera_meta"]
        track = parse_record(data, 0)
        assert track.frames[0].box2d == (10.0, 0.0, 30.0, 40.0)
        assert track.frames[0].scene_image == "left.png"
        assert track.camera_meta == CameraMeta(100, 80)

    def test_view_missing_extent(self):
        data = record(frames=[{"time": 0.0, "cameras": [{"box2d": [0, 0, 1, 1], "width": 10}]}])
        with pytest.raises(DatasetError, match="field 'height'"):
            parse_record(data, 0)
