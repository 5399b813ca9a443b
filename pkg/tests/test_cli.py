import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_track
from crossing_tool.cli import build_parser, main
from crossing_tool.constants import EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, TRAIN_FRACTION
from crossing_tool.dataset import load_dataset, write_dataset
from crossing_tool.imagery import ImageStore, write_sprite_sheet
from crossing_tool.metrics import read_scores
from crossing_tool.pipeline import split_tracks


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def dataset(tmp_path, run_config_file):
    config = run_config_file()
    out = tmp_path / "data" / "tracks.ndjson"
    assert run("generate", "--config", config, "--seed", 11, "--out", out) == EXIT_OK
    return config, out


def test_parser_lists_every_command():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"generate", "prepare", "train", "eval", "predict", "interpolate", "ablate"}
    assert build_parser().prog == "crossing"


def test_version_and_usage_errors():
    assert run("--version") == EXIT_OK
    assert run("train", "--bogus") == EXIT_USAGE
    assert run("fly") == EXIT_USAGE


def test_generate_is_deterministic(tmp_path, run_config_file):
    config = run_config_file()
    for name in ("a", "b"):
        assert run("generate", "--config", config, "--seed", 3, "--out", tmp_path / name / "d.ndjson") == EXIT_OK
    assert (tmp_path / "a" / "d.ndjson").read_bytes() == (tmp_path / "b" / "d.ndjson").read_bytes()
    assert len(load_dataset(tmp_path / "a" / "d.ndjson", "3d")) == 10


def test_generate_flags_override_config(tmp_path, run_config_file):
    out = tmp_path / "d.ndjson"
    code = run("generate", "--config", run_config_file(), "--n-tracks", 6, "--rule", "ped_motion_only", "--out", out)
    assert code == EXIT_OK
    assert len(load_dataset(out)) == 6


def test_bad_config_is_a_usage_error(tmp_path, run_config_file):
    assert run("generate", "--config", run_config_file(optimizer={}), "--out", tmp_path / "d.ndjson") == EXIT_USAGE
    assert run("generate", "--config", tmp_path / "absent.json") == EXIT_USAGE


def test_train_needs_a_dataset(tmp_path, run_config_file):
    assert run("train", "--config", run_config_file(), "--out", tmp_path / "m.ckpt") == EXIT_USAGE


def test_missing_dataset_file(tmp_path, run_config_file):
    code = run("train", tmp_path / "absent.ndjson", "--config", run_config_file(), "--out", tmp_path / "m.ckpt")
    assert code == EXIT_RUNTIME


def test_prepare_lists_windows(tmp_path, dataset):
    config, data = dataset
    out = tmp_path / "windows.ndjson"
    assert run("prepare", data, "--config", config, "--out", out) == EXIT_OK
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert rows
    assert all(1.0 <= row["tte"] <= 2.0 for row in rows)
    assert {row["label"] for row in rows} == {0, 1}


def test_train_same_seed_same_checkpoint(tmp_path, dataset):
    config, data = dataset
    for name in ("a.ckpt", "b.ckpt"):
        assert run("train", data, "--config", config, "--seed", 5, "--out", tmp_path / name) == EXIT_OK
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_writes_epoch_log(tmp_path, dataset):
    config, data = dataset
    log = tmp_path / "train.log"
    code = run("train", data, "--config", config, "--epochs", 3, "--log", log, "--out", tmp_path / "m.ckpt")
    assert code == EXIT_OK
    lines = log.read_text(encoding="utf-8").splitlines()
    assert [line.split()[0] for line in lines] == ["epoch=1", "epoch=2", "epoch=3"]


def test_predict_then_eval(tmp_path, dataset):
    config, data = dataset
    ckpt = tmp_path / "m.ckpt"
    assert run("train", data, "--config", config, "--out", ckpt) == EXIT_OK

    scores_path = tmp_path / "scores.txt"
    assert run("predict", data, "--config", config, "--checkpoint", ckpt, "--out", scores_path) == EXIT_OK
    windows = tmp_path / "windows.ndjson"
    assert run("prepare", data, "--config", config, "--out", windows) == EXIT_OK
    scores, labels = read_scores(scores_path.read_text(encoding="utf-8"))
    assert len(scores) == len(windows.read_text(encoding="utf-8").splitlines())
    assert all(0.0 <= s <= 1.0 for s in scores)

    from_checkpoint = tmp_path / "report_a.txt"
    from_scores = tmp_path / "report_b.txt"
    assert run("eval", data, "--config", config, "--checkpoint", ckpt, "--out", from_checkpoint) == EXIT_OK
    assert run("eval", "--scores", scores_path, "--out", from_scores) == EXIT_OK
    assert from_checkpoint.read_text(encoding="utf-8") == from_scores.read_text(encoding="utf-8")
    assert from_scores.read_text(encoding="utf-8").startswith("acc=")


def test_baseline_checkpoint_predicts(tmp_path, dataset):
    config, data = dataset
    ckpt = tmp_path / "b.ckpt"
    assert run("train", data, "--config", config, "--model", "baseline", "--out", ckpt) == EXIT_OK
    out = tmp_path / "scores.txt"
    assert run("predict", data, "--config", config, "--checkpoint", ckpt, "--out", out) == EXIT_OK
    assert read_scores(out.read_text(encoding="utf-8"))[0]


def test_mode_mismatch_is_a_data_error(tmp_path, dataset):
    config, data = dataset
    ckpt = tmp_path / "m.ckpt"
    assert run("train", data, "--config", config, "--out", ckpt) == EXIT_OK
    code = run("predict", data, "--mode", "2d", "--checkpoint", ckpt, "--out", tmp_path / "s.txt")
    assert code == EXIT_DATA


def test_eval_needs_an_input():
    assert run("eval") == EXIT_USAGE


def test_malformed_scores_file(tmp_path):
    path = tmp_path / "scores.txt"
    path.write_text("track_id=a window=0 score=high label=1\n", encoding="utf-8")
    assert run("eval", "--scores", path) == EXIT_DATA


def test_single_class_training_data(tmp_path, run_config_file):
    data = tmp_path / "calm.ndjson"
    write_dataset(data, [make_track(40, track_id=f"t{i}") for i in range(3)])
    code = run("train", data, "--config", run_config_file(mode="2d"), "--out", tmp_path / "m.ckpt")
    assert code == EXIT_DATA
    assert not (tmp_path / "m.ckpt").exists()


def test_interpolate_golden(tmp_path, golden_path):
    out = tmp_path / "dense.ndjson"
    assert run("interpolate", golden_path, "--out", out) == EXIT_OK
    a, b, c = load_dataset(out)
    assert [len(t.frames) for t in (a, b, c)] == [11, 6, 16]
    assert a.frame_rate == 10.0
    assert a.crossing_frame == 10


def test_ablate_reports_each_subset(tmp_path, dataset):
    config, data = dataset
    tracks = load_dataset(data)
    seed = next(
        s
        for s in range(100)
        if all(
            {t.is_crossing for t in part} == {True, False}
            for part in split_tracks(tracks, TRAIN_FRACTION, s)
        )
    )
    out = tmp_path / "ablation.txt"
    code = run("ablate", data, "--config", config, "--seed", seed, "--subsets", "ped", "all", "--out", out)
    assert code == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert [line.split()[0] for line in lines] == ["subset=ped", "subset=all"]
    assert all(" auc=" in line for line in lines)


def test_keyframe_tracks_need_upsampling(golden_path):
    assert run("prepare", golden_path) == EXIT_DATA


def test_interpolated_refs_resolve_from_the_output(tmp_path):
    sheet = [np.full((3, 4, 4), 40 * k, dtype=np.uint8) for k in range(3)]
    write_sprite_sheet(tmp_path / "src" / "maps" / "t.png", sheet)
    track = make_track(3, frame_rate=2.0)
    frames = tuple(replace(f, map_raster=f"maps/t.png#{k}/3") for k, f in enumerate(track.frames))
    write_dataset(tmp_path / "src" / "keys.ndjson", [replace(track, frames=frames)])

    out = tmp_path / "elsewhere" / "dense" / "tracks.ndjson"
    assert run("interpolate", tmp_path / "src" / "keys.ndjson", "--out", out) == EXIT_OK
    (dense,) = load_dataset(out)
    store = ImageStore(out.parent)
    assert dense.frames[0].map_raster == "../../src/maps/t.png#0/3"
    np.testing.assert_array_equal(store.load(dense.frames[0].map_raster), sheet[0])
    np.testing.assert_array_equal(store.load(dense.frames[-1].map_raster), sheet[2])


def test_config_error_prints_command_usage(tmp_path, run_config_file, capsys):
    code = run("generate", "--config", run_config_file(optimizer={}), "--out", tmp_path / "d.ndjson")
    assert code == EXIT_USAGE
    out = capsys.readouterr().out
    assert "usage: crossing generate" in out
    assert "crossing generate --help" in out
