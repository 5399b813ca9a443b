import json
from pathlib import Path

import numpy as np
import pytest

from crossing_tool.model import ModelConfig
from crossing_tool.pipeline import CROSSING, NOT_CROSSING, CameraMeta, FrameRecord, ObservationSample, Track
from crossing_tool.synth import ScenarioConfig, generate

DATA_DIR = Path(__file__).parent / "data"

TINY_MODEL = {
    "profile": "test",
    "map_size": [8, 8],
    "scene_size": [8, 8],
    "lstm_hidden": 4,
    "visual_embed": 8,
    "penult_dense": 4,
    "filters": [2, 3],
}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return ModelConfig.test_profile()


@pytest.fixture
def golden_path():
    return DATA_DIR / "golden_tracks.ndjson"


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    """Twelve 3d tracks with 16x16 maps; the label follows pedestrian motion only."""
    out = tmp_path_factory.mktemp("synthetic") / "tracks.ndjson"
    config = ScenarioConfig(n_tracks=12, seed=3, label_rule="ped_motion_only", noise_level=0.0, map_size=(16, 16))
    generate(config, out)
    return out


@pytest.fixture
def run_config_file(tmp_path):
    def write(**sections):
        data = {
            "model": dict(TINY_MODEL),
            "train": {"epochs": 2, "learning_rate": 0.001},
            "scenario": {"n_tracks": 10, "map_size": [16, 16], "noise_level": 0.0},
        }
        for key, value in sections.items():
            data[key] = {**data.get(key, {}), **value} if isinstance(value, dict) else value
        path = tmp_path / "run.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write


def make_track(
    n_frames: int,
    crossing_frame: int | None = None,
    frame_rate: float = 10.0,
    track_id: str = "t",
) -> Track:
    frames = [
        FrameRecord(
            time=k / frame_rate,
            box2d=(10.0 + k, 20.0, 30.0 + k, 60.0),
            ped_global=(5.0 + 0.1 * k, 4.0 - 0.2 * k),
            ego_global=(0.5 * k, -1.75),
            ego_speed=5.0,
        )
        for k in range(n_frames)
    ]
    return Track(
        track_id=track_id,
        frame_rate=frame_rate,
        frames=tuple(frames),
        label=CROSSING if crossing_frame is not None else NOT_CROSSING,
        camera_meta=CameraMeta(100, 80),
        crossing_frame=crossing_frame,
    )


def make_samples(config: ModelConfig, n: int, rng: np.random.Generator, separable: bool = True) -> list:
    """Random inputs of the config's shapes; with ``separable`` the motion features carry the label."""
    labels = np.arange(n) % 2
    samples = []
    for i, label in enumerate(labels):
        ped = rng.normal(0.0, 0.1, size=(config.obs_len, config.ped_feature_dim))
        if separable:
            ped += 0.5 if label else -0.5
        samples.append(
            ObservationSample(
                map_stack=rng.uniform(0.0, 1.0, size=(config.map_channels, *config.map_size)),
                scene_stack=rng.uniform(0.0, 1.0, size=(config.scene_channels, *config.scene_size)),
                ped_motion=ped,
                veh_motion=rng.normal(0.0, 0.1, size=(config.obs_len, config.veh_feature_dim)),
                label=int(label),
                tte=1.0,
                track_id=f"s{i}",
                window_index=0,
            )
        )
    return samples
