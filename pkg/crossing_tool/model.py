"""Hybrid feedforward + recurrent crossing predictor.

Visual branch: channel-stacked maps and local scene crops go through conv
encoders that all land on ``[wide, H/8, W/8]``; the two feature maps are
concatenated on the channel axis, fused by one more conv, flattened into the
visual embedding and reweighted by the visual attention module (VAM).

Dynamics branch: pedestrian and ego-vehicle motion run through two LSTMs whose
per-step hidden states are concatenated feature-wise and summarised by the
dynamics attention module (DAM) with the last step as query.

Head: ``concat(VAM, DAM) -> dense + relu -> dense -> sigmoid``.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .constants import (
    ATROUS_RATES,
    BASE_FILTERS,
    BEV_CHANNELS,
    ENCODER_DOWNSAMPLE,
    INPUT_SIZE,
    LSTM_HIDDEN,
    MAP_STRATEGIES,
    OBS_LEN,
    PENULT_DENSE,
    SCENE_CHANNELS,
    VISUAL_EMBED,
    WIDE_FILTERS,
)
from .kernels import ConvSpec, LSTMParams, conv2d, conv2d_transpose, dense, lstm_sequence, softmax
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    einsum,
    flatten,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    stack,
    tanh,
)


class ConfigError(ValueError):
    """Raised when a configuration value is invalid."""


MODALITIES = ("map", "scene", "ped", "veh")

ABLATION_SUBSETS: dict[str, tuple[str, ...]] = {
    "scene": ("scene",),
    "map+scene": ("map", "scene"),
    "ped": ("ped",),
    "ped+veh": ("ped", "veh"),
    "all": MODALITIES,
}

_BRANCH_PREFIXES = {
    "map": ("map.",),
    "scene": ("scene.",),
    "ped": ("ped_lstm.",),
    "veh": ("veh_lstm.",),
}


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    h, w = value
    return int(h), int(w)


@dataclass(frozen=True)
class ModelConfig:
    map_strategy: str = "atrous"
    obs_len: int = OBS_LEN
    map_size: tuple[int, int] = INPUT_SIZE
    map_channels_per_step: int = BEV_CHANNELS
    scene_size: tuple[int, int] = INPUT_SIZE
    scene_channels_per_step: int = SCENE_CHANNELS
    lstm_hidden: int = LSTM_HIDDEN
    visual_embed: int = VISUAL_EMBED
    penult_dense: int = PENULT_DENSE
    ped_feature_dim: int = 8
    veh_feature_dim: int = 1
    filters: tuple[int, int] = (BASE_FILTERS, WIDE_FILTERS)
    atrous_rates: tuple[int, int, int] = ATROUS_RATES
    profile: str = "production"

    def __post_init__(self):
        object.__setattr__(self, "map_size", _pair(self.map_size))
        object.__setattr__(self, "scene_size", _pair(self.scene_size))
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "atrous_rates", tuple(int(r) for r in self.atrous_rates))
        if self.map_strategy not in MAP_STRATEGIES:
            raise ConfigError(
                f"Unknown map strategy '{self.map_strategy}'. Use one of: {', '.join(MAP_STRATEGIES)}"
            )
        if self.profile not in {"production", "test"}:
            raise ConfigError(f"Unknown profile '{self.profile}'. Use 'production' or 'test'")
        for name in (
            "obs_len",
            "map_channels_per_step",
            "scene_channels_per_step",
            "lstm_hidden",
            "visual_embed",
            "penult_dense",
            "ped_feature_dim",
            "veh_feature_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.filters) != 2 or min(self.filters) < 1:
            raise ConfigError(f"filters must be two positive counts, got {self.filters}")
        if len(self.atrous_rates) != 3 or min(self.atrous_rates) < 1:
            raise ConfigError(f"atrous_rates must be three positive rates, got {self.atrous_rates}")
        for label, size in (("map_size", self.map_size), ("scene_size", self.scene_size)):
            if size[0] % ENCODER_DOWNSAMPLE or size[1] % ENCODER_DOWNSAMPLE or min(size) < 1:
                raise ConfigError(f"{label} {size} must be positive multiples of {ENCODER_DOWNSAMPLE}")
        if self.map_size != self.scene_size:
            raise ConfigError(f"map_size {self.map_size} and scene_size {self.scene_size} must match for fusion")
        if self.profile == "production":
            expected = {
                "obs_len": OBS_LEN,
                "lstm_hidden": LSTM_HIDDEN,
                "visual_embed": VISUAL_EMBED,
                "penult_dense": PENULT_DENSE,
                "filters": (BASE_FILTERS, WIDE_FILTERS),
            }
            for name, value in expected.items():
                if getattr(self, name) != value:
                    raise ConfigError(
                        f"production profile requires {name}={value}, got {getattr(self, name)}"
                    )

    @classmethod
    def test_profile(cls, **overrides) -> "ModelConfig":
        values = dict(
            map_size=(8, 8),
            scene_size=(8, 8),
            lstm_hidden=4,
            visual_embed=8,
            penult_dense=4,
            filters=(2, 3),
            ped_feature_dim=4,
            veh_feature_dim=2,
            profile="test",
        )
        values.update(overrides)
        return cls(**values)

    @property
    def map_channels(self) -> int:
        return self.map_channels_per_step * self.obs_len

    @property
    def scene_channels(self) -> int:
        return self.scene_channels_per_step * self.obs_len

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.map_size[0] // ENCODER_DOWNSAMPLE, self.map_size[1] // ENCODER_DOWNSAMPLE

    @property
    def dynamics_dim(self) -> int:
        return 2 * self.lstm_hidden

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class BaselineConfig:
    """Trajectory-only forecaster: one LSTM over pedestrian coordinates and a dense output."""

    coord_dim: int = 4
    lstm_hidden: int = LSTM_HIDDEN
    obs_len: int = OBS_LEN

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "BaselineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown baseline config keys: {', '.join(sorted(unknown))}")
        return cls(**data)


NetworkConfig = ModelConfig | BaselineConfig


# Parameters


class ModelParams(Mapping[str, Tensor]):
    """Named parameter tensors; iteration order is sorted by name."""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors = {name: as_tensor(t) for name, t in tensors.items()}
        for name, t in self._tensors.items():
            t.name = name

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"No parameter named '{name}'") from None

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def census(self) -> dict[str, tuple[int, ...]]:
        return {name: self[name].shape for name in self}

    def copy(self) -> "ModelParams":
        return ModelParams({name: Tensor(self[name].data) for name in self})

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: self[name].grad if self[name].grad is not None else np.zeros(self[name].shape)
            for name in self
        }


def is_weight(name: str) -> bool:
    return not name.endswith("bias")


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_channels: int
    spec: ConvSpec
    transpose: bool = False

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        kh, kw = self.spec.kernel
        if self.transpose:
            return self.in_channels, self.spec.out_channels, kh, kw
        return self.spec.out_channels, self.in_channels, kh, kw


def map_layers(config: ModelConfig, strategy: str | None = None) -> list[ConvLayer]:
    strategy = strategy or config.map_strategy
    base, wide = config.filters
    c = config.map_channels
    if strategy == "sequential":
        return [
            ConvLayer("map.conv1", c, ConvSpec.same(base, 5, 2)),
            ConvLayer("map.conv2", base, ConvSpec.same(wide, 3, 2)),
            ConvLayer("map.conv3", wide, ConvSpec.same(wide, 3, 2)),
        ]
    if strategy == "atrous":
        r1, r2, r3 = config.atrous_rates
        return [
            ConvLayer("map.atrous1", c, ConvSpec.same(base, 3, 1, r1)),
            ConvLayer("map.atrous2", base, ConvSpec.same(base, 3, 1, r2)),
            ConvLayer("map.atrous3", base, ConvSpec.same(wide, 3, 1, r3)),
            ConvLayer("map.reduce", wide, ConvSpec.same(wide, 3, ENCODER_DOWNSAMPLE)),
        ]
    if strategy == "multiscale":
        return [
            ConvLayer("map.conv1", c, ConvSpec.same(base, 5, 2)),
            ConvLayer("map.conv2", base, ConvSpec.same(wide, 3, 2)),
            ConvLayer("map.conv3", wide, ConvSpec.same(wide, 3, 2)),
            ConvLayer("map.upsample", wide, ConvSpec(wide, 4, stride=4), transpose=True),
            ConvLayer("map.joint", base + wide, ConvSpec.same(wide, 3, 4)),
        ]
    raise ConfigError(f"Unknown map strategy '{strategy}'. Use one of: {', '.join(MAP_STRATEGIES)}")


def scene_layers(config: ModelConfig) -> list[ConvLayer]:
    base, wide = config.filters
    return [
        ConvLayer("scene.conv1", config.scene_channels, ConvSpec.same(base, 5, 2)),
        ConvLayer("scene.conv2", base, ConvSpec.same(wide, 3, 2)),
        ConvLayer("scene.conv3", wide, ConvSpec.same(wide, 3, 2)),
    ]


def fusion_layer(config: ModelConfig) -> ConvLayer:
    wide = config.filters[1]
    return ConvLayer("fusion.conv", 2 * wide, ConvSpec.same(wide, 3, 1))


def _lstm_shapes(prefix: str, input_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.weight_ih": (4 * hidden, input_dim),
        f"{prefix}.weight_hh": (4 * hidden, hidden),
        f"{prefix}.bias": (4 * hidden,),
    }


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    if isinstance(config, BaselineConfig):
        shapes = _lstm_shapes("tf.lstm", config.coord_dim, config.lstm_hidden)
        shapes["tf.out.weight"] = (1, config.lstm_hidden)
        shapes["tf.out.bias"] = (1,)
        return shapes

    shapes: dict[str, tuple[int, ...]] = {}
    for layer in map_layers(config) + scene_layers(config) + [fusion_layer(config)]:
        shapes[f"{layer.name}.weight"] = layer.weight_shape
        shapes[f"{layer.name}.bias"] = (layer.spec.out_channels,)
    fh, fw = config.feature_size
    embed, hidden = config.visual_embed, config.lstm_hidden
    shapes["visual.embed.weight"] = (embed, config.filters[1] * fh * fw)
    shapes["visual.embed.bias"] = (embed,)
    shapes["vam.weight"] = (embed, embed)
    shapes["vam.bias"] = (embed,)
    shapes.update(_lstm_shapes("ped_lstm", config.ped_feature_dim, hidden))
    shapes.update(_lstm_shapes("veh_lstm", config.veh_feature_dim, hidden))
    shapes["dam.w_a"] = (2 * hidden, 2 * hidden)
    shapes["dam.w_c"] = (2 * hidden, 4 * hidden)
    shapes["head.penult.weight"] = (config.penult_dense, embed + 2 * hidden)
    shapes["head.penult.bias"] = (config.penult_dense,)
    shapes["head.out.weight"] = (1, config.penult_dense)
    shapes["head.out.bias"] = (1,)
    return shapes


def init_bound(shape: Sequence[int]) -> float:
    """Uniform fan-in/fan-out bound ``sqrt(6 / (fan_in + fan_out))``."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: NetworkConfig, seed: int) -> ModelParams:
    """Seeded initialisation; each tensor draws from its own name-keyed stream."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if not is_weight(name):
            data = np.zeros(shape)
            if "lstm" in name:
                hidden = shape[0] // 4
                data[hidden : 2 * hidden] = 1.0
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
            bound = init_bound(shape)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data)
    return ModelParams(tensors)


def default_l2_scope(config: NetworkConfig) -> tuple[str, ...]:
    if isinstance(config, BaselineConfig):
        return "tf.lstm.", "tf.out."
    return "ped_lstm.", "veh_lstm.", "head.out."


def frozen_prefixes(modalities: Sequence[str]) -> tuple[str, ...]:
    """Parameter-name prefixes that stay fixed when ``modalities`` excludes their inputs."""
    unknown = set(modalities) - set(MODALITIES)
    if unknown:
        raise ConfigError(f"Unknown modalities: {', '.join(sorted(unknown))}")
    frozen = [p for m in MODALITIES if m not in modalities for p in _BRANCH_PREFIXES[m]]
    if "map" not in modalities and "scene" not in modalities:
        frozen += ["fusion.", "visual.", "vam."]
    if "ped" not in modalities and "veh" not in modalities:
        frozen += ["dam."]
    return tuple(frozen)


def ablation_modalities(subset: str) -> tuple[str, ...]:
    try:
        return ABLATION_SUBSETS[subset]
    except KeyError:
        raise ConfigError(
            f"Unknown ablation subset '{subset}'. Use one of: {', '.join(ABLATION_SUBSETS)}"
        ) from None


# Visual branch

Activation = Callable[[Tensor], Tensor]


def _apply(x: Tensor, layer: ConvLayer, params: Mapping[str, Tensor], activation: Activation) -> Tensor:
    weight, bias = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
    if layer.transpose:
        out = conv2d_transpose(x, weight, layer.spec, bias)
    else:
        out = conv2d(x, weight, bias, layer.spec)
    return activation(out)


def _check_channels(op: str, x: Tensor, expected: int) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != expected:
        raise ShapeError(f"{op}: expected {expected} stacked channels, got input shape {x.shape}")


def encode_map(
    maps,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    strategy: str | None = None,
    activation: Activation = relu,
) -> Tensor:
    layers = map_layers(config, strategy)
    x = as_tensor(maps)
    _check_channels("encode_map", x, config.map_channels)
    if (strategy or config.map_strategy) == "multiscale":
        conv1, conv2, conv3, upsample, joint = layers
        fine = _apply(x, conv1, params, activation)
        coarse = _apply(_apply(fine, conv2, params, activation), conv3, params, activation)
        upsampled = _apply(coarse, upsample, params, activation)
        return _apply(concat([fine, upsampled], axis=-3), joint, params, activation)
    for layer in layers:
        x = _apply(x, layer, params, activation)
    return x


def encode_scene(
    scenes, params: Mapping[str, Tensor], config: ModelConfig, activation: Activation = relu
) -> Tensor:
    x = as_tensor(scenes)
    _check_channels("encode_scene", x, config.scene_channels)
    for layer in scene_layers(config):
        x = _apply(x, layer, params, activation)
    return x


def fuse_visual(
    map_feat: Tensor,
    scene_feat: Tensor,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    activation: Activation = relu,
) -> Tensor:
    if map_feat.shape[-2:] != scene_feat.shape[-2:]:
        raise ShapeError(
            f"fuse_visual: spatial extents differ: map {map_feat.shape[-2:]} vs scene {scene_feat.shape[-2:]}"
        )
    fused = _apply(concat([map_feat, scene_feat], axis=-3), fusion_layer(config), params, activation)
    flat = flatten(fused, start_axis=fused.ndim - 3)
    return dense(flat, params["visual.embed.weight"], params["visual.embed.bias"])


class VamResult(NamedTuple):
    output: Tensor
    attention: Tensor


def vam(z, params: Mapping[str, Tensor]) -> VamResult:
    z = as_tensor(z)
    scores = dense(z, params["vam.weight"], params["vam.bias"])
    attention = softmax(scores, axis=-1)
    return VamResult(mul(attention, z), attention)


# Dynamics branch


def _lstm(params: Mapping[str, Tensor], prefix: str) -> LSTMParams:
    return LSTMParams(params[f"{prefix}.weight_ih"], params[f"{prefix}.weight_hh"], params[f"{prefix}.bias"])


def encode_dynamics(
    ped_seq: Sequence[Tensor], veh_seq: Sequence[Tensor], params: Mapping[str, Tensor]
) -> list[Tensor]:
    if len(ped_seq) != len(veh_seq):
        raise ShapeError(f"encode_dynamics: {len(ped_seq)} pedestrian steps vs {len(veh_seq)} vehicle steps")
    ped_states = lstm_sequence(ped_seq, _lstm(params, "ped_lstm"))
    veh_states = lstm_sequence(veh_seq, _lstm(params, "veh_lstm"))
    return [concat([hp, hv], axis=-1) for hp, hv in zip(ped_states, veh_states)]


class DamResult(NamedTuple):
    output: Tensor
    attention: Tensor
    context: Tensor


def dam(h_seq: Sequence[Tensor], params: Mapping[str, Tensor]) -> DamResult:
    """Score every step against the last one, mix, and squash ``[context, query]``."""
    if not h_seq:
        raise ShapeError("dam: empty state sequence")
    states = [as_tensor(h) for h in h_seq]
    single = states[0].ndim == 1
    if single:
        states = [reshape(h, (1, -1)) for h in states]
    seq = stack(states, axis=1)
    query = states[-1]
    scores = einsum("bd,de,bte->bt", query, params["dam.w_a"], seq)
    attention = softmax(scores, axis=-1)
    context = einsum("bt,btd->bd", attention, seq)
    output = tanh(dense(concat([context, query], axis=-1), params["dam.w_c"]))
    if single:
        return DamResult(reshape(output, (-1,)), reshape(attention, (-1,)), reshape(context, (-1,)))
    return DamResult(output, attention, context)


# Full network


@dataclass
class Batch:
    maps: np.ndarray  # [B, C_m*T, H, W]
    scenes: np.ndarray  # [B, 3*T, H, W]
    ped: np.ndarray  # [B, T, D_p]
    veh: np.ndarray  # [B, T, D_v]
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.ped.shape[0]


def collate(samples: Sequence) -> Batch:
    if not samples:
        raise ShapeError("collate: empty sample list")
    return Batch(
        maps=np.stack([s.map_stack for s in samples]),
        scenes=np.stack([s.scene_stack for s in samples]),
        ped=np.stack([s.ped_motion for s in samples]),
        veh=np.stack([s.veh_motion for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.float64),
    )


def _check_batch(batch: Batch, config: ModelConfig) -> None:
    expected = {
        "maps": (config.map_channels, *config.map_size),
        "scenes": (config.scene_channels, *config.scene_size),
        "ped": (config.obs_len, config.ped_feature_dim),
        "veh": (config.obs_len, config.veh_feature_dim),
    }
    for name, shape in expected.items():
        actual = getattr(batch, name).shape[1:]
        if actual != shape:
            raise ShapeError(f"{name} input has per-sample shape {actual}, config expects {shape}")


def forward(
    batch: Batch,
    params: Mapping[str, Tensor],
    config: ModelConfig,
    modalities: Sequence[str] = MODALITIES,
) -> Tensor:
    """Crossing probabilities ``[B]``; inputs outside ``modalities`` are zero-masked."""
    _check_batch(batch, config)

    def masked(name: str, data: np.ndarray) -> Tensor:
        return Tensor(data if name in modalities else np.zeros_like(data))

    map_feat = encode_map(masked("map", batch.maps), params, config)
    scene_feat = encode_scene(masked("scene", batch.scenes), params, config)
    visual = vam(fuse_visual(map_feat, scene_feat, params, config), params).output

    ped, veh = masked("ped", batch.ped), masked("veh", batch.veh)
    steps = range(config.obs_len)
    dynamics = encode_dynamics([ped[:, t] for t in steps], [veh[:, t] for t in steps], params)
    summary = dam(dynamics, params).output

    joint = concat([visual, summary], axis=-1)
    hidden = relu(dense(joint, params["head.penult.weight"], params["head.penult.bias"]))
    logit = dense(hidden, params["head.out.weight"], params["head.out.bias"])
    return reshape(sigmoid(logit), (len(batch),))


def baseline_tf(ped_coords: Sequence[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    states = lstm_sequence(ped_coords, _lstm(params, "tf.lstm"))
    return sigmoid(dense(states[-1], params["tf.out.weight"], params["tf.out.bias"]))


def baseline_forward(batch: Batch, params: Mapping[str, Tensor], config: BaselineConfig) -> Tensor:
    if batch.ped.shape[1] != config.obs_len or batch.ped.shape[2] < config.coord_dim:
        raise ShapeError(
            f"ped input has per-sample shape {batch.ped.shape[1:]}, baseline needs "
            f"({config.obs_len}, >={config.coord_dim})"
        )
    coords = Tensor(batch.ped[:, :, : config.coord_dim])
    probs = baseline_tf([coords[:, t] for t in range(config.obs_len)], params)
    return reshape(probs, (len(batch),))


def network_forward(
    batch: Batch,
    params: Mapping[str, Tensor],
    config: NetworkConfig,
    modalities: Sequence[str] = MODALITIES,
) -> Tensor:
    if isinstance(config, BaselineConfig):
        return baseline_forward(batch, params, config)
    return forward(batch, params, config, modalities)


def predict(sample, params: Mapping[str, Tensor], config: NetworkConfig, modalities: Sequence[str] = MODALITIES) -> float:
    with no_grad():
        return network_forward(collate([sample]), params, config, modalities).item()


def predict_scores(
    samples: Sequence,
    params: Mapping[str, Tensor],
    config: NetworkConfig,
    modalities: Sequence[str] = MODALITIES,
    batch_size: int = 64,
) -> np.ndarray:
    scores = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = collate(samples[start : start + batch_size])
            scores.append(network_forward(batch, params, config, modalities).data)
    return np.concatenate(scores) if scores else np.zeros(0)
