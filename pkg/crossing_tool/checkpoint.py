"""Self-describing parameter checkpoints.

Layout: one JSON header line (sorted keys, ``\\n`` terminated) followed by the
little-endian float64 bytes of every entry, in the header's entry order (sorted
by parameter name).  The same parameters always serialise to the same bytes.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .constants import CHECKPOINT_FORMAT_VERSION
from .model import BaselineConfig, ConfigError, ModelConfig, ModelParams, NetworkConfig, param_shapes
from .storage import write_bytes
from .tensor import Tensor


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be read or does not fit the data it is used with."""


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: ModelParams
    mode: str
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "baseline" if isinstance(self.config, BaselineConfig) else "full"

    @property
    def feature_dims(self) -> dict[str, int]:
        """Per-step motion widths the network reads; the baseline reads leading pedestrian coordinates."""
        if isinstance(self.config, BaselineConfig):
            return {"ped": self.config.coord_dim}
        return {"ped": self.config.ped_feature_dim, "veh": self.config.veh_feature_dim}


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    params = checkpoint.params
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": checkpoint.kind,
        "mode": checkpoint.mode,
        "config": checkpoint.config.to_dict(),
        "feature_dims": checkpoint.feature_dims,
        "meta": checkpoint.meta,
        "entries": [[name, list(params[name].shape)] for name in params],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes() for name in params)
    return head + body


def decode_checkpoint(payload: bytes, source: str = "<bytes>") -> Checkpoint:
    newline = payload.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{source}: missing checkpoint header")
    try:
        header = json.loads(payload[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint format {header.get('format_version')!r}")
    try:
        if header["kind"] == "baseline":
            config: NetworkConfig = BaselineConfig.from_dict(header["config"])
        else:
            config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{source}: invalid checkpoint config: {exc}") from exc

    expected = param_shapes(config)
    tensors = {}
    offset = newline + 1
    for name, shape in header["entries"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise CheckpointError(f"{source}: entry '{name}' with shape {shape} does not fit the config")
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{source}: truncated data for entry '{name}'")
        values = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        tensors[name] = Tensor(values.reshape(shape))
        offset = end
    if offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - offset} trailing bytes after last entry")
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{source}: missing entries {', '.join(sorted(missing))}")
    checkpoint = Checkpoint(config, ModelParams(tensors), header.get("mode", "3d"), header.get("meta", {}))
    if header.get("feature_dims", checkpoint.feature_dims) != checkpoint.feature_dims:
        raise CheckpointError(f"{source}: feature_dims {header['feature_dims']} do not match the config")
    return checkpoint


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    write_bytes(Path(path), encode_checkpoint(checkpoint))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(payload, str(path))
