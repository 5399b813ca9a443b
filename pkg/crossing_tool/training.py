"""Class-weighted BCE, L2 regularisation, RMSProp and the epoch loop."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .constants import (
    BATCH_SIZE,
    EPOCHS_3D,
    L2_COEFF,
    LEARNING_RATE,
    PROB_EPS,
    RMSPROP_DECAY,
    RMSPROP_EPSILON,
)
from .metrics import MetricsReport, evaluate, format_report
from .model import (
    MODALITIES,
    BaselineConfig,
    ConfigError,
    ModelParams,
    NetworkConfig,
    collate,
    default_l2_scope,
    frozen_prefixes,
    init_params,
    is_weight,
    network_forward,
    predict_scores,
)
from .tensor import ShapeError, Tensor, backward, clamp, log, mean, mul, no_grad, reduce_sum, scale


class TrainingError(ValueError):
    """Raised for training data the recipe cannot fit (empty, single class)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    learning_rate: float = LEARNING_RATE
    epochs: int = EPOCHS_3D
    l2_coeff: float = L2_COEFF
    # None selects the network's LSTMs and output layer
    l2_scope: tuple[str, ...] | None = None
    rmsprop_decay: float = RMSPROP_DECAY
    rmsprop_epsilon: float = RMSPROP_EPSILON
    seed: int = 0
    # (w_neg, w_pos); None derives them from the training labels
    class_weights: tuple[float, float] | None = None
    select_best: bool = False

    def __post_init__(self):
        if self.l2_scope is not None:
            object.__setattr__(self, "l2_scope", tuple(self.l2_scope))
        if self.class_weights is not None:
            weights = tuple(float(w) for w in self.class_weights)
            if len(weights) != 2 or min(weights) <= 0:
                raise ConfigError(f"class_weights must be two positive numbers, got {self.class_weights}")
            object.__setattr__(self, "class_weights", weights)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must not be negative, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.l2_coeff < 0:
            raise ConfigError(f"l2_coeff must not be negative, got {self.l2_coeff}")
        if not 0 <= self.rmsprop_decay < 1:
            raise ConfigError(f"rmsprop_decay must lie in [0, 1), got {self.rmsprop_decay}")
        if self.rmsprop_epsilon <= 0:
            raise ConfigError(f"rmsprop_epsilon must be positive, got {self.rmsprop_epsilon}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown train config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


# Loss


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.isin(y, (0.0, 1.0)).all():
        raise TrainingError("Labels must be 0 or 1")
    return y


def weighted_bce(probs, labels, weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """Mean of ``w_y * -(y log p + (1 - y) log(1 - p))`` with ``p`` clamped away from 0 and 1."""
    y = _labels(labels)
    p = clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    if p.shape != y.shape:
        p = p.reshape(y.shape)
    w_neg, w_pos = weights
    per_sample = mul(Tensor(y), log(p)) + mul(Tensor(1.0 - y), log(1.0 - p))
    return mean(mul(Tensor(-np.where(y == 1.0, w_pos, w_neg)), per_sample))


def compute_class_weights(labels: Sequence[int]) -> tuple[float, float]:
    """``(1, N_neg / N_pos)``."""
    y = _labels(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise TrainingError(f"Class weights need both classes, got {n_neg} negative and {n_pos} positive samples")
    return 1.0, n_neg / n_pos


def l2_penalty(params: Mapping[str, Tensor], scope: Sequence[str], coeff: float) -> Tensor:
    """``coeff * sum(theta ** 2)`` over weights whose names start with a scope prefix."""
    prefixes = tuple(scope)
    terms = [reduce_sum(mul(t, t)) for name, t in params.items() if is_weight(name) and name.startswith(prefixes)]
    if not terms or not prefixes:
        return Tensor(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return scale(total, coeff)


# Optimiser


@dataclass
class RMSPropState:
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: RMSPropState,
    config: TrainConfig,
    frozen: Sequence[str] = (),
) -> RMSPropState:
    """In-place update ``v = rho v + (1 - rho) g^2; theta -= lr g / (sqrt(v) + eps)``."""
    frozen = tuple(frozen)
    rho, lr, eps = config.rmsprop_decay, config.learning_rate, config.rmsprop_epsilon
    for name in params:
        if frozen and name.startswith(frozen):
            continue
        theta = params[name]
        if name not in grads:
            raise ShapeError(f"rmsprop_step: no gradient for parameter '{name}'")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ShapeError(f"rmsprop_step: gradient of '{name}' has shape {g.shape}, parameter {theta.shape}")
        v = state.square_avg.get(name)
        if v is None:
            v = np.zeros(theta.shape)
        elif v.shape != theta.shape:
            raise ShapeError(f"rmsprop_step: state of '{name}' has shape {v.shape}, parameter {theta.shape}")
        v = rho * v + (1.0 - rho) * g * g
        theta.data = theta.data - lr * g / (np.sqrt(v) + eps)
        state.square_avg[name] = v
    return state


# Epoch loop


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    train: MetricsReport
    validation: MetricsReport | None = None


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochLog]
    class_weights: tuple[float, float]
    best_epoch: int


def format_epoch_log(entry: EpochLog) -> str:
    parts = [f"epoch={entry.epoch}", f"loss={entry.loss:.6f}", format_report(entry.train, "train_")]
    if entry.validation is not None:
        parts.append(format_report(entry.validation, "val_"))
    return " ".join(parts)


def dataset_loss(
    samples: Sequence,
    params: Mapping[str, Tensor],
    config: NetworkConfig,
    weights: tuple[float, float] = (1.0, 1.0),
    modalities: Sequence[str] = MODALITIES,
) -> float:
    """Weighted BCE over all samples, without the L2 term."""
    scores = predict_scores(samples, params, config, modalities)
    with no_grad():
        return weighted_bce(Tensor(scores), [s.label for s in samples], weights).item()


def _check_classes(samples: Sequence, what: str) -> list[int]:
    if not samples:
        raise TrainingError(f"{what} set is empty")
    labels = [int(s.label) for s in samples]
    if len(set(labels)) < 2:
        raise TrainingError(f"{what} set has a single class ({labels[0]}); both classes are required")
    return labels


def train(
    samples: Sequence,
    config: NetworkConfig,
    train_config: TrainConfig = TrainConfig(),
    *,
    validation: Sequence | None = None,
    modalities: Sequence[str] = MODALITIES,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Seeded end-to-end training; the final partial batch of every epoch is kept.

    Branches whose inputs fall outside ``modalities`` are zero-masked and their
    parameters stay at initialisation.
    """
    labels = _check_classes(samples, "Training")
    if validation:
        val_labels = _check_classes(validation, "Validation")
    weights = train_config.class_weights or compute_class_weights(labels)
    baseline = isinstance(config, BaselineConfig)
    frozen = () if baseline else frozen_prefixes(modalities)
    scope = train_config.l2_scope if train_config.l2_scope is not None else default_l2_scope(config)

    params = init_params(config, train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    state = RMSPropState()
    history: list[EpochLog] = []
    best_params, best_epoch, best_auc = params.copy(), 0, -np.inf

    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(samples), train_config.batch_size):
            chunk = order[start : start + train_config.batch_size]
            batch = collate([samples[i] for i in chunk])
            params.zero_grad()
            probs = network_forward(batch, params, config, modalities)
            loss = weighted_bce(probs, batch.labels, weights) + l2_penalty(params, scope, train_config.l2_coeff)
            backward(loss)
            rmsprop_step(params, params.grads(), state, train_config, frozen)
            total += loss.item() * len(chunk)

        train_report = evaluate(predict_scores(samples, params, config, modalities), labels)
        val_report = None
        if validation:
            val_report = evaluate(predict_scores(validation, params, config, modalities), val_labels)
        entry = EpochLog(epoch, total / len(samples), train_report, val_report)
        history.append(entry)
        if on_epoch:
            on_epoch(entry)
        if train_config.select_best and val_report is not None and val_report.auc > best_auc:
            best_params, best_epoch, best_auc = params.copy(), epoch, val_report.auc

    if train_config.select_best and validation and best_epoch:
        return TrainResult(best_params, history, weights, best_epoch)
    return TrainResult(params, history, weights, train_config.epochs)
