"""Binary classification metrics: confusion counts, accuracy, precision, F1, AUC."""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .constants import REPORT_KEYS, THRESHOLD


class MetricsError(ValueError):
    """Raised for empty, mismatched or single-class metric input."""


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    auc: float
    f1: float
    precision: float
    threshold: float = THRESHOLD

    @property
    def precision_defined(self) -> bool:
        return not math.isnan(self.precision)

    @property
    def f1_defined(self) -> bool:
        return not math.isnan(self.f1)

    def as_dict(self) -> dict[str, float | int]:
        return {
            "acc": self.accuracy,
            "auc": self.auc,
            "f1": self.f1,
            "precision": self.precision,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
        }


def _validate(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise MetricsError("No samples to evaluate")
    if s.size != y.size:
        raise MetricsError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricsError("Labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = THRESHOLD) -> Confusion:
    """Counts with ``score >= threshold`` predicted positive."""
    s, y = _validate(scores, labels)
    predicted = s >= threshold
    positive = y == 1
    return Confusion(
        tp=int(np.sum(predicted & positive)),
        fp=int(np.sum(predicted & ~positive)),
        tn=int(np.sum(~predicted & ~positive)),
        fn=int(np.sum(~predicted & positive)),
    )


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def accuracy(counts: Confusion) -> float:
    return _ratio(counts.tp + counts.tn, counts.total)


def precision(counts: Confusion) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp)


def recall(counts: Confusion) -> float:
    return _ratio(counts.tp, counts.tp + counts.fn)


def f1(counts: Confusion) -> float:
    p, r = precision(counts), recall(counts)
    if math.isnan(p) or math.isnan(r) or p + r == 0:
        return math.nan
    return 2 * p * r / (p + r)


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney statistic with midranks: P(pos > neg) + 0.5 * P(pos == neg)."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC needs both classes present")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(scores: Sequence[float], labels: Sequence[int], threshold: float = THRESHOLD) -> MetricsReport:
    counts = confusion(scores, labels, threshold)
    return MetricsReport(
        tp=counts.tp,
        fp=counts.fp,
        tn=counts.tn,
        fn=counts.fn,
        accuracy=accuracy(counts),
        auc=auc(scores, labels),
        f1=f1(counts),
        precision=precision(counts),
        threshold=threshold,
    )


def _fmt(value: float | int) -> str:
    if isinstance(value, int):
        return str(value)
    return "nan" if math.isnan(value) else f"{value:.4f}"


def format_report(report: MetricsReport, prefix: str = "") -> str:
    return " ".join(f"{prefix}{key}={_fmt(value)}" for key, value in report.as_dict().items())


def parse_report(line: str) -> dict[str, float]:
    values = {}
    for token in line.split():
        key, _, raw = token.partition("=")
        values[key] = float(raw)
    missing = set(REPORT_KEYS) - set(values)
    if missing:
        raise MetricsError(f"Report is missing keys: {', '.join(sorted(missing))}")
    return values


def format_score_line(track_id: str, window: int, score: float, label: int) -> str:
    if not track_id or any(ch.isspace() for ch in track_id):
        raise MetricsError(f"Track id {track_id!r} cannot be written to a scores file")
    return f"track_id={track_id} window={window} score={float(score)!r} label={int(label)}"


def read_scores(text: str) -> tuple[list[float], list[int]]:
    """Scores and labels of a scores file, in file order."""
    scores, labels = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = dict(token.partition("=")[::2] for token in line.split())
        try:
            scores.append(float(fields["score"]))
            labels.append(int(fields["label"]))
        except (KeyError, ValueError):
            raise MetricsError(f"Scores line {number} is malformed: {line!r}") from None
    return scores, labels
