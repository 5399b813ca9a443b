import math

import numpy as np
import pytest

from crossing_tool.metrics import (
    MetricsError,
    auc,
    confusion,
    evaluate,
    format_report,
    format_score_line,
    parse_report,
    read_scores,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestConfusion:
    def test_threshold_is_inclusive(self):
        counts = confusion([0.5, 0.49, 0.5, 0.1], [1, 1, 0, 0])
        assert (counts.tp, counts.fn, counts.fp, counts.tn) == (1, 1, 1, 1)

    def test_mismatched_lengths(self):
        with pytest.raises(MetricsError, match="3 scores but 2 labels"):
            confusion([0.1, 0.2, 0.3], [0, 1])

    def test_empty(self):
        with pytest.raises(MetricsError, match="No samples"):
            confusion([], [])

    def test_non_binary_labels(self):
        with pytest.raises(MetricsError, match="0 or 1"):
            confusion([0.1], [3])


class TestReport:
    def test_hand_computed_values(self):
        report = evaluate([0.9, 0.8, 0.3, 0.6, 0.1], [1, 1, 1, 0, 0])
        assert (report.tp, report.fp, report.tn, report.fn) == (2, 1, 1, 1)
        assert report.accuracy == pytest.approx(0.6)
        assert report.precision == pytest.approx(2 / 3)
        assert report.f1 == pytest.approx(2 / 3)
        assert report.auc == pytest.approx(5 / 6)

    def test_no_positive_predictions_leave_precision_undefined(self):
        report = evaluate([0.1, 0.2], [1, 0])
        assert math.isnan(report.precision)
        assert not report.precision_defined
        assert not report.f1_defined
        assert report.accuracy == 0.5

    def test_format_and_parse(self):
        report = evaluate([0.9, 0.2, 0.4, 0.7], [1, 0, 1, 0])
        line = format_report(report)
        assert line == "acc=0.5000 auc=0.7500 f1=0.5000 precision=0.5000 tp=1 fp=1 tn=1 fn=1"
        assert parse_report(line)["auc"] == 0.75

    def test_undefined_values_print_as_nan(self):
        line = format_report(evaluate([0.1, 0.2], [1, 0]), "val_")
        assert "val_precision=nan" in line
        assert math.isnan(parse_report(line.replace("val_", ""))["f1"])

    def test_parse_needs_every_key(self):
        with pytest.raises(MetricsError, match="missing keys: fn"):
            parse_report("acc=1 auc=1 f1=1 precision=1 tp=1 fp=0 tn=1")


class TestAuc:
    def test_ties_count_half(self):
        assert auc([0.5, 0.5], [1, 0]) == 0.5
        assert auc([0.5, 0.5, 0.9], [1, 0, 1]) == 0.75

    def test_perfect_and_reversed(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_matches_pairwise_count(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(2, 12))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # coarse scores so ties are common
            scores = rng.integers(0, 5, size=n) / 4.0
            assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)

    def test_invariant_under_monotone_maps(self, rng):
        scores = rng.uniform(size=30)
        labels = np.arange(30) % 2
        base = auc(scores, labels)
        assert auc(scores**3, labels) == pytest.approx(base)
        assert auc(10 * scores - 4, labels) == pytest.approx(base)

    def test_complement_of_flipped_labels(self, rng):
        scores = rng.uniform(size=20)
        labels = np.arange(20) % 2
        assert auc(scores, labels) + auc(scores, 1 - labels) == pytest.approx(1.0)

    def test_single_class(self):
        with pytest.raises(MetricsError, match="both classes"):
            auc([0.2, 0.3], [1, 1])


class TestScoreLines:
    def test_score_keeps_full_precision(self):
        line = format_score_line("ped_3", 2, 0.1234567890123, 1)
        assert line == "track_id=ped_3 window=2 score=0.1234567890123 label=1"
        scores, labels = read_scores(line + "\n\n")
        assert scores == [0.1234567890123]
        assert labels == [1]

    def test_ids_with_spaces_are_rejected(self):
        with pytest.raises(MetricsError):
            format_score_line("ped 3", 0, 0.5, 0)
        with pytest.raises(MetricsError):
            format_score_line("", 0, 0.5, 0)

    def test_malformed_line_names_its_number(self):
        with pytest.raises(MetricsError, match="line 2"):
            read_scores("track_id=a window=0 score=0.5 label=1\ntrack_id=b window=0 label=0\n")
