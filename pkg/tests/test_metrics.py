import numpy as np
import pytest

from protoadapt.metrics import (
    MetricsRecord,
    calibration_bins,
    compute_metrics,
    expected_calibration_error,
    health_scores,
    rank_auc,
)
from protoadapt.util import ValidationError


class TestAuc:
    def test_perfect_separation(self):
        probs = np.array([0.9, 0.8, 0.2, 0.1])
        labels = np.array([1, 1, 0, 0])
        rec = compute_metrics(probs, labels)
        assert rec.auc == pytest.approx(1.0)
        assert rec.f1 == pytest.approx(1.0)

    def test_six_point_hand_case_matches_pair_counting(self):
        probs = np.array([0.1, 0.4, 0.35, 0.8, 0.65, 0.4])
        labels = np.array([0, 0, 1, 1, 0, 1])
        auc = rank_auc(probs, labels)
        wins = ties = 0
        for i in np.flatnonzero(labels == 1):
            for j in np.flatnonzero(labels == 0):
                if probs[i] > probs[j]:
                    wins += 1
                elif probs[i] == probs[j]:
                    ties += 1
        oracle = (wins + 0.5 * ties) / (3 * 3)
        assert auc == pytest.approx(oracle)

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            rank_auc(np.array([0.2, 0.4]), np.array([1, 1]))


class TestTieRuleAndEce:
    def test_all_half_predictions(self):
        probs = np.full(10, 0.5)
        labels = np.array([0, 1] * 5)
        rec = compute_metrics(probs, labels)
        # ties go to the positive class, so accuracy is the positive rate
        assert rec.accuracy == pytest.approx(0.5)
        assert rec.ece == pytest.approx(0.0)

    def test_ece_matches_hand_binning(self):
        probs = np.array([0.05, 0.15, 0.95, 0.85])
        labels = np.array([0, 1, 1, 1])
        # bins: [0,0.1): conf 0.05 freq 0; [0.1,0.2): conf .15 freq 1;
        # [0.8,0.9): conf .85 freq 1; [0.9,1): conf .95 freq 1
        expected = 0.25 * (0.05 + 0.85 + 0.15 + 0.05)
        assert expected_calibration_error(probs, labels) == pytest.approx(expected)

    def test_calibration_bins_counts(self):
        rows = calibration_bins(np.array([0.05, 0.06, 0.95]), np.array([0, 0, 1]))
        assert rows[0]["count"] == 2
        assert rows[9]["count"] == 1
        assert sum(r["count"] for r in rows) == 3


class TestConfusionConsistency:
    def test_recomputed_from_counts(self):
        rng = np.random.default_rng(0)
        probs = rng.random(50)
        labels = rng.integers(0, 2, size=50)
        if labels.sum() in (0, 50):
            labels[0] = 1 - labels[0]
        rec = compute_metrics(probs, labels)
        assert rec.tp + rec.fp + rec.tn + rec.fn == rec.n
        sens = rec.tp / (rec.tp + rec.fn) if rec.tp + rec.fn else 0.0
        spec = rec.tn / (rec.tn + rec.fp) if rec.tn + rec.fp else 0.0
        prec = rec.tp / (rec.tp + rec.fp) if rec.tp + rec.fp else 0.0
        f1 = 2 * prec * sens / (prec + sens) if prec + sens else 0.0
        assert rec.sensitivity == pytest.approx(sens)
        assert rec.specificity == pytest.approx(spec)
        assert rec.f1 == pytest.approx(f1)
        assert rec.accuracy == pytest.approx((rec.tp + rec.tn) / rec.n)


class TestHealthScore:
    def test_definition(self):
        probs = np.array([0.0, 0.25, 1.0])
        assert np.allclose(health_scores(probs), [1.0, 0.75, 0.0])

    def test_high_risk_threshold(self):
        probs = np.array([0.1, 0.5, 0.9, 0.49])
        labels = np.array([0, 1, 1, 0])
        rec = compute_metrics(probs, labels)
        assert rec.high_risk_rate == pytest.approx(0.5)
        assert rec.health_mean == pytest.approx(np.mean(1 - probs))

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValidationError):
            compute_metrics(np.array([0.5, 1.2]), np.array([0, 1]))
