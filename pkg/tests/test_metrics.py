"""
Unit tests for AttackMetrics.
Tests aggregate rates, targeted exclusions and the per-image table.
"""

import pytest
import os
import sys

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.attack import ImageRecord
from src.metrics import AttackMetrics, mean_and_stderr, mean_or_none


def record(image_id, label, clean_pred, attacked_pred, success, target=None, excluded=False):
    return ImageRecord(
        image_id=image_id, label=label, target=target, clean_pred=clean_pred, attacked_pred=attacked_pred,
        success=success, excluded=excluded, final_loss=1.0, attn_clean=0.1, attn_attacked=0.3,
        terms={"ce": 1.0},
    )


@pytest.fixture
def untargeted():
    """Four images: two fooled, one held, one misclassified before the attack."""
    metrics = AttackMetrics(targeted=False)
    metrics.track(record(2, 0, 0, 0, False))
    metrics.track(record(0, 1, 1, 0, True))
    metrics.track(record(3, 1, 0, 0, False))
    metrics.track(record(1, 0, 0, 1, True))
    return metrics


class TestMeanAndStderr:
    """Test the summary statistic helper."""

    def test_single_value(self):
        assert mean_and_stderr([2.0]) == (2.0, None)

    def test_two_values(self):
        mean, stderr = mean_and_stderr([1.0, 3.0])
        assert mean == 2.0
        # std (ddof=1) = sqrt(2), / sqrt(2)
        assert stderr == pytest.approx(1.0)

    def test_mean_or_none_skips_missing(self):
        assert mean_or_none([0.2, None, 0.4]) == pytest.approx(0.3)
        assert mean_or_none([None, None]) is None
        assert mean_or_none([]) is None


class TestUntargetedSummary:
    """Test robust accuracy and success rate."""

    def test_rates(self, untargeted):
        summary = untargeted.get_summary()
        assert summary["images"] == 4
        assert summary["clean_accuracy"] == pytest.approx(0.75)
        assert summary["robust_accuracy"] == pytest.approx(0.25)
        # successes over clean-correct images
        assert summary["success_rate"] == pytest.approx(2 / 3)

    def test_robust_never_above_clean_here(self, untargeted):
        summary = untargeted.get_summary()
        assert summary["robust_accuracy"] <= summary["clean_accuracy"]

    def test_attention_means(self, untargeted):
        summary = untargeted.get_summary()
        assert summary["mean_attn_clean"] == pytest.approx(0.1)
        assert summary["mean_attn_attacked"] == pytest.approx(0.3)

    def test_attention_not_recorded(self):
        metrics = AttackMetrics()
        for image_id in range(2):
            entry = record(image_id, 0, 0, 1, True)
            entry.attn_clean = entry.attn_attacked = None
            metrics.track(entry)
        summary = metrics.get_summary()
        assert summary["mean_attn_clean"] is None and summary["mean_attn_attacked"] is None
        assert "Attention to patch token" not in metrics.get_report()

    def test_empty(self):
        summary = AttackMetrics().get_summary()
        assert summary["images"] == 0
        assert summary["success_rate"] == 0.0


class TestTargetedSummary:
    """Test exclusion of images already labelled with the target."""

    def test_excluded_images_leave_the_denominator(self):
        metrics = AttackMetrics(targeted=True)
        metrics.track(record(0, 2, 2, 2, False, target=2, excluded=True))
        metrics.track(record(1, 0, 0, 2, True, target=2))
        metrics.track(record(2, 1, 1, 1, False, target=2))
        summary = metrics.get_summary()
        assert summary["excluded"] == 1
        assert summary["success_rate"] == pytest.approx(0.5)
        assert "Excluded" in metrics.get_report()


class TestExport:
    """Test the per-image table."""

    def test_sorted_by_image_id(self, untargeted):
        frame = untargeted.to_frame()
        assert frame["image_id"].tolist() == [0, 1, 2, 3]
        assert "final_ce" in frame.columns

    def test_report_lines(self, untargeted):
        report = untargeted.get_report()
        assert "Robust accuracy: 0.250" in report
        assert "Attack success rate" in report


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
