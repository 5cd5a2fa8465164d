"""
Attack metrics - per-image records and aggregate rates.
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def mean_and_stderr(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and standard error of the mean; stderr is None for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), None
    if values.size == 1:
        return float(values[0]), None
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    """Mean of the recorded values; None when nothing was recorded."""
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


class AttackMetrics:
    """
    Collects ImageRecords of one attack run.
    Order of tracking does not matter: exports are sorted by image id.
    """

    def __init__(self, targeted: bool = False):
        self.targeted = targeted
        self.records: List = []

    def track(self, record):
        """Add the outcome of one image."""
        self.records.append(record)
        logger.debug(f"Tracked image {record.image_id}: success={record.success}")

    def _sorted(self) -> List:
        return sorted(self.records, key=lambda r: r.image_id)

    def get_summary(self) -> Dict:
        """Aggregate rates"""
        records = self._sorted()
        images = len(records)
        if images == 0:
            return {
                "images": 0, "targeted": self.targeted, "excluded": 0,
                "clean_accuracy": 0.0, "robust_accuracy": 0.0, "success_rate": 0.0,
                "mean_attn_clean": None, "mean_attn_attacked": None,
            }

        clean_correct = sum(r.clean_pred == r.label for r in records)
        robust_correct = sum(r.attacked_pred == r.label for r in records)
        excluded = sum(r.excluded for r in records)
        if self.targeted:
            # images already labelled with the target class do not count
            eligible = images - excluded
        else:
            eligible = clean_correct
        successes = sum(r.success for r in records)

        return {
            "images": images,
            "targeted": self.targeted,
            "excluded": excluded,
            "clean_accuracy": clean_correct / images,
            "robust_accuracy": robust_correct / images,
            "success_rate": successes / eligible if eligible else 0.0,
            "mean_attn_clean": mean_or_none([r.attn_clean for r in records]),
            "mean_attn_attacked": mean_or_none([r.attn_attacked for r in records]),
        }

    def get_report(self) -> str:
        """Text summary for the log."""
        summary = self.get_summary()
        lines = [f"📊 Attack results ({summary['images']} images)"]
        lines.append(f"• Clean accuracy: {summary['clean_accuracy']:.3f}")
        lines.append(f"• Robust accuracy: {summary['robust_accuracy']:.3f}")
        label = "Targeted success rate" if self.targeted else "Attack success rate"
        lines.append(f"• {label}: {summary['success_rate']:.3f}")
        if self.targeted:
            lines.append(f"• Excluded (label == target): {summary['excluded']}")
        if summary["mean_attn_clean"] is not None:
            lines.append(
                f"• Attention to patch token: {summary['mean_attn_clean']:.4f} -> {summary['mean_attn_attacked']:.4f}"
            )
        return "\n".join(lines)

    def to_frame(self) -> pd.DataFrame:
        """One row per image, sorted by image id."""
        return pd.DataFrame([r.to_row() for r in self._sorted()])
