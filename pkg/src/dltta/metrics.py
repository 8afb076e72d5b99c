"""Scoring of a finished run against the stream's hidden labels."""

import math
from dataclasses import asdict, dataclass

import numpy as np

FINAL_FRACTION = 0.2


@dataclass
class Metrics:
    streaming_accuracy: float
    per_segment_accuracy: dict
    loss_smoothness: float
    lr_trace_summary: dict
    final_accuracy: float
    aborted_steps: int = 0

    def to_dict(self):
        return asdict(self)


def correct_counts(telemetry, labels):
    return np.array([int(np.sum(rec.predicted == labels[i])) for i, rec in enumerate(telemetry)])


def loss_smoothness(losses):
    """Mean absolute change between consecutive losses (0 for < 2 values)."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(losses))))


def compute_metrics(telemetry, labels):
    """``labels[i]`` holds the hidden labels of the batch behind ``telemetry[i]``."""
    if not telemetry:
        raise ValueError("no telemetry to score")
    correct = correct_counts(telemetry, labels)
    sizes = np.array([rec.predicted.size for rec in telemetry])
    per_segment = {}
    for tag in sorted({rec.severity_label for rec in telemetry}):
        sel = np.array([rec.severity_label == tag for rec in telemetry])
        per_segment[tag] = float(correct[sel].sum() / sizes[sel].sum())
    n_final = max(1, math.ceil(FINAL_FRACTION * len(telemetry)))
    lrs = np.array([rec.applied_lr for rec in telemetry])
    return Metrics(
        streaming_accuracy=float(correct.sum() / sizes.sum()),
        per_segment_accuracy=per_segment,
        loss_smoothness=loss_smoothness([rec.tta_loss_before for rec in telemetry]),
        lr_trace_summary={"min": float(lrs.min()), "mean": float(lrs.mean()), "max": float(lrs.max())},
        final_accuracy=float(correct[-n_final:].sum() / sizes[-n_final:].sum()),
        aborted_steps=sum(rec.error is not None for rec in telemetry),
    )
