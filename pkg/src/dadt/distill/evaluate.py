"""Evaluating a checkpoint on a labeled dataset."""

from __future__ import annotations

import time
from pathlib import Path

from dadt.dataset import load_dataset
from dadt.distill.detect import DEFAULT_NMS_IOU, predict
from dadt.distill.metrics import MetricsReport, average_precision
from dadt.distill.model import Checkpoint, load_checkpoint

# low enough to trace most of the precision-recall curve
EVAL_SCORE_THRESHOLD = 0.05


def evaluate(checkpoint, dataset, thresholds=None,
             score_threshold: float = EVAL_SCORE_THRESHOLD,
             nms_iou: float = DEFAULT_NMS_IOU) -> MetricsReport:
    """Per-class 40-point AP of ``checkpoint`` (path or :class:`Checkpoint`)."""
    t0 = time.perf_counter()
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    frames = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    preds = [predict(checkpoint, f.cloud, score_threshold, nms_iou) for f in frames]
    report = average_precision(preds, [f.boxes for f in frames], thresholds)
    report.wall_clock_s = time.perf_counter() - t0
    return report
