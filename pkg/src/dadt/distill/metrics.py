"""Rotated-IoU average precision with 40 recall positions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dadt.boxes import CLASS_NAMES, DEFAULT_IOU_THRESHOLDS, rotated_iou

RECALL_POSITIONS = np.arange(1, 41) / 40.0


@dataclass
class MetricsReport:
    ap: dict = field(default_factory=dict)        # class name -> AP in [0, 100]
    map: float = 0.0
    gt_counts: dict = field(default_factory=dict)
    loss_curve: list = field(default_factory=list)  # per-epoch mean LossBreakdown fields
    config: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_json(self) -> dict:
        return {"ap": self.ap, "mAP": self.map, "gt_counts": self.gt_counts,
                "loss_curve": self.loss_curve, "config": self.config,
                "wall_clock_s": self.wall_clock_s}

    def csv_rows(self) -> list[list]:
        rows = [["class", "ap", "num_gt"]]
        for name in CLASS_NAMES:
            if name in self.ap:
                rows.append([name, f"{self.ap[name]:.6f}", self.gt_counts.get(name, 0)])
        rows.append(["mAP", f"{self.map:.6f}", sum(self.gt_counts.values())])
        return rows


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """AP in percent from score-sorted true-positive flags.

    Precision is interpolated as the best precision at any recall at or
    beyond each of the 40 positions 1/40, 2/40, ..., 1.
    """
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # running max from the right
    best = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for r in RECALL_POSITIONS:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        if idx < len(recall):
            total += best[idx]
    return 100.0 * total / len(RECALL_POSITIONS)


def match_class(predictions, ground_truth, class_id: int, iou_threshold: float):
    """Greedy matching of one class over all frames.

    ``predictions[f]`` is a list of ``(BoxLabel, score)``; ``ground_truth[f]``
    a list of ``BoxLabel``. Predictions are visited by descending score, ties
    broken by frame order then box order; each one takes the unmatched
    ground truth with the highest IoU if that IoU reaches the threshold.
    Returns ``(tp_flags, num_gt)``.
    """
    order = []
    for f, preds in enumerate(predictions):
        for b, (box, score) in enumerate(preds):
            if box.class_id == class_id:
                order.append((-score, f, b))
    order.sort()
    gts = [[g for g in frame if g.class_id == class_id] for frame in ground_truth]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(order))
    for k, (_, f, b) in enumerate(order):
        box = predictions[f][b][0]
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts[f]):
            if used[f][g]:
                continue
            iou = rotated_iou(box, gt)
            if iou > best_iou:
                best, best_iou = g, iou
        if best >= 0 and best_iou >= iou_threshold:
            used[f][best] = True
            tp[k] = 1.0
    return tp, sum(len(g) for g in gts)


def average_precision(predictions, ground_truth, thresholds=None) -> MetricsReport:
    """Per-class AP and the mean over classes that have ground truth."""
    if len(predictions) != len(ground_truth):
        raise ValueError("need one prediction list per ground-truth frame")
    thresholds = dict(DEFAULT_IOU_THRESHOLDS if thresholds is None else thresholds)
    report = MetricsReport()
    for class_id, name in enumerate(CLASS_NAMES):
        tp, num_gt = match_class(predictions, ground_truth, class_id, thresholds[class_id])
        if num_gt == 0:
            continue
        report.ap[name] = interpolated_ap(tp, num_gt)
        report.gt_counts[name] = num_gt
    report.map = float(np.mean(list(report.ap.values()))) if report.ap else 0.0
    return report
