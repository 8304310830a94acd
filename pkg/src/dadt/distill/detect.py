"""Decoding head outputs into boxes, and rotated non-maximum suppression."""

from __future__ import annotations

import math

import numpy as np

from dadt.bev import GridSpec, rasterize
from dadt.boxes import SIZE_PRIORS, BoxLabel, rotated_iou
from dadt.distill.model import forward
from dadt.losses import sigmoid
from dadt.pointcloud import PointCloud

DEFAULT_SCORE_THRESHOLD = 0.3
DEFAULT_NMS_IOU = 0.5
LOG_SIZE_LIMIT = 4.0


def nearest_class(l: float, w: float) -> int:
    """Class whose (l, w) prior is closest in log space."""
    best, best_d = 0, math.inf
    for c, (pl, pw, _) in SIZE_PRIORS.items():
        d = (math.log(l) - math.log(pl)) ** 2 + (math.log(w) - math.log(pw)) ** 2
        if d < best_d:
            best, best_d = c, d
    return best


def decode(head_output: np.ndarray, spec: GridSpec, score_threshold: float):
    """Boxes for every cell whose objectness reaches ``score_threshold``.

    BEV only: the class comes from the nearest size prior, height from that
    prior, and ``cz`` is 0.
    """
    scores = sigmoid(head_output[..., 0])
    out = []
    for i, j in zip(*np.nonzero(scores >= score_threshold)):
        dx, dy, ll, lw, s, c = head_output[i, j, 1:]
        cx = spec.x_min + (i + 0.5 + dx) * spec.cell
        cy = spec.y_min + (j + 0.5 + dy) * spec.cell
        l = math.exp(float(np.clip(ll, -LOG_SIZE_LIMIT, LOG_SIZE_LIMIT)))
        w = math.exp(float(np.clip(lw, -LOG_SIZE_LIMIT, LOG_SIZE_LIMIT)))
        heading = math.atan2(s, c) if (s or c) else 0.0
        if heading <= -math.pi:
            heading = math.pi
        cls = nearest_class(l, w)
        out.append((BoxLabel(cls, float(cx), float(cy), 0.0, l, w, SIZE_PRIORS[cls][2],
                             float(heading)), float(scores[i, j])))
    return out


def nms(detections, iou_threshold: float):
    """Greedy class-agnostic NMS; ties in score keep the earlier detection."""
    order = sorted(range(len(detections)), key=lambda k: (-detections[k][1], k))
    kept = []
    for k in order:
        box = detections[k][0]
        if all(rotated_iou(box, detections[m][0]) <= iou_threshold for m in kept):
            kept.append(k)
    return [detections[k] for k in kept]


def predict(checkpoint, cloud: PointCloud, score_threshold: float = DEFAULT_SCORE_THRESHOLD,
            nms_iou: float = DEFAULT_NMS_IOU):
    """``[(BoxLabel, score), ...]`` for one frame, highest score first."""
    grid = rasterize(cloud, checkpoint.grid)
    _, out = forward(grid, checkpoint.state)
    return nms(decode(out, checkpoint.grid, score_threshold), nms_iou)
