"""3D box labels, the class table, label sidecars and rotated BEV geometry."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dadt.fileio import atomic_write_json

CLASS_NAMES = ("vehicle", "pedestrian", "cyclist")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

# (l, w, h) in meters
SIZE_PRIORS = {
    0: (4.5, 1.9, 1.6),
    1: (0.8, 0.8, 1.7),
    2: (1.8, 0.8, 1.7),
}

# BEV IoU needed for a true positive, per class
DEFAULT_IOU_THRESHOLDS = {0: 0.7, 1: 0.5, 2: 0.5}


def wrap_heading(h: float) -> float:
    """Map an angle to ``(-pi, pi]``."""
    h = math.fmod(h, 2 * math.pi)
    if h <= -math.pi:
        h += 2 * math.pi
    elif h > math.pi:
        h -= 2 * math.pi
    return h


@dataclass(frozen=True)
class BoxLabel:
    class_id: int
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {self}")
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError(f"box dimensions must be positive: {self}")
        if not -math.pi < self.heading <= math.pi:
            raise ValueError(f"heading {self.heading} outside (-pi, pi]")
        if self.class_id not in SIZE_PRIORS:
            raise ValueError(f"unknown class id {self.class_id}")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def to_json(self) -> dict:
        return {"class": self.class_name, "cx": self.cx, "cy": self.cy, "cz": self.cz,
                "l": self.l, "w": self.w, "h": self.h, "heading": self.heading}

    @classmethod
    def from_json(cls, d: dict) -> "BoxLabel":
        if d["class"] not in CLASS_IDS:
            raise ValueError(f"unknown class {d['class']!r}")
        return cls(CLASS_IDS[d["class"]], float(d["cx"]), float(d["cy"]), float(d["cz"]),
                   float(d["l"]), float(d["w"]), float(d["h"]), float(d["heading"]))


def load_labels(path: str | os.PathLike) -> list[BoxLabel]:
    with open(path) as fh:
        return [BoxLabel.from_json(d) for d in json.load(fh)]


def write_labels(boxes, path: str | os.PathLike) -> None:
    atomic_write_json(Path(path), [b.to_json() for b in boxes])


def bev_corners(cx, cy, l, w, heading) -> np.ndarray:
    """Counter-clockwise ``(4, 2)`` corners of a yawed rectangle."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = l / 2.0, w / 2.0
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(cx + u * c - v * s, cy + u * s + v * c) for u, v in local])


def box_corners(box: BoxLabel) -> np.ndarray:
    return bev_corners(box.cx, box.cy, box.l, box.w, box.heading)


def points_in_footprint(px, py, box: BoxLabel) -> np.ndarray:
    """Boolean mask of BEV points inside (or on the edge of) the box footprint."""
    dx = np.asarray(px, dtype=np.float64) - box.cx
    dy = np.asarray(py, dtype=np.float64) - box.cy
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= box.l / 2.0) & (np.abs(v) <= box.w / 2.0)


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = np.asarray(poly, dtype=np.float64).T
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject, a, b):
    """Keep the part of ``subject`` to the left of the directed edge a->b."""
    out = []
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append((cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])))
    return out


def convex_intersection(p, q) -> list:
    """Sutherland-Hodgman clip of convex CCW polygon ``p`` by convex CCW ``q``."""
    out = [tuple(v) for v in p]
    q = [tuple(v) for v in q]
    for i in range(len(q)):
        if not out:
            break
        out = _clip(out, q[i], q[(i + 1) % len(q)])
    return out


def rotated_iou(a: BoxLabel, b: BoxLabel) -> float:
    """Intersection over union of two BEV footprints."""
    ra = math.hypot(a.l, a.w) / 2
    rb = math.hypot(b.l, b.w) / 2
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    inter = polygon_area(convex_intersection(box_corners(a), box_corners(b)))
    union = a.l * a.w + b.l * b.w - inter
    return inter / union if union > 0 else 0.0
