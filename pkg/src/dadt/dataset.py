"""Reading datasets written by :func:`dadt.simlidar.make_dataset`."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from dadt.boxes import BoxLabel, load_labels
from dadt.pointcloud import PointCloud, load_frame


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: str
    cloud: PointCloud
    boxes: list[BoxLabel]


def frame_ids(root: str | os.PathLike) -> list[str]:
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.exists():
        with open(manifest) as fh:
            return [f["id"] for f in json.load(fh)["frames"]]
    return sorted(p.stem for p in (root / "frames").glob("*.bin"))


def load_dataset(root: str | os.PathLike) -> list[Frame]:
    """All frames of a dataset directory, in manifest order.

    A frame without a label sidecar gets an empty box list.
    """
    root = Path(root)
    frames = []
    for fid in frame_ids(root):
        cloud = load_frame(root / "frames" / f"{fid}.bin")
        label_path = root / "labels" / f"{fid}.json"
        boxes = load_labels(label_path) if label_path.exists() else []
        frames.append(Frame(fid, cloud, boxes))
    return frames
