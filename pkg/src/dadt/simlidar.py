"""Synthetic LiDAR scenes: a flat ground plane plus yawed cuboids.

World frame: ground is the plane ``z = ground_z``; the sensor sits at
``(0, 0, ground_z + sensor_height)``. Emitted points and box labels are both
expressed in the sensor-centered frame (sensor at the origin), which is the
frame inclination angles are measured in.

Beam ``b`` has inclination ``phi_min + b * (phi_max - phi_min) / (beams - 1)``,
so beam 0 is the lowest. Azimuths run from ``azimuth_min`` in steps of
``azimuth_step`` up to, not including, ``azimuth_max``.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from dadt import __version__
from dadt.boxes import CLASS_NAMES, SIZE_PRIORS, BoxLabel, write_labels
from dadt.fileio import atomic_write_json
from dadt.pointcloud import PointCloud, write_frame
from dadt.rng import generator, mix64

DATASET_SCHEMA = 1
GROUND_INTENSITY = 0.5
BOX_INTENSITY = 0.9


@dataclass(frozen=True)
class SceneSpec:
    sensor_height: float = 1.73
    ground_z: float = 0.0
    boxes: tuple = ()
    beams: int = 64
    phi_min: float = math.radians(-24.8)
    phi_max: float = math.radians(-1.5)
    azimuth_step: float = math.radians(0.4)
    azimuth_min: float = -math.pi / 2
    azimuth_max: float = math.pi / 2
    max_range: float = 80.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.phi_min < self.phi_max:
            raise ValueError("phi_min must be below phi_max")
        if self.azimuth_step <= 0 or self.azimuth_max <= self.azimuth_min:
            raise ValueError("azimuth range must be non-empty with a positive step")
        if self.noise_sigma < 0 or self.max_range <= 0 or self.beams < 1:
            raise ValueError("invalid noise, range or beam count")

    def beam_angles(self) -> np.ndarray:
        if self.beams == 1:
            return np.array([self.phi_min])
        return np.linspace(self.phi_min, self.phi_max, self.beams)

    def azimuths(self) -> np.ndarray:
        n = int(math.ceil((self.azimuth_max - self.azimuth_min) / self.azimuth_step - 1e-9))
        return self.azimuth_min + self.azimuth_step * np.arange(n)

    def to_json(self) -> dict:
        d = asdict(self)
        d["boxes"] = [b.to_json() for b in self.boxes]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        d["boxes"] = tuple(BoxLabel.from_json(b) for b in d.get("boxes", ()))
        return cls(**d)


def _ray_box(origin, dirs, box: BoxLabel) -> np.ndarray:
    """Entry distance of each ray into a box (inf on a miss), slab method."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    o = origin - np.array([box.cx, box.cy, box.cz])
    o_local = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
    d_local = np.stack([c * dirs[:, 0] + s * dirs[:, 1],
                        -s * dirs[:, 0] + c * dirs[:, 1],
                        dirs[:, 2]], axis=1)
    half = np.array([box.l, box.w, box.h]) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_local) * inv
        t2 = (half - o_local) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = d_local == 0
    inside = np.abs(o_local) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_in = lo.max(axis=1)
    t_out = hi.min(axis=1)
    hit = (t_in <= t_out) & (t_in > 0)
    return np.where(hit, t_in, np.inf)


def raycast(spec: SceneSpec):
    """Noise-free hits: ``(t, dirs, beam, box_index)`` for every ray with a return.

    ``box_index`` is -1 for ground hits.
    """
    phis = spec.beam_angles()
    thetas = spec.azimuths()
    beam = np.repeat(np.arange(len(phis)), len(thetas))
    phi = phis[beam]
    theta = np.tile(thetas, len(phis))
    dirs = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta),
                     np.sin(phi)], axis=1)
    # sensor-centered frame: ground plane at z = -sensor_height
    origin = np.zeros(3)
    ground = -spec.sensor_height
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, ground / dirs[:, 2], np.inf)
    best = t_ground
    owner = np.full(len(dirs), -1)
    for i, box in enumerate(spec.boxes):
        t_box = _ray_box(origin, dirs, box)
        closer = t_box < best
        best = np.where(closer, t_box, best)
        owner = np.where(closer, i, owner)
    keep = best <= spec.max_range
    return best[keep], dirs[keep], beam[keep], owner[keep]


def simulate(spec: SceneSpec):
    """Raycast a scene; returns the cloud (with true beam labels) and its boxes.

    Range noise is Gaussian with ``noise_sigma``, truncated at 3 sigma, and is
    applied along the ray so a point keeps its beam's inclination.
    """
    t, dirs, beam, owner = raycast(spec)
    if spec.noise_sigma > 0:
        noise = generator(spec.seed).normal(0.0, spec.noise_sigma, len(t))
        t = t + np.clip(noise, -3 * spec.noise_sigma, 3 * spec.noise_sigma)
    xyz = dirs * t[:, None]
    intensity = np.where(owner >= 0, BOX_INTENSITY, GROUND_INTENSITY)
    return PointCloud(xyz, intensity, beam), list(spec.boxes)


@dataclass(frozen=True)
class SceneRandomization:
    """Uniform ranges used by :func:`make_dataset` for each frame."""

    min_boxes: int = 4
    max_boxes: int = 12
    x_range: tuple = (6.0, 46.0)
    y_range: tuple = (-20.0, 20.0)
    size_jitter: float = 0.1
    class_weights: tuple = (0.5, 0.25, 0.25)
    min_gap: float = 0.5


def random_boxes(rng: np.random.Generator, spec: SceneSpec,
                 ranges: SceneRandomization) -> list[BoxLabel]:
    """Non-overlapping boxes resting on the ground, in the sensor frame."""
    n = int(rng.integers(ranges.min_boxes, ranges.max_boxes + 1))
    boxes: list[BoxLabel] = []
    radii: list[float] = []
    weights = np.asarray(ranges.class_weights, dtype=np.float64)
    ground = -spec.sensor_height
    for _ in range(50 * n):
        if len(boxes) == n:
            break
        cls = int(rng.choice(len(CLASS_NAMES), p=weights / weights.sum()))
        jitter = rng.uniform(1 - ranges.size_jitter, 1 + ranges.size_jitter, 3)
        l, w, h = (float(v) for v in np.asarray(SIZE_PRIORS[cls]) * jitter)
        cx = float(rng.uniform(*ranges.x_range))
        cy = float(rng.uniform(*ranges.y_range))
        heading = float(math.pi - rng.uniform(0.0, 2 * math.pi))
        r = math.hypot(l, w) / 2
        if any(math.hypot(cx - b.cx, cy - b.cy) < r + rb + ranges.min_gap
               for b, rb in zip(boxes, radii)):
            continue
        boxes.append(BoxLabel(cls, cx, cy, ground + h / 2, l, w, h, heading))
        radii.append(r)
    return boxes


def frame_id(index: int) -> str:
    return f"{index:06d}"


def make_dataset(template: SceneSpec, n_frames: int, seed: int, out_dir: str | os.PathLike,
                 ranges: SceneRandomization = SceneRandomization()) -> Path:
    """Write ``frames/<id>.bin``, ``labels/<id>.json`` and ``manifest.json``.

    Frame ``i`` draws everything from ``mix64(seed, i)``; the template's own
    boxes and seed are ignored.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    out = Path(out_dir)
    frames = []
    for i in range(n_frames):
        frame_seed = mix64(seed, i)
        rng = np.random.default_rng(frame_seed)
        boxes = random_boxes(rng, template, ranges)
        spec = replace(template, boxes=tuple(boxes), seed=int(rng.integers(2**63)))
        cloud, labels = simulate(spec)
        fid = frame_id(i)
        write_frame(cloud, out / "frames" / f"{fid}.bin")
        write_labels(labels, out / "labels" / f"{fid}.json")
        frames.append({"id": fid, "beams": template.beams, "points": len(cloud),
                       "objects": len(labels), "frame_seed": frame_seed})
    manifest = {
        "schema_version": DATASET_SCHEMA,
        "tool_version": __version__,
        "seed": seed,
        "seed_rule": "frame_seed = splitmix64_finalizer(seed + (index + 1) * 0x9E3779B97F4A7C15)",
        "scene_template": {k: v for k, v in template.to_json().items()
                           if k not in ("boxes", "seed")},
        "randomization": asdict(ranges),
        "class_names": list(CLASS_NAMES),
        "size_priors": {CLASS_NAMES[c]: list(v) for c, v in SIZE_PRIORS.items()},
        "frames": frames,
    }
    atomic_write_json(out / "manifest.json", manifest)
    return out
