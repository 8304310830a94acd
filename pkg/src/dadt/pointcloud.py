"""LiDAR point clouds: data model, spherical geometry and binary frame I/O.

Frames on disk are headerless little-endian ``float32`` quadruples
``(x, y, z, intensity)``, the 16-byte stride used by KITTI-style velodyne
dumps. In memory all coordinates are ``float64``; converting back to
``float32`` on write is exact for anything that was read from disk.

Azimuth follows ``theta = arcsin(y / sqrt(x^2 + y^2))``, which folds the rear
hemisphere onto the front one (range ``[-pi/2, pi/2]``). Nothing downstream
reconstructs points from angles, so the fold is harmless; use
``numpy.arctan2(y, x)`` if a full-circle azimuth is ever needed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from dadt.fileio import atomic_write_bytes

FRAME_DTYPE = np.dtype("<f4")
RECORD_BYTES = 16


class FrameFormatError(ValueError):
    """Raised when a binary frame cannot be decoded."""


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


class SphericalCoord(NamedTuple):
    r: float
    phi: float
    theta: float


def to_spherical(p: Point) -> SphericalCoord:
    """Convert one point to ``(r, phi, theta)``.

    On the z axis ``phi = sign(z) * pi/2`` and ``theta = 0``; the origin maps
    to ``(0, 0, 0)``.
    """
    rho = math.hypot(p.x, p.y)
    r = math.hypot(rho, p.z)
    if rho == 0.0:
        phi = math.copysign(math.pi / 2, p.z) if p.z != 0.0 else 0.0
        return SphericalCoord(r, phi, 0.0)
    phi = math.atan(p.z / rho)
    theta = math.asin(max(-1.0, min(1.0, p.y / rho)))
    return SphericalCoord(r, phi, theta)


def spherical(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`to_spherical` over an ``(N, 3)`` array."""
    xyz = np.asarray(xyz, dtype=np.float64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    rho = np.hypot(x, y)
    r = np.hypot(rho, z)
    # arctan2 with rho >= 0 equals arctan(z / rho) and gives sign(z) * pi/2 at rho == 0
    phi = np.arctan2(z, rho)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, y / np.where(rho > 0, rho, 1.0), 0.0)
    theta = np.arcsin(np.clip(ratio, -1.0, 1.0))
    return r, phi, theta


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered LiDAR returns.

    ``xyz`` is ``(N, 3)`` float64, ``intensity`` ``(N,)`` float64 in ``[0, 1]``,
    ``beam_labels`` an optional ``(N,)`` int array of beam indices.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    beam_labels: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(intensity) != len(xyz):
            raise ValueError(f"{len(xyz)} points but {len(intensity)} intensities")
        if not (np.isfinite(xyz).all() and np.isfinite(intensity).all()):
            raise ValueError("point cloud contains non-finite values")
        if len(intensity) and (intensity.min() < 0.0 or intensity.max() > 1.0):
            raise ValueError("intensity must lie in [0, 1]")
        xyz.setflags(write=False)
        intensity.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)
        if self.beam_labels is not None:
            labels = np.ascontiguousarray(self.beam_labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(xyz):
                raise ValueError("beam_labels must align with points")
            if len(labels) and labels.min() < 0:
                raise ValueError("beam labels must be non-negative")
            labels.setflags(write=False)
            object.__setattr__(self, "beam_labels", labels)

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, frame_id: str = "") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), frame_id=frame_id)

    @classmethod
    def from_points(cls, points, frame_id: str = "") -> "PointCloud":
        arr = np.asarray([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3], frame_id=frame_id)

    def points(self) -> list[Point]:
        return [Point(*map(float, row), float(i)) for row, i in zip(self.xyz, self.intensity)]

    def subset(self, mask_or_index) -> "PointCloud":
        labels = None if self.beam_labels is None else self.beam_labels[mask_or_index]
        return PointCloud(self.xyz[mask_or_index], self.intensity[mask_or_index],
                          labels, self.frame_id)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.xyz, self.intensity, labels, self.frame_id)

    def spherical(self):
        return spherical(self.xyz)


def encode_frame(cloud: PointCloud) -> bytes:
    data = np.empty((len(cloud), 4), dtype=FRAME_DTYPE)
    data[:, :3] = cloud.xyz
    data[:, 3] = cloud.intensity
    return data.tobytes()


def decode_frame(raw: bytes, frame_id: str = "") -> PointCloud:
    if len(raw) % RECORD_BYTES:
        raise FrameFormatError(
            f"frame length {len(raw)} is not a multiple of {RECORD_BYTES} bytes")
    data = np.frombuffer(raw, dtype=FRAME_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(data).all(axis=1)
    if bad.any():
        raise FrameFormatError(f"non-finite value in record {int(np.argmax(bad))}")
    intensity = data[:, 3]
    out_of_range = (intensity < 0) | (intensity > 1)
    if out_of_range.any():
        raise FrameFormatError(
            f"intensity outside [0, 1] in record {int(np.argmax(out_of_range))}")
    return PointCloud(data[:, :3].astype(np.float64), intensity.astype(np.float64),
                      frame_id=frame_id)


def load_frame(path: str | os.PathLike, format: str = "bin") -> PointCloud:
    """Read a ``.bin`` frame; the frame id is the file stem."""
    if format != "bin":
        raise ValueError(f"unsupported frame format {format!r}")
    path = Path(path)
    return decode_frame(path.read_bytes(), frame_id=path.stem)


def write_frame(cloud: PointCloud, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, encode_frame(cloud))
