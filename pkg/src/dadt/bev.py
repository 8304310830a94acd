"""Bird's-eye-view rasterization, a small conv encoder, and box pooling.

Grid axis 0 (``H``) runs along x, axis 1 (``W``) along y. Cell ``(i, j)``
covers ``[x_min + i*cell, x_min + (i+1)*cell) x [y_min + j*cell, ...)``.

The encoder is ``conv3x3 -> ReLU -> conv3x3`` with stride 1 and zero padding
1. Weights are stored as ``(3, 3, in, out)`` arrays and applied as
cross-correlation::

    out[h, w, o] = b[o] + sum_{dy, dx, c} pad(x)[h + dy, w + dx, c] * W[dy, dx, c, o]
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dadt.boxes import BoxLabel, points_in_footprint
from dadt.fileio import atomic_write_bytes
from dadt.pointcloud import PointCloud

C_IN = 3
HIDDEN = 16
FEATURE_DIM = 16
PARAMS_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    x_min: float = 0.0
    x_max: float = 51.2
    y_min: float = -25.6
    y_max: float = 25.6
    cell: float = 0.8

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.cell > 0):
            raise ValueError(f"invalid grid {self}")
        if self.H < 1 or self.W < 1:
            raise ValueError(f"grid {self} has no cells")

    @property
    def H(self) -> int:
        # tolerate rounding in extents that are exact multiples of the cell
        return int(math.floor((self.x_max - self.x_min) / self.cell + 1e-9))

    @property
    def W(self) -> int:
        return int(math.floor((self.y_max - self.y_min) / self.cell + 1e-9))

    @property
    def shape(self) -> tuple[int, int]:
        return self.H, self.W

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """``(H, W)`` arrays of cell-center x and y."""
        xs = self.x_min + (np.arange(self.H) + 0.5) * self.cell
        ys = self.y_min + (np.arange(self.W) + 0.5) * self.cell
        return np.meshgrid(xs, ys, indexing="ij")

    def cell_index(self, x, y):
        """Integer cell indices (may fall outside the grid)."""
        i = np.floor((np.asarray(x, dtype=np.float64) - self.x_min) / self.cell).astype(np.int64)
        j = np.floor((np.asarray(y, dtype=np.float64) - self.y_min) / self.cell).astype(np.int64)
        return i, j

    def contains_xy(self, x: float, y: float) -> bool:
        i, j = self.cell_index(x, y)
        return bool(0 <= i < self.H and 0 <= j < self.W)


def rasterize(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """``(H, W, 3)`` input grid: log(1 + count), max z, mean intensity.

    Empty cells are zero in every channel; points outside the half-open
    grid extent are dropped.
    """
    H, W = spec.shape
    grid = np.zeros((H, W, C_IN))
    if len(cloud) == 0:
        return grid
    i, j = spec.cell_index(cloud.xyz[:, 0], cloud.xyz[:, 1])
    ok = (i >= 0) & (i < H) & (j >= 0) & (j < W)
    flat = i[ok] * W + j[ok]
    z = cloud.xyz[ok, 2]
    count = np.bincount(flat, minlength=H * W).astype(np.float64)
    isum = np.bincount(flat, weights=cloud.intensity[ok], minlength=H * W)
    zmax = np.full(H * W, -np.inf)
    np.maximum.at(zmax, flat, z)
    filled = count > 0
    grid[..., 0] = np.log1p(count).reshape(H, W)
    grid[..., 1] = np.where(filled, zmax, 0.0).reshape(H, W)
    grid[..., 2] = np.where(filled, isum / np.maximum(count, 1), 0.0).reshape(H, W)
    return grid


@dataclass(frozen=True, eq=False)
class EncoderParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        c_in, hidden = self.w1.shape[2:]
        if self.w1.shape[:2] != (3, 3) or self.w2.shape[:3] != (3, 3, hidden):
            raise ValueError("encoder kernel shapes must be (3, 3, in, out)")
        if self.b1.shape != (hidden,) or self.b2.shape != (self.w2.shape[3],):
            raise ValueError("encoder bias shapes do not match the kernels")

    NAMES = ("w1", "b1", "w2", "b2")

    @property
    def c_in(self) -> int:
        return self.w1.shape[2]

    @property
    def hidden(self) -> int:
        return self.w1.shape[3]

    @property
    def d(self) -> int:
        return self.w2.shape[3]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(a.copy() for a in self.arrays()))

    def flat(self) -> np.ndarray:
        """All parameters, layer-major, each array in C order."""
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "EncoderParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return EncoderParams(*out)

    @classmethod
    def zeros(cls, c_in=C_IN, hidden=HIDDEN, d=FEATURE_DIM) -> "EncoderParams":
        return cls(np.zeros((3, 3, c_in, hidden)), np.zeros(hidden),
                   np.zeros((3, 3, hidden, d)), np.zeros(d))

    @classmethod
    def random(cls, rng: np.random.Generator, c_in=C_IN, hidden=HIDDEN,
               d=FEATURE_DIM) -> "EncoderParams":
        """Uniform fan-in init: every entry in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
        a1 = 1.0 / math.sqrt(9 * c_in)
        a2 = 1.0 / math.sqrt(9 * hidden)
        return cls(rng.uniform(-a1, a1, (3, 3, c_in, hidden)), rng.uniform(-a1, a1, hidden),
                   rng.uniform(-a2, a2, (3, 3, hidden, d)), rng.uniform(-a2, a2, d))


def _patches(x: np.ndarray) -> np.ndarray:
    """``(H, W, 9*C)`` 3x3 neighborhoods of a zero-padded ``(H, W, C)`` map."""
    H, W, C = x.shape
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    return np.concatenate([p[dy:dy + H, dx:dx + W] for dy in range(3) for dx in range(3)],
                          axis=2)


def _unpatch(g: np.ndarray, C: int) -> np.ndarray:
    """Adjoint of :func:`_patches`."""
    H, W, _ = g.shape
    p = np.zeros((H + 2, W + 2, C))
    for k, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
        p[dy:dy + H, dx:dx + W] += g[..., k * C:(k + 1) * C]
    return p[1:-1, 1:-1]


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _patches(x) @ w.reshape(-1, w.shape[3]) + b


def _check_grid(grid: np.ndarray, params: EncoderParams):
    if grid.ndim != 3 or grid.shape[2] != params.c_in:
        raise ValueError(f"grid shape {grid.shape} does not match C_in={params.c_in}")


def encode(grid: np.ndarray, params: EncoderParams) -> np.ndarray:
    """``(H, W, d)`` BEV features."""
    _check_grid(grid, params)
    hidden = np.maximum(conv3x3(grid, params.w1, params.b1), 0.0)
    return conv3x3(hidden, params.w2, params.b2)


def encode_backward(grid: np.ndarray, params: EncoderParams, upstream: np.ndarray):
    """Reverse-mode gradients of ``sum(upstream * encode(grid, params))``.

    Returns ``(param_grads, grid_grad)``; the ReLU derivative at 0 is 0.
    """
    _check_grid(grid, params)
    H, W, _ = grid.shape
    if upstream.shape != (H, W, params.d):
        raise ValueError(f"upstream shape {upstream.shape} != {(H, W, params.d)}")
    p1 = _patches(grid)
    pre = p1 @ params.w1.reshape(-1, params.hidden) + params.b1
    act = np.maximum(pre, 0.0)
    p2 = _patches(act)

    g2 = upstream.reshape(-1, params.d)
    dw2 = (p2.reshape(-1, p2.shape[2]).T @ g2).reshape(params.w2.shape)
    db2 = g2.sum(axis=0)
    dact = _unpatch(upstream @ params.w2.reshape(-1, params.d).T, params.hidden)
    dpre = dact * (pre > 0)
    g1 = dpre.reshape(-1, params.hidden)
    dw1 = (p1.reshape(-1, p1.shape[2]).T @ g1).reshape(params.w1.shape)
    db1 = g1.sum(axis=0)
    dgrid = _unpatch(dpre @ params.w1.reshape(-1, params.hidden).T, params.c_in)
    return EncoderParams(dw1, db1, dw2, db2), dgrid


def _footprint(box: BoxLabel, spec: GridSpec):
    """Flat indices of the cells pooled for ``box``."""
    if not spec.contains_xy(box.cx, box.cy):
        raise ValueError(f"box center ({box.cx:.3f}, {box.cy:.3f}) of {box} is outside the grid")
    # only cells within the box's circumscribed square can qualify
    r = math.hypot(box.l, box.w) / 2
    i0, j0 = spec.cell_index(box.cx - r, box.cy - r)
    i1, j1 = spec.cell_index(box.cx + r, box.cy + r)
    i0, j0 = max(int(i0), 0), max(int(j0), 0)
    i1, j1 = min(int(i1), spec.H - 1), min(int(j1), spec.W - 1)
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    xs = spec.x_min + (ii + 0.5) * spec.cell
    ys = spec.y_min + (jj + 0.5) * spec.cell
    inside = points_in_footprint(xs, ys, box)
    cells = (ii[inside] * spec.W + jj[inside]).ravel()
    if len(cells) == 0:
        # no cell center inside: use the cell holding the box center
        i, j = spec.cell_index(box.cx, box.cy)
        cells = np.array([int(i) * spec.W + int(j)])
    return np.sort(cells)


def pool_object(F: np.ndarray, box: BoxLabel, spec: GridSpec) -> np.ndarray:
    """Mean feature over cells whose centers lie in the box's BEV footprint.

    Falls back to the cell containing the box center when the footprint
    covers no cell center.
    """
    if F.shape[:2] != spec.shape:
        raise ValueError(f"feature map {F.shape[:2]} does not match grid {spec.shape}")
    cells = _footprint(box, spec)
    return F.reshape(-1, F.shape[2])[cells].mean(axis=0)


def pool_object_backward(upstream: np.ndarray, box: BoxLabel, spec: GridSpec) -> np.ndarray:
    """Gradient of ``upstream . pool_object(F, box, spec)`` with respect to ``F``."""
    cells = _footprint(box, spec)
    g = np.zeros((spec.H * spec.W, len(upstream)))
    g[cells] = upstream / len(cells)
    return g.reshape(spec.H, spec.W, len(upstream))


def pool_cells(box: BoxLabel, spec: GridSpec) -> np.ndarray:
    """Flat cell indices :func:`pool_object` averages over."""
    return _footprint(box, spec)


# -- serialization ---------------------------------------------------------

def pack_blob(header: dict, arrays) -> bytes:
    """``uint32 header length | JSON header | float32 LE blob``."""
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    return struct.pack("<I", len(head)) + head + blob


def unpack_blob(raw: bytes):
    (n,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + n].decode("utf-8"))
    blob = np.frombuffer(raw[4 + n:], dtype="<f4").astype(np.float64)
    return header, blob


def encoder_header(params: EncoderParams) -> dict:
    return {"version": PARAMS_VERSION, "C_in": params.c_in, "hidden": params.hidden,
            "d": params.d, "layers": [list(a.shape) for a in params.arrays()],
            "order": list(EncoderParams.NAMES)}


def encoder_from_header(header: dict, blob: np.ndarray) -> EncoderParams:
    if header.get("version") != PARAMS_VERSION:
        raise ValueError(f"unsupported parameter version {header.get('version')}")
    shapes = [tuple(s) for s in header["layers"]]
    arrays, pos = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        if pos + size > len(blob):
            raise ValueError("parameter blob is truncated")
        arrays.append(blob[pos:pos + size].reshape(shape))
        pos += size
    return EncoderParams(*arrays)


def save_encoder(params: EncoderParams, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, pack_blob(encoder_header(params), params.arrays()))


def load_encoder(path: str | os.PathLike) -> EncoderParams:
    header, blob = unpack_blob(Path(path).read_bytes())
    return encoder_from_header(header, blob)
