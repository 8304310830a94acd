"""Detector state (encoder + 1x1 detection head) and checkpoint files.

Checkpoint layout: ``uint32`` little-endian header length, a JSON header,
then every parameter as little-endian ``float32`` in the order
``w1, b1, w2, b2, head_w, head_b`` (each C-ordered). The header carries the
encoder description (version, C_in, hidden, d, layer shapes), the head
shapes, the grid, and a manifest with mode, config hash and seed.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dadt import __version__
from dadt.bev import (EncoderParams, GridSpec, encode, encoder_from_header, encoder_header,
                      pack_blob, unpack_blob)
from dadt.fileio import atomic_write_bytes
from dadt.losses import HEAD_DIM
from dadt.rng import generator

CHECKPOINT_KIND = "dadt-checkpoint"


@dataclass(frozen=True, eq=False)
class ModelState:
    encoder: EncoderParams
    head_w: np.ndarray  # (d, 7)
    head_b: np.ndarray  # (7,)
    frozen: bool = False
    velocity: tuple | None = None

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.head_w, self.head_b]

    def freeze(self) -> "ModelState":
        """A read-only copy; any in-place write to its arrays raises."""
        arrays = [a.copy() for a in self.arrays()]
        for a in arrays:
            a.setflags(write=False)
        return ModelState(EncoderParams(*arrays[:4]), arrays[4], arrays[5], frozen=True)


def init_head(rng: np.random.Generator, d: int):
    """Uniform in ``[-1/sqrt(d), 1/sqrt(d)]`` for weights and biases."""
    bound = 1.0 / math.sqrt(d)
    return rng.uniform(-bound, bound, (d, HEAD_DIM)), rng.uniform(-bound, bound, HEAD_DIM)


def init_model(seed: int, c_in: int = 3, hidden: int = 16, d: int = 16) -> ModelState:
    """A model trained from scratch (used to build the pre-trained teacher)."""
    encoder = EncoderParams.random(generator(seed, 0), c_in, hidden, d)
    head_w, head_b = init_head(generator(seed, 1), d)
    return ModelState(encoder, head_w, head_b)


def init_student(teacher: ModelState, seed: int) -> ModelState:
    """Copy the teacher's encoder exactly; draw a fresh head from ``seed``."""
    head_w, head_b = init_head(generator(seed, 1), teacher.encoder.d)
    return ModelState(teacher.encoder.copy(), head_w, head_b)


def head_forward(F: np.ndarray, state: ModelState) -> np.ndarray:
    return F @ state.head_w + state.head_b


def forward(grid: np.ndarray, state: ModelState):
    F = encode(grid, state.encoder)
    return F, head_forward(F, state)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    state: ModelState
    grid: GridSpec
    manifest: dict


def checkpoint_bytes(state: ModelState, grid: GridSpec, manifest: dict) -> bytes:
    header = encoder_header(state.encoder)
    header.update({
        "kind": CHECKPOINT_KIND,
        "tool_version": __version__,
        "head": [list(state.head_w.shape), list(state.head_b.shape)],
        "grid": {"x_min": grid.x_min, "x_max": grid.x_max, "y_min": grid.y_min,
                 "y_max": grid.y_max, "cell": grid.cell},
        "manifest": manifest,
    })
    return pack_blob(header, state.arrays())


def save_checkpoint(path: str | os.PathLike, state: ModelState, grid: GridSpec,
                    manifest: dict) -> None:
    atomic_write_bytes(path, checkpoint_bytes(state, grid, manifest))


def load_checkpoint(path: str | os.PathLike, frozen: bool = False) -> Checkpoint:
    header, blob = unpack_blob(Path(path).read_bytes())
    if header.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a detector checkpoint")
    encoder = encoder_from_header(header, blob)
    pos = sum(a.size for a in encoder.arrays())
    (wshape, bshape) = [tuple(s) for s in header["head"]]
    nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
    if pos + nw + nb != len(blob):
        raise ValueError(f"{path}: parameter blob has the wrong length")
    head_w = blob[pos:pos + nw].reshape(wshape)
    head_b = blob[pos + nw:pos + nw + nb].reshape(bshape)
    state = ModelState(encoder, head_w, head_b)
    if frozen:
        state = state.freeze()
    return Checkpoint(state, GridSpec(**header["grid"]), header["manifest"])
