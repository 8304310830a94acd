"""Central finite-difference checks of every hand-written gradient.

Each component draws random small instances (H, W <= 12, feature width <= 8),
computes the analytic gradient and compares it with central differences at
step ``EPS``. The error of one entry is::

    |analytic - numeric| / max(|analytic|, |numeric|, 1e-3 * max|numeric|, 1e-12)

so entries three orders below the largest one are judged against that scale
(the O(EPS**2) truncation error of a quartic loss swamps them otherwise). Encoder
steps that would move a hidden pre-activation across the ReLU kink are halved
until they do not (a kink inside the stencil makes the difference quotient
meaningless).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dadt.bev import (EncoderParams, GridSpec, encode, encode_backward, pool_object,
                      pool_object_backward, _patches)
from dadt.boxes import BoxLabel
from dadt.losses import (HEAD_DIM, context_loss_full, detection_loss, detection_targets,
                         object_similarity_loss)
from dadt.rng import generator

EPS = 1e-3
TOLERANCE = 1e-4
INSTANCES = 20
COMPONENTS = ("encoder", "pooling", "detection", "object", "context", "context_z")


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    instances: int
    entries: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if not a.size:
        return 0.0
    floor = max(1e-3 * float(np.max(np.abs(n))), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def central_difference(f, x: np.ndarray, eps: float = EPS, guard=None) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x``.

    ``guard(x_plus, x_minus)`` may return False to request a smaller step.
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        h = eps
        while True:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            if guard is None or guard(xp, xm) or h < eps * 2.0 ** -30:
                break
            h /= 2
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def _random_grid_spec(rng) -> GridSpec:
    H, W = (int(v) for v in rng.integers(3, 13, 2))
    cell = float(rng.uniform(0.5, 1.5))
    return GridSpec(0.0, H * cell, -W * cell / 2, W * cell / 2, cell)


def _random_box(rng, spec: GridSpec, class_id: int = 0) -> BoxLabel:
    cx = float(rng.uniform(spec.x_min + 0.01, spec.x_min + spec.H * spec.cell - 0.01))
    cy = float(rng.uniform(spec.y_min + 0.01, spec.y_min + spec.W * spec.cell - 0.01))
    l, w = (float(v) for v in rng.uniform(0.3, 4.0, 2))
    heading = float(math.pi - rng.uniform(0, 2 * math.pi))
    return BoxLabel(class_id, cx, cy, 0.0, l, w, 1.5, heading)


def _corrupt(g, corrupt: bool):
    return g * 1.01 if corrupt else g


def check_encoder(rng, corrupt=False) -> tuple[float, int]:
    H, W = (int(v) for v in rng.integers(3, 13, 2))
    hidden, d = (int(v) for v in rng.integers(2, 9, 2))
    grid = rng.normal(size=(H, W, 3))
    params = EncoderParams.random(rng, 3, hidden, d)
    up = rng.normal(size=(H, W, d))
    g_params, g_grid = encode_backward(grid, params, up)
    flat = params.flat()
    p1 = _patches(grid)

    def pre(fl):
        p = params.with_flat(fl)
        return p1 @ p.w1.reshape(-1, hidden) + p.b1

    def same_pattern(a, b):
        return np.array_equal(pre(a) > 0, pre(b) > 0)

    num = central_difference(lambda fl: float(np.sum(up * encode(grid, params.with_flat(fl)))),
                             flat, guard=same_pattern)
    w1 = params.w1.reshape(-1, hidden)

    def pattern_of_grid(ga, gb):
        return np.array_equal(_patches(ga) @ w1 + params.b1 > 0,
                              _patches(gb) @ w1 + params.b1 > 0)

    num_grid = central_difference(lambda g: float(np.sum(up * encode(g, params))), grid,
                                  guard=pattern_of_grid)
    err = max(rel_error(_corrupt(g_params.flat(), corrupt), num), rel_error(g_grid, num_grid))
    return err, flat.size + grid.size


def check_pooling(rng, corrupt=False):
    spec = _random_grid_spec(rng)
    d = int(rng.integers(2, 9))
    F = rng.normal(size=(spec.H, spec.W, d))
    box = _random_box(rng, spec)
    up = rng.normal(size=d)
    analytic = _corrupt(pool_object_backward(up, box, spec), corrupt)
    num = central_difference(lambda x: float(up @ pool_object(x, box, spec)), F)
    return rel_error(analytic, num), F.size


def check_detection(rng, corrupt=False):
    spec = _random_grid_spec(rng)
    boxes = [_random_box(rng, spec) for _ in range(int(rng.integers(0, 4)))]
    targets = detection_targets(boxes, spec)
    out = rng.normal(size=(spec.H, spec.W, HEAD_DIM))
    _, _, _, grad = detection_loss(out, targets)
    num = central_difference(lambda x: detection_loss(x, targets)[0], out)
    return rel_error(_corrupt(grad, corrupt), num), out.size


def _random_z(rng, d):
    counts = {c: int(rng.integers(1, 4)) for c in range(3) if rng.random() < 0.8} or {0: 1}
    zT = {c: rng.normal(size=(n, d)) for c, n in counts.items()}
    zS = {c: rng.normal(size=(n, d)) for c, n in counts.items()}
    return zT, zS


def check_object(rng, corrupt=False):
    d = int(rng.integers(2, 9))
    zT, zS = _random_z(rng, d)
    _, _, grads = object_similarity_loss(zT, zS)
    keys = sorted(zS)
    flat = np.concatenate([zS[c].ravel() for c in keys])

    def unflat(v):
        out, pos = {}, 0
        for c in keys:
            out[c] = v[pos:pos + zS[c].size].reshape(zS[c].shape)
            pos += zS[c].size
        return out

    num = central_difference(lambda v: object_similarity_loss(zT, unflat(v))[0], flat)
    analytic = np.concatenate([grads[c].ravel() for c in keys])
    return rel_error(_corrupt(analytic, corrupt), num), flat.size


def _context_instance(rng):
    spec = _random_grid_spec(rng)
    d = int(rng.integers(2, 9))
    F_S = rng.normal(size=(spec.H, spec.W, d))
    F_T = rng.normal(size=(spec.H, spec.W, d))
    boxes = {}
    for c in range(3):
        if rng.random() < 0.7 or c == 0:
            boxes[c] = [_random_box(rng, spec, c) for _ in range(int(rng.integers(1, 4)))]
    source = "student" if rng.random() < 0.75 else "teacher"
    scale = bool(rng.random() < 0.25)
    return spec, F_S, F_T, boxes, source, scale


def check_context(rng, corrupt=False):
    """Full chain: ``L_c(F_S, pool(F_S))`` against ``F_S``."""
    spec, F_S, F_T, boxes, source, scale = _context_instance(rng)
    zT = {c: np.stack([pool_object(F_T, b, spec) for b in bs]) for c, bs in boxes.items()}

    def loss(F):
        zS = {c: np.stack([pool_object(F, b, spec) for b in bs]) for c, bs in boxes.items()}
        return context_loss_full(F, zS, F_T, zT, source, scale)[0]

    zS = {c: np.stack([pool_object(F_S, b, spec) for b in bs]) for c, bs in boxes.items()}
    _, _, dF, dz = context_loss_full(F_S, zS, F_T, zT, source, scale)
    for c, bs in boxes.items():
        for row, b in zip(dz[c], bs):
            dF = dF + pool_object_backward(row, b, spec)
    num = central_difference(loss, F_S)
    return rel_error(_corrupt(dF, corrupt), num), F_S.size


def check_context_z(rng, corrupt=False):
    """``L_c`` against free student object features."""
    spec, F_S, F_T, _, source, scale = _context_instance(rng)
    d = F_S.shape[2]
    zT, zS = _random_z(rng, d)
    _, _, _, dz = context_loss_full(F_S, zS, F_T, zT, source, scale)
    keys = sorted(zS)
    flat = np.concatenate([zS[c].ravel() for c in keys])

    def unflat(v):
        out, pos = {}, 0
        for c in keys:
            out[c] = v[pos:pos + zS[c].size].reshape(zS[c].shape)
            pos += zS[c].size
        return out

    num = central_difference(
        lambda v: context_loss_full(F_S, unflat(v), F_T, zT, source, scale)[0], flat)
    analytic = np.concatenate([dz[c].ravel() for c in keys])
    return rel_error(_corrupt(analytic, corrupt), num), flat.size


CHECKS = {
    "encoder": check_encoder,
    "pooling": check_pooling,
    "detection": check_detection,
    "object": check_object,
    "context": check_context,
    "context_z": check_context_z,
}


def run(seed: int = 0, instances: int = INSTANCES, corrupt: str | None = None,
        components=COMPONENTS) -> list[CheckResult]:
    """Run every component on ``instances`` random instances each."""
    if corrupt is not None and corrupt not in CHECKS:
        raise ValueError(f"unknown component {corrupt!r}")
    results = []
    for k, name in enumerate(components):
        rng = generator(seed, k)
        worst, entries = 0.0, 0
        for _ in range(instances):
            err, n = CHECKS[name](rng, corrupt=(name == corrupt))
            worst = max(worst, err)
            entries += n
        results.append(CheckResult(name, worst, instances, entries))
    return results
