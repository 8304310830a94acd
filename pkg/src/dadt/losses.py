"""Distillation and detection losses with hand-derived gradients.

Per-class object features are passed as ``{class_id: (N_c, d) array}`` where
row ``i`` of the teacher and student arrays belong to the same ground-truth
box. Classes without objects are simply absent from the dict.

Context similarity, for a class with object features ``z_1..z_N`` and a BEV
map ``F`` of shape ``(H, W, d)``::

    map(h, w)  = (1/N) sum_i <z_i, F(h, w)>          (optionally / sqrt(d))
    a_S        = F_S * map(z_S, F_S)[..., None]
    a_T        = F_T * map(z_T, F_S)[..., None]      (teacher_map_source="student")
    a_T        = F_T * map(z_T, F_T)[..., None]      (teacher_map_source="teacher")
    L_c        = sum_c mean((a_T - a_S) ** 2)

The teacher-side map is computed against the student features by default,
so ``L_c`` reaches the student through ``a_T`` as well as ``a_S``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dadt.bev import GridSpec

TEACHER_MAP_SOURCES = ("student", "teacher")
REG_DIM = 6
HEAD_DIM = 1 + REG_DIM


@dataclass(frozen=True)
class LossConfig:
    lambda_c: float = 1.0
    lambda_o: float = 1.0
    epsilon_norm: float = 1e-12
    teacher_map_source: str = "student"
    scale_by_sqrt_d: bool = False

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_o < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epsilon_norm <= 0:
            raise ValueError("epsilon_norm must be positive")
        if self.teacher_map_source not in TEACHER_MAP_SOURCES:
            raise ValueError(f"teacher_map_source must be one of {TEACHER_MAP_SOURCES}")


@dataclass(frozen=True)
class LossBreakdown:
    l_det: float
    l_o: float
    l_c: float
    total: float
    l_o_per_class: dict = field(default_factory=dict)
    l_c_per_class: dict = field(default_factory=dict)


def _check_classes(a: dict, b: dict, what: str):
    if set(a) != set(b):
        raise ValueError(f"{what}: class sets differ ({sorted(a)} vs {sorted(b)})")


def object_similarity_loss(zT: dict, zS: dict, epsilon_norm: float = 1e-12):
    """``sum_c (1/N_c) sum_i ||zT_i - zS_i||_2``.

    Returns ``(loss, per_class, grads)`` where ``grads[c]`` is the gradient
    with respect to ``zS[c]``. The norm's gradient uses
    ``max(||diff||, epsilon_norm)`` in the denominator.
    """
    _check_classes(zT, zS, "object similarity")
    total = 0.0
    per_class, grads = {}, {}
    for c in sorted(zS):
        t = np.asarray(zT[c], dtype=np.float64)
        s = np.asarray(zS[c], dtype=np.float64)
        if t.shape != s.shape or t.ndim != 2 or len(s) == 0:
            raise ValueError(f"class {c}: teacher {t.shape} and student {s.shape} must match")
        n = len(s)
        diff = s - t
        norms = np.sqrt(np.sum(diff * diff, axis=1))
        loss_c = float(norms.sum() / n)
        per_class[c] = loss_c
        total += loss_c
        grads[c] = diff / (n * np.maximum(norms, epsilon_norm))[:, None]
    return total, per_class, grads


def context_similarity_map(z: np.ndarray, F: np.ndarray, scale_by_sqrt_d: bool = False):
    """``(H, W)`` map of mean dot products between object features and cells."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.ndim != 2 or z.shape[1] != F.shape[2] or len(z) == 0:
        raise ValueError(f"object features {np.shape(z)} incompatible with map {F.shape}")
    m = F @ z.mean(axis=0)
    if scale_by_sqrt_d:
        m = m / math.sqrt(F.shape[2])
    return m


def attended_student(F_S: np.ndarray, zS: dict, scale_by_sqrt_d: bool = False) -> dict:
    return {c: F_S * context_similarity_map(zS[c], F_S, scale_by_sqrt_d)[..., None]
            for c in sorted(zS)}


def attended_teacher(F_T: np.ndarray, zT: dict, F_S: np.ndarray,
                     teacher_map_source: str = "student",
                     scale_by_sqrt_d: bool = False) -> dict:
    if F_T.shape != F_S.shape:
        raise ValueError(f"teacher map {F_T.shape} and student map {F_S.shape} differ")
    if teacher_map_source not in TEACHER_MAP_SOURCES:
        raise ValueError(f"teacher_map_source must be one of {TEACHER_MAP_SOURCES}")
    keys = F_S if teacher_map_source == "student" else F_T
    return {c: F_T * context_similarity_map(zT[c], keys, scale_by_sqrt_d)[..., None]
            for c in sorted(zT)}


def context_similarity_loss(aT: dict, aS: dict):
    """``sum_c mean((aT_c - aS_c)^2)``; returns ``(loss, per_class, grads wrt aS)``."""
    _check_classes(aT, aS, "context similarity")
    total = 0.0
    per_class, grads = {}, {}
    for c in sorted(aS):
        if aT[c].shape != aS[c].shape:
            raise ValueError(f"class {c}: attended shapes {aT[c].shape} and {aS[c].shape}")
        diff = aT[c] - aS[c]
        loss_c = float(np.mean(diff * diff))
        per_class[c] = loss_c
        total += loss_c
        grads[c] = -2.0 * diff / diff.size
    return total, per_class, grads


def context_loss_full(F_S: np.ndarray, zS: dict, F_T: np.ndarray, zT: dict,
                      teacher_map_source: str = "student", scale_by_sqrt_d: bool = False):
    """``L_c`` with gradients for every student-side input.

    Returns ``(loss, per_class, dF_S, dzS)``. ``dF_S`` collects the direct
    paths through ``a_S`` (both as value and as key of the map) and, for the
    student-sourced teacher map, the path through ``a_T``. ``dzS`` holds
    gradients with respect to the rows of ``zS``; chaining them through the
    pooling step is up to the caller.
    """
    _check_classes(zT, zS, "context similarity")
    aS = attended_student(F_S, zS, scale_by_sqrt_d)
    aT = attended_teacher(F_T, zT, F_S, teacher_map_source, scale_by_sqrt_d)
    loss, per_class, g_aS = context_similarity_loss(aT, aS)
    s = 1.0 / math.sqrt(F_S.shape[2]) if scale_by_sqrt_d else 1.0
    dF = np.zeros_like(F_S)
    dzS = {}
    for c in sorted(zS):
        zs_mean = np.asarray(zS[c], dtype=np.float64).mean(axis=0)
        zt_mean = np.asarray(zT[c], dtype=np.float64).mean(axis=0)
        m_S = s * (F_S @ zs_mean)
        g = g_aS[c]  # dL/da_S; dL/da_T = -g
        # a_S = F_S * m_S
        dF += g * m_S[..., None]
        dm_S = np.sum(g * F_S, axis=2)
        dF += s * dm_S[..., None] * zs_mean
        dz_mean = s * np.tensordot(dm_S, F_S, axes=([0, 1], [0, 1]))
        if teacher_map_source == "student":
            # a_T = F_T * m_T with m_T = s * F_S @ zt_mean
            dm_T = np.sum(-g * F_T, axis=2)
            dF += s * dm_T[..., None] * zt_mean
        n = len(zS[c])
        dzS[c] = np.tile(dz_mean / n, (n, 1))
    return loss, per_class, dF, dzS


# -- detection ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DetectionTargets:
    positive: np.ndarray   # (H, W) bool
    regression: np.ndarray  # (H, W, 6)


def fold_heading(h: float) -> float:
    """Equivalent heading of a rectangle in ``[-pi/2, pi/2)``."""
    return (h + math.pi / 2) % math.pi - math.pi / 2


def detection_targets(boxes, spec: GridSpec) -> DetectionTargets:
    """One positive cell per box (the cell holding its center).

    Regression targets per positive cell: center offset from the cell center
    in cell units (dx, dy), log l, log w, sin and cos of the heading folded to
    ``[-pi/2, pi/2)`` (a rectangle is symmetric under a half turn). Boxes
    centered outside the grid are skipped; if two centers share a cell the
    first box wins.
    """
    H, W = spec.shape
    positive = np.zeros((H, W), dtype=bool)
    reg = np.zeros((H, W, REG_DIM))
    for box in boxes:
        i, j = spec.cell_index(box.cx, box.cy)
        i, j = int(i), int(j)
        if not (0 <= i < H and 0 <= j < W) or positive[i, j]:
            continue
        positive[i, j] = True
        ccx = spec.x_min + (i + 0.5) * spec.cell
        ccy = spec.y_min + (j + 0.5) * spec.cell
        h = fold_heading(box.heading)
        reg[i, j] = ((box.cx - ccx) / spec.cell, (box.cy - ccy) / spec.cell,
                     math.log(box.l), math.log(box.w), math.sin(h), math.cos(h))
    return DetectionTargets(positive, reg)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def detection_loss(head_output: np.ndarray, targets: DetectionTargets):
    """Mean BCE over all cells plus mean squared regression error on positives.

    Returns ``(loss, objectness_term, regression_term, grad)``. Without
    positive cells the regression term is 0.
    """
    H, W = targets.positive.shape
    if head_output.shape != (H, W, HEAD_DIM):
        raise ValueError(f"head output {head_output.shape} != {(H, W, HEAD_DIM)}")
    logits = head_output[..., 0]
    y = targets.positive.astype(np.float64)
    n_cells = H * W
    bce = float(np.sum(_softplus(logits) - y * logits) / n_cells)
    grad = np.zeros_like(head_output)
    grad[..., 0] = (sigmoid(logits) - y) / n_cells
    n_pos = int(targets.positive.sum())
    reg = 0.0
    if n_pos:
        diff = (head_output[..., 1:] - targets.regression) * targets.positive[..., None]
        reg = float(np.sum(diff * diff) / (n_pos * REG_DIM))
        grad[..., 1:] = 2.0 * diff / (n_pos * REG_DIM)
    return bce + reg, bce, reg, grad


def total_loss(l_det: float, l_o: float, l_c: float, config: LossConfig = LossConfig(),
               l_o_per_class=None, l_c_per_class=None) -> LossBreakdown:
    total = l_det + config.lambda_c * l_c + config.lambda_o * l_o
    return LossBreakdown(l_det, l_o, l_c, total, dict(l_o_per_class or {}),
                         dict(l_c_per_class or {}))
