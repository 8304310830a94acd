"""Teacher-student finetuning.

The teacher is frozen and sees pseudo low-beam versions of each frame; the
student sees the full-density frame. Per frame the student minimizes::

    L = L_det + lambda_c * L_c + lambda_o * L_o

(``vanilla`` mode drops the two regularizers and needs no teacher). Frames of
a batch are processed in a fixed order and their gradients averaged before a
single SGD-with-momentum update ``v = mu * v + g; p -= lr * v``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from dadt import __version__
from dadt.beam import generate_pseudo_low_beam
from dadt.bev import EncoderParams, GridSpec, encode, encode_backward, pool_cells, rasterize
from dadt.boxes import CLASS_NAMES, DEFAULT_IOU_THRESHOLDS
from dadt.dataset import Frame, load_dataset
from dadt.distill.model import (ModelState, init_model, init_student, load_checkpoint,
                                save_checkpoint)
from dadt.fileio import atomic_write_json, atomic_write_text
from dadt.losses import (DetectionTargets, LossBreakdown, LossConfig, context_loss_full,
                         detection_loss, detection_targets, object_similarity_loss,
                         total_loss)
from dadt.rng import generator, mix64

log = logging.getLogger(__name__)

MODES = ("vanilla", "dadt")


class TrainingDiverged(ArithmeticError):
    """A loss or parameter became non-finite; nothing is written."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dadt"
    epochs: int = 20
    batch_size: int = 1
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = LossConfig()
    source_beams: int = 64
    target_beams: int = 40
    grid: GridSpec = GridSpec()
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.source_beams >= self.target_beams >= 1:
            raise ValueError("need source_beams >= target_beams >= 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["iou_thresholds"] = {CLASS_NAMES[c]: t for c, t in sorted(self.iou_thresholds.items())}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class PreparedFrame:
    frame_id: str
    grid: np.ndarray          # student input
    boxes: list               # boxes centered inside the grid
    targets: DetectionTargets
    cells: dict               # class -> list of pooled cell index arrays
    F_T: np.ndarray | None    # teacher features of the pseudo low-beam frame
    zT: dict                  # class -> (N_c, d) teacher object features


def _pool_all(F: np.ndarray, cells: dict) -> dict:
    flat = F.reshape(-1, F.shape[2])
    return {c: np.stack([flat[idx].mean(axis=0) for idx in lst]) for c, lst in cells.items()}


def prepare_frame(frame: Frame, config: TrainConfig, teacher: ModelState | None,
                  index: int = 0) -> PreparedFrame:
    spec = config.grid
    boxes = [b for b in frame.boxes if spec.contains_xy(b.cx, b.cy)]
    cells: dict = {}
    for b in boxes:
        cells.setdefault(b.class_id, []).append(pool_cells(b, spec))
    cells = dict(sorted(cells.items()))
    F_T, zT = None, {}
    if teacher is not None and config.mode == "dadt":
        pseudo = generate_pseudo_low_beam(frame.cloud, config.source_beams,
                                          config.target_beams, seed=mix64(config.seed, index))
        F_T = encode(rasterize(pseudo.cloud, spec), teacher.encoder)
        zT = _pool_all(F_T, cells)
    return PreparedFrame(frame.frame_id, rasterize(frame.cloud, spec), boxes,
                         detection_targets(boxes, spec), cells, F_T, zT)


def frame_gradients(pf: PreparedFrame, student: ModelState, config: TrainConfig):
    """Losses and student gradients for one prepared frame.

    Returns ``(LossBreakdown, grads)`` with ``grads`` aligned to
    ``student.arrays()``.
    """
    enc = student.encoder
    F = encode(pf.grid, enc)
    out = F @ student.head_w + student.head_b
    l_det, _, _, g_out = detection_loss(out, pf.targets)
    d = F.shape[2]
    g_head_w = F.reshape(-1, d).T @ g_out.reshape(-1, g_out.shape[2])
    g_head_b = g_out.reshape(-1, g_out.shape[2]).sum(axis=0)
    dF = g_out @ student.head_w.T

    lc = config.loss
    l_o = l_c = 0.0
    o_pc: dict = {}
    c_pc: dict = {}
    if config.mode == "dadt" and pf.cells:
        zS = _pool_all(F, pf.cells)
        l_o, o_pc, g_zo = object_similarity_loss(pf.zT, zS, lc.epsilon_norm)
        l_c, c_pc, dF_c, g_zc = context_loss_full(F, zS, pf.F_T, pf.zT,
                                                  lc.teacher_map_source, lc.scale_by_sqrt_d)
        # zero weights leave the gradient untouched, bit for bit
        g_z = {c: np.zeros_like(z) for c, z in zS.items()}
        if lc.lambda_o:
            for c in g_z:
                g_z[c] = g_z[c] + lc.lambda_o * g_zo[c]
        if lc.lambda_c:
            dF = dF + lc.lambda_c * dF_c
            for c in g_z:
                g_z[c] = g_z[c] + lc.lambda_c * g_zc[c]
        if lc.lambda_o or lc.lambda_c:
            flat = dF.reshape(-1, d).copy()
            for c, lst in pf.cells.items():
                for row, idx in zip(g_z[c], lst):
                    flat[idx] += row / len(idx)
            dF = flat.reshape(dF.shape)
    g_enc, _ = encode_backward(pf.grid, enc, dF)
    breakdown = total_loss(l_det, l_o, l_c, lc if config.mode == "dadt"
                           else replace(lc, lambda_c=0.0, lambda_o=0.0), o_pc, c_pc)
    return breakdown, g_enc.arrays() + [g_head_w, g_head_b]


def _mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    n = len(items)
    classes_o = sorted({c for b in items for c in b.l_o_per_class})
    classes_c = sorted({c for b in items for c in b.l_c_per_class})
    return LossBreakdown(
        sum(b.l_det for b in items) / n, sum(b.l_o for b in items) / n,
        sum(b.l_c for b in items) / n, sum(b.total for b in items) / n,
        {c: sum(b.l_o_per_class.get(c, 0.0) for b in items) / n for c in classes_o},
        {c: sum(b.l_c_per_class.get(c, 0.0) for b in items) / n for c in classes_c})


def apply_update(student: ModelState, grads: list, config: TrainConfig) -> ModelState:
    params = student.arrays()
    velocity = student.velocity or tuple(np.zeros_like(p) for p in params)
    new_v = tuple(config.momentum * v + g for v, g in zip(velocity, grads))
    new_p = [p - config.learning_rate * v for p, v in zip(params, new_v)]
    return ModelState(EncoderParams(*new_p[:4]), new_p[4], new_p[5], velocity=new_v)


def step_batch(frames: list[PreparedFrame], student: ModelState, config: TrainConfig):
    if student.frozen:
        raise ValueError("cannot train a frozen model")
    breakdowns, total = [], None
    for pf in frames:
        b, g = frame_gradients(pf, student, config)
        breakdowns.append(b)
        total = g if total is None else [a + x for a, x in zip(total, g)]
    grads = [a / len(frames) for a in total]
    return apply_update(student, grads, config), _mean_breakdown(breakdowns)


def train_step(frame: Frame, teacher: ModelState | None, student: ModelState,
               config: TrainConfig):
    """One update on a single frame; returns ``(updated student, LossBreakdown)``."""
    if config.mode == "dadt" and teacher is None:
        raise ValueError("dadt mode needs a teacher")
    return step_batch([prepare_frame(frame, config, teacher)], student, config)


LOSS_COLUMNS = ["step", "epoch", "l_det", "l_o", "l_c", "total"] + \
    [f"l_o_{n}" for n in CLASS_NAMES] + [f"l_c_{n}" for n in CLASS_NAMES]


def loss_row(step: int, epoch: int, b: LossBreakdown) -> list:
    vals = [b.l_det, b.l_o, b.l_c, b.total]
    vals += [b.l_o_per_class.get(c, 0.0) for c in range(len(CLASS_NAMES))]
    vals += [b.l_c_per_class.get(c, 0.0) for c in range(len(CLASS_NAMES))]
    return [step, epoch] + [repr(float(v)) for v in vals]


def csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


@dataclass
class TrainResult:
    state: ModelState
    steps: list            # (epoch, LossBreakdown) per step
    epoch_curve: list      # dict per epoch
    checkpoint: Path | None = None


def fit(frames: list[Frame], config: TrainConfig, teacher: ModelState | None = None,
        prepared: list[PreparedFrame] | None = None) -> TrainResult:
    """In-memory training loop (no files written)."""
    if not frames and not prepared:
        raise ValueError("training needs at least one frame")
    if config.mode == "dadt" and teacher is None:
        raise ValueError("dadt mode needs a teacher")
    if teacher is not None and not teacher.frozen:
        teacher = teacher.freeze()
    if prepared is None:
        prepared = [prepare_frame(f, config, teacher, i) for i, f in enumerate(frames)]
    student = init_student(teacher, config.seed) if teacher is not None \
        else init_model(config.seed)
    steps, curve = [], []
    for epoch in range(config.epochs):
        order = generator(config.seed, 1000 + epoch).permutation(len(prepared))
        epoch_steps = []
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[k] for k in order[start:start + config.batch_size]]
            with np.errstate(over="ignore", invalid="ignore"):
                student, b = step_batch(batch, student, config)
            if not (math.isfinite(b.total)
                    and all(np.isfinite(a).all() for a in student.arrays())):
                raise TrainingDiverged(
                    f"training diverged in epoch {epoch} (loss {b.total}); "
                    "lower the learning rate or the loss weights")
            epoch_steps.append(b)
        steps.extend((epoch, b) for b in epoch_steps)
        m = _mean_breakdown(epoch_steps)
        curve.append({"epoch": epoch, "l_det": m.l_det, "l_o": m.l_o, "l_c": m.l_c,
                      "total": m.total})
        log.info("epoch %d total %.6f det %.6f o %.6f c %.6f", epoch, m.total, m.l_det,
                 m.l_o, m.l_c)
    return TrainResult(student, steps, curve)


def train(dataset, config: TrainConfig, teacher: ModelState | None = None,
          out_dir=None, extra_manifest: dict | None = None,
          resolved_config: dict | None = None):
    """Train from a dataset directory (or list of frames) and write the run.

    Writes ``checkpoint.bin``, ``losses.csv``, ``train_report.json`` and
    ``config.json`` (``resolved_config`` if given) into ``out_dir`` when given. Returns ``(TrainResult,
    MetricsReport-like dict)``.
    """
    from dadt.distill.metrics import MetricsReport

    t0 = time.perf_counter()
    frames = load_dataset(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    result = fit(frames, config, teacher)
    report = MetricsReport(loss_curve=result.epoch_curve, config=config.to_json(),
                           wall_clock_s=time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        manifest = {"mode": config.mode, "config_hash": config.digest(), "seed": config.seed}
        manifest.update(extra_manifest or {})
        save_checkpoint(out / "checkpoint.bin", result.state, config.grid, manifest)
        rows = [LOSS_COLUMNS] + [loss_row(i, epoch, b)
                                 for i, (epoch, b) in enumerate(result.steps)]
        atomic_write_text(out / "losses.csv", csv_text(rows))
        atomic_write_json(out / "config.json", resolved_config or
                          {"tool_version": __version__, "train": config.to_json()})
        atomic_write_json(out / "train_report.json", report.to_json())
        result.checkpoint = out / "checkpoint.bin"
    return result, report


def load_teacher(path) -> ModelState:
    return load_checkpoint(path, frozen=True).state
