"""Run configuration files for the command line.

A run config is a JSON object with ``schema_version`` and the sections
``train``, ``loss``, ``grid``, ``eval`` and ``paths``. Unknown keys are
rejected, missing keys take the defaults below, and the resolved document
(plus the tool version) is written next to every output so a run can be
repeated from it.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from dadt import __version__
from dadt.bev import GridSpec
from dadt.boxes import CLASS_IDS, CLASS_NAMES, DEFAULT_IOU_THRESHOLDS
from dadt.distill.detect import DEFAULT_NMS_IOU
from dadt.distill.evaluate import EVAL_SCORE_THRESHOLD
from dadt.distill.train import TrainConfig
from dadt.losses import LossConfig

SCHEMA_VERSION = 1
SECTIONS = ("train", "loss", "grid", "eval", "paths")
TRAIN_KEYS = ("mode", "epochs", "batch_size", "learning_rate", "momentum", "seed",
              "source_beams", "target_beams")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {
        CLASS_NAMES[c]: t for c, t in DEFAULT_IOU_THRESHOLDS.items()})
    score_threshold: float = EVAL_SCORE_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU

    def thresholds_by_id(self) -> dict:
        return {CLASS_IDS[name]: t for name, t in self.iou_thresholds.items()}


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    teacher: str | None = None


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()
    explicit: frozenset = frozenset()   # "section.key" names present in the source file

    def to_json(self) -> dict:
        t = self.train
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_version": __version__,
            "train": {k: getattr(t, k) for k in TRAIN_KEYS},
            "loss": asdict(t.loss),
            "grid": asdict(t.grid),
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
        }


def _section(doc: dict, name: str, allowed) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    return sec


def from_json(doc: dict) -> RunConfig:
    """Validate ``doc`` and fill defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"schema_version", "tool_version"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    train = _section(doc, "train", TRAIN_KEYS)
    loss = _section(doc, "loss", [f.name for f in fields(LossConfig)])
    grid = _section(doc, "grid", [f.name for f in fields(GridSpec)])
    ev = _section(doc, "eval", [f.name for f in fields(EvalConfig)])
    paths = _section(doc, "paths", [f.name for f in fields(PathsConfig)])
    explicit = frozenset(f"{name}.{k}" for name, sec in
                         (("train", train), ("loss", loss), ("grid", grid), ("eval", ev),
                          ("paths", paths)) for k in sec)
    try:
        eval_cfg = EvalConfig(**ev)
        bad = sorted(set(eval_cfg.iou_thresholds) - set(CLASS_NAMES))
        if bad:
            raise ConfigError(f"unknown classes in eval.iou_thresholds: {', '.join(bad)}")
        eval_cfg = replace(eval_cfg, iou_thresholds={
            **EvalConfig().iou_thresholds, **eval_cfg.iou_thresholds})
        tc = TrainConfig(**train, loss=LossConfig(**loss), grid=GridSpec(**grid),
                         iou_thresholds=eval_cfg.thresholds_by_id())
        return RunConfig(tc, eval_cfg, PathsConfig(**paths), explicit)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load(path: str | os.PathLike | None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_json(doc)
