"""Desk-scale limited-data comparison of vanilla and dadt finetuning.

A teacher is trained from scratch on 40-beam frames. For each seed, students
start from the teacher encoder and finetune on a handful of 64-beam frames,
once per mode, and both are scored on the same held-out 64-beam frames.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from dadt.dataset import load_dataset
from dadt.distill.evaluate import evaluate
from dadt.distill.model import Checkpoint, ModelState
from dadt.distill.train import TrainConfig, fit
from dadt.losses import LossConfig
from dadt.simlidar import SceneSpec, make_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    teacher_frames: int = 512
    teacher_epochs: int = 30
    finetune_frames: int = 8
    eval_frames: int = 32
    student_epochs: int = 20
    seeds: tuple = (0, 1, 2, 3, 4)
    # picked by a grid search on a separate validation split, see README
    lambda_c: float = 0.1
    lambda_o: float = 0.1
    teacher_data_seed: int = 1
    eval_data_seed: int = 2
    finetune_data_seed: int = 100   # plus the student seed


@dataclass
class ExperimentResult:
    config: dict
    teacher_map: float
    runs: list = field(default_factory=list)   # {"seed", "vanilla", "dadt"}
    wall_clock_s: float = 0.0
    teacher: ModelState | None = None

    @property
    def wins(self) -> int:
        return sum(r["dadt"] >= r["vanilla"] for r in self.runs)

    def to_json(self) -> dict:
        return {"config": self.config, "teacher_mAP": self.teacher_map, "runs": self.runs,
                "wins": self.wins, "wall_clock_s": self.wall_clock_s}


def teacher_config(config: ExperimentConfig) -> TrainConfig:
    return TrainConfig(mode="vanilla", epochs=config.teacher_epochs, seed=0)


def teacher_manifest(config: ExperimentConfig) -> dict:
    return {"mode": "vanilla", "role": "teacher", "config_hash": teacher_config(config).digest(),
            "seed": 0, "data": {"beams": 40, "frames": config.teacher_frames,
                                "seed": config.teacher_data_seed}}


def train_teacher(frames, config: ExperimentConfig) -> ModelState:
    return fit(frames, teacher_config(config)).state


def run(workdir, config: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Generate every dataset under ``workdir`` and run all seeds."""
    t0 = time.perf_counter()
    work = Path(workdir)
    low, full = SceneSpec(beams=40), SceneSpec(beams=64)
    teacher_dir = make_dataset(low, config.teacher_frames, config.teacher_data_seed,
                               work / "teacher40")
    eval_dir = make_dataset(full, config.eval_frames, config.eval_data_seed, work / "eval64")
    teacher = train_teacher(load_dataset(teacher_dir), config)
    held_out = load_dataset(eval_dir)
    base = TrainConfig(epochs=config.student_epochs)
    result = ExperimentResult(asdict(config), evaluate(Checkpoint(teacher, base.grid, {}),
                                                       held_out).map, teacher=teacher)
    loss = LossConfig(lambda_c=config.lambda_c, lambda_o=config.lambda_o)
    for seed in config.seeds:
        ft_dir = make_dataset(full, config.finetune_frames, config.finetune_data_seed + seed,
                              work / f"finetune64_{seed}")
        frames = load_dataset(ft_dir)
        run_maps = {"seed": seed}
        for mode in ("vanilla", "dadt"):
            cfg = replace(base, mode=mode, seed=seed, loss=loss)
            state = fit(frames, cfg, teacher).state
            run_maps[mode] = evaluate(Checkpoint(state, cfg.grid, {}), held_out).map
        log.info("seed %d vanilla %.3f dadt %.3f", seed, run_maps["vanilla"], run_maps["dadt"])
        result.runs.append(run_maps)
    result.wall_clock_s = time.perf_counter() - t0
    return result
