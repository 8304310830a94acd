"""Teacher-student finetuning, box decoding and evaluation."""

from dadt.distill.detect import decode, nms, predict
from dadt.distill.evaluate import evaluate
from dadt.distill.metrics import MetricsReport, average_precision, interpolated_ap
from dadt.distill.model import (Checkpoint, ModelState, init_model, init_student,
                                load_checkpoint, save_checkpoint)
from dadt.distill.train import TrainConfig, fit, train, train_step

__all__ = [
    "Checkpoint", "MetricsReport", "ModelState", "TrainConfig", "average_precision",
    "decode", "evaluate", "fit", "init_model", "init_student", "interpolated_ap",
    "load_checkpoint", "nms", "predict", "save_checkpoint", "train", "train_step",
]
