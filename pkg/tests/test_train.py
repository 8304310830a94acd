import math
from pathlib import Path

import numpy as np
import pytest

from dadt.bev import GridSpec
from dadt.boxes import SIZE_PRIORS, BoxLabel, rotated_iou
from dadt.dataset import load_dataset
from dadt.distill.detect import decode, nearest_class, nms, predict
from dadt.distill.model import (Checkpoint, checkpoint_bytes, forward, init_student,
                                load_checkpoint, save_checkpoint)
from dadt.distill.train import (TrainConfig, TrainingDiverged, fit, load_teacher,
                                prepare_frame, train, train_step)
from dadt.losses import LossConfig, detection_loss
from dadt.simlidar import SceneSpec, make_dataset

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def teacher():
    return load_teacher(FIXTURES / "teacher.bin")


@pytest.fixture(scope="module")
def frames(tmp_path_factory):
    root = make_dataset(SceneSpec(), 8, 100, tmp_path_factory.mktemp("ft") / "ds")
    return load_dataset(root)


def small(**kw):
    return TrainConfig(**{"epochs": 2, **kw})


def test_student_copies_encoder(teacher):
    s = init_student(teacher, 3)
    for a, b in zip(teacher.encoder.arrays(), s.encoder.arrays()):
        assert np.array_equal(a, b) and a.tobytes() == b.tobytes()
    bound = 1 / math.sqrt(teacher.encoder.d)
    assert np.abs(s.head_w).max() <= bound and np.abs(s.head_b).max() <= bound
    t = init_student(teacher, 4)
    assert not np.array_equal(s.head_w, t.head_w)
    assert np.array_equal(init_student(teacher, 3).head_w, s.head_w)


def test_teacher_is_read_only(teacher):
    assert teacher.frozen
    with pytest.raises(ValueError):
        teacher.head_w[0, 0] = 1.0
    with pytest.raises(ValueError):
        fit([], small(mode="vanilla"), prepared=[], teacher=teacher)


def test_vanilla_reports_no_distillation_losses(frames, teacher):
    s = init_student(teacher, 0)
    _, b = train_step(frames[0], teacher, s, small(mode="vanilla"))
    assert b.l_o == 0.0 and b.l_c == 0.0 and b.total == b.l_det


def test_dadt_without_teacher_rejected(frames, teacher):
    with pytest.raises(ValueError, match="teacher"):
        fit(frames[:1], small())
    with pytest.raises(ValueError, match="teacher"):
        train_step(frames[0], None, init_student(teacher, 0), small())


def test_zero_learning_rate_leaves_student(frames, teacher):
    s = init_student(teacher, 0)
    new, _ = train_step(frames[0], teacher, s, small(learning_rate=0.0))
    for a, b in zip(s.arrays(), new.arrays()):
        assert np.array_equal(a, b)


def test_teacher_unchanged_by_training(frames, teacher):
    before = [a.copy() for a in teacher.arrays()]
    fit(frames[:2], small(), teacher)
    for a, b in zip(before, teacher.arrays()):
        assert np.array_equal(a, b)


def test_vanilla_equals_dadt_with_zero_weights(frames, teacher):
    zero = LossConfig(lambda_c=0.0, lambda_o=0.0)
    a = fit(frames[:3], small(mode="vanilla"), teacher).state
    b = fit(frames[:3], small(mode="dadt", loss=zero), teacher).state
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()


def test_one_epoch_one_frame_one_step(frames, teacher):
    r = fit(frames[:1], TrainConfig(epochs=1), teacher)
    assert len(r.steps) == 1 and len(r.epoch_curve) == 1


def test_batches_per_epoch(frames, teacher):
    r = fit(frames[:5], TrainConfig(epochs=2, batch_size=2, mode="vanilla"), teacher)
    assert len(r.steps) == 2 * 3


def test_dadt_loss_decreases(frames, teacher):
    cfg = TrainConfig(epochs=20, loss=LossConfig(lambda_c=0.1, lambda_o=0.1))
    curve = fit(frames, cfg, teacher).epoch_curve
    assert curve[-1]["total"] < curve[0]["total"]


def test_reported_loss_matches_recomputation(frames, teacher):
    cfg = small(loss=LossConfig(lambda_c=0.3, lambda_o=0.2))
    s = init_student(teacher, 1)
    _, b = train_step(frames[2], teacher, s, cfg)
    pf = prepare_frame(frames[2], cfg, teacher)
    _, out = forward(pf.grid, s)
    l_det = detection_loss(out, pf.targets)[0]
    assert b.l_det == pytest.approx(l_det, rel=1e-12)
    assert b.total == pytest.approx(l_det + 0.3 * b.l_c + 0.2 * b.l_o, rel=1e-12)
    assert b.l_o > 0 and b.l_c > 0
    assert b.l_o == pytest.approx(sum(b.l_o_per_class.values()), rel=1e-12)


def test_training_is_deterministic(frames, teacher, tmp_path):
    cfg = small()
    train(frames[:3], cfg, teacher, tmp_path / "a")
    train(frames[:3], cfg, teacher, tmp_path / "b")
    for name in ("checkpoint.bin", "losses.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "losses.csv").read_text().splitlines()
    assert rows[0].startswith("step,epoch,l_det,l_o,l_c,total")
    assert len(rows) == 1 + 2 * 3


def test_divergence_is_reported(frames, teacher, tmp_path):
    cfg = TrainConfig(epochs=3, learning_rate=1e6, mode="vanilla")
    with pytest.raises(TrainingDiverged):
        train(frames[:2], cfg, teacher, tmp_path / "run")
    assert not (tmp_path / "run" / "checkpoint.bin").exists()


def test_checkpoint_round_trip(teacher, tmp_path):
    s = init_student(teacher, 2)
    save_checkpoint(tmp_path / "c.bin", s, GridSpec(), {"note": "x"})
    ck = load_checkpoint(tmp_path / "c.bin")
    for a, b in zip(s.arrays(), ck.state.arrays()):
        assert np.array_equal(a.astype(np.float32), b)
    assert ck.manifest["note"] == "x" and ck.grid == GridSpec()
    again = checkpoint_bytes(ck.state, ck.grid, ck.manifest)
    assert again == (tmp_path / "c.bin").read_bytes()


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")


def test_invalid_train_config():
    for bad in (dict(mode="other"), dict(epochs=0), dict(learning_rate=-1.0),
                dict(momentum=1.0), dict(source_beams=32, target_beams=40)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def head_with(obj):
    out = np.zeros((64, 64, 7))
    out[..., 0] = obj
    out[..., 6] = 1.0   # cos of heading
    out[..., 3] = math.log(4.5)
    out[..., 4] = math.log(1.9)
    return out


def test_very_negative_logits_give_nothing():
    assert decode(head_with(-50.0), GridSpec(), 0.3) == []


def test_one_strong_cell_one_box():
    out = head_with(-50.0)
    out[12, 30, 0] = 8.0
    out[12, 30, 1:3] = (0.25, -0.5)
    (b, score), = decode(out, GridSpec(), 0.3)
    assert b.class_id == 0 and score == pytest.approx(1 / (1 + math.exp(-8)))
    assert b.cx == pytest.approx((12.75) * 0.8) and b.cy == pytest.approx(-25.6 + 30 * 0.8)
    assert (b.l, b.w) == pytest.approx((4.5, 1.9)) and b.heading == 0.0


def test_nms_keeps_best_of_overlapping():
    a = BoxLabel(0, 10, 0, 0, 4.5, 1.9, 1.6, 0.0)
    b = BoxLabel(0, 10.3, 0, 0, 4.5, 1.9, 1.6, 0.05)
    c = BoxLabel(0, 30, 0, 0, 4.5, 1.9, 1.6, 0.0)
    assert rotated_iou(a, b) > 0.5
    kept = nms([(b, 0.6), (a, 0.9), (c, 0.4)], 0.5)
    assert kept == [(a, 0.9), (c, 0.4)]


def test_nearest_class_priors():
    for c, (l, w, _) in SIZE_PRIORS.items():
        assert nearest_class(l, w) == c


def test_predict_sorted_scores(frames, teacher):
    ck = Checkpoint(teacher, GridSpec(), {})
    preds = predict(ck, frames[0].cloud, 0.05)
    scores = [s for _, s in preds]
    assert scores == sorted(scores, reverse=True)
    for i, (p, _) in enumerate(preds):
        for q, _ in preds[i + 1:]:
            assert rotated_iou(p, q) <= 0.5
