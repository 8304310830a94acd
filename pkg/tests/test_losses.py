import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dadt.bev import GridSpec
from dadt.boxes import BoxLabel
from dadt.losses import (HEAD_DIM, LossConfig, attended_student, attended_teacher,
                         context_loss_full, context_similarity_loss, context_similarity_map,
                         detection_loss, detection_targets, fold_heading,
                         object_similarity_loss, total_loss)

from oracles import oracle_attended, oracle_map, oracle_object_loss


def random_features(rng, d, classes=(0, 1, 2)):
    counts = {c: int(rng.integers(1, 4)) for c in classes}
    return ({c: rng.normal(size=(n, d)) for c, n in counts.items()},
            {c: rng.normal(size=(n, d)) for c, n in counts.items()})


# -- object similarity -------------------------------------------------------

def test_three_four_five():
    zT = {0: np.array([[3.0, 4.0, 0.0, 0.0]])}
    zS = {0: np.zeros((1, 4))}
    assert object_similarity_loss(zT, zS)[0] == 5.0


def test_two_classes_against_oracle():
    rng = np.random.default_rng(0)
    zT = {0: rng.normal(size=(3, 6)), 2: rng.normal(size=(1, 6))}
    zS = {0: rng.normal(size=(3, 6)), 2: rng.normal(size=(1, 6))}
    loss, per_class, _ = object_similarity_loss(zT, zS)
    assert abs(loss - oracle_object_loss(zT, zS)) <= 1e-12
    assert set(per_class) == {0, 2}
    assert loss == pytest.approx(per_class[0] + per_class[2], abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_object_loss_oracle_random(seed):
    rng = np.random.default_rng(seed)
    zT, zS = random_features(rng, int(rng.integers(1, 9)))
    assert abs(object_similarity_loss(zT, zS)[0] - oracle_object_loss(zT, zS)) <= 1e-12


def test_object_loss_zero_at_equality():
    rng = np.random.default_rng(1)
    zT, _ = random_features(rng, 5)
    loss, per_class, grads = object_similarity_loss(zT, {c: v.copy() for c, v in zT.items()})
    assert loss == 0.0 and all(v == 0.0 for v in per_class.values())
    assert all(not g.any() for g in grads.values())


def test_object_loss_positive_when_different():
    zT = {0: np.zeros((2, 3))}
    zS = {0: np.array([[0.0, 0.0, 0.0], [0.0, 1e-9, 0.0]])}
    assert object_similarity_loss(zT, zS)[0] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_object_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    zT, zS = random_features(rng, 4)
    perm = {c: rng.permutation(len(v)) for c, v in zS.items()}
    a = object_similarity_loss(zT, zS)[0]
    b = object_similarity_loss({c: zT[c][p] for c, p in perm.items()},
                               {c: zS[c][p] for c, p in perm.items()})[0]
    assert a == pytest.approx(b, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_object_loss_positively_homogeneous(seed, alpha):
    rng = np.random.default_rng(seed)
    zT, zS = random_features(rng, 4)
    a = object_similarity_loss(zT, zS)[0]
    b = object_similarity_loss({c: alpha * v for c, v in zT.items()},
                               {c: alpha * v for c, v in zS.items()})[0]
    assert b == pytest.approx(alpha * a, rel=1e-12)


def test_object_gradient_formula_and_epsilon():
    zT = {0: np.array([[1.0, 2.0], [0.0, 0.0]])}
    zS = {0: np.array([[4.0, 6.0], [0.0, 0.0]])}
    _, _, g = object_similarity_loss(zT, zS, epsilon_norm=1e-12)
    assert np.allclose(g[0][0], np.array([3.0, 4.0]) / (2 * 5.0))
    assert np.array_equal(g[0][1], [0.0, 0.0])


def test_object_loss_mismatches():
    with pytest.raises(ValueError):
        object_similarity_loss({0: np.zeros((1, 2))}, {1: np.zeros((1, 2))})
    with pytest.raises(ValueError):
        object_similarity_loss({0: np.zeros((2, 2))}, {0: np.zeros((1, 2))})


# -- context similarity ------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_map_and_attended_against_oracle(seed):
    rng = np.random.default_rng(seed)
    H, W, d = (int(v) for v in rng.integers(1, 6, 3))
    F_S, F_T = rng.normal(size=(H, W, d)), rng.normal(size=(H, W, d))
    zT, zS = random_features(rng, d, classes=(0, 2))
    for c in zS:
        assert np.max(np.abs(context_similarity_map(zS[c], F_S) - oracle_map(zS[c], F_S))) <= 1e-12
    aS = attended_student(F_S, zS)
    aT = attended_teacher(F_T, zT, F_S)
    aT_teacher = attended_teacher(F_T, zT, F_S, teacher_map_source="teacher")
    for c in zS:
        assert np.max(np.abs(aS[c] - oracle_attended(F_S, zS[c], F_S))) <= 1e-12
        # the teacher's map is built against the student features by default
        assert np.max(np.abs(aT[c] - oracle_attended(F_T, zT[c], F_S))) <= 1e-12
        assert np.max(np.abs(aT_teacher[c] - oracle_attended(F_T, zT[c], F_T))) <= 1e-12


def test_unit_map_returns_features():
    F = np.zeros((2, 3, 2))
    F[..., 0] = 1.0
    z = np.array([[1.0, 5.0]])
    assert np.array_equal(context_similarity_map(z, F), np.ones((2, 3)))
    assert np.array_equal(attended_student(F, {0: z})[0], F)


def test_zero_features_attend_to_zero():
    z = {0: np.ones((1, 3))}
    assert not attended_student(np.zeros((2, 2, 3)), z)[0].any()
    F_S = np.random.default_rng(0).normal(size=(2, 2, 3))
    assert not attended_teacher(np.zeros((2, 2, 3)), z, F_S)[0].any()


def test_constant_offset_gives_square():
    aT = {0: np.full((3, 4, 2), 2.5)}
    aS = {0: np.full((3, 4, 2), 1.0)}
    assert context_similarity_loss(aT, aS)[0] == pytest.approx(1.5 ** 2)
    assert context_similarity_loss(aS, aS)[0] == 0.0


@pytest.mark.parametrize("source", ["student", "teacher"])
def test_context_loss_zero_at_equality(source):
    rng = np.random.default_rng(2)
    F = rng.normal(size=(5, 4, 3))
    z, _ = random_features(rng, 3)
    loss, per_class, dF, dz = context_loss_full(F, z, F.copy(), {c: v.copy() for c, v in z.items()},
                                                source)
    assert loss == 0.0 and all(v == 0.0 for v in per_class.values())
    assert not dF.any() and all(not g.any() for g in dz.values())


def test_absent_classes_contribute_nothing():
    rng = np.random.default_rng(3)
    F_S, F_T = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    zT, zS = random_features(rng, 3, classes=(1,))
    _, o_pc, _ = object_similarity_loss(zT, zS)
    loss, c_pc, _, dz = context_loss_full(F_S, zS, F_T, zT)
    assert set(o_pc) == set(c_pc) == set(dz) == {1}
    assert loss == c_pc[1]


def test_context_loss_brute_force():
    rng = np.random.default_rng(4)
    F_S, F_T = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    zT, zS = random_features(rng, 2)
    expected = 0.0
    for c in zS:
        diff = oracle_attended(F_T, zT[c], F_S) - oracle_attended(F_S, zS[c], F_S)
        expected += float(np.mean(diff ** 2))
    assert abs(context_loss_full(F_S, zS, F_T, zT)[0] - expected) <= 1e-12


def test_context_loss_shape_errors():
    F = np.zeros((2, 2, 3))
    with pytest.raises(ValueError):
        attended_teacher(np.zeros((2, 3, 3)), {0: np.ones((1, 3))}, F)
    with pytest.raises(ValueError):
        context_similarity_map(np.ones((1, 4)), F)
    with pytest.raises(ValueError):
        attended_teacher(F, {0: np.ones((1, 3))}, F, teacher_map_source="both")


# -- detection and total -----------------------------------------------------

def test_saturated_logits_small_loss():
    spec = GridSpec(0.0, 8.0, -4.0, 4.0, 0.8)
    box = BoxLabel(0, 4.1, 0.3, 0.0, 4.0, 1.8, 1.5, 0.2)
    t = detection_targets([box], spec)
    out = np.zeros(spec.shape + (HEAD_DIM,))
    out[..., 0] = np.where(t.positive, 10.0, -10.0)
    out[..., 1:] = t.regression
    loss, bce, reg, _ = detection_loss(out, t)
    assert reg == 0.0
    assert loss < 1e-4


def test_zero_logits_log_two():
    spec = GridSpec(0.0, 8.0, -4.0, 4.0, 0.8)
    t = detection_targets([], spec)
    loss, bce, reg, _ = detection_loss(np.zeros(spec.shape + (HEAD_DIM,)), t)
    assert bce == pytest.approx(math.log(2), abs=1e-15)
    assert reg == 0.0 and loss == bce


def test_regression_targets():
    spec = GridSpec()
    box = BoxLabel(0, 10.2, 0.2, 0.0, 4.5, 1.9, 1.6, 3.0)
    t = detection_targets([box, BoxLabel(1, 10.3, 0.3, 0.0, 1, 1, 1, 0.0),
                           BoxLabel(0, 70.0, 0.0, 0.0, 1, 1, 1, 0.0)], spec)
    assert t.positive.sum() == 1  # shared cell: first box wins; outside box skipped
    i, j = 12, 32
    h = fold_heading(3.0)
    assert -math.pi / 2 <= h < math.pi / 2
    assert t.regression[i, j] == pytest.approx(
        [(10.2 - 10.0) / 0.8, (0.2 - 0.4) / 0.8, math.log(4.5), math.log(1.9),
         math.sin(h), math.cos(h)], abs=1e-12)


def test_detection_shape_error():
    t = detection_targets([], GridSpec(0.0, 1.6, 0.0, 1.6, 0.8))
    with pytest.raises(ValueError):
        detection_loss(np.zeros((2, 2, 3)), t)


def test_total_examples():
    assert total_loss(0.7, 2.0, 3.0, LossConfig(lambda_c=0.0, lambda_o=0.0)).total == 0.7
    assert total_loss(1.0, 1.0, 1.0, LossConfig()).total == 3.0
    b = total_loss(0.5, 0.25, 2.0, LossConfig(lambda_c=0.3, lambda_o=4.0))
    assert b.total == 0.5 + 0.3 * 2.0 + 4.0 * 0.25


def test_default_weights_are_one():
    cfg = LossConfig()
    assert cfg.lambda_c == 1.0 and cfg.lambda_o == 1.0 and cfg.epsilon_norm > 0


def test_invalid_loss_config():
    with pytest.raises(ValueError):
        LossConfig(lambda_c=-1.0)
    with pytest.raises(ValueError):
        LossConfig(epsilon_norm=0.0)
    with pytest.raises(ValueError):
        LossConfig(teacher_map_source="both")
