import numpy as np
import pytest

from mlsn.autodiff import Tensor
from mlsn.networks import ModelState, predict_proba
from mlsn.teacher import TeacherState, effective_alpha, ema_update, perturb, teacher_predict


def scalar_state(v: float) -> ModelState:
    st = ModelState.initialize(1, 2, np.random.default_rng(0), feature_dim=2, h_hidden=(1,))
    st.h_params["W0"] = Tensor(np.array([[v]]))
    return st


def test_effective_alpha():
    assert effective_alpha(0, 0.99) == 0.0
    assert effective_alpha(9, 0.99) == pytest.approx(0.9, abs=1e-15)
    assert effective_alpha(10**6, 0.99) == 0.99


def test_first_update_copies_student():
    student = ModelState.initialize(3, 2, np.random.default_rng(1), feature_dim=4)
    teacher = TeacherState.from_student(ModelState.initialize(3, 2, np.random.default_rng(2), feature_dim=4))
    ema_update(teacher, student)
    assert teacher.step == 1
    for (_, a), (_, b) in zip(teacher.params.named_tensors(), student.named_tensors()):
        assert a.data.tobytes() == b.data.tobytes()


def test_alpha_one_is_fixed_point():
    student = scalar_state(0.0)
    teacher = TeacherState.from_student(scalar_state(1.0))
    ema_update(teacher, student, alpha=1.0)
    assert teacher.params.h_params["W0"].data[0, 0] == 1.0


def test_scalar_step():
    teacher = TeacherState.from_student(scalar_state(1.0))
    ema_update(teacher, scalar_state(0.0), alpha=0.99)
    assert teacher.params.h_params["W0"].data[0, 0] == 0.99


def test_convex_combination_trace():
    """Teacher value equals an explicit weighted sum of student history, weights summing to 1."""
    rng = np.random.default_rng(5)
    history = rng.normal(size=30)
    teacher = TeacherState.from_student(scalar_state(7.0), alpha_max=0.9)
    weights = np.zeros(0)
    for k, v in enumerate(history):
        a = effective_alpha(teacher.step, teacher.alpha_max)
        ema_update(teacher, scalar_state(float(v)))
        weights = np.append(weights * a, 1.0 - a)
        assert weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(weights >= 0)
        value = teacher.params.h_params["W0"].data[0, 0]
        assert value == pytest.approx(float(weights @ history[: k + 1]), abs=1e-12)
        assert history[: k + 1].min() - 1e-12 <= value <= history[: k + 1].max() + 1e-12


def test_frozen_student_monotone_convergence():
    teacher = TeacherState.from_student(scalar_state(5.0), alpha_max=0.95)
    teacher.step = 3
    student = scalar_state(-1.0)
    gaps = []
    for _ in range(50):
        ema_update(teacher, student)
        gaps.append(abs(teacher.params.h_params["W0"].data[0, 0] + 1.0))
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.5


def test_shape_mismatch():
    teacher = TeacherState.from_student(ModelState.initialize(3, 2, np.random.default_rng(0), feature_dim=4))
    with pytest.raises(Exception):
        ema_update(teacher, ModelState.initialize(3, 2, np.random.default_rng(0), feature_dim=5))


def test_perturb():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert perturb(x, 0.0, np.random.default_rng(1)).tobytes() == x.tobytes()
    big = np.zeros((1000, 100))
    noisy = perturb(big, 0.1, np.random.default_rng(2))
    assert abs((noisy - big).mean()) < 0.002
    assert noisy.tobytes() == perturb(big, 0.1, np.random.default_rng(2)).tobytes()


def test_teacher_predict():
    student = ModelState.initialize(3, 4, np.random.default_rng(3), feature_dim=5)
    teacher = TeacherState.from_student(student, noise_sigma=0.0)
    x = np.random.default_rng(4).normal(size=(6, 3))
    p = teacher_predict(teacher, x, np.random.default_rng(0))
    assert p.tobytes() == predict_proba(student, x).tobytes()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    for name, t in teacher.params.c_params.items():
        t.data = np.zeros_like(t.data)
    teacher.noise_sigma = 0.3
    np.testing.assert_allclose(teacher_predict(teacher, x, np.random.default_rng(0)), 0.25, atol=1e-15)
