"""Mean-Teacher machinery: EMA weights and input perturbation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError
from .networks import ModelState, predict_proba


@dataclass
class TeacherState:
    params: ModelState
    alpha_max: float = 0.99
    step: int = 0
    noise_sigma: float = 0.0

    @classmethod
    def from_student(cls, student: ModelState, alpha_max: float = 0.99,
                     noise_sigma: float = 0.0) -> "TeacherState":
        if not 0.0 <= alpha_max < 1.0:
            raise ValueError("alpha_max must lie in [0, 1)")
        return cls(student.copy(), alpha_max, 0, noise_sigma)


def effective_alpha(step: int, alpha_max: float) -> float:
    return min(1.0 - 1.0 / (step + 1), alpha_max)


def ema_update(teacher: TeacherState, student: ModelState, alpha: float | None = None) -> TeacherState:
    """In-place ``teacher = a * teacher + (1 - a) * student``; bumps the step counter."""
    a = effective_alpha(teacher.step, teacher.alpha_max) if alpha is None else alpha
    t_sets, s_sets = teacher.params.param_sets(), student.param_sets()
    for group, s_ps in s_sets.items():
        t_ps = t_sets[group]
        if set(t_ps) != set(s_ps):
            raise ShapeError(f"teacher/student parameter names differ in group {group}")
        for name, s_t in s_ps.items():
            t_t = t_ps[name]
            if t_t.shape != s_t.shape:
                raise ShapeError(f"{group}.{name}: teacher {t_t.shape} vs student {s_t.shape}")
            t_t.data = a * t_t.data + (1.0 - a) * s_t.data
    teacher.step += 1
    return teacher


def perturb(x_batch, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise; ``sigma == 0`` returns an exact copy without drawing."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.array(x_batch, dtype=np.float64)
    if sigma == 0:
        return x
    return x + rng.normal(0.0, sigma, size=x.shape)


def teacher_predict(teacher: TeacherState, x_batch, rng: np.random.Generator) -> np.ndarray:
    return predict_proba(teacher.params, perturb(x_batch, teacher.noise_sigma, rng))
