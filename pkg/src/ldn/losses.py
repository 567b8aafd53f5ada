"""Three-term distillation objective.

``total = lambda_gt * MSE(s, gt) + lambda_distill * MSE(s, t) + lambda_l1 * L1(s, gt)``

All three terms are means over every element, so the weights keep their
meaning when the crop size changes during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_gt: float = 100.0
    lambda_distill: float = 900.0
    lambda_l1: float = 50.0

    def __post_init__(self):
        if min(self.lambda_gt, self.lambda_distill, self.lambda_l1) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")

    @property
    def alpha(self) -> float:
        """Share of the squared-error weight given to the teacher."""
        denom = self.lambda_distill + self.lambda_gt
        return self.lambda_distill / denom if denom else 0.0

    @classmethod
    def supervised(cls, lambda_gt: float = 100.0, lambda_l1: float = 50.0) -> "LossWeights":
        return cls(lambda_gt, 0.0, lambda_l1)

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(self.lambda_gt * k, self.lambda_distill * k, self.lambda_l1 * k)


@dataclass
class LossReport:
    l_gt: float
    l_distill: float
    l_l1: float
    l_total: float
    weights: LossWeights
    # kept so the gradient can be produced on demand
    _student: np.ndarray
    _teacher: Optional[np.ndarray]
    _gt: np.ndarray

    def gradient(self) -> np.ndarray:
        return loss_backward(self)


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def loss_total(student_out, teacher_out, gt, weights: LossWeights = LossWeights()) -> LossReport:
    """Evaluate every term. ``teacher_out`` may be None when lambda_distill is 0."""
    if student_out.shape != gt.shape:
        raise ShapeError(f"student output {student_out.shape} vs ground truth {gt.shape}")
    if teacher_out is None:
        if weights.lambda_distill:
            raise ValueError("lambda_distill > 0 needs a teacher output")
    elif teacher_out.shape != gt.shape:
        raise ShapeError(f"teacher output {teacher_out.shape} vs ground truth {gt.shape}")
    s = _f64(student_out)
    diff = s - _f64(gt)
    l_gt = float(np.mean(diff * diff))
    l_l1 = float(np.mean(np.abs(diff)))
    if teacher_out is None:
        l_distill = 0.0
    else:
        dt = s - _f64(teacher_out)
        l_distill = float(np.mean(dt * dt))
    total = weights.lambda_gt * l_gt + weights.lambda_distill * l_distill + weights.lambda_l1 * l_l1
    return LossReport(l_gt, l_distill, l_l1, total, weights, student_out, teacher_out, gt)


def loss_backward(report: LossReport) -> np.ndarray:
    """Gradient of ``l_total`` w.r.t. the student output, in its dtype.

    The L1 subgradient uses sign(0) = 0.
    """
    w = report.weights
    s = _f64(report._student)
    n = s.size
    diff = s - _f64(report._gt)
    grad = (2.0 * w.lambda_gt / n) * diff + (w.lambda_l1 / n) * np.sign(diff)
    if report._teacher is not None and w.lambda_distill:
        grad += (2.0 * w.lambda_distill / n) * (s - _f64(report._teacher))
    return grad.astype(report._student.dtype)
