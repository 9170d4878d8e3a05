"""Hybrid distillation objective and its analytic gradients.

The total training loss blends a teacher-matching term with a
ground-truth alignment term:

    total = lam * mse(student, teacher)
            + (1 - lam) * (0.5 * balanced_bce + 0.5 * dice)

where ``lam`` is driven by the teacher's own confidence: a teacher whose
probabilities sit near 0 or 1 gets more weight, an uncertain teacher
hands supervision back to the ground truth.  ``lam`` depends only on the
teacher, so no gradient flows through it.

All gradients are with respect to the student logits and are verified
against central finite differences in the test suite.  Losses accept any
shape as long as student/teacher/mask agree elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Tensor, stable_sigmoid


@dataclass(frozen=True)
class LambdaPolicy:
    """Affine map from teacher confidence in [0,1] to a blend weight.

    lambda_min == lambda_max pins the blend to a constant, which is how
    the supervised endpoint and the blend tests force each extreme.
    """

    lambda_min: float = 0.2
    lambda_max: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.lambda_min <= self.lambda_max < 1.0):
            raise DomainError(
                f"LambdaPolicy requires 0 < lambda_min <= lambda_max < 1, "
                f"got ({self.lambda_min}, {self.lambda_max})"
            )


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_binary_mask(g: np.ndarray, op: str) -> None:
    if not np.all((g == 0) | (g == 1)):
        raise DomainError(f"{op}: ground-truth mask must be binary (0/1)")


def mse_logits(student: Tensor, teacher: Tensor) -> tuple[float, Tensor]:
    """Mean squared error between raw logit maps; grad w.r.t. student."""
    _check_pair(student, teacher, "mse_logits")
    if not np.all(np.isfinite(teacher.data)):
        raise DomainError("mse_logits: teacher logits must be finite")
    diff = student.data - teacher.data
    n = diff.size
    loss = float(np.mean(diff * diff))
    return loss, Tensor(2.0 * diff / n)


def balanced_bce(student_logits: Tensor, gt_mask: Tensor) -> tuple[float, Tensor]:
    """Class-balanced binary cross-entropy in the stable logit form.

    Positive/negative pixels are reweighted by inverse frequency,
    normalized so the two weights average to 1; with a 50/50 mask this
    reduces exactly to the unweighted mean BCE.  Fully one-sided masks
    are legal: the absent class term vanishes and its weight guard
    avoids the division by zero.
    """
    _check_pair(student_logits, gt_mask, "balanced_bce")
    s = student_logits.data
    g = gt_mask.data
    _check_binary_mask(g, "balanced_bce")
    n = g.size
    npos = float(g.sum())
    nneg = n - npos
    w_pos = n / (2.0 * max(npos, 1.0))
    w_neg = n / (2.0 * max(nneg, 1.0))
    loss = float(np.mean(w_pos * g * _softplus(-s) + w_neg * (1 - g) * _softplus(s)))
    p = stable_sigmoid(s)
    grad = (-w_pos * g * (1 - p) + w_neg * (1 - g) * p) / n
    return loss, Tensor(grad)


def dice_loss(student_logits: Tensor, gt_mask: Tensor, eps: float = 1.0) -> tuple[float, Tensor]:
    """Soft Dice loss 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps), p = sigmoid(s)."""
    _check_pair(student_logits, gt_mask, "dice_loss")
    g = gt_mask.data
    _check_binary_mask(g, "dice_loss")
    p = stable_sigmoid(student_logits.data)
    num = 2.0 * float((p * g).sum()) + eps
    den = float(p.sum()) + float(g.sum()) + eps
    loss = 1.0 - num / den
    # d loss / d p_i = -(2 g_i * den - num) / den^2, then through the sigmoid
    dp = -(2.0 * g * den - num) / (den * den)
    grad = dp * p * (1 - p)
    return float(loss), Tensor(grad)


def teacher_confidence_lambda(teacher_logits: Tensor, policy: LambdaPolicy) -> float:
    """Blend weight from mean teacher confidence |2*sigmoid(t) - 1|."""
    t = teacher_logits.data
    if not np.all(np.isfinite(t)):
        raise DomainError("teacher_confidence_lambda: teacher logits must be finite")
    conf = float(np.mean(np.abs(2.0 * stable_sigmoid(t) - 1.0)))
    return policy.lambda_min + (policy.lambda_max - policy.lambda_min) * conf


def total_loss(
    student_logits: Tensor,
    teacher_logits: Tensor,
    gt_mask: Tensor,
    policy: LambdaPolicy,
) -> tuple[float, Tensor, float]:
    """Blended distillation loss; returns (loss, grad, lambda_used).

    lambda is treated as a constant w.r.t. the student, so the gradient
    is the plain lambda-weighted sum of the component gradients.
    """
    _check_pair(student_logits, teacher_logits, "total_loss")
    _check_pair(student_logits, gt_mask, "total_loss")
    lam = teacher_confidence_lambda(teacher_logits, policy)
    l_mse, g_mse = mse_logits(student_logits, teacher_logits)
    l_bce, g_bce = balanced_bce(student_logits, gt_mask)
    l_dice, g_dice = dice_loss(student_logits, gt_mask)
    loss = lam * l_mse + (1.0 - lam) * (0.5 * l_bce + 0.5 * l_dice)
    grad = lam * g_mse.data + (1.0 - lam) * (0.5 * g_bce.data + 0.5 * g_dice.data)
    return float(loss), Tensor(grad), lam


def supervised_loss(student_logits: Tensor, gt_mask: Tensor) -> tuple[float, Tensor]:
    """Ground-truth-only endpoint: 0.5 * balanced BCE + 0.5 * Dice."""
    l_bce, g_bce = balanced_bce(student_logits, gt_mask)
    l_dice, g_dice = dice_loss(student_logits, gt_mask)
    return 0.5 * l_bce + 0.5 * l_dice, Tensor(0.5 * g_bce.data + 0.5 * g_dice.data)
