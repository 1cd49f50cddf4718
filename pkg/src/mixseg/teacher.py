"""Mean teacher: EMA weights, pseudo-labels and their confidence-based quality."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .model import Params
from .numerics import softmax_channel


@dataclass
class TeacherState:
    params: Params
    alpha: float = 0.99
    tau: float = 0.968
    step: int = 0

    @classmethod
    def from_student(cls, student: Params, alpha: float = 0.99, tau: float = 0.968) -> "TeacherState":
        if not 0.0 <= alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
        if not 0.0 < tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {tau}")
        return cls(student.copy(requires_grad=False), alpha, tau, 0)


def ema_update(teacher: TeacherState, student: Params) -> TeacherState:
    """phi <- alpha * phi + (1 - alpha) * theta, tensor by tensor, in place."""
    if len(teacher.params) != len(student):
        raise ValueError(f"teacher has {len(teacher.params)} tensors, student {len(student)}")
    a = teacher.alpha
    for (tn, t), (sn, s) in zip(teacher.params, student):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {tn}{t.shape} vs {sn}{s.shape}")
        t.data = a * t.data + (1.0 - a) * s.data
    teacher.step += 1
    return teacher


def quality(probs: np.ndarray, tau: float) -> np.ndarray:
    """Fraction of pixels whose max class probability is strictly above ``tau``, per image."""
    conf = probs.max(axis=1)
    return (conf > tau).reshape(conf.shape[0], -1).mean(axis=1)


def pseudo_label(teacher: TeacherState, x_u) -> tuple[np.ndarray, np.ndarray]:
    """Teacher argmax labels [N,H,W] and per-image quality [N] on clean images.

    Runs without a graph, so nothing here can receive or pass gradient.
    """
    x = np.asarray(x_u)
    if x.ndim == 3:
        x = x[None]
    probs = softmax_channel(model.forward(teacher.params, x)).data
    labels = probs.argmax(axis=1).astype(np.uint8)
    return labels, quality(probs, teacher.tau)
