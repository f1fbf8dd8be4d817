"""Synthetic teacher-student regression with a controllable update rank."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..linalg import Matrix, SeededRng, frobenius_norm, gaussian_matrix
from ..model import LinearLayer, Network, network_forward
from .config import TaskSpec

# Philox stream keys under the run seed
INIT_STREAM = 0
TASK_STREAM = 1
DATA_ORDER_STREAM_BASE = 2 ** 32


@dataclass
class TeacherStudentTask:
    student_weights: list[Matrix]  # W_0 per layer
    target_updates: list[Matrix]  # exact-rank update the teacher adds per layer
    x_train: Matrix  # k x n_train
    y_train: Matrix  # d x n_train
    x_val: Matrix
    y_val: Matrix

    @property
    def teacher_weights(self) -> list[Matrix]:
        return [w + dw for w, dw in zip(self.student_weights, self.target_updates)]

    def teacher(self) -> Network:
        return Network([LinearLayer(w) for w in self.teacher_weights])

    def student(self) -> Network:
        return Network([LinearLayer(w.copy()) for w in self.student_weights])


def _target_update(d: int, k: int, rank: int, rng: SeededRng) -> Matrix:
    dw = np.zeros((d, k))
    for _ in range(rank):
        u = rng.normal(d)
        v = rng.normal(k)
        dw += np.outer(u, v)
    norm = frobenius_norm(dw)
    return dw / norm if norm > 0 else dw


def make_teacher_student_task(spec: TaskSpec, rng: SeededRng) -> TeacherStudentTask:
    """Draw a student, a teacher offset by a rank-``target_update_rank`` update, and data.

    Draw order from ``rng``: per layer the student weight (std ``1/sqrt(fan_in)``),
    then per layer the update's outer-product factors (u then v, one pair per
    rank), then train inputs, val inputs, train noise, val noise.  Each update
    is scaled to unit Frobenius norm.
    """
    if not 0 <= spec.target_update_rank <= min(spec.d, spec.k):
        raise ValueError(
            f"target_update_rank must be in [0, {min(spec.d, spec.k)}], got {spec.target_update_rank}"
        )
    shapes = spec.layer_shapes()
    student = [gaussian_matrix(d, k, 1.0 / np.sqrt(k), rng) for d, k in shapes]
    updates = [_target_update(d, k, spec.target_update_rank, rng) for d, k in shapes]
    x_train = gaussian_matrix(spec.k, spec.n_train, 1.0, rng)
    x_val = gaussian_matrix(spec.k, spec.n_val, 1.0, rng)
    teacher = Network([LinearLayer(w + dw) for w, dw in zip(student, updates)])
    y_train = network_forward(teacher, x_train)[0] + gaussian_matrix(spec.d, spec.n_train, spec.noise_std, rng)
    y_val = network_forward(teacher, x_val)[0] + gaussian_matrix(spec.d, spec.n_val, spec.noise_std, rng)
    return TeacherStudentTask(student, updates, x_train, y_train, x_val, y_val)


def weights_digest(weights: list[Matrix]) -> str:
    h = hashlib.sha256()
    for w in weights:
        h.update(np.asarray(w.shape, dtype="<u8").tobytes())
        h.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
    return h.hexdigest()
