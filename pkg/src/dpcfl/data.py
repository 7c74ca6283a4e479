"""Synthetic K-cluster non-IID classification data.

Every cluster (learning task) is a Gaussian-mixture problem over the same
``n_classes`` labels. Class means sit on a circle in the first two input
dimensions; cluster ``k`` rotates that circle by ``k * rotation`` class slots,
so the same input region carries a different label in every cluster. The
remaining dimensions carry a small cluster-specific offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetSpec:
    input_dim: int = 6
    n_classes: int = 4
    samples_min: int = 50
    samples_max: int = 200
    radius: float = 3.0
    noise_std: float = 1.0
    rotation: int = 1  # class slots per cluster index
    offset_scale: float = 1.0


@dataclass
class UserData:
    X: np.ndarray
    y: np.ndarray
    true_task: int

    @property
    def size(self) -> int:
        return len(self.y)


def cluster_means(spec: DatasetSpec, n_tasks: int, rng: np.random.Generator) -> np.ndarray:
    """Class means, shape [n_tasks, n_classes, input_dim]."""
    if spec.input_dim < 2:
        raise ValueError("input_dim must be at least 2")
    means = np.zeros((n_tasks, spec.n_classes, spec.input_dim))
    offsets = rng.normal(0.0, spec.offset_scale, size=(n_tasks, spec.input_dim - 2))
    for k in range(n_tasks):
        for c in range(spec.n_classes):
            angle = 2 * np.pi * ((c + k * spec.rotation) % spec.n_classes) / spec.n_classes
            means[k, c, 0] = spec.radius * np.cos(angle)
            means[k, c, 1] = spec.radius * np.sin(angle)
            means[k, c, 2:] = offsets[k]
    return means


def assign_true_tasks(n_users: int, n_tasks: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced partition: every task gets at least one user."""
    if n_tasks > n_users:
        raise ValueError("need at least one user per task")
    tasks = np.arange(n_users) % n_tasks
    return rng.permutation(tasks)


def make_users(spec: DatasetSpec, true_tasks: np.ndarray, n_tasks: int,
               rng: np.random.Generator) -> list[UserData]:
    means = cluster_means(spec, n_tasks, rng)
    users = []
    for k in true_tasks:
        n = int(rng.integers(spec.samples_min, spec.samples_max + 1))
        y = rng.integers(0, spec.n_classes, size=n)
        X = means[k, y] + rng.normal(0.0, spec.noise_std, size=(n, spec.input_dim))
        users.append(UserData(X, y.astype(np.int64), int(k)))
    return users
