"""zCDP leakage accounting and the DP noise-variance allocation.

The allocation minimizes ``sum_i gamma / (X_i sigma_i)^2`` over the scheduled
users, per task, subject to the data-weighted variance budget
``sum_i X_i sigma_i^2 <= V_max * sum_i X_i`` and the floor
``X_i sigma_i >= N_min``. In the variables ``v_i = sigma_i^2`` the problem is
convex and separable apart from the single budget row, so the optimum is a
water-filling:

    v_i(lam) = max(floor_i^2, sqrt(gamma / (lam * X_i^3)))

with the multiplier ``lam`` chosen so the budget binds. The objective falls
monotonically in every ``sigma_i``, hence the budget is always tight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InfeasibleNoiseProblem(ValueError):
    def __init__(self, tasks: list[int]):
        self.tasks = tasks
        super().__init__(f"noise floors alone exceed the variance budget for tasks {tasks}")


def leakage(clip_bound: float, n_samples: float, sigma: float) -> float:
    """Per-iteration zCDP leakage rho = 2 (M / (X sigma))^2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if clip_bound <= 0 or n_samples <= 0:
        raise ValueError("clip bound and sample count must be positive")
    return 2.0 * (clip_bound / (n_samples * sigma)) ** 2


@dataclass
class NoiseProblem:
    n_samples: np.ndarray  # X_i of the scheduled users
    tasks: np.ndarray  # task identity of each scheduled user
    gamma: float = 2e7
    v_max: float = 12.0
    n_min: float = 100.0

    def __post_init__(self):
        self.n_samples = np.asarray(self.n_samples, dtype=np.float64)
        self.tasks = np.asarray(self.tasks, dtype=np.int64)
        if self.n_samples.shape != self.tasks.shape:
            raise ValueError("n_samples and tasks must align")
        if np.any(self.n_samples <= 0):
            raise ValueError("sample counts must be positive")

    @property
    def floors(self) -> np.ndarray:
        return self.n_min / self.n_samples

    def objective(self, sigma: np.ndarray) -> float:
        sigma = np.asarray(sigma, dtype=np.float64)
        return float(np.sum(self.gamma / (self.n_samples * sigma) ** 2))

    def budget_slack(self, sigma: np.ndarray) -> dict[int, float]:
        """Per task: V_max * sum X - sum X sigma^2 (non-negative when feasible)."""
        sigma = np.asarray(sigma, dtype=np.float64)
        out = {}
        for k in np.unique(self.tasks):
            m = self.tasks == k
            x = self.n_samples[m]
            out[int(k)] = float(self.v_max * x.sum() - np.sum(x * sigma[m] ** 2))
        return out


def _water_fill(x: np.ndarray, gamma: float, floor_sq: np.ndarray, budget: float) -> np.ndarray:
    """Variances ``v_i = max(floor_i, c_i * tau)`` with ``sum x_i v_i = budget``.

    ``tau = 1/sqrt(lam)``. The budget usage is piecewise linear and increasing
    in ``tau`` with breakpoints ``floor_i / c_i``, so the binding ``tau`` is
    found exactly by scanning the sorted breakpoints.
    """
    coef = np.sqrt(gamma / x ** 3)  # free-user variance per unit tau
    brk = floor_sq / coef
    order = np.argsort(brk)
    # before breakpoint j (sorted), users order[j:] sit at their floors and order[:j] are free
    floor_mass = np.concatenate([np.cumsum((x * floor_sq)[order][::-1])[::-1], [0.0]])
    free_slope = np.concatenate([[0.0], np.cumsum((x * coef)[order])])
    tau = None
    for j in range(1, len(x) + 1):
        t = (budget - floor_mass[j]) / free_slope[j]
        upper = brk[order[j]] if j < len(x) else np.inf
        if brk[order[j - 1]] <= t <= upper:
            tau = t
            break
    if tau is None:  # every user at the floor uses exactly the budget
        return floor_sq.copy()
    return np.maximum(floor_sq, coef * tau)


def optimize_sigma(problem: NoiseProblem) -> np.ndarray:
    """Optimal per-user noise std, aligned with ``problem.n_samples``."""
    sigma = np.zeros_like(problem.n_samples)
    floor_sq = problem.floors ** 2
    bad = []
    for k in np.unique(problem.tasks):
        m = problem.tasks == k
        x = problem.n_samples[m]
        budget = problem.v_max * x.sum()
        if np.sum(x * floor_sq[m]) > budget * (1 + 1e-12):
            bad.append(int(k))
            continue
        sigma[m] = np.sqrt(_water_fill(x, problem.gamma, floor_sq[m], budget))
    if bad:
        raise InfeasibleNoiseProblem(bad)
    return np.maximum(sigma, problem.floors)


@dataclass
class LeakageLedger:
    """Running sum of per-round, per-user zCDP leakage (zCDP composes additively)."""

    entries: list[float] = field(default_factory=list)

    def accumulate(self, contributions) -> float:
        self.entries.extend(float(c) for c in np.atleast_1d(contributions))
        return self.total

    @property
    def total(self) -> float:
        return float(np.sum(self.entries)) if self.entries else 0.0
