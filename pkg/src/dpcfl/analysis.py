"""Empirical checks of the CFL convergence bounds.

Objectives here use the mean loss over samples, ``F(w) = 1/n sum_m l(w; x_m, y_m)``.
The one-step bound is

    E[F(w+) - F*] <= 2 z1 Q1 / (L - mu + 4 mu z2) + d^2 s^2 / (2L) + Q1 (F(w) - F*)

with ``Q1 = (L - mu + 4 mu z2) / L * Q0`` and ``Q0`` the data-weighted share
of the task's users that are misclustered or unscheduled. Substituting the
PL inequality into the underlying descent step actually yields the factor
``(L - mu + 4 mu z2 Q0) / L``; both are exposed (``q1`` and ``q1_descent``)
so traces can be checked against either.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_engine as nn


class ConvergenceError(RuntimeError):
    pass


# -- objectives ----------------------------------------------------------------

class QuadraticObjective:
    """Least squares ``l_m = 1/2 (a_m . w - y_m)^2``; ``mean=False`` gives ``1/2 ||Aw - y||^2``."""

    def __init__(self, A, y, mean: bool = True):
        self.A = np.asarray(A, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.scale = 1.0 / len(self.y) if mean else 1.0

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n(self) -> int:
        return len(self.y)

    def value(self, w) -> float:
        r = self.A @ w - self.y
        return 0.5 * self.scale * float(r @ r)

    def grad(self, w) -> np.ndarray:
        return self.scale * (self.A.T @ (self.A @ w - self.y))

    def hvp(self, w, v) -> np.ndarray:
        return self.scale * (self.A.T @ (self.A @ v))

    def hessian(self, w=None) -> np.ndarray:
        return self.scale * (self.A.T @ self.A)

    def sample_grads(self, w) -> np.ndarray:
        """Per-sample gradients, shape [n, d]."""
        return (self.A @ w - self.y)[:, None] * self.A

    def smoothness_bound(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian())[-1])

    def solve(self) -> np.ndarray:
        return np.linalg.lstsq(self.A, self.y, rcond=None)[0]


class LogisticObjective:
    """Multinomial logistic regression with ``l2/2 ||w||^2`` per sample.

    Parameters follow the flattening of a single softmax layer: the
    [K, d_in] weight matrix row-major, then the K biases.
    """

    def __init__(self, X, y, n_classes: int, l2: float = 0.0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.K = n_classes
        self.l2 = l2
        self.d_in = self.X.shape[1]
        self._Y = np.eye(n_classes)[self.y]

    @property
    def dim(self) -> int:
        return self.K * (self.d_in + 1)

    @property
    def n(self) -> int:
        return len(self.y)

    def _split(self, w):
        W = w[: self.K * self.d_in].reshape(self.K, self.d_in)
        return W, w[self.K * self.d_in:]

    def _probs(self, w):
        W, b = self._split(w)
        z = self.X @ W.T + b
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def value(self, w) -> float:
        p = self._probs(w)
        ce = -np.mean(np.log(np.clip(p[np.arange(self.n), self.y], 1e-300, None)))
        return float(ce + 0.5 * self.l2 * w @ w)

    def _pack(self, dW, db):
        return np.concatenate([dW.reshape(dW.shape[0], -1), db], axis=1)

    def sample_grads(self, w) -> np.ndarray:
        r = self._probs(w) - self._Y  # [n, K]
        dW = r[:, :, None] * self.X[:, None, :]  # [n, K, d_in]
        return self._pack(dW, r) + self.l2 * w

    def grad(self, w) -> np.ndarray:
        r = self._probs(w) - self._Y
        dW = r.T @ self.X / self.n
        return np.concatenate([dW.ravel(), r.mean(axis=0)]) + self.l2 * w

    def hvp(self, w, v) -> np.ndarray:
        p = self._probs(w)
        V, c = self._split(v)
        s = self.X @ V.T + c  # [n, K]
        u = p * s - p * np.sum(p * s, axis=1, keepdims=True)
        dW = u.T @ self.X / self.n
        return np.concatenate([dW.ravel(), u.mean(axis=0)]) + self.l2 * v

    def hessian(self, w) -> np.ndarray:
        eye = np.eye(self.dim)
        return np.stack([self.hvp(w, eye[j]) for j in range(self.dim)], axis=1)

    def smoothness_bound(self) -> float:
        Xa = np.hstack([self.X, np.ones((self.n, 1))])
        return 0.5 * float(np.linalg.eigvalsh(Xa.T @ Xa / self.n)[-1]) + self.l2


class MLPObjective:
    """Mean cross-entropy of a ReLU network; Hessian products by central differences."""

    def __init__(self, template: nn.ModelParams, X, y):
        self.template = template
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.template.dim

    @property
    def n(self) -> int:
        return len(self.y)

    def value(self, w) -> float:
        return nn.loss_value(self.template.with_flat(w), (self.X, self.y)) / self.n

    def grad(self, w) -> np.ndarray:
        _, g = nn.loss_and_grad(self.template.with_flat(w), (self.X, self.y))
        return g.values / self.n

    def sample_grads(self, w) -> np.ndarray:
        m = self.template.with_flat(w)
        return np.stack([nn.loss_and_grad(m, (self.X[j:j + 1], self.y[j:j + 1]))[1].values
                         for j in range(self.n)])

    def hvp(self, w, v, eps: float = 1e-5) -> np.ndarray:
        return (self.grad(w + eps * v) - self.grad(w - eps * v)) / (2 * eps)


# -- constants -------------------------------------------------------------------

def power_iteration(matvec, dim: int, rng: np.random.Generator, iters: int = 500,
                    tol: float = 1e-12) -> float:
    """Dominant eigenvalue of a symmetric operator (largest magnitude)."""
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return lam


def hessian_extremes(obj, w, rng: np.random.Generator, iters: int = 2000) -> tuple[float, float]:
    """(lambda_min, lambda_max) of the Hessian at ``w`` via power iteration."""
    hv = lambda v: obj.hvp(w, v)
    top = power_iteration(hv, obj.dim, rng, iters)
    if top < 0:  # dominant eigenvalue is negative: shift the other way
        top_pos = top + power_iteration(lambda v: hv(v) - top * v, obj.dim, rng, iters)
        return top, top_pos
    shift = power_iteration(lambda v: top * v - hv(v), obj.dim, rng, iters)
    return top - shift, top


@dataclass
class AssumptionConstants:
    L: float
    mu: float
    zeta1: float
    zeta2: float
    d: int
    sigma_max: float = 0.0
    C: float = float("nan")
    eta: float = 0.0
    n_iterates: int = 0
    n_pairs: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def denom(self) -> float:
        return self.L - self.mu + 4.0 * self.mu * self.zeta2

    @property
    def zeta2_ok(self) -> bool:
        return 0.0 < self.zeta2 < 0.25

    def q0_threshold(self) -> float:
        """Largest Q0 for which Q1 < 1."""
        return self.L / self.denom if self.denom > 0 else np.inf


def fit_zeta(pairs_F: np.ndarray, pairs_l: np.ndarray) -> tuple[float, float]:
    """Envelope ``||g_l||^2 <= z1 + z2 ||g_F||^2``.

    ``z2`` is the least-squares slope (clamped at 0); ``z1`` the largest
    residual, so the envelope covers every observed pair.
    """
    xF = np.asarray(pairs_F, dtype=np.float64)
    yl = np.asarray(pairs_l, dtype=np.float64)
    if np.ptp(xF) > 0:
        z2 = max(0.0, float(np.polyfit(xF, yl, 1)[0]))
    else:
        z2 = float(np.mean(yl) / xF[0]) if xF[0] > 0 else 0.0
    z1 = max(0.0, float(np.max(yl - z2 * xF)))
    return z1, z2


def estimate_constants(obj, iterates, rng: np.random.Generator | None = None,
                       sigma_max: float = 0.0, convex: bool = True) -> AssumptionConstants:
    """L, mu from Hessian extremes over ``iterates``; zeta envelope from per-sample gradients."""
    rng = np.random.default_rng(0) if rng is None else rng
    iterates = [np.asarray(w, dtype=np.float64) for w in iterates]
    lo, hi = np.inf, -np.inf
    xF, yl, gnorm = [], [], []
    for w in iterates:
        a, b = hessian_extremes(obj, w, rng)
        lo, hi = min(lo, a), max(hi, b)
        gF = obj.grad(w)
        nF = float(gF @ gF)
        gs = obj.sample_grads(w)
        xF.extend([nF] * len(gs))
        yl.extend(np.sum(gs * gs, axis=1))
        gnorm.append(np.sqrt(nF))
    z1, z2 = fit_zeta(np.array(xF), np.array(yl))
    flags = []
    if convex:
        mu = lo
        if mu <= 1e-9 * max(abs(hi), 1.0):  # zero up to power-iteration accuracy
            flags.append("mu<=0: strong convexity not met (increase regularization)")
    else:
        mu = abs(min(lo, 0.0)) or 1e-12
    if not 0.0 < z2 < 0.25:
        flags.append(f"zeta2={z2:.4g} outside (0, 1/4): contraction not guaranteed")
    return AssumptionConstants(L=hi, mu=mu, zeta1=z1, zeta2=z2, d=obj.dim, sigma_max=sigma_max,
                               C=float(max(gnorm)) if gnorm else float("nan"),
                               n_iterates=len(iterates), n_pairs=len(xF), flags=flags)


def estimate_eta(obj, iterates, rng: np.random.Generator | None = None) -> float:
    """Heuristic: |most negative Hessian eigenvalue| times the diameter of the iterate set."""
    rng = np.random.default_rng(0) if rng is None else rng
    W = np.stack([np.asarray(w, dtype=np.float64) for w in iterates])
    lo = min(hessian_extremes(obj, w, rng)[0] for w in W)
    diam = max((np.linalg.norm(a - b) for a in W for b in W), default=0.0)
    return abs(min(lo, 0.0)) * diam


# -- Q factors and bounds ----------------------------------------------------------

def q0(n_samples, p, a) -> float:
    """``1 - sum X_i (1 - p_i) a_i / sum X_i`` over the task's true users."""
    x = np.asarray(n_samples, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return float(1.0 - np.sum(x * (1.0 - p) * a) / np.sum(x))


def q1(q0_value: float, c: AssumptionConstants) -> float:
    return c.denom / c.L * q0_value


def q1_descent(q0_value: float, c: AssumptionConstants) -> float:
    """Contraction implied by substituting the PL inequality into the descent step."""
    return (c.L - c.mu + 4.0 * c.mu * c.zeta2 * q0_value) / c.L


def misclustering_rates(identities: np.ndarray, true_task: np.ndarray, t: int, window: int = 10) -> np.ndarray:
    """Per-user fraction of the last ``window`` rounds (up to ``t``) with a wrong identity.

    ``identities`` is [T, U], already mapped onto true-task labels.
    """
    lo = max(0, t - window + 1)
    wrong = np.asarray(identities)[lo:t + 1] != np.asarray(true_task)[None, :]
    return wrong.mean(axis=0)


def q_factors(true_task, identities, scheduled, n_samples, c: AssumptionConstants,
              window: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """(Q0, Q1) arrays of shape [T, K] from a clustering and scheduling record.

    ``identities`` and ``scheduled`` are [T, U]; identities must already be
    expressed in true-task labels.
    """
    true_task = np.asarray(true_task)
    ids = np.asarray(identities)
    sched = np.asarray(scheduled, dtype=np.float64)
    x = np.asarray(n_samples, dtype=np.float64)
    K = int(true_task.max()) + 1
    T = ids.shape[0]
    Q0 = np.zeros((T, K))
    for t in range(T):
        p = misclustering_rates(ids, true_task, t, window)
        for k in range(K):
            m = true_task == k
            Q0[t, k] = q0(x[m], p[m], sched[t, m])
    return Q0, c.denom / c.L * Q0


def bound_rhs(gap: float, q0_value: float, c: AssumptionConstants, mode: str = "convex",
              q1_value: float | None = None) -> float:
    Q1 = q1(q0_value, c) if q1_value is None else q1_value
    rhs = 2.0 * c.zeta1 * Q1 / c.denom + c.d ** 2 * c.sigma_max ** 2 / (2.0 * c.L) + Q1 * gap
    if mode == "nonconvex":
        rhs += c.eta * (1.0 - 4.0 * c.zeta2) * q0_value / (2.0 * c.L)
    elif mode != "convex":
        raise ValueError("mode must be 'convex' or 'nonconvex'")
    return rhs


def asymptotic_limit(q_max: float, c: AssumptionConstants) -> float:
    """Limit of the unrolled bound; ``inf`` when ``q_max >= 1`` (no contraction)."""
    if q_max >= 1.0:
        return float("inf")
    return 2.0 * c.zeta1 / c.denom * q_max / (1.0 - q_max) + c.d ** 2 * c.sigma_max ** 2 / (2.0 * c.L * (1.0 - q_max))


def unrolled_bound(q_max: float, c: AssumptionConstants, gap0: float, steps: int) -> float:
    """Iterate ``g <- 2 z1 q / denom + d^2 s^2 / 2L + q g`` for ``steps`` steps."""
    g = gap0
    a = 2.0 * c.zeta1 * q_max / c.denom + c.d ** 2 * c.sigma_max ** 2 / (2.0 * c.L)
    for _ in range(steps):
        g = a + q_max * g
    return g


@dataclass
class BoundTrace:
    t: np.ndarray
    task: np.ndarray
    gap: np.ndarray  # F(w_t) - F*
    next_gap: np.ndarray  # seed-averaged F(w_{t+1}) - F*
    Q0: np.ndarray
    Q1: np.ndarray
    rhs: np.ndarray
    violated: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "task", "gap", "Q0", "Q1", "rhs", "violated"])
            for row in zip(self.t, self.task, self.gap, self.Q0, self.Q1, self.rhs, self.violated):
                w.writerow([int(row[0]), int(row[1]), repr(float(row[2])), repr(float(row[3])),
                            repr(float(row[4])), repr(float(row[5])), int(row[6])])


@dataclass
class BoundReport:
    trace: BoundTrace
    violation_fraction: float
    degenerate: bool
    q_max: float
    limit: float
    flags: list[str] = field(default_factory=list)

    @property
    def satisfied_fraction(self) -> float:
        return 1.0 - self.violation_fraction


def bound_check(gap, next_gap, q0_values, c: AssumptionConstants, mode: str = "convex",
                task: int = 0, tol: float = 1e-12, contraction: str = "stated") -> BoundReport:
    """Compare seed-averaged next-step gaps with the one-step bound.

    When the bound degenerates to zero (Q1 = 0 and no noise) the check is
    replaced by plain descent, ``next_gap <= gap``, and flagged.
    ``contraction="descent"`` swaps in :func:`q1_descent`.
    """
    gap = np.asarray(gap, dtype=np.float64)
    nxt = np.asarray(next_gap, dtype=np.float64)
    Q0 = np.asarray(q0_values, dtype=np.float64)
    f = q1 if contraction == "stated" else q1_descent
    Q1 = np.array([f(v, c) for v in Q0])
    rhs = np.array([bound_rhs(g, v, c, mode, q) for g, v, q in zip(gap, Q0, Q1)])
    flags = []
    degenerate = bool(np.all(Q1 == 0) and c.sigma_max == 0 and (mode == "convex" or c.eta == 0))
    if degenerate:
        flags.append("bound degenerates to 0; checked descent instead")
        violated = nxt > gap + tol * np.maximum(1.0, np.abs(gap))
    else:
        violated = nxt > rhs + tol * np.maximum(1.0, np.abs(rhs))
    if not c.zeta2_ok:
        flags.append(f"zeta2={c.zeta2:.4g} violates 0 < zeta2 < 1/4")
    q_max = float(Q1.max()) if len(Q1) else 0.0
    if q_max >= 1.0:
        flags.append(f"Q1 max = {q_max:.4g} >= 1: no contraction, limit inapplicable")
    T = len(gap)
    trace = BoundTrace(np.arange(T), np.full(T, task), gap, nxt, Q0, Q1, rhs, violated.astype(int))
    return BoundReport(trace, float(violated.mean()) if T else 0.0, degenerate, q_max,
                       asymptotic_limit(q_max, c), flags)


# -- optimum -----------------------------------------------------------------------

def find_optimum(obj, w0=None, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Gradient descent with step ``1 / L_bound`` until ``||grad F|| < tol``.

    Returns ``(w*, F(w*), iterations)``.
    """
    w = np.zeros(obj.dim) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    step = 1.0 / obj.smoothness_bound()
    for it in range(max_iter + 1):
        g = obj.grad(w)
        if np.linalg.norm(g) < tol:
            return w, obj.value(w), it
        if it == max_iter:
            break
        w = w - step * g
    raise ConvergenceError(f"gradient norm {np.linalg.norm(g):.3g} after {max_iter} iterations")


# -- quadratic CFL testbed -----------------------------------------------------------

@dataclass
class QuadraticTestbed:
    """One task, several users each holding least-squares data."""

    A: list[np.ndarray]
    y: list[np.ndarray]

    @property
    def n_samples(self) -> np.ndarray:
        return np.array([len(v) for v in self.y], dtype=np.float64)

    def pooled(self) -> QuadraticObjective:
        return QuadraticObjective(np.vstack(self.A), np.concatenate(self.y))

    def step(self, w, alpha: float, sigma: float, rng: np.random.Generator, a=None) -> np.ndarray:
        """Aggregated update: data-weighted mean of per-user (mean gradient + N(0, sigma^2 I))."""
        x = self.n_samples
        a = np.ones(len(x)) if a is None else np.asarray(a, dtype=np.float64)
        if not np.any(a):
            return np.asarray(w, dtype=np.float64).copy()
        total = np.zeros(len(w))
        for xi, ai, Ai, yi in zip(x, a, self.A, self.y):
            if ai:
                g = Ai.T @ (Ai @ w - yi) / xi
                total += xi * (g + sigma * rng.normal(size=len(w)))
        return w - alpha * total / np.sum(x * a)


def make_quadratic_testbed(rng: np.random.Generator, n_users: int = 4, samples: int = 25,
                           scales=(1.0, 0.5), noise: float = 0.1) -> QuadraticTestbed:
    """2-parameter least squares with anisotropic features ``a ~ N(0, diag(scales^2))``."""
    w_true = rng.normal(size=len(scales))
    A, y = [], []
    for _ in range(n_users):
        Ai = rng.normal(size=(samples, len(scales))) * np.asarray(scales)
        A.append(Ai)
        y.append(Ai @ w_true + noise * rng.normal(size=samples))
    return QuadraticTestbed(A, y)


@dataclass
class TestbedRun:
    report: BoundReport
    constants: AssumptionConstants
    iterates: np.ndarray
    f_star: float


def run_quadratic_bound(bed: QuadraticTestbed, sigma: float, steps: int = 50, n_seeds: int = 20,
                        w0=None, seed: int = 0, contraction: str = "stated") -> TestbedRun:
    """Exact clustering, full scheduling, ``alpha = 1/L``.

    At every step the next-step gap is averaged over ``n_seeds`` independent
    draws of that step's DP noise; the trajectory follows the first draw.
    """
    obj = bed.pooled()
    w_star = obj.solve()
    f_star = obj.value(w_star)
    L = obj.smoothness_bound()
    rng = np.random.default_rng([seed, 0])
    w = w_star + (np.ones(obj.dim) if w0 is None else np.asarray(w0, dtype=np.float64) - w_star)
    iterates = [w.copy()]
    gaps, nexts = [], []
    for t in range(steps):
        draws = [bed.step(w, 1.0 / L, sigma, np.random.default_rng([seed, t + 1, s])) for s in range(n_seeds)]
        gaps.append(obj.value(w) - f_star)
        nexts.append(np.mean([obj.value(v) - f_star for v in draws]))
        w = draws[0]
        iterates.append(w.copy())
    c = estimate_constants(obj, iterates[:: max(1, steps // 10)], rng, sigma_max=sigma)
    q0s = np.full(steps, q0(bed.n_samples, np.zeros(len(bed.y)), np.ones(len(bed.y))))
    return TestbedRun(bound_check(gaps, nexts, q0s, c, contraction=contraction), c, np.array(iterates), f_star)
