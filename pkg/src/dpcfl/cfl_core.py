"""Clustered FL round: task-identity choice, DP local updates, two-level aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn_engine as nn
from .data import UserData
from .privacy import leakage as zcdp_leakage

AGGREGATION_MODES = ("default", "literal_eq8")


class ConfigurationError(ValueError):
    pass


class TaskAbsent(LookupError):
    """No member uploaded a model for this task at this BS."""


class NoUpdate(LookupError):
    """No BS aggregated the task this round; the previous model is kept."""


@dataclass
class UserProfile:
    id: int
    data: UserData
    minibatch_size: int
    position: np.ndarray
    transmit_power: float
    clip_bound: float
    sigma: float
    identity: int = 0

    def __post_init__(self):
        if self.data.size < 1:
            raise ValueError(f"user {self.id}: empty dataset")
        if not 1 <= self.minibatch_size <= self.data.size:
            raise ValueError(f"user {self.id}: minibatch_size must be in [1, {self.data.size}]")

    @property
    def n_samples(self) -> int:
        return self.data.size


@dataclass
class TaskModelSet:
    models: list[nn.ModelParams]
    previous: list[nn.ModelParams]

    @property
    def n_tasks(self) -> int:
        return len(self.models)

    @property
    def dim(self) -> int:
        return self.models[0].dim

    def data_size_bits(self, k: int) -> float:
        return 64.0 * self.models[k].dim

    def gap(self, k: int) -> np.ndarray:
        return self.models[k].flatten() - self.previous[k].flatten()


@dataclass
class ClusterGroundTruth:
    true_task: np.ndarray

    def __post_init__(self):
        self.true_task = np.asarray(self.true_task, dtype=np.int64)

    def sizes(self, n_tasks: int) -> np.ndarray:
        return np.bincount(self.true_task, minlength=n_tasks)


@dataclass
class Schedule:
    """Association ``assoc[i, b]`` (binary), optional RB tensor, per-user sigma."""

    assoc: np.ndarray
    sigma: np.ndarray
    rb: np.ndarray | None = None

    def __post_init__(self):
        self.assoc = np.asarray(self.assoc, dtype=np.int64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)

    def validate(self, max_per_bs: int | None = None) -> None:
        if np.any(self.assoc.sum(axis=1) > 1):
            raise ValueError("a user is associated with more than one BS")
        if max_per_bs is not None and np.any(self.assoc.sum(axis=0) > max_per_bs):
            raise ValueError("a BS serves more users than it has RBs")

    @property
    def scheduled(self) -> np.ndarray:
        return self.assoc.sum(axis=1) > 0

    @classmethod
    def empty(cls, n_users: int, n_bs: int, sigma: np.ndarray) -> "Schedule":
        return cls(np.zeros((n_users, n_bs), dtype=np.int64), sigma)


@dataclass
class RoundMetrics:
    round: int
    task_losses: np.ndarray
    clustering_accuracy: float
    total_leakage: float
    scheduled_count: int
    cfl_loss: float
    user_losses: np.ndarray
    identities: np.ndarray
    schedule: Schedule | None = None

    def csv_row(self) -> list:
        return [self.round, *[float(v) for v in self.task_losses], self.clustering_accuracy,
                self.total_leakage, self.scheduled_count, self.cfl_loss]

    @staticmethod
    def csv_header(n_tasks: int) -> list[str]:
        return ["round", *[f"loss_task{k}" for k in range(n_tasks)], "clustering_accuracy",
                "total_leakage", "scheduled_count", "cfl_loss"]


@dataclass
class CFLState:
    users: list[UserProfile]
    tasks: TaskModelSet
    truth: ClusterGroundTruth
    bs_tasks: list[frozenset]
    rate: float = 0.03
    identity_weight: float = 0.2
    dp_enabled: bool = True
    aggregation_mode: str = "default"
    seed: int = 0
    t: int = 0
    local_models: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigurationError(f"aggregation_mode must be one of {AGGREGATION_MODES}")
        if not 0.0 <= self.identity_weight <= 1.0:
            raise ConfigurationError("identity_weight (lambda) must lie in [0, 1]")

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_bs(self) -> int:
        return len(self.bs_tasks)

    @property
    def identities(self) -> np.ndarray:
        return np.array([u.identity for u in self.users], dtype=np.int64)

    def bs_executing(self, k: int) -> list[int]:
        return [b for b, ks in enumerate(self.bs_tasks) if k in ks]


# -- primitives --------------------------------------------------------------

def similarity(grad, model_gap) -> float:
    """Cosine similarity; 0 when either vector is (numerically) zero."""
    g = grad.values if isinstance(grad, nn.GradientVec) else np.asarray(grad, dtype=np.float64)
    w = np.asarray(model_gap, dtype=np.float64)
    if g.shape != w.shape:
        raise nn.ShapeError(f"gradient {g.shape} and model gap {w.shape} differ in length")
    ng, nw = np.linalg.norm(g), np.linalg.norm(w)
    if ng < 1e-12 or nw < 1e-12:
        return 0.0
    return float(np.clip(g @ w / (ng * nw), -1.0, 1.0))


def identity_from_scores(similarities: Sequence[float], losses: Sequence[float], lam: float) -> int:
    """argmax_k lam*S_k - (1-lam)*L_k; ties go to the lowest index."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    s = lam * np.asarray(similarities, dtype=np.float64) - (1.0 - lam) * np.asarray(losses, dtype=np.float64)
    return int(np.argmax(s))  # argmax returns the first maximum


def _minibatch(user: UserProfile, rng: np.random.Generator):
    idx = rng.choice(user.n_samples, size=user.minibatch_size, replace=False)
    idx.sort()
    return user.data.X[idx], user.data.y[idx]


def task_losses_and_grads(user: UserProfile, tasks: TaskModelSet, batch):
    losses, grads = [], []
    for model in tasks.models:
        loss, g = nn.loss_and_grad(model, batch)
        losses.append(loss)
        grads.append(g)
    return np.array(losses), grads


def determine_identity(user: UserProfile, tasks: TaskModelSet, lam: float, t: int,
                       rng: np.random.Generator | None = None, batch=None) -> int:
    """Task identity of ``user`` for round ``t >= 1`` from losses and gradient similarity."""
    if batch is None:
        batch = _minibatch(user, rng if rng is not None else np.random.default_rng(user.id))
    losses, grads = task_losses_and_grads(user, tasks, batch)
    sims = [similarity(g, tasks.gap(k)) for k, g in enumerate(grads)]
    return identity_from_scores(sims, losses, lam)


def private_local_update(user: UserProfile, global_model: nn.ModelParams, rate: float,
                         rng: np.random.Generator, dp: bool = True, batch=None):
    """One clipped, Gaussian-noised SGD step on a minibatch. Returns (model, rho)."""
    if dp and user.sigma <= 0:
        raise ConfigurationError(f"user {user.id}: sigma must be positive with DP enabled")
    if batch is None:
        batch = _minibatch(user, rng)
    _, g = nn.loss_and_grad(global_model, batch)
    g = nn.clip(g, user.clip_bound)
    noisy = g.values
    if dp:
        noisy = noisy + rng.normal(0.0, user.sigma, size=g.values.shape)
    new = nn.sgd_step(global_model, noisy, rate)
    rho = zcdp_leakage(user.clip_bound, user.n_samples, user.sigma) if dp else float("inf")
    return new, rho


def _as_flat(m):
    return m.flatten() if isinstance(m, nn.ModelParams) else np.asarray(m, dtype=np.float64)


def aggregate_bs(local_models: Sequence[tuple]):
    """Data-size weighted mean of ``(model, X_i)`` pairs of one task at one BS."""
    if not local_models:
        raise TaskAbsent("no members for this task at this BS")
    template = local_models[0][0]
    weights = np.array([float(x) for _, x in local_models])
    total = weights.sum()
    if total <= 0:
        raise TaskAbsent("members carry no data")
    stacked = np.stack([_as_flat(m) for m, _ in local_models])
    out = weights @ stacked / total
    return template.with_flat(out) if isinstance(template, nn.ModelParams) else out


def aggregate_global(per_bs: Sequence[tuple], mode: str = "default"):
    """Cross-BS merge of ``(w_kb, N_kb)`` over the BSs that execute the task.

    ``default`` is the N-weighted mean. ``literal_eq8`` additionally divides by
    the number of executing BSs, exactly as the update is printed.
    Entries with ``N == 0`` may carry ``None`` as the model.
    """
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"mode must be one of {AGGREGATION_MODES}")
    active = [(m, float(n)) for m, n in per_bs if n > 0]
    if not active:
        raise NoUpdate("no BS aggregated this task")
    template = active[0][0]
    weights = np.array([n for _, n in active])
    out = weights @ np.stack([_as_flat(m) for m, _ in active]) / weights.sum()
    if mode == "literal_eq8":
        out = out / len(per_bs)
    return template.with_flat(out) if isinstance(template, nn.ModelParams) else out


def clustering_accuracy(identities: np.ndarray, truth: ClusterGroundTruth, n_tasks: int) -> float:
    """Fraction of users whose identity matches their true task under the best relabeling."""
    return float(np.mean(matched_identities(identities, truth, n_tasks) == truth.true_task))


def matched_identities(identities: np.ndarray, truth: ClusterGroundTruth, n_tasks: int) -> np.ndarray:
    """Identities mapped onto true-task labels by the count-maximizing permutation."""
    from .assignment import solve_square

    counts = np.zeros((n_tasks, n_tasks))
    np.add.at(counts, (np.asarray(identities), truth.true_task), 1.0)
    perm = solve_square(-counts)  # perm[model_label] = true_label
    return np.asarray(perm)[np.asarray(identities)]


def seed_identities(n_users: int, n_tasks: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random identities, then K distinct users pinned one per task."""
    ids = rng.integers(0, n_tasks, size=n_users)
    pinned = rng.choice(n_users, size=n_tasks, replace=False)
    ids[pinned] = np.arange(n_tasks)
    return ids


def user_rng(seed: int, user_id: int, round_: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, user_id, round_])


# -- round ---------------------------------------------------------------------

ScheduleSource = Schedule | Callable[[CFLState, np.ndarray], Schedule]


def run_round(state: CFLState, schedule: ScheduleSource, seed: int | None = None):
    """Execute one CFL iteration in place and return ``(state, RoundMetrics)``.

    ``schedule`` may be a fixed :class:`Schedule` or a callable
    ``(state, identities) -> Schedule`` that is invoked after every user has
    fixed its task identity for this round, mirroring the order in which the
    BSs observe broadcast identities before associating users. DP noise is
    added after the schedule is known, which leaves its distribution
    unchanged since it is independent of the clipped gradient.
    """
    seed = state.seed if seed is None else seed
    tasks = state.tasks
    K = tasks.n_tasks
    lam = state.identity_weight
    rngs = [user_rng(seed, u.id, state.t) for u in state.users]

    identities = np.empty(state.n_users, dtype=np.int64)
    steps = []
    gaps = [tasks.gap(k) for k in range(K)]
    for u, rng in zip(state.users, rngs):
        batch = _minibatch(u, rng)
        losses, grads = task_losses_and_grads(u, tasks, batch)
        if state.t == 0:
            k = u.identity
        else:
            sims = [similarity(g, gaps[j]) for j, g in enumerate(grads)]
            k = identity_from_scores(sims, losses, lam)
        identities[u.id] = k
        u.identity = k
        steps.append(nn.clip(grads[k], u.clip_bound).values)

    sched = schedule(state, identities) if callable(schedule) else schedule
    sched.validate()
    scheduled = sched.scheduled
    for u in state.users:
        if scheduled[u.id]:
            u.sigma = float(sched.sigma[u.id])

    local = []
    leak = 0.0
    for u, rng, step in zip(state.users, rngs, steps):
        if state.dp_enabled:
            if u.sigma <= 0:
                raise ConfigurationError(f"user {u.id}: sigma must be positive with DP enabled")
            step = step + rng.normal(0.0, u.sigma, size=step.shape)
        local.append(tasks.models[u.identity].flatten() - state.rate * step)
        if scheduled[u.id]:
            leak += zcdp_leakage(u.clip_bound, u.n_samples, u.sigma) if state.dp_enabled else float("inf")
    state.local_models = local

    new_models = []
    for k in range(K):
        per_bs = []
        for b in state.bs_executing(k):
            members = [(local[i], state.users[i].n_samples) for i in range(state.n_users)
                       if sched.assoc[i, b] and identities[i] == k]
            try:
                w_kb = aggregate_bs(members)
                per_bs.append((w_kb, sum(x for _, x in members)))
            except TaskAbsent:
                per_bs.append((None, 0))
        try:
            new_models.append(tasks.models[k].with_flat(aggregate_global(per_bs, state.aggregation_mode)))
        except NoUpdate:
            new_models.append(None)
    for k, m in enumerate(new_models):
        if m is None:
            tasks.previous[k] = tasks.models[k]
        else:
            tasks.previous[k] = tasks.models[k]
            tasks.models[k] = m

    metrics = _metrics(state, identities, sched, leak)
    state.t += 1
    return state, metrics


def _metrics(state: CFLState, identities: np.ndarray, sched: Schedule, leak: float) -> RoundMetrics:
    K = state.tasks.n_tasks
    user_losses = np.empty(state.n_users)
    for u in state.users:
        local = state.tasks.models[u.identity].with_flat(state.local_models[u.id])
        user_losses[u.id] = nn.loss_value(local, (u.data.X, u.data.y))
    task_losses = np.full(K, np.nan)
    for k in range(K):
        members = [u for u in state.users if u.identity == k]
        if members:
            tot = sum(nn.loss_value(state.tasks.models[k], (u.data.X, u.data.y)) for u in members)
            task_losses[k] = tot / sum(u.n_samples for u in members)
    total_x = sum(u.n_samples for u in state.users)
    return RoundMetrics(
        round=state.t,
        task_losses=task_losses,
        clustering_accuracy=clustering_accuracy(identities, state.truth, K),
        total_leakage=leak,
        scheduled_count=int(sched.scheduled.sum()),
        cfl_loss=float(user_losses.sum() / total_x),
        user_losses=user_losses,
        identities=identities.copy(),
        schedule=sched,
    )
