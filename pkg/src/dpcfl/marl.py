"""Value-decomposition multi-agent Q-learning for user selection.

Each BS is an agent whose action is a subset of users (bit ``i`` of the
action index selects user ``i``). The team value is the sum of the per-BS
Q values, so the greedy joint action decomposes per agent. RB matching and
noise allocation are solved exactly once the actions are fixed; the shared
reward trades the CFL training loss against privacy leakage and penalizes
constraint violations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import assignment, cfl_core, nn_engine as nn, privacy, wireless
from .data import UserData

MODES = ("vdn", "iql")
PENALTIES = ("dynamic", "fixed")
POLICIES = ("learned", "random", "full_greedy")
MAX_USERS = 16


# -- states and actions ------------------------------------------------------

def agent_state(identities, n_tasks: int, dist_b, diag: float) -> np.ndarray:
    """``[identity / (K-1), distance / diagonal]`` for one BS, length 2U."""
    ids = np.asarray(identities, dtype=np.float64)
    scale = max(n_tasks - 1, 1)
    return np.concatenate([ids / scale, np.clip(np.asarray(dist_b, dtype=np.float64) / diag, 0.0, 1.0)])


def global_state(identities, n_tasks: int, dist: np.ndarray, diag: float) -> np.ndarray:
    """Stacked per-BS states, shape [B, 2U]; ``dist`` is [U, B]."""
    return np.stack([agent_state(identities, n_tasks, dist[:, b], diag) for b in range(dist.shape[1])])


def decode_action(index: int, n_users: int) -> np.ndarray:
    return (int(index) >> np.arange(n_users)) & 1


def encode_action(bits) -> int:
    bits = np.asarray(bits, dtype=np.int64)
    return int(np.sum(bits << np.arange(len(bits))))


def action_mask(n_users: int, max_selected: int) -> np.ndarray:
    """Actions selecting at most ``max_selected`` users (always includes the empty action)."""
    idx = np.arange(2 ** n_users)
    pop = np.zeros_like(idx)
    for i in range(n_users):
        pop += (idx >> i) & 1
    return pop <= max_selected


# -- Q networks ----------------------------------------------------------------

@dataclass
class QNet:
    model: nn.ModelParams
    lr: float = 0.0015

    def __post_init__(self):
        if self.model.layers[-1].activation != "identity":
            raise ValueError("Q-network needs an identity output layer")

    @property
    def n_actions(self) -> int:
        return self.model.n_out

    def q_values(self, state) -> np.ndarray:
        return nn.forward(self.model, state)

    def grad_q(self, state, action: int) -> np.ndarray:
        """Flat gradient of Q(state, action) with respect to the parameters."""
        X = np.atleast_2d(np.asarray(state, dtype=np.float64))
        d = np.zeros((1, self.n_actions))
        d[0, action] = 1.0
        return nn.backward(self.model, X, d)


def make_qnet(n_users: int, hidden=(128, 128), lr: float = 0.0015, rng=None) -> QNet:
    if n_users > MAX_USERS:
        raise ValueError(f"U = {n_users} exceeds {MAX_USERS} (2^U Q outputs)")
    rng = np.random.default_rng(0) if rng is None else rng
    return QNet(nn.init_model([2 * n_users, *hidden, 2 ** n_users], rng, output="identity"), lr)


def select_action(agent: QNet, state, eps: float, rng: np.random.Generator, mask=None, q=None) -> int:
    """Epsilon-greedy over the (masked) actions; greedy ties go to the lowest index.

    ``q`` may carry precomputed Q values for ``state``.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    allowed = None
    if mask is not None:
        allowed = np.flatnonzero(mask)
        if len(allowed) == 0:
            raise ValueError("action mask excludes every action")
    if rng.random() < eps:
        return int(rng.choice(allowed)) if allowed is not None else int(rng.integers(agent.n_actions))
    q = agent.q_values(state) if q is None else q
    if allowed is not None:
        return int(allowed[np.argmax(q[allowed])])
    return int(np.argmax(q))


def q_total(local_qs) -> float:
    return float(np.sum(np.asarray(local_qs, dtype=np.float64)))


# -- reward --------------------------------------------------------------------

def penalty(n_violations: int, scheme: str = "dynamic", weight: float = 1e3, fixed: float = 5e3) -> float:
    """Non-negative penalty magnitude for ``n_violations`` constraint-violating users."""
    if scheme == "dynamic":
        return float(n_violations) ** 2 * weight
    if scheme == "fixed":
        return fixed if n_violations > 0 else 0.0
    raise ValueError(f"penalty scheme must be one of {PENALTIES}")


def reward(user_losses, phi, sigma, assoc, n_samples, gamma: float,
           scheme: str = "dynamic", weight: float = 1e3, fixed: float = 5e3) -> float:
    """Shared reward: mean of (loss + privacy cost of uploaders) minus the violation penalty."""
    losses = np.asarray(user_losses, dtype=np.float64)
    U = len(losses)
    associated = np.asarray(assoc).sum(axis=1) > 0
    x = np.asarray(n_samples, dtype=np.float64)
    sig = np.asarray(sigma, dtype=np.float64)
    dp = np.zeros(U)
    dp[associated] = gamma / (x[associated] * sig[associated]) ** 2
    base = -float(np.sum(losses + dp)) / U
    return base - penalty(int(np.sum(phi)), scheme, weight, fixed)


# -- TD learning -----------------------------------------------------------------

@dataclass
class Transition:
    state: np.ndarray  # [B, 2U]
    actions: np.ndarray  # [B]
    reward: float
    next_state: np.ndarray | None = None  # None at episode end
    local_q: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("transition reward must be finite")


class TDDivergence(FloatingPointError):
    pass


def td_update(batch: list[Transition], agents: list[QNet], mode: str = "vdn",
              max_grad_norm: float | None = None, discount: float = 1.0, mask=None) -> float:
    """One gradient step of every agent on the squared TD error; returns mean Delta^2.

    VDN: Delta = sum_b Q_b(s_b, a_b) - R - sum_b max_a Q_b(s'_b, a) shared by all agents.
    IQL: each agent uses its own Delta_b = Q_b - R - max_a Q_b(s'_b, a).
    Per-agent gradients are averaged over the batch; targets use the pre-update
    networks. ``discount`` multiplies the bootstrap term (1.0 is the plain form);
    with a ``mask`` the bootstrap max runs over the permitted actions only.
    """
    if not batch:
        raise ValueError("empty transition batch")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    B = len(agents)
    N = len(batch)
    S = np.stack([tr.state for tr in batch])  # [N, B, 2U]
    A = np.stack([tr.actions for tr in batch]).astype(np.int64)  # [N, B]
    R = np.array([tr.reward for tr in batch])
    live = np.array([tr.next_state is not None for tr in batch])
    rows = np.arange(N)

    q_sel = np.zeros((N, B))
    q_next = np.zeros((N, B))
    caches = []
    for b, agent in enumerate(agents):
        acts = nn._forward_cache(agent.model, S[:, b])
        caches.append(acts)
        q_sel[:, b] = acts[-1][rows, A[:, b]]
        if live.any():
            S_next = np.stack([batch[n].next_state[b] for n in np.flatnonzero(live)])
            q_next_all = nn.forward(agent.model, S_next)
            if mask is not None:
                q_next_all = q_next_all[:, mask]
            q_next[live, b] = discount * q_next_all.max(axis=1)

    if mode == "vdn":
        delta = q_sel.sum(axis=1) - R - q_next.sum(axis=1)
        deltas = np.repeat(delta[:, None], B, axis=1)
    else:
        deltas = q_sel - R[:, None] - q_next
    if not np.all(np.isfinite(deltas)):
        bad = int(np.flatnonzero(~np.isfinite(deltas).all(axis=1))[0])
        raise TDDivergence(f"non-finite TD error at transition {bad} (reward {R[bad]!r})")

    for b, agent in enumerate(agents):
        d_out = np.zeros((N, agent.n_actions))
        d_out[rows, A[:, b]] = 2.0 * deltas[:, b] / N
        g = nn.backward(agent.model, S[:, b], d_out, caches[b])
        if max_grad_norm is not None:
            norm = np.linalg.norm(g)
            if norm > max_grad_norm:
                g = g * (max_grad_norm / norm)
        agent.model = nn.sgd_step(agent.model, g, agent.lr)
    return float(np.mean(deltas[:, 0] ** 2)) if mode == "vdn" else float(np.mean(deltas ** 2))


# -- environment -----------------------------------------------------------------

@dataclass
class EnvParams:
    n_tasks: int = 4
    n_rbs: int = 4
    gamma: float = 2e7
    v_max: float = 12.0
    n_min: float = 100.0
    rate_req: float = 1e6
    delay_req: float = 10e-3
    alpha: float = 0.03
    identity_weight: float = 0.2
    dp_enabled: bool = True
    aggregation_mode: str = "default"
    clip_bound: float = 20.0
    minibatch: int = 32
    hidden: tuple = ()
    arena: float = 500.0


@dataclass
class StepResult:
    metrics: cfl_core.RoundMetrics
    state: np.ndarray
    actions: np.ndarray
    local_q: np.ndarray | None
    phi: np.ndarray
    report: wireless.ConstraintReport
    sigma: np.ndarray


class Simulator:
    """Wireless CFL environment: one step is one CFL round under the BSs' selections."""

    def __init__(self, users: list[UserData], channel: wireless.ChannelState, bs_tasks,
                 params: EnvParams, seed: int = 0):
        if len(users) > MAX_USERS:
            raise ValueError(f"U = {len(users)} exceeds {MAX_USERS}")
        self.users = users
        self.channel = channel
        self.bs_tasks = [frozenset(int(k) for k in ks) for ks in bs_tasks]
        self.params = params
        self.seed = seed
        self.n_samples = np.array([u.size for u in users], dtype=np.float64)
        self.dist = channel.distances()
        self.diag = params.arena * np.sqrt(2.0)
        self.true_tasks = np.array([u.true_task for u in users], dtype=np.int64)
        in_dim = users[0].X.shape[1]
        n_classes = int(max(u.y.max() for u in users)) + 1
        self.model_sizes = [in_dim, *params.hidden, n_classes]

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_bs(self) -> int:
        return len(self.bs_tasks)

    def initial_sigma(self) -> np.ndarray:
        p = self.params
        return np.maximum(np.sqrt(p.v_max), p.n_min / self.n_samples)

    def reset(self, episode: int = 0, vary_init: bool = False) -> cfl_core.CFLState:
        """Fresh models and seeded identities; the init is per-run unless ``vary_init``."""
        p = self.params
        rng = np.random.default_rng([self.seed, 11, episode if vary_init else 0])
        models = [nn.init_model(self.model_sizes, rng) for _ in range(p.n_tasks)]
        ids = cfl_core.seed_identities(self.n_users, p.n_tasks, rng)
        sigma = self.initial_sigma()
        profiles = [
            cfl_core.UserProfile(i, u, min(p.minibatch, u.size), self.channel.user_pos[i],
                                 float(self.channel.powers[i]), p.clip_bound, float(sigma[i]), int(ids[i]))
            for i, u in enumerate(self.users)
        ]
        tasks = cfl_core.TaskModelSet(models, [m.copy() for m in models])
        return cfl_core.CFLState(profiles, tasks, cfl_core.ClusterGroundTruth(self.true_tasks), self.bs_tasks,
                                 rate=p.alpha, identity_weight=p.identity_weight, dp_enabled=p.dp_enabled,
                                 aggregation_mode=p.aggregation_mode, seed=self.seed)

    def observe(self, identities) -> np.ndarray:
        return global_state(identities, self.params.n_tasks, self.dist, self.diag)

    def step(self, state: cfl_core.CFLState, choose: Callable, round_seed: int) -> StepResult:
        """Run one round. ``choose(global_state, identities)`` returns ``(actions[B, U], local_q)``."""
        p = self.params
        out = {}

        def schedule(cfl_state, identities):
            s = self.observe(identities)
            actions, local_q = choose(s, identities)
            actions = np.asarray(actions, dtype=np.int64)
            alloc, assoc = assignment.allocate_all(actions, self.n_samples, self.channel, p.n_rbs,
                                                   p.rate_req, identities, self.bs_tasks)
            sigma = np.array([u.sigma for u in cfl_state.users])
            sched = assoc.sum(axis=1) > 0
            if sched.any():
                prob = privacy.NoiseProblem(self.n_samples[sched], identities[sched], p.gamma, p.v_max, p.n_min)
                sigma[sched] = privacy.optimize_sigma(prob)
            task_bits = [cfl_state.tasks.data_size_bits(k) for k in range(p.n_tasks)]
            report = wireless.check_constraints(alloc, assoc, identities, task_bits, self.channel,
                                                p.rate_req, p.delay_req, self.bs_tasks)
            phi = assignment.unmet_actions(actions, assoc) | report.flags
            out.update(state=s, actions=actions, local_q=local_q, phi=phi, report=report, sigma=sigma)
            return cfl_core.Schedule(assoc, sigma, alloc)

        _, metrics = cfl_core.run_round(state, schedule, seed=round_seed)
        return StepResult(metrics, out["state"], out["actions"], out["local_q"], out["phi"],
                          out["report"], out["sigma"])

    def step_reward(self, res: StepResult, scheme: str = "dynamic") -> float:
        return reward(res.metrics.user_losses, res.phi, res.sigma, res.metrics.schedule.assoc,
                      self.n_samples, self.params.gamma, scheme)


# -- baselines ---------------------------------------------------------------------

def random_actions(n_bs: int, mask_idx: np.ndarray, n_users: int, rng) -> np.ndarray:
    return np.stack([decode_action(int(rng.choice(mask_idx)), n_users) for _ in range(n_bs)])


def greedy_actions(dist: np.ndarray, identities, bs_tasks, n_rbs: int) -> np.ndarray:
    """Each BS in turn takes up to ``n_rbs`` nearest untaken users whose task it serves."""
    U, B = dist.shape
    actions = np.zeros((B, U), dtype=np.int64)
    taken = np.zeros(U, dtype=bool)
    for b in range(B):
        for i in np.argsort(dist[:, b], kind="stable"):
            if actions[b].sum() >= n_rbs:
                break
            if not taken[i] and int(identities[i]) in bs_tasks[b]:
                actions[b, i] = 1
                taken[i] = True
    return actions


class RunningStats:
    """Streaming mean and standard deviation (Welford)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self._m2 = 0.0

    def update(self, values) -> None:
        for v in np.atleast_1d(values):
            self.n += 1
            d = v - self.mean
            self.mean += d / self.n
            self._m2 += d * (v - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(self._m2 / self.n)) if self.n > 1 else 1.0


# -- training ------------------------------------------------------------------------

@dataclass
class MarlConfig:
    epochs: int = 300
    episodes: int = 1
    steps: int = 10
    lr: float = 0.0015
    hidden: tuple = (128, 128)
    mode: str = "vdn"
    penalty: str = "dynamic"
    policy: str = "learned"
    reward_norm: str = "running"  # "running" standardizes TD rewards; "scale" multiplies by reward_scale
    reward_scale: float = 1e-3
    updates_per_epoch: int = 5
    discount: float = 0.5
    max_grad_norm: float | None = None
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.6
    mask: bool = True
    minibatch: int | None = None
    vary_init: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.penalty not in PENALTIES:
            raise ValueError(f"penalty must be one of {PENALTIES}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.reward_norm not in ("running", "scale"):
            raise ValueError("reward_norm must be 'running' or 'scale'")
        if self.updates_per_epoch < 1:
            raise ValueError("updates_per_epoch must be at least 1")

    def epsilon(self, epoch: int) -> float:
        span = max(self.eps_decay_frac * self.epochs, 1.0)
        return max(self.eps_end, self.eps_start - (self.eps_start - self.eps_end) * epoch / span)


@dataclass
class EpochStats:
    epoch: int
    accumulated_reward: float
    mean_violations: float
    epsilon_greedy: float
    mean_td_loss: float
    leakage: float = 0.0  # summed zCDP leakage per episode
    cfl_loss: float = float("nan")  # after the episode's last round
    accuracy: float = float("nan")

    def csv_row(self) -> list:
        return [self.epoch, self.accumulated_reward, self.mean_violations, self.epsilon_greedy, self.mean_td_loss,
                self.leakage, self.cfl_loss, self.accuracy]

    CSV_HEADER = ("epoch", "accumulated_reward", "mean_violations", "epsilon_greedy", "mean_TD_loss",
                  "leakage", "cfl_loss", "clustering_accuracy")


@dataclass
class TrainResult:
    agents: list[QNet]
    trace: list[EpochStats] = field(default_factory=list)
    rounds: list[cfl_core.RoundMetrics] = field(default_factory=list)  # last episode of the last epoch

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.accumulated_reward for e in self.trace])


def train(sim: Simulator, cfg: MarlConfig, on_epoch: Callable | None = None) -> TrainResult:
    """Epochs x episodes x steps; networks are updated at the end of each epoch from its transitions.

    The reported accumulated reward is the unscaled per-episode sum, averaged
    over the epoch's episodes. The penalty scheme only changes the reward.
    """
    U, B = sim.n_users, sim.n_bs
    init_rng = np.random.default_rng([sim.seed, 3])
    agents = [make_qnet(U, cfg.hidden, cfg.lr, init_rng) for _ in range(B)]
    act_rng = np.random.default_rng([sim.seed, 7])
    batch_rng = np.random.default_rng([sim.seed, 13])
    mask = action_mask(U, sim.params.n_rbs) if cfg.mask else None
    mask_idx = np.flatnonzero(mask) if mask is not None else np.arange(2 ** U)
    result = TrainResult(agents)
    norm = RunningStats()

    for epoch in range(cfg.epochs):
        eps = cfg.epsilon(epoch)
        transitions: list[Transition] = []
        total_reward = 0.0
        n_violations = 0.0
        leak, final_loss, final_acc = 0.0, 0.0, 0.0
        for ep in range(cfg.episodes):
            state = sim.reset(epoch * cfg.episodes + ep, cfg.vary_init)
            round_seed = sim.seed * 1_000_003 + epoch * cfg.episodes + ep
            prev: list[Transition] = []
            rounds = []

            def choose(s, identities):
                if prev:
                    prev[-1].next_state = s
                if cfg.policy == "random":
                    return random_actions(B, mask_idx, U, act_rng), None
                if cfg.policy == "full_greedy":
                    return greedy_actions(sim.dist, identities, sim.bs_tasks, sim.params.n_rbs), None
                qs = [agents[b].q_values(s[b]) for b in range(B)]
                idx = [select_action(agents[b], s[b], eps, act_rng, mask, qs[b]) for b in range(B)]
                q = np.array([qs[b][idx[b]] for b in range(B)])
                return np.stack([decode_action(a, U) for a in idx]), (np.array(idx), q)

            for _ in range(cfg.steps):
                res = sim.step(state, choose, round_seed)
                r = sim.step_reward(res, cfg.penalty)
                total_reward += r
                n_violations += float(res.phi.sum())
                rounds.append(res.metrics)
                leak += res.metrics.total_leakage
                if res.local_q is not None:
                    idx, q = res.local_q
                    tr = Transition(res.state, idx, r, None, q)
                    transitions.append(tr)
                    prev.append(tr)
            final_loss += rounds[-1].cfl_loss if rounds else float("nan")
            final_acc += rounds[-1].clustering_accuracy if rounds else float("nan")
        td_loss = float("nan")
        if cfg.policy == "learned" and transitions:
            raw = np.array([tr.reward for tr in transitions])
            if cfg.reward_norm == "running":
                norm.update(raw)
                scaled = (raw - norm.mean) / max(norm.std, 1e-12)
            else:
                scaled = raw * cfg.reward_scale
            batch = [Transition(tr.state, tr.actions, float(v), tr.next_state, tr.local_q)
                     for tr, v in zip(transitions, scaled)]
            losses = []
            for _ in range(cfg.updates_per_epoch):
                if cfg.minibatch:
                    order = batch_rng.permutation(len(batch))
                    for k in range(0, len(order), cfg.minibatch):
                        chunk = [batch[j] for j in order[k:k + cfg.minibatch]]
                        losses.append(td_update(chunk, agents, cfg.mode, cfg.max_grad_norm, cfg.discount, mask))
                else:
                    losses.append(td_update(batch, agents, cfg.mode, cfg.max_grad_norm, cfg.discount, mask))
            td_loss = losses[0]
        stats = EpochStats(epoch, total_reward / cfg.episodes, n_violations / (cfg.episodes * cfg.steps),
                           eps, td_loss, leak / cfg.episodes, final_loss / cfg.episodes, final_acc / cfg.episodes)
        result.trace.append(stats)
        result.rounds = rounds
        if on_epoch is not None:
            on_epoch(stats)
    return result
