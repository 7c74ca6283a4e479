"""Configuration, orchestration and CSV persistence for scheduling experiments."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import yaml

from . import cfl_core, data, marl, nn_engine as nn, wireless

SCHEDULERS = ("dpvd", "iql", "fixed_penalty", "random", "full_greedy")
IDENTITY_RULES = ("weighted", "loss_only")
AGGREGATION_MODES = ("default", "literal_eq8")
WORKERS_ENV = "DPCFL_WORKERS"


class ConfigError(ValueError):
    def __init__(self, fieldname: str, message: str):
        self.field = fieldname
        super().__init__(f"{fieldname}: {message}")


@dataclass
class ExperimentConfig:
    arena: float = 500.0  # side of the square area, m
    n_bs: int = 4
    n_users: int = 12
    n_tasks: int = 4
    n_rbs: int = 4
    rb_bandwidth: float = 1e6  # Hz
    noise_psd: float = 1e-9  # W/Hz
    downlink_rate: float = 1.5e6  # bit/s
    gamma: float = 2e7
    rate_req: float = 1e6  # bit/s
    delay_req: float = 0.01  # s
    v_max: float = 12.0
    n_min: float = 100.0
    alpha: float = 0.03
    q_lr: float = 0.0015
    identity_weight: float = 0.2
    clip_bound: float = 20.0
    power_dbm: float = 30.0
    tasks_per_bs: int = 3
    minibatch: int = 32
    epochs: int = 300
    episodes: int = 1
    steps: int = 10
    seeds: list = field(default_factory=lambda: [0])
    scheduler: str = "dpvd"
    identity_rule: str = "weighted"
    aggregation_mode: str = "default"
    dp_enabled: bool = True
    literal_interference: bool = False
    q_hidden: list = field(default_factory=lambda: [128, 128])
    discount: float = 0.5
    updates_per_epoch: int = 5
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.n_users <= marl.MAX_USERS:
            raise ConfigError("n_users", f"must be in [1, {marl.MAX_USERS}], got {self.n_users}")
        if not 1 <= self.n_tasks <= self.n_users:
            raise ConfigError("n_tasks", "must be in [1, n_users]")
        if not 1 <= self.tasks_per_bs <= self.n_tasks:
            raise ConfigError("tasks_per_bs", "must be in [1, n_tasks]")
        for name in ("n_bs", "n_rbs", "minibatch", "updates_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        for name in ("epochs", "episodes", "steps"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        for name in ("arena", "rb_bandwidth", "noise_psd", "downlink_rate", "gamma", "rate_req",
                     "delay_req", "v_max", "n_min", "alpha", "q_lr", "clip_bound"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if not 0 <= self.identity_weight <= 1:
            raise ConfigError("identity_weight", "must be in [0, 1]")
        if not 0 <= self.discount <= 1:
            raise ConfigError("discount", "must be in [0, 1]")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError("scheduler", f"must be one of {SCHEDULERS}")
        if self.identity_rule not in IDENTITY_RULES:
            raise ConfigError("identity_rule", f"must be one of {IDENTITY_RULES}")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ConfigError("aggregation_mode", f"must be one of {AGGREGATION_MODES}")
        if not self.seeds or any(int(s) != s or s < 0 for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of non-negative integers")
        known = {f.name for f in dataclasses.fields(data.DatasetSpec)}
        bad = sorted(set(self.dataset) - known)
        if bad:
            raise ConfigError("dataset", f"unknown keys {bad}")

    @property
    def dataset_spec(self) -> data.DatasetSpec:
        return data.DatasetSpec(**self.dataset)

    @property
    def effective_identity_weight(self) -> float:
        return 0.0 if self.identity_rule == "loss_only" else self.identity_weight

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- loading -------------------------------------------------------------------------

class _UniqueKeyLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise ConfigError(str(key), "duplicate key")
        seen.add(key)
    return yaml.SafeLoader.construct_mapping(loader, node, deep)


_UniqueKeyLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _coerce(name: str, value, default):
    """Cast a parsed YAML value to the type of the field default."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)  # also accepts "2e7", which YAML 1.1 reads as a string
        if isinstance(default, list):
            if name == "seeds":
                return parse_seeds(value)
            if not isinstance(value, list):
                raise TypeError
            return [int(v) for v in value]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise TypeError
            return dict(value)
        if not isinstance(value, str):
            raise TypeError
        return value
    except (TypeError, ValueError):
        raise ConfigError(name, f"invalid value {value!r}") from None


def parse_seeds(value) -> list[int]:
    """Accepts an int, a list, ``"0..4"`` (inclusive) or ``"0,2,5"``."""
    if isinstance(value, bool):
        raise ValueError(value)
    if isinstance(value, int):
        return [value]
    if isinstance(value, list):
        return [int(v) for v in value]
    text = str(value).strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def config_from_dict(raw: dict) -> ExperimentConfig:
    defaults = ExperimentConfig()
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    values = {k: _coerce(k, v, getattr(defaults, k)) for k, v in raw.items()}
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML config; omitted keys take the defaults, an empty file gives all defaults."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("path", f"config file not found: {path}")
    try:
        raw = yaml.load(path.read_text(), Loader=_UniqueKeyLoader)
    except yaml.YAMLError as e:
        raise ConfigError("path", f"unparseable YAML: {e}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("path", "top level must be a mapping")
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of every field except the seed list, independent of field order."""
    d = cfg.to_dict()
    d.pop("seeds")
    blob = json.dumps(d, sort_keys=True, default=float)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- building ------------------------------------------------------------------------

def bs_task_sets(n_bs: int, n_tasks: int, per_bs: int) -> list[frozenset]:
    return [frozenset((b + j) % n_tasks for j in range(per_bs)) for b in range(n_bs)]


def build_simulator(cfg: ExperimentConfig, seed: int) -> marl.Simulator:
    rng = np.random.default_rng([seed, 1])
    true_tasks = data.assign_true_tasks(cfg.n_users, cfg.n_tasks, rng)
    users = data.make_users(cfg.dataset_spec, true_tasks, cfg.n_tasks, rng)
    user_pos = rng.uniform(0.0, cfg.arena, size=(cfg.n_users, 2))
    bs_pos = wireless.grid_bs_positions(cfg.n_bs, cfg.arena)
    ch = wireless.make_channel(user_pos, bs_pos, wireless.dbm_to_watt(cfg.power_dbm), cfg.rb_bandwidth,
                               cfg.noise_psd, cfg.downlink_rate, literal_interference=cfg.literal_interference)
    params = marl.EnvParams(n_tasks=cfg.n_tasks, n_rbs=cfg.n_rbs, gamma=cfg.gamma, v_max=cfg.v_max,
                            n_min=cfg.n_min, rate_req=cfg.rate_req, delay_req=cfg.delay_req, alpha=cfg.alpha,
                            identity_weight=cfg.effective_identity_weight, dp_enabled=cfg.dp_enabled,
                            aggregation_mode=cfg.aggregation_mode, clip_bound=cfg.clip_bound,
                            minibatch=cfg.minibatch, arena=cfg.arena)
    return marl.Simulator(users, ch, bs_task_sets(cfg.n_bs, cfg.n_tasks, cfg.tasks_per_bs), params, seed)


def run_full_participation(cfg: ExperimentConfig, seed: int, rounds: int = 30) -> list[cfl_core.RoundMetrics]:
    """Clustered FL without the radio layer: every user uploads every round to one BS serving all tasks."""
    sim = build_simulator(cfg, seed)
    state = sim.reset()
    state.bs_tasks = [frozenset(range(cfg.n_tasks))]
    assoc = np.ones((cfg.n_users, 1))
    sigma = sim.initial_sigma()

    def schedule(_state, _identities):
        return cfl_core.Schedule(assoc, sigma)

    history = []
    for t in range(rounds):
        state, metrics = cfl_core.run_round(state, schedule, seed=seed * 1_000_003 + t)
        history.append(metrics)
    return history


def marl_config(cfg: ExperimentConfig) -> marl.MarlConfig:
    mode, penalty, policy = {
        "dpvd": ("vdn", "dynamic", "learned"),
        "iql": ("iql", "dynamic", "learned"),
        "fixed_penalty": ("vdn", "fixed", "learned"),
        "random": ("vdn", "dynamic", "random"),
        "full_greedy": ("vdn", "dynamic", "full_greedy"),
    }[cfg.scheduler]
    return marl.MarlConfig(epochs=cfg.epochs, episodes=cfg.episodes, steps=cfg.steps, lr=cfg.q_lr,
                           hidden=tuple(cfg.q_hidden), mode=mode, penalty=penalty, policy=policy,
                           updates_per_epoch=cfg.updates_per_epoch, discount=cfg.discount)


# -- summaries -----------------------------------------------------------------------

def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def epochs_to_fraction(rewards, fraction: float = 0.9, window: int = 10) -> int:
    """First epoch where the smoothed trace reaches ``min + fraction * (max - min)``."""
    s = smooth(rewards, window)
    if len(s) == 0:
        return 0
    target = s.min() + fraction * (s.max() - s.min())
    return int(np.argmax(s >= target - 1e-12 * max(1.0, abs(target))))


def final_quartile(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan")
    return float(v[-max(1, len(v) // 4):].mean())


def max_leakage_per_round(cfg: ExperimentConfig) -> float:
    """Leakage of one user at the noise floor ``X sigma = N_min``."""
    return 2.0 * (cfg.clip_bound / cfg.n_min) ** 2


SUMMARY_FIELDS = ("final_reward", "epochs_to_90", "final_violations", "final_leakage",
                  "final_cfl_loss", "final_accuracy")


def summarize(trace: list[marl.EpochStats], cfg: ExperimentConfig) -> dict:
    rewards = [e.accumulated_reward for e in trace]
    norm = cfg.steps * cfg.n_users * max_leakage_per_round(cfg)
    return {
        "final_reward": final_quartile(rewards),
        "epochs_to_90": epochs_to_fraction(rewards) if rewards else 0,
        "final_violations": final_quartile([e.mean_violations for e in trace]),
        "final_leakage": final_quartile([e.leakage for e in trace]) / norm,
        "final_cfl_loss": final_quartile([e.cfl_loss for e in trace]),
        "final_accuracy": final_quartile([e.accuracy for e in trace]),
    }


# -- persistence ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class RunRecord:
    config: ExperimentConfig
    config_hash: str
    seed: int
    round_csv: Path | None
    epoch_csv: Path | None
    summary: dict
    wall_clock: float = 0.0
    rewards: np.ndarray | None = None

    @property
    def label(self) -> str:
        return self.config.scheduler


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str | Path | None = None,
             checkpoints: bool = True) -> RunRecord:
    """Train one seed; with ``out_dir`` write round/epoch CSVs and agent checkpoints."""
    start = time.perf_counter()
    sim = build_simulator(cfg, seed)
    result = marl.train(sim, marl_config(cfg))
    h = config_hash(cfg)
    round_csv = epoch_csv = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"seed{seed}"
        round_csv = out / f"{stem}_rounds.csv"
        epoch_csv = out / f"{stem}_epochs.csv"
        write_csv(round_csv, cfl_core.RoundMetrics.csv_header(cfg.n_tasks),
                  [m.csv_row() for m in result.rounds])
        write_csv(epoch_csv, marl.EpochStats.CSV_HEADER, [e.csv_row() for e in result.trace])
        if checkpoints and marl_config(cfg).policy == "learned":
            for b, agent in enumerate(result.agents):
                nn.save_checkpoint(agent.model, out / f"{stem}_agent{b}.ckpt")
    return RunRecord(cfg, h, seed, round_csv, epoch_csv, summarize(result.trace, cfg),
                     time.perf_counter() - start, result.rewards)


def _run_job(job):
    cfg, seed, out_dir = job
    return run_seed(cfg, seed, out_dir)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"not an integer: {raw!r}") from None
    return max(1, n)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   workers: int | None = None) -> list[RunRecord]:
    """Run every seed of ``cfg``; seeds go to a process pool when ``workers > 1``."""
    workers = worker_count() if workers is None else workers
    jobs = [(cfg, int(s), out_dir) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with Pool(min(workers, len(jobs))) as pool:
            records = pool.map(_run_job, jobs)
    else:
        records = [_run_job(j) for j in jobs]
    if out_dir is not None:
        write_run_dir(out_dir, cfg, records)
    return records


def write_run_dir(out_dir: str | Path, cfg: ExperimentConfig, records: list[RunRecord]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
    write_csv(out / "summary.csv", ("scheduler", "config_hash", "seed", *SUMMARY_FIELDS),
              [(r.label, r.config_hash, r.seed, *[r.summary[k] for k in SUMMARY_FIELDS]) for r in records])


def load_run_dir(path: str | Path) -> list[RunRecord]:
    """Rebuild records from a directory written by :func:`run_experiment`."""
    path = Path(path)
    if not (path / "summary.csv").is_file():
        raise FileNotFoundError(f"no summary.csv in {path}")
    cfg = load_config(path / "config.yaml")
    records = []
    for row in read_csv(path / "summary.csv"):
        seed = int(row["seed"])
        summary = {k: float(row[k]) for k in SUMMARY_FIELDS}
        epoch_csv = path / f"seed{seed}_epochs.csv"
        rewards = None
        if epoch_csv.is_file():
            rewards = np.array([float(r["accumulated_reward"]) for r in read_csv(epoch_csv)])
        records.append(RunRecord(cfg, row["config_hash"], seed, path / f"seed{seed}_rounds.csv",
                                 epoch_csv, summary, 0.0, rewards))
    return records


# -- comparison ----------------------------------------------------------------------

# fields that may differ between compared runs; everything else must match
VARIABLE_FIELDS = {"seeds", "scheduler", "gamma", "identity_rule", "identity_weight", "aggregation_mode",
                   "dp_enabled", "literal_interference", "discount", "updates_per_epoch", "q_lr", "q_hidden"}


def compare_runs(records: list[RunRecord], label_field: str = "scheduler") -> list[dict]:
    """Per-label means and stds of the summary metrics, plus deltas against the first label."""
    if len(records) < 2:
        raise ValueError("need at least two records to compare")
    base = records[0].config.to_dict()
    mismatched = set()
    for r in records[1:]:
        d = r.config.to_dict()
        mismatched |= {k for k in base if k not in VARIABLE_FIELDS and d[k] != base[k]}
    if mismatched:
        raise ValueError(f"incompatible configs, mismatched fields: {sorted(mismatched)}")
    groups: dict = {}
    for r in records:
        groups.setdefault(getattr(r.config, label_field), []).append(r)
    table = []
    for label, rs in groups.items():
        row = {"label": label, "n_seeds": len(rs)}
        for k in SUMMARY_FIELDS:
            vals = np.array([r.summary[k] for r in rs], dtype=np.float64)
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_std"] = float(vals.std())
        table.append(row)
    ref = table[0]
    for row in table:
        for k in SUMMARY_FIELDS:
            row[f"{k}_delta"] = row[f"{k}_mean"] - ref[f"{k}_mean"]
    return table


def write_comparison(path: str | Path, table: list[dict]) -> None:
    header = list(table[0])
    write_csv(path, header, [[row[k] for k in header] for row in table])
