"""Uplink OFDMA rates, downlink TDMA broadcast delay and constraint flags."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PATHLOSS_EXPONENT = 3.76


@dataclass
class ChannelState:
    gains: np.ndarray  # h[i, b], linear
    powers: np.ndarray  # P_i, watts
    rb_bandwidth: float = 1e6  # Hz
    noise_psd: float = 1e-9  # W/Hz
    downlink_rate: float = 1.5e6  # bits/s
    user_pos: np.ndarray | None = None
    bs_pos: np.ndarray | None = None
    # Interference at BS b from a user p served by BS q travels over h[p, b].
    # The literal variant uses h[p, q] (the interferer's own link) instead.
    literal_interference: bool = False

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=np.float64)
        self.powers = np.broadcast_to(np.asarray(self.powers, dtype=np.float64),
                                      (self.gains.shape[0],)).copy()
        if np.any(self.gains <= 0):
            raise ValueError("channel gains must be positive")
        if self.rb_bandwidth <= 0:
            raise ValueError("RB bandwidth must be positive")

    @property
    def n_users(self) -> int:
        return self.gains.shape[0]

    @property
    def n_bs(self) -> int:
        return self.gains.shape[1]

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.user_pos[:, None, :] - self.bs_pos[None, :, :], axis=2)


def dbm_to_watt(dbm: float) -> float:
    return 10 ** (dbm / 10) / 1000.0


def db_to_linear(db: float) -> float:
    return 10 ** (db / 10)


def grid_bs_positions(n_bs: int, arena: float) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(n_bs)))
    rows = int(np.ceil(n_bs / cols))
    pos = [((c + 0.5) * arena / cols, (r + 0.5) * arena / rows) for r in range(rows) for c in range(cols)]
    return np.array(pos[:n_bs], dtype=np.float64)


def reference_gain(power_w: float, rb_bandwidth: float, noise_psd: float,
                   snr_db: float = 10.0, ref_dist: float = 250.0,
                   exponent: float = PATHLOSS_EXPONENT) -> float:
    """g0 such that an interference-free link at ``ref_dist`` sees ``snr_db``."""
    return db_to_linear(snr_db) * rb_bandwidth * noise_psd * ref_dist ** exponent / power_w


def make_channel(user_pos: np.ndarray, bs_pos: np.ndarray, power_w: float, rb_bandwidth: float,
                 noise_psd: float, downlink_rate: float, exponent: float = PATHLOSS_EXPONENT,
                 **kw) -> ChannelState:
    """Static pathloss gains h = g0 * dist^-exponent (distance floored at 1 m)."""
    dist = np.linalg.norm(user_pos[:, None, :] - bs_pos[None, :, :], axis=2)
    g0 = reference_gain(power_w, rb_bandwidth, noise_psd, exponent=exponent)
    gains = g0 * np.maximum(dist, 1.0) ** (-exponent)
    return ChannelState(gains, np.full(len(user_pos), power_w), rb_bandwidth, noise_psd,
                        downlink_rate, user_pos, bs_pos, **kw)


def _interference(i: int, b: int, n: int, alloc: np.ndarray, ch: ChannelState) -> float:
    others = alloc[:, :, n].copy()
    others[i, :] = 0
    others[:, b] = 0
    if ch.literal_interference:
        return float(np.sum(others * ch.gains * ch.powers[:, None]))
    return float(np.sum(others.sum(axis=1) * ch.powers * ch.gains[:, b]))


def _rate(i, b, interference, ch: ChannelState) -> float:
    snr = ch.powers[i] * ch.gains[i, b] / (interference + ch.rb_bandwidth * ch.noise_psd)
    return ch.rb_bandwidth * np.log2(1.0 + snr)


def uplink_rate(i: int, b: int, alloc: np.ndarray, ch: ChannelState) -> float:
    """Rate of user ``i`` towards BS ``b`` (bits/s) under allocation ``alloc[U, B, R]``."""
    total = 0.0
    for n in np.flatnonzero(alloc[i, b]):
        total += _rate(i, b, _interference(i, b, n, alloc, ch), ch)
    return total


def candidate_rate(i: int, b: int, n: int, alloc: np.ndarray, ch: ChannelState) -> float:
    """Rate user ``i`` would get on RB ``n`` of BS ``b`` given the current allocation."""
    return _rate(i, b, _interference(i, b, n, alloc, ch), ch)


def all_rates(alloc: np.ndarray, ch: ChannelState) -> np.ndarray:
    """Uplink rate of every user at its serving BS (0 when unscheduled)."""
    U, B, _ = alloc.shape
    rates = np.zeros(U)
    for i, b in zip(*np.nonzero(alloc.sum(axis=2))):
        rates[i] += uplink_rate(i, b, alloc, ch)
    return rates


def downlink_delay(b: int, assoc: np.ndarray, identities, task_bits, ch: ChannelState,
                   bs_tasks=None) -> float:
    """Broadcast time of the task models BS ``b`` aggregates this round."""
    if ch.downlink_rate <= 0:
        raise ValueError("downlink rate must be positive")
    identities = np.asarray(identities)
    active = set(int(k) for k in identities[np.asarray(assoc)[:, b] > 0])
    if bs_tasks is not None:
        active &= set(bs_tasks[b])
    return float(sum(task_bits[k] for k in active)) / ch.downlink_rate


@dataclass
class ConstraintReport:
    rates: np.ndarray
    rate_flags: np.ndarray  # scheduled with rate below the requirement
    delays: np.ndarray  # per BS
    total_delay: float
    delay_violated: bool
    delay_flags: np.ndarray  # users blamed for a global delay breach

    @property
    def flags(self) -> np.ndarray:
        return self.rate_flags | self.delay_flags

    @property
    def n_violations(self) -> int:
        return int(self.flags.sum())


def check_constraints(alloc: np.ndarray, assoc: np.ndarray, identities, task_bits,
                      ch: ChannelState, rate_req: float, delay_req: float,
                      bs_tasks=None) -> ConstraintReport:
    """Per-user rate flags and delay-breach attribution.

    The delay limit is on the sum over BSs. When it is breached, users served
    by any BS whose own delay exceeds ``delay_req / B`` are flagged.
    """
    assoc = np.asarray(assoc)
    U, B = assoc.shape
    rates = all_rates(alloc, ch)
    scheduled = assoc.sum(axis=1) > 0
    rate_flags = scheduled & (rates < rate_req)
    delays = np.array([downlink_delay(b, assoc, identities, task_bits, ch, bs_tasks) for b in range(B)])
    total = float(delays.sum())
    breached = total > delay_req
    delay_flags = np.zeros(U, dtype=bool)
    if breached:
        over = delays > delay_req / B
        delay_flags = (assoc[:, over] > 0).any(axis=1)
    return ConstraintReport(rates, rate_flags, delays, total, breached, delay_flags)


def write_channel_csv(path: str | Path, ch: ChannelState) -> None:
    dist = ch.distances() if ch.user_pos is not None else np.full(ch.gains.shape, np.nan)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user", "bs", "gain", "dist"])
        for i in range(ch.n_users):
            for b in range(ch.n_bs):
                w.writerow([i, b, repr(float(ch.gains[i, b])), repr(float(dist[i, b]))])
