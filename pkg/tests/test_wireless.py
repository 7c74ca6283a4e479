import numpy as np
import pytest

from dpcfl import wireless as W


def _channel(n_users=3, n_bs=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    up = rng.uniform(0, 500, size=(n_users, 2))
    bp = W.grid_bs_positions(n_bs, 500)
    return W.make_channel(up, bp, 1.0, 1e6, 1e-9, 1.5e6, **kw)


def test_unit_conversions():
    assert W.dbm_to_watt(30) == pytest.approx(1.0)
    assert W.dbm_to_watt(0) == pytest.approx(1e-3)
    assert W.db_to_linear(10) == pytest.approx(10.0)


def test_grid_positions_inside_arena():
    pos = W.grid_bs_positions(4, 500)
    assert pos.shape == (4, 2)
    assert np.allclose(sorted(set(pos[:, 0])), [125, 375])
    assert np.all((pos > 0) & (pos < 500))


def test_reference_snr_at_calibration_distance():
    ch = W.make_channel(np.array([[250.0, 0.0]]), np.zeros((1, 2)), 1.0, 1e6, 1e-9, 1.5e6)
    snr = ch.powers[0] * ch.gains[0, 0] / (ch.rb_bandwidth * ch.noise_psd)
    assert 10 * np.log10(snr) == pytest.approx(10.0)


def test_isolated_rate_is_shannon():
    ch = _channel()
    alloc = np.zeros((3, 2, 4), dtype=int)
    alloc[0, 1, 2] = 1
    snr = ch.powers[0] * ch.gains[0, 1] / (ch.rb_bandwidth * ch.noise_psd)
    assert W.uplink_rate(0, 1, alloc, ch) == pytest.approx(1e6 * np.log2(1 + snr))


def test_interference_only_from_same_rb_other_bs():
    ch = _channel()
    alloc = np.zeros((3, 2, 4), dtype=int)
    alloc[0, 0, 0] = 1
    alone = W.uplink_rate(0, 0, alloc, ch)
    other_rb = alloc.copy()
    other_rb[1, 1, 1] = 1
    assert W.uplink_rate(0, 0, other_rb, ch) == pytest.approx(alone)
    same_rb = alloc.copy()
    same_rb[1, 1, 0] = 1
    i_expected = ch.powers[1] * ch.gains[1, 0]
    snr = ch.powers[0] * ch.gains[0, 0] / (i_expected + 1e6 * 1e-9)
    assert W.uplink_rate(0, 0, same_rb, ch) == pytest.approx(1e6 * np.log2(1 + snr))


def test_literal_interference_uses_own_link():
    ch = _channel(literal_interference=True)
    alloc = np.zeros((3, 2, 4), dtype=int)
    alloc[0, 0, 0] = 1
    alloc[1, 1, 0] = 1
    snr = ch.powers[0] * ch.gains[0, 0] / (ch.powers[1] * ch.gains[1, 1] + 1e-3)
    assert W.uplink_rate(0, 0, alloc, ch) == pytest.approx(1e6 * np.log2(1 + snr))


def test_rate_falls_with_distance():
    bs = np.zeros((1, 2))
    up = np.array([[50.0, 0.0], [400.0, 0.0]])
    ch = W.make_channel(up, bs, 1.0, 1e6, 1e-9, 1.5e6)
    alloc = np.zeros((2, 1, 2), dtype=int)
    alloc[0, 0, 0] = alloc[1, 0, 1] = 1
    r = W.all_rates(alloc, ch)
    assert r[0] > r[1] > 0


def test_downlink_delay_counts_each_task_once():
    ch = _channel()
    assoc = np.array([[1, 0], [1, 0], [0, 1]])
    ids = np.array([0, 0, 1])
    bits = [1792.0, 3000.0]
    assert W.downlink_delay(0, assoc, ids, bits, ch) == pytest.approx(1792.0 / 1.5e6)
    assert W.downlink_delay(1, assoc, ids, bits, ch) == pytest.approx(3000.0 / 1.5e6)


def test_downlink_rate_must_be_positive():
    ch = _channel()
    ch.downlink_rate = 0.0
    with pytest.raises(ValueError):
        W.downlink_delay(0, np.zeros((3, 2)), np.zeros(3, dtype=int), [1.0], ch)


def test_constraint_flags():
    ch = _channel(n_users=3, n_bs=2)
    alloc = np.zeros((3, 2, 4), dtype=int)
    alloc[0, 0, 0] = alloc[1, 0, 1] = alloc[2, 1, 0] = 1
    assoc = alloc.sum(axis=2)
    ids = np.array([0, 1, 2])
    bits = [1792.0] * 3
    # loose limits: nothing flagged
    rep = W.check_constraints(alloc, assoc, ids, bits, ch, rate_req=1.0, delay_req=1.0)
    assert rep.n_violations == 0 and not rep.delay_violated
    # a rate requirement no one meets flags every scheduled user
    rep = W.check_constraints(alloc, assoc, ids, bits, ch, rate_req=1e12, delay_req=1.0)
    assert rep.rate_flags.tolist() == [True, True, True]
    # total delay 3 * 1.19 ms over a 2 ms limit: BS 0 (2.39 ms > 1 ms share) is blamed, BS 1 (1.19 ms) too
    rep = W.check_constraints(alloc, assoc, ids, bits, ch, rate_req=1.0, delay_req=2e-3)
    assert rep.delay_violated
    assert rep.total_delay == pytest.approx(3 * 1792 / 1.5e6)
    assert rep.delay_flags.tolist() == [True, True, True]
    rep = W.check_constraints(alloc, assoc, ids, bits, ch, rate_req=1.0, delay_req=3e-3)
    assert rep.delay_flags.tolist() == [True, True, False]


def test_gains_must_be_positive():
    with pytest.raises(ValueError):
        W.ChannelState(np.array([[0.0]]), 1.0)


def test_channel_csv(tmp_path):
    ch = _channel()
    W.write_channel_csv(tmp_path / "ch.csv", ch)
    lines = (tmp_path / "ch.csv").read_text().splitlines()
    assert lines[0] == "user,bs,gain,dist"
    assert len(lines) == 1 + 3 * 2
    u, b, g, d = lines[1].split(",")
    assert float(g) == ch.gains[0, 0]
