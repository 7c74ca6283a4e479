import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpcfl import analysis as an, nn_engine as nn


def _consts(**kw):
    base = dict(L=2.0, mu=0.5, zeta1=0.3, zeta2=0.1, d=2, sigma_max=0.1)
    base.update(kw)
    return an.AssumptionConstants(**base)


def test_quadratic_constants_match_eigensolve():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(30, 4))
    obj = an.QuadraticObjective(A, rng.normal(size=30), mean=False)
    ev = np.linalg.eigvalsh(A.T @ A)
    c = an.estimate_constants(obj, [np.zeros(4), np.ones(4)], rng)
    assert c.L == pytest.approx(ev[-1], rel=1e-6)
    assert c.mu == pytest.approx(ev[0], rel=1e-6)


def test_identical_samples_flag_zeta2():
    A = np.tile([[1.0, 2.0]], (10, 1))
    obj = an.QuadraticObjective(A, np.ones(10))
    c = an.estimate_constants(obj, [np.zeros(2), np.ones(2), np.array([3.0, -1.0])])
    assert c.zeta1 == pytest.approx(0.0, abs=1e-9)
    assert c.zeta2 == pytest.approx(1.0)
    assert not c.zeta2_ok
    assert any("zeta2" in f for f in c.flags)


def test_regularized_logistic_curvature_floor():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 3))
    y = rng.integers(0, 3, size=40)
    obj = an.LogisticObjective(X, y, 3, l2=0.05)
    c = an.estimate_constants(obj, [rng.normal(size=obj.dim) for _ in range(3)], rng)
    assert c.mu >= 0.05 - 1e-8
    assert c.L <= obj.smoothness_bound() + 1e-8


def test_unregularized_logistic_flags_mu():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 2))
    obj = an.LogisticObjective(X, rng.integers(0, 2, size=20), 2)
    c = an.estimate_constants(obj, [np.zeros(obj.dim)], rng)
    assert any("mu<=0" in f for f in c.flags)  # softmax over-parameterization leaves a flat direction


def test_logistic_derivatives():
    rng = np.random.default_rng(3)
    obj = an.LogisticObjective(rng.normal(size=(25, 4)), rng.integers(0, 3, size=25), 3, l2=0.1)
    w = rng.normal(size=obj.dim)
    eps = 1e-6
    fd = np.array([(obj.value(w + eps * e) - obj.value(w - eps * e)) / (2 * eps) for e in np.eye(obj.dim)])
    assert np.allclose(obj.grad(w), fd, atol=1e-7)
    assert np.allclose(obj.sample_grads(w).mean(axis=0), obj.grad(w))
    v = rng.normal(size=obj.dim)
    fd_hv = (obj.grad(w + eps * v) - obj.grad(w - eps * v)) / (2 * eps)
    assert np.allclose(obj.hvp(w, v), fd_hv, atol=1e-7)


def test_logistic_layout_matches_network():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(10, 3))
    y = rng.integers(0, 2, size=10)
    model = nn.init_model([3, 2], rng)
    obj = an.LogisticObjective(X, y, 2)
    _, g = nn.loss_and_grad(model, (X, y))
    assert obj.value(model.flatten()) == pytest.approx(nn.loss_value(model, (X, y)) / 10)
    assert np.allclose(obj.grad(model.flatten()), g.values / 10)


def test_mlp_objective_hvp():
    rng = np.random.default_rng(5)
    model = nn.init_model([3, 4, 2], rng)
    X = rng.normal(size=(8, 3))
    obj = an.MLPObjective(model, X, rng.integers(0, 2, size=8))
    w = model.flatten()
    assert np.allclose(obj.sample_grads(w).mean(axis=0), obj.grad(w))
    eta = an.estimate_eta(obj, [w, w + 0.1 * rng.normal(size=len(w))], rng)
    assert eta >= 0


def test_find_optimum_quadratic_closed_form():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    obj = an.QuadraticObjective(A, y)
    w, f, it = an.find_optimum(obj)
    assert np.allclose(w, np.linalg.solve(A.T @ A, A.T @ y), atol=1e-8)
    assert f == pytest.approx(obj.value(w))
    _, _, again = an.find_optimum(obj, w)
    assert again == 0


def test_find_optimum_gives_up():
    rng = np.random.default_rng(7)
    obj = an.QuadraticObjective(rng.normal(size=(5, 2)), rng.normal(size=5))
    with pytest.raises(an.ConvergenceError):
        an.find_optimum(obj, np.full(2, 100.0), max_iter=3)


def test_q0_examples():
    assert an.q0([1, 1], [0, 0], [1, 1]) == 0.0
    assert an.q0([1, 1], [0, 0], [0, 0]) == 1.0
    assert an.q0([1, 1], [0, 0.5], [1, 1]) == pytest.approx(0.25)


@given(st.lists(st.integers(1, 500), min_size=1, max_size=8), st.integers(0, 10 ** 6))
@settings(max_examples=100, deadline=None)
def test_q0_in_unit_interval(xs, seed):
    rng = np.random.default_rng(seed)
    v = an.q0(xs, rng.uniform(size=len(xs)), rng.integers(0, 2, size=len(xs)))
    assert -1e-12 <= v <= 1 + 1e-12


def test_q1_formula_and_threshold():
    c = _consts()
    assert an.q1(0.5, c) == pytest.approx((2.0 - 0.5 + 4 * 0.5 * 0.1) / 2.0 * 0.5)
    assert an.q1(c.q0_threshold() * 0.999, c) < 1 < an.q1(c.q0_threshold() * 1.001, c)
    assert an.q1_descent(0.0, c) == pytest.approx((2.0 - 0.5) / 2.0)


def test_q_factors_from_record():
    true = np.array([0, 0, 1, 1])
    ids = np.array([[0, 0, 1, 1], [0, 1, 1, 1]])
    sched = np.ones((2, 4))
    c = _consts()
    Q0, Q1 = an.q_factors(true, ids, sched, [1, 1, 1, 1], c, window=10)
    assert Q0[0].tolist() == [0.0, 0.0]
    assert Q0[1, 0] == pytest.approx(0.25)  # user 1 wrong in 1 of 2 rounds
    assert np.allclose(Q1, c.denom / c.L * Q0)


def test_sliding_window():
    ids = np.array([[1], [1], [0], [0]])
    assert an.misclustering_rates(ids, np.array([0]), 3, window=2)[0] == 0.0
    assert an.misclustering_rates(ids, np.array([0]), 3, window=4)[0] == 0.5


@pytest.mark.parametrize("q", [0.1, 0.5, 0.9])
def test_limit_matches_summation(q):
    c = _consts()
    assert an.unrolled_bound(q, c, 5.0, 2000) == pytest.approx(an.asymptotic_limit(q, c), rel=1e-9)


def test_non_contraction_reported():
    c = _consts(zeta2=0.5)  # with zeta2 < 1/4, Q1 < 1 for every Q0 <= 1
    assert an.asymptotic_limit(1.2, c) == float("inf")
    rep = an.bound_check([1.0, 1.0], [0.5, 0.5], [1.0, 1.0], c)
    assert rep.q_max > 1
    assert any("no contraction" in f for f in rep.flags)


def test_rhs_modes():
    c = _consts(eta=0.4)
    base = an.bound_rhs(1.0, 0.5, c, "convex")
    assert an.bound_rhs(1.0, 0.5, c, "nonconvex") == pytest.approx(base + 0.4 * (1 - 0.4) * 0.5 / 4.0)
    with pytest.raises(ValueError):
        an.bound_rhs(1.0, 0.5, c, "other")


def test_degenerate_bound_checks_descent():
    c = _consts(sigma_max=0.0)
    rep = an.bound_check([1.0, 0.5], [0.5, 0.2], [0.0, 0.0], c)
    assert rep.degenerate and rep.violation_fraction == 0.0
    rep = an.bound_check([1.0], [1.5], [0.0], c)
    assert rep.violation_fraction == 1.0


def test_noise_floor_steady_state():
    bed = an.make_quadratic_testbed(np.random.default_rng(0))
    run = an.run_quadratic_bound(bed, 0.1, steps=60, n_seeds=20)
    tail = run.report.trace.next_gap[-20:].mean()
    floor = run.constants.d ** 2 * 0.1 ** 2 / (2 * run.constants.L)
    assert tail <= 3 * floor


def test_descent_contraction_holds_on_testbed():
    bed = an.make_quadratic_testbed(np.random.default_rng(0))
    for sigma in (0.0, 0.1):
        run = an.run_quadratic_bound(bed, sigma, steps=40, n_seeds=20, contraction="descent")
        assert run.report.violation_fraction == 0.0


def test_trace_csv(tmp_path):
    rep = an.bound_check([1.0, 0.5], [0.5, 0.2], [0.0, 0.0], _consts(sigma_max=0.0))
    rep.trace.write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "t,task,gap,Q0,Q1,rhs,violated"
    assert len(lines) == 3
