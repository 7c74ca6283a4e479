"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np

from dpcfl import nn_engine as nn


def fd_grad(model, batch, eps=1e-6, l2=0.0):
    """Central finite differences of the summed loss w.r.t. the flat parameters."""
    w = model.flatten()
    g = np.zeros_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = eps
        hi, _ = nn.loss_and_grad(model.with_flat(w + e), batch, l2)
        lo, _ = nn.loss_and_grad(model.with_flat(w - e), batch, l2)
        g[j] = (hi - lo) / (2 * eps)
    return g


def brute_assignment(cost):
    """Minimum total cost over all permutations."""
    c = np.asarray(cost)
    n = c.shape[0]
    return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def noise_grid(x, gamma, v_max, n_min, step=1e-3):
    """Grid search for the noise allocation of one task.

    The objective decreases in every variance, so the budget binds; the grid
    runs over each user's share of the budget in steps of ``step``.
    Returns (objective, variances).
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    budget = v_max * x.sum()
    floor = (n_min / x) ** 2
    g = np.arange(0.0, 1.0 + step / 2, step)
    if n == 1:
        shares = np.ones((1, 1))
    elif n == 2:
        shares = np.stack([g, 1 - g], axis=1)
    else:
        a, b = np.meshgrid(g, g, indexing="ij")
        a, b = a.ravel(), b.ravel()
        keep = a + b <= 1 + 1e-12
        shares = np.stack([a[keep], b[keep], np.clip(1 - a[keep] - b[keep], 0, None)], axis=1)
    v = shares * budget / x
    ok = np.all(v >= floor - 1e-15, axis=1)
    obj = np.sum(gamma / (x ** 2 * v[ok]), axis=1)
    j = int(np.argmin(obj))
    return float(obj[j]), v[ok][j]


def random_model(rng, sizes=None):
    if sizes is None:
        depth = rng.integers(0, 3)
        sizes = [int(rng.integers(2, 6))] + [int(rng.integers(2, 6)) for _ in range(depth)] + [int(rng.integers(2, 5))]
    return nn.init_model(sizes, rng)
