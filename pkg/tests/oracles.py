"""Independent reference implementations used as test oracles."""
import itertools
import math

import numpy as np


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def brute_force_shapley(f, x, mean, groups):
    """Shapley values by averaging marginal contributions over all orderings."""
    names = list(groups)
    G = len(names)

    def value(coalition):
        z = mean.copy()
        for n in coalition:
            z[groups[n]] = x[groups[n]]
        return float(f(z[None, :])[0])

    phi = dict.fromkeys(names, 0.0)
    for order in itertools.permutations(names):
        seen = []
        prev = value(seen)
        for n in order:
            seen.append(n)
            cur = value(seen)
            phi[n] += cur - prev
            prev = cur
    return np.array([phi[n] / math.factorial(G) for n in names])


def relative_error(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def numeric_grad(loss_of, tensors, name, h=1e-5, max_entries=None, rng=None):
    """Central differences of ``loss_of()`` w.r.t. ``tensors[name]`` (in place, restored).

    Returns (indices, numeric values) on at most ``max_entries`` flat positions.
    """
    arr = tensors[name]
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        lp = loss_of()
        flat[i] = old - h
        lm = loss_of()
        flat[i] = old
        out[j] = (lp - lm) / (2 * h)
    return idx, out


def gradcheck(loss_of, analytic, tensors, names=None, h=1e-5, max_entries=12, rng=None):
    """Worst relative error between analytic and central-difference gradients."""
    worst = 0.0
    for name in names or list(analytic):
        idx, num = numeric_grad(loss_of, tensors, name, h, max_entries, rng)
        ana = np.asarray(analytic[name]).reshape(-1)[idx]
        worst = max(worst, relative_error(ana, num))
    return worst
