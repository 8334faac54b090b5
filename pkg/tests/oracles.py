"""Exhaustive reference implementations used as test oracles."""
import itertools

import numpy as np


def median_oracle(x):
    out = []
    for col in x.T:
        s = sorted(col)
        m = len(s)
        out.append(s[m // 2] if m % 2 else (s[m // 2 - 1] + s[m // 2]) / 2)
    return np.array(out)


def trimmed_mean_oracle(x, ratio):
    m = x.shape[0]
    k = int(np.floor(ratio * m))
    out = []
    for col in x.T:
        kept = sorted(col)[k:m - k]
        out.append(sum(kept) / len(kept))
    return np.array(out)


def krum_oracle(x, f):
    """Score every row by the smallest neighbour-distance sum over all subsets of size m-f-2."""
    m = x.shape[0]
    best, best_i = None, None
    for i in range(m):
        others = [j for j in range(m) if j != i]
        score = min(sum(float(np.sum((x[i] - x[j]) ** 2)) for j in subset)
                    for subset in itertools.combinations(others, m - f - 2))
        if best is None or score < best:
            best, best_i = score, i
    return x[best_i]


def geometric_median_grid(points, weights=None, span=None, steps=(201, 201)):
    """Coarse-to-fine grid search for the minimiser of the weighted distance sum in 2-D."""
    w = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float)

    def objective(z):
        return float(np.sum(w * np.linalg.norm(points - z, axis=1)))

    lo, hi = points.min(axis=0), points.max(axis=0)
    center = (lo + hi) / 2
    half = (hi - lo).max() / 2 + 1e-9 if span is None else span
    best = center
    for _ in range(12):
        xs = np.linspace(best[0] - half, best[0] + half, steps[0])
        ys = np.linspace(best[1] - half, best[1] + half, steps[1])
        gx, gy = np.meshgrid(xs, ys)
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        d = np.linalg.norm(grid[:, None, :] - points[None], axis=2) @ w
        best = grid[int(np.argmin(d))]
        half *= 4 / steps[0]
    return best, objective(best), objective
