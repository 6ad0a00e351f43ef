"""Independent reference implementations used only by the tests.

Each oracle takes the slow, obvious route so it shares no code path with the
package function it checks.
"""

import csv
import math
import random

import numpy as np
from scipy import integrate

MINING_OTHERS = [2.5, 7.5, 10, 12, 20, 25, 35, 60, 80, 100, 150, 200, 300, 500, 1000]


def write_mining_fixture(path, seed=0):
    """245 answers shaped like the Mining query: 54 fives, 176 fifties, 15 others."""
    values = [5.0] * 54 + [50.0] * 176 + [float(v) for v in MINING_OTHERS]
    random.Random(seed).shuffle(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["place", "target"])
        for i, v in enumerate(values):
            w.writerow([f"City {i:03d}, China", v])
    return values


def rmse_loop(pred, target):
    # two passes: mean of squares, then root
    total = 0.0
    for p, t in zip(pred, target):
        total += (p - t) * (p - t)
    mean = total / len(pred)
    return math.sqrt(mean)


def best_stump(x, y, min_leaf=1):
    """Brute-force depth-1 split: weighted child variance over every midpoint."""
    pts = sorted(set(x))
    best = (math.inf, None)
    for a, b in zip(pts, pts[1:]):
        thr = (a + b) / 2
        left = [yi for xi, yi in zip(x, y) if xi <= thr]
        right = [yi for xi, yi in zip(x, y) if xi > thr]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        cost = len(left) * np.var(left) + len(right) * np.var(right)
        if cost < best[0]:
            best = (cost, thr)
    return best


def t_pdf(t, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + t * t / df) ** (-(df + 1) / 2)


def pearson_bruteforce(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    r = sxy / math.sqrt(sxx * syy)
    df = n - 2
    t = abs(r) * math.sqrt(df / (1 - r * r))
    # P(T > t) = 1/2 - integral_0^t pdf
    body, _ = integrate.quad(t_pdf, 0, t, args=(df,), epsabs=1e-13, epsrel=1e-13, limit=200)
    p = 2 * (0.5 - body)
    return r, p


def ranks_bruteforce(x):
    out = []
    for xi in x:
        less = sum(1 for xj in x if xj < xi)
        equal = sum(1 for xj in x if xj == xi)
        out.append(less + (equal + 1) / 2)
    return out


def spearman_bruteforce(x, y):
    return float(np.corrcoef(ranks_bruteforce(x), ranks_bruteforce(y))[0, 1])


def naive_matmul(vec, matrix):
    rows, cols = len(matrix), len(matrix[0])
    return [sum(vec[i] * matrix[i][j] for i in range(rows)) for j in range(cols)]


def naive_mean_max(rows):
    n_tok, dim = len(rows), len(rows[0])
    means = [sum(rows[t][d] for t in range(n_tok)) / n_tok for d in range(dim)]
    maxes = [max(rows[t][d] for t in range(n_tok)) for d in range(dim)]
    return means + maxes


def population_cv(x):
    n = len(x)
    m = sum(x) / n
    var = sum((v - m) ** 2 for v in x) / n
    return math.sqrt(var) / abs(m)


def scale_fixture(seed=0, n=20, n_close=13):
    """Paired 0-10 and 0-100 scores where exactly ``n_close`` places agree within 2 points."""
    rng = random.Random(seed)
    small, large = {}, {}
    for i in range(n):
        s = round(rng.uniform(2, 8), 1)
        gap = rng.uniform(0, 1.8) if i < n_close else rng.uniform(2.2, 4)
        small[f"Zone {i:02d}"] = s
        large[f"Zone {i:02d}"] = round((s + rng.choice([-1, 1]) * gap) * 10, 3)
    return small, large


def fraction_below_one(small, large):
    # std of two numbers is half their distance
    hits = 0
    for k in small:
        a, b = small[k], large[k] / 10
        m = (a + b) / 2
        std = math.sqrt(((a - m) ** 2 + (b - m) ** 2) / 2)
        hits += std < 1.0
    return hits / len(small)
