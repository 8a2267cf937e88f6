"""Slow, obviously-correct reference implementations used by the tests."""
import functools
import math

import numpy as np


def brute_components(x, y, radius):
    """Connected components of the ``dist < radius`` graph: dense distances plus DFS."""
    xy = np.column_stack([np.asarray(x, float), np.asarray(y, float)])
    n = len(xy)
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2))
    adj = d < radius
    seen = np.zeros(n, dtype=bool)
    out = set()
    for s in range(n):
        if seen[s]:
            continue
        seen[s] = True
        stack, members = [s], []
        while stack:
            v = stack.pop()
            members.append(v)
            for w in np.nonzero(adj[v] & ~seen)[0].tolist():
                seen[w] = True
                stack.append(w)
        out.add(frozenset(members))
    return out


def brute_max_matching(dets, gts, cutoff, with_cost=False):
    """Exhaustive search over all one-to-one assignments within ``cutoff``.

    Returns the maximum number of pairs, or with ``with_cost`` the pair
    ``(max pairs, smallest total distance among maximum matchings)``.
    """
    dist = [[math.dist(d, g) for g in gts] for d in dets]

    @functools.lru_cache(maxsize=None)
    def best(i, used):
        if i == len(dets):
            return (0, 0.0)
        k, c = best(i + 1, used)
        top = (k, -c)
        for j in range(len(gts)):
            if not used >> j & 1 and dist[i][j] <= cutoff:
                k2, c2 = best(i + 1, used | 1 << j)
                top = max(top, (k2 + 1, -(c2 + dist[i][j])))
        return (top[0], -top[1])

    k, c = best(0, 0)
    return (k, c) if with_cost else k


def anova_ss(groups):
    """F from the textbook sum-of-squares decomposition, in plain Python."""
    allv = [v for g in groups for v in g]
    n, k = len(allv), len(groups)
    grand = sum(allv) / n
    ssb = sum(len(g) * (sum(g) / len(g) - grand) ** 2 for g in groups)
    ssw = sum((v - sum(g) / len(g)) ** 2 for g in groups for v in g)
    return (ssb / (k - 1)) / (ssw / (n - k))


def best_split_exhaustive(X, y, min_leaf=1):
    """Best Gini split over every feature and every midpoint threshold."""
    n = len(y)

    def gini(lab):
        if not lab:
            return 0.0
        p = sum(lab) / len(lab)
        return 1 - p * p - (1 - p) ** 2

    parent = gini(list(y))
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            t = (a + b) / 2
            left = [int(y[i]) for i in range(n) if X[i, f] <= t]
            right = [int(y[i]) for i in range(n) if X[i, f] > t]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            g = parent - (len(left) * gini(left) + len(right) * gini(right)) / n
            if best is None or g > best[2] + 1e-12:
                best = (f, t, g)
    return best


def studentized_range_cdf_dblquad(q, k, df):
    """Direct double integral of the studentized range CDF with scipy.integrate."""
    from scipy import integrate, stats

    def inner(s):
        w = q * s
        f = lambda z: k * stats.norm.pdf(z) * (stats.norm.cdf(z) - stats.norm.cdf(z - w)) ** (k - 1)
        return integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)[0]

    dens = stats.chi(df, scale=1 / math.sqrt(df)).pdf
    return integrate.quad(lambda s: dens(s) * inner(s), 0, np.inf, epsabs=1e-12, limit=200)[0]


def random_candidates(rng, n, extent=40.0, planes=(-1.2, -0.6, 0.0, 0.6, 1.2)):
    """Dense random candidates on mixed planes; coarse seg scores force ties."""
    from zstack_mitosis.candidate import Candidate
    xs = rng.uniform(0, extent, n)
    ys = rng.uniform(0, extent, n)
    zs = rng.choice(planes, n)
    ss = rng.integers(0, 5, n) / 4.0
    return [Candidate(f"c{i:04d}", float(x), float(y), float(z), float(s))
            for i, (x, y, z, s) in enumerate(zip(xs, ys, zs, ss))]


def merged_partition(merged):
    return {frozenset(c.id for c in m.members) for m in merged}
