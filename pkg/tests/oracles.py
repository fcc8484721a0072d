"""Independent reference implementations used to cross-check the library.

Everything here is deliberately naive: double loops, fsum accumulation,
mpmath closed forms, exhaustive subset enumeration.  Nothing imports
from the package's numeric kernels beyond plain array access, so a bug
cannot hide in both routes at once.
"""

import itertools
import math

import mpmath
import numpy as np

mpmath.mp.dps = 50


def mp_distance(a, b):
    """Angular distance in units of pi at 50 decimal digits."""
    dot = mpmath.fsum(mpmath.mpf(float(x)) * mpmath.mpf(float(y))
                      for x, y in zip(a, b))
    dot = max(mpmath.mpf(-1), min(mpmath.mpf(1), dot))
    return mpmath.acos(dot) / mpmath.pi


def mp_similarity(distance, theta):
    d = mpmath.mpf(float(distance))
    t = mpmath.mpf(float(theta))
    if d >= t:
        return mpmath.mpf(0)
    return mpmath.expm1(t - d) / mpmath.expm1(t)


def mp_mccs(mean_similarity):
    s = mpmath.mpf(float(mean_similarity))
    if s == 0:
        return mpmath.mpf(0)
    return 1 / (1 - mpmath.log(s))


def naive_distance(a, b):
    dot = math.fsum(float(x) * float(y) for x, y in zip(a, b))
    return math.acos(min(1.0, max(-1.0, dot))) / math.pi


def naive_similarity(distance, theta):
    if distance >= theta:
        return 0.0
    return math.expm1(theta - distance) / math.expm1(theta)


def naive_mean_similarity(anchor, pool, theta):
    return math.fsum(naive_similarity(naive_distance(anchor, row), theta)
                     for row in pool) / len(pool)


def naive_mccs(mean_similarity):
    if mean_similarity == 0.0:
        return 0.0
    return 1.0 / (1.0 - math.log(mean_similarity))


def naive_population(anchors, pool, theta):
    """(mu, sigma, per-anchor values) with the m-1 denominator."""
    values = [naive_mccs(naive_mean_similarity(a, pool, theta)) for a in anchors]
    m = len(values)
    mu = math.fsum(values) / m
    var = math.fsum((v - mu) ** 2 for v in values) / (m - 1)
    return mu, math.sqrt(var), values


def naive_counts(anchors, pool, radius):
    counts = []
    for a in anchors:
        counts.append(sum(1 for row in pool if naive_distance(a, row) <= radius))
    return counts


def naive_worst(anchors, pool, radius):
    """(index, count) with ties resolved to the lowest index."""
    counts = naive_counts(anchors, pool, radius)
    best = max(counts)
    return counts.index(best), best


def hull_distance(z, vertices):
    """Exact distance from z to the convex hull by subset enumeration.

    For every vertex subset, solve the equality-constrained least
    squares (KKT system) over its affine hull; feasible solutions
    (all coefficients nonnegative) are hull points, and the subset
    carrying the true projection's face is always among them.
    """
    v = np.asarray(vertices, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    best = np.inf
    for r in range(1, len(v) + 1):
        for subset in itertools.combinations(range(len(v)), r):
            vs = v[list(subset)]
            kkt = np.zeros((r + 1, r + 1))
            kkt[:r, :r] = vs @ vs.T
            kkt[:r, r] = 1.0
            kkt[r, :r] = 1.0
            rhs = np.concatenate([vs @ z, [1.0]])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            a = sol[:r]
            if np.all(a >= -1e-9):
                best = min(best, float(np.linalg.norm(vs.T @ a - z)))
    return best
