"""Identity-embedding geometry.

Embeddings live on the unit hypersphere.  Distance is the angle between
two embeddings rescaled to [0, 1]; similarity rescales distance through
a truncated exponential so that pairs further apart than ``theta`` count
exactly zero.  The collapse score (MCCS) compresses the mean similarity
of an anchor against a comparison pool into [0, 1], with 0.5 hit when
the mean similarity is 1/e.

Batch kernels compare dot products against precomputed cosine
thresholds instead of taking an arccos per pair: ``arccos`` is monotone
decreasing, so ``d <= r`` and ``dot >= cos(pi*r)`` pick the same pairs,
and only the surviving pairs need transcendentals.  Summations run over
whole rows inside fixed-size anchor chunks, so results do not depend on
the worker count.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError, ZeroVectorError
from .parallel import ANCHOR_CHUNK, run_chunks

_NORM_EPS = 1e-12


def normalize(v: np.ndarray) -> np.ndarray:
    """Project a vector onto the unit sphere.

    Raises NonFiniteError on NaN/inf input and ZeroVectorError when the
    norm is too small to divide by.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("cannot normalize a non-finite vector")
    n = float(np.linalg.norm(v))
    if n < _NORM_EPS:
        raise ZeroVectorError(f"norm {n:.3e} below {_NORM_EPS:.0e}")
    return v / n


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise :func:`normalize` with the same error contract."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("cannot normalize non-finite rows")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < _NORM_EPS):
        bad = int(np.argmin(norms))
        raise ZeroVectorError(f"row {bad} has norm {norms[bad]:.3e}")
    return m / norms[:, None]


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Angular distance in [0, 1] between two unit vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError(f"shapes {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise NonFiniteError("distance operands must be finite")
    dot = float(np.dot(a, b))
    return math.acos(min(1.0, max(-1.0, dot))) / math.pi


def check_theta(theta: float) -> float:
    theta = float(theta)
    if not (0.0 < theta <= 1.0) or not math.isfinite(theta):
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    return theta


def check_radius(radius: float) -> float:
    radius = float(radius)
    if not (0.0 <= radius <= 1.0) or not math.isfinite(radius):
        raise ValueError(f"radius must lie in [0, 1], got {radius}")
    return radius


def similarity(distance, theta: float):
    """Truncated-exponential similarity of a distance (scalar or array).

    Equals 1 at distance 0, decays to exactly 0 at ``theta`` and stays 0
    beyond it.
    """
    theta = check_theta(theta)
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d < 0) or np.any(d > 1) or not np.all(np.isfinite(d)):
        raise ValueError("distances must lie in [0, 1]")
    s = np.expm1(np.maximum(theta - d, 0.0)) / np.expm1(theta)
    return float(s) if np.isscalar(distance) or d.ndim == 0 else s


def mccs(mean_similarity: float) -> float:
    """Collapse score of a mean similarity; 0 maps to 0, 1 maps to 1."""
    s = float(mean_similarity)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"mean similarity must lie in [0, 1], got {s}")
    if s == 0.0:
        return 0.0
    return 1.0 / (1.0 - math.log(s))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense (len(a), len(b)) matrix of angular distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"shapes {a.shape} and {b.shape}")
    dots = np.clip(a @ b.T, -1.0, 1.0)
    return np.arccos(dots) / math.pi


def neighbor_counts(anchors: np.ndarray, pool: np.ndarray, radius: float) -> np.ndarray:
    """Per-anchor count of pool embeddings within ``radius`` (inclusive)."""
    radius = check_radius(radius)
    anchors = np.asarray(anchors, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    if anchors.ndim != 2 or pool.ndim != 2 or anchors.shape[1] != pool.shape[1]:
        raise DimensionMismatchError(f"shapes {anchors.shape} and {pool.shape}")
    cos_r = math.cos(math.pi * radius)

    def count_chunk(lo: int, hi: int) -> np.ndarray:
        dots = anchors[lo:hi] @ pool.T
        return np.count_nonzero(dots >= cos_r, axis=1).astype(np.int64)

    parts = run_chunks(count_chunk, anchors.shape[0], ANCHOR_CHUNK)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def mean_similarities(anchors: np.ndarray, pool: np.ndarray, theta: float) -> np.ndarray:
    """Per-anchor mean similarity against every pool embedding.

    Pairs at distance >= theta contribute exactly 0, so only dots above
    cos(pi*theta) are pushed through arccos/expm1.
    """
    theta = check_theta(theta)
    anchors = np.asarray(anchors, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    if anchors.ndim != 2 or pool.ndim != 2 or anchors.shape[1] != pool.shape[1]:
        raise DimensionMismatchError(f"shapes {anchors.shape} and {pool.shape}")
    n = pool.shape[0]
    cos_t = math.cos(math.pi * theta)
    denom = math.expm1(theta)

    def sum_chunk(lo: int, hi: int) -> np.ndarray:
        dots = anchors[lo:hi] @ pool.T
        out = np.empty(hi - lo, dtype=np.float64)
        for i in range(hi - lo):
            row = dots[i]
            near = row[row > cos_t]
            if near.size == 0:
                out[i] = 0.0
                continue
            d = np.arccos(np.clip(near, -1.0, 1.0)) / math.pi
            out[i] = float(np.sum(np.expm1(np.maximum(theta - d, 0.0))))
        return out

    parts = run_chunks(sum_chunk, anchors.shape[0], ANCHOR_CHUNK)
    sums = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)
    return sums / (denom * n)
