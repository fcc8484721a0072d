"""Latent calibration by mixture reweighting.

The latent prior is approximated by a K-component Gaussian mixture
sitting on K-means clusters of fresh prior draws.  Clusters whose
members generate into a dense mode's neighborhood are down-weighted
(weight 1/(count+1), add-one smoothed so empty counts stay finite), and
sampling from the reweighted mixture replaces the prior.  The generator
itself is never touched.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .embedding import neighbor_counts
from .errors import (
    DegenerateDataError,
    EmptyClusterError,
    EmptyModeListError,
    KTooLargeError,
    NonFiniteError,
)
from .jsonutil import read_json, write_json
from .parallel import SAMPLE_CHUNK, run_chunks
from .rng import (
    STREAM_FIT,
    STREAM_GMM_COMPONENT,
    STREAM_GMM_NOISE,
    STREAM_KMEANS,
    CounterStream,
)
from .source import sample_latents

_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray = field(repr=False)   # (n,) cluster index per point
    inertia: float = 0.0


@dataclass(frozen=True)
class MixtureModel:
    means: np.ndarray       # (K, L)
    variances: np.ndarray   # (L,) shared diagonal covariance
    weights: np.ndarray     # (K,) sums to 1
    source_seed: int = 0

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> "MixtureModel":
        if self.means.ndim != 2 or self.k < 1:
            raise ValueError(f"means shape {self.means.shape}")
        if self.variances.shape != (self.latent_dim,) or np.any(self.variances <= 0):
            raise ValueError("variances must be positive per dimension")
        if self.weights.shape != (self.k,) or np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {np.sum(self.weights)}")
        return self


def _assign(latents: np.ndarray, means: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(labels, squared distances to the winning mean), chunked over points."""
    mean_sq = np.sum(means ** 2, axis=1)

    def chunk(lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        part = latents[lo:hi]
        d2 = mean_sq[None, :] - 2.0 * (part @ means.T)
        labels = np.argmin(d2, axis=1)
        best = d2[np.arange(hi - lo), labels] + np.sum(part ** 2, axis=1)
        return labels.astype(np.int64), np.maximum(best, 0.0)

    parts = run_chunks(chunk, latents.shape[0], SAMPLE_CHUNK)
    return (np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]))


def _kmeans_pp_init(latents: np.ndarray, k: int, seed: int) -> np.ndarray:
    """k-means++ seeding driven by the kmeans counter stream."""
    n = latents.shape[0]
    stream = CounterStream(seed, STREAM_KMEANS)
    u = stream.uniforms(0, k)
    centers = np.empty((k, latents.shape[1]), dtype=np.float64)
    centers[0] = latents[int(u[0] * n) % n]
    d2 = np.sum((latents - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(np.sum(d2))
        if total <= 0.0:
            # all remaining mass sits on already-chosen points
            centers[j] = latents[int(u[j] * n) % n]
        else:
            target = u[j] * total
            idx = int(np.searchsorted(np.cumsum(d2), target, side="right"))
            centers[j] = latents[min(idx, n - 1)]
        d2 = np.minimum(d2, np.sum((latents - centers[j]) ** 2, axis=1))
    return centers


def _reseed_empty(latents: np.ndarray, means: np.ndarray, labels: np.ndarray,
                  best_d2: np.ndarray, k: int) -> None:
    """Give each empty cluster its own farthest point.

    Distinct donors per empty cluster, and never a cluster's only
    member, so the mean update afterwards cannot divide by zero even
    when the data has fewer distinct points than clusters.
    """
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if not empty.size:
        return
    order = np.argsort(-best_d2, kind="stable")
    pos = 0
    for j in empty:
        while pos < order.size and counts[labels[order[pos]]] <= 1:
            pos += 1
        if pos == order.size:
            return
        far = int(order[pos])
        pos += 1
        counts[labels[far]] -= 1
        counts[j] = 1
        means[j] = latents[far]
        labels[far] = j
        best_d2[far] = 0.0


def kmeans_fit(latents: np.ndarray, k: int, seed: int, max_iters: int = 100,
               tol: float = 1e-6) -> tuple[np.ndarray, ClusterAssignment]:
    """Lloyd iterations from k-means++ init.

    Stops when the relative inertia improvement falls below ``tol``.
    Empty clusters are re-seeded from the points farthest from their
    assigned means, so every returned cluster is non-empty.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise ValueError(f"latents must be 2-D, got shape {latents.shape}")
    if not np.all(np.isfinite(latents)):
        raise NonFiniteError("latents must be finite")
    n = latents.shape[0]
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > n:
        raise KTooLargeError(f"K={k} exceeds n={n}")

    means = _kmeans_pp_init(latents, k, seed)
    prev_inertia = np.inf
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        labels, best_d2 = _assign(latents, means)
        _reseed_empty(latents, means, labels, best_d2, k)
        inertia = float(np.sum(best_d2))
        sums = np.zeros_like(means)
        np.add.at(sums, labels, latents)
        counts = np.bincount(labels, minlength=k).astype(np.float64)
        means = sums / counts[:, None]
        if prev_inertia - inertia <= tol * max(prev_inertia, 1e-300):
            break
        prev_inertia = inertia
    labels, best_d2 = _assign(latents, means)
    _reseed_empty(latents, means, labels, best_d2, k)
    inertia = float(np.sum(best_d2))
    return means, ClusterAssignment(labels=labels, inertia=inertia)


def compute_cluster_weights(labels: np.ndarray, k: int, embeddings: np.ndarray,
                            dense_modes: np.ndarray, r0: float) -> np.ndarray:
    """Normalized 1/(count+1) weights from dense-neighbor counts per cluster.

    The raw count of cluster j sums, over every dense mode, the number
    of cluster-j samples whose embedding lies within r0 of that mode.
    """
    dense_modes = np.atleast_2d(np.asarray(dense_modes, dtype=np.float64))
    if dense_modes.shape[0] == 0:
        raise EmptyModeListError("need at least one dense mode to reweight")
    labels = np.asarray(labels)
    occupancy = np.bincount(labels, minlength=k)
    if np.any(occupancy == 0):
        raise EmptyClusterError(f"cluster {int(np.argmin(occupancy))} is empty")
    counts = np.zeros(k, dtype=np.int64)
    # neighbor_counts is anchor-major; transpose the question: for each
    # mode, flag the samples inside r0, then histogram their labels.
    per_mode = neighbor_counts(embeddings, dense_modes, r0)   # (n,) in [0, #modes]
    np.add.at(counts, labels, per_mode)
    weights = 1.0 / (counts + 1.0)
    return weights / np.sum(weights)


def estimate_covariance(latents: np.ndarray, labels: np.ndarray,
                        means: np.ndarray) -> np.ndarray:
    """Pooled within-cluster diagonal variance shared by all components."""
    latents = np.asarray(latents, dtype=np.float64)
    n, k = latents.shape[0], means.shape[0]
    if n <= k:
        raise DegenerateDataError(f"n={n} leaves no degrees of freedom at K={k}")
    residual = latents - means[labels]
    var = np.sum(residual ** 2, axis=0) / (n - k)
    if np.any(var < _VARIANCE_FLOOR):
        warnings.warn(f"variance floored to {_VARIANCE_FLOOR:g} in "
                      f"{int(np.sum(var < _VARIANCE_FLOOR))} dimension(s)",
                      RuntimeWarning, stacklevel=2)
        var = np.maximum(var, _VARIANCE_FLOOR)
    return var


def sample_calibrated(model: MixtureModel, n: int, seed: int, start: int = 0) -> np.ndarray:
    """n draws from the reweighted mixture, counter-addressed like the prior."""
    model.validate()
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cum = np.cumsum(model.weights)
    cum[-1] = 1.0 + 1e-12   # guard searchsorted against rounding at the top
    u = CounterStream(seed, STREAM_GMM_COMPONENT).uniforms(start, n)
    comp = np.searchsorted(cum, u, side="right")
    comp = np.minimum(comp, model.k - 1)
    noise = CounterStream(seed, STREAM_GMM_NOISE).normal_rows(start, n, model.latent_dim)
    return model.means[comp] + noise * np.sqrt(model.variances)[None, :]


def calibrate_gmm(source, dense_modes: np.ndarray, seed: int, k: int = 64,
                  r0: float = 0.25, n_fit: int = 100_000, max_iters: int = 100,
                  tol: float = 1e-6, source_seed: int = 0) -> MixtureModel:
    """Fit the reweighted mixture against a source's dense modes.

    Draws ``n_fit`` fresh prior latents, embeds them through the source
    (the only interaction with it), clusters the latents, and assembles
    the mixture with down-weighted dense clusters.
    """
    dense_modes = np.atleast_2d(np.asarray(dense_modes, dtype=np.float64))
    if dense_modes.shape[0] == 0:
        raise EmptyModeListError("need at least one dense mode to calibrate")
    latents = sample_latents(n_fit, source.latent_dim, seed, STREAM_FIT)
    embeddings, _ = source.embed(latents)
    means, assignment = kmeans_fit(latents, k, seed, max_iters=max_iters, tol=tol)
    weights = compute_cluster_weights(assignment.labels, k, embeddings, dense_modes, r0)
    variances = estimate_covariance(latents, assignment.labels, means)
    return MixtureModel(means=means, variances=variances, weights=weights,
                        source_seed=int(source_seed)).validate()


def save_mixture(path: str, model: MixtureModel, provenance: dict | None = None) -> None:
    doc = {
        "schema": 1,
        "kind": "mixture",
        "k": model.k,
        "latent_dim": model.latent_dim,
        "source_seed": model.source_seed,
        "weights": [float(w) for w in model.weights],
        "variances": [float(v) for v in model.variances],
        "means": [[float(x) for x in row] for row in model.means],
    }
    if provenance:
        doc["provenance"] = provenance
    write_json(path, doc, float_style="exact")


def load_mixture(path: str) -> MixtureModel:
    doc = read_json(path)
    if doc.get("kind") != "mixture":
        raise ValueError(f"{path} is not a mixture model file")
    model = MixtureModel(
        means=np.asarray(doc["means"], dtype=np.float64),
        variances=np.asarray(doc["variances"], dtype=np.float64),
        weights=np.asarray(doc["weights"], dtype=np.float64),
        source_seed=int(doc.get("source_seed", 0)))
    return model.validate()
