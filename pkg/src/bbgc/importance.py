"""Latent calibration by hull-gated rejection sampling.

For each dense mode, the high-density latent region is approximated by
the convex hull of the latents behind the mode's nearest samples.
Prior draws landing inside a hull are kept with probability p (the
reference-to-dense neighbor count ratio); draws outside every hull are
always kept, so off-mode regions are provably untouched.

Hull membership solves a simplex-constrained least-squares projection
with Frank-Wolfe iterations using away steps.  Away steps matter: the
plain method stalls at O(1/t) when the projection lies on a hull face,
too slow for the configured tolerance inside the iteration budget,
while away steps restore linear convergence with the same two
primitives (cheapest-vertex oracle, exact line search).  An exact
active-set solve runs every few iterations and replaces the iterate
whenever its minimizer is simplex-feasible and no worse, which finishes
interior queries in one linear solve.  Membership is claimed only when
the achieved residual is inside tolerance, so an unconverged solve can
never produce a false positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embedding import check_radius, neighbor_counts
from .errors import AcceptanceStallError, EmptyStoreError, ZeroDenseCountError
from .jsonutil import decode_matrix, encode_matrix, read_json, write_json
from .rng import STREAM_IS_ACCEPT, STREAM_IS_PROPOSAL, CounterStream
from .store import SampleStore

_PROPOSAL_BATCH = 8192   # fixed: batch boundaries are part of no contract,
                         # but stats are counted per full batch


@dataclass(frozen=True)
class HullMembership:
    """Projection result.  For queries rejected by the bounding-sphere
    precheck the residual is the nearest-vertex distance (an upper
    bound), not the exact hull distance; the verdict is still exact."""

    is_member: bool
    residual: float
    coefficients: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PlanEntry:
    p: float
    vertices: np.ndarray       # (hull size, L) float64
    dense_count: int
    ref_count: int
    mode_index: int            # anchor index the mode came from, -1 if unknown
    bound_center: np.ndarray = field(repr=False, default=None)
    bound_radius: float = 0.0


@dataclass(frozen=True)
class ImportanceSamplingPlan:
    entries: tuple[PlanEntry, ...]
    reference_index: int
    reference_latent: np.ndarray
    reference_embedding: np.ndarray
    r0: float
    hull_size: int
    tol: float = 1e-4
    max_iters: int = 500


@dataclass(frozen=True)
class AcceptanceStats:
    proposals: int
    accepted: int
    in_hull: int
    in_hull_accepted: int
    outside_hull: int
    outside_accepted: int


def _finish_entry(p: float, vertices: np.ndarray, dense_count: int, ref_count: int,
                  mode_index: int) -> PlanEntry:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    center = vertices.mean(axis=0)
    radius = float(np.max(np.linalg.norm(vertices - center, axis=1)))
    return PlanEntry(p=float(p), vertices=vertices, dense_count=int(dense_count),
                     ref_count=int(ref_count), mode_index=int(mode_index),
                     bound_center=center, bound_radius=radius)


# Frank-Wolfe steps mix the iterate with one vertex at a time, which
# crawls when the optimum lies strictly inside an ill-conditioned hull.
# Periodically jumping to the exact minimizer over the current active
# set's affine hull (when it is simplex-feasible and no worse) turns
# those cases into a single linear solve.
_POLISH_EVERY = 16


def _affine_face_minimizer(vs: np.ndarray, z: np.ndarray) -> np.ndarray | None:
    """Coefficients minimizing ||vs^T a - z|| subject to sum(a) = 1.

    Solved through the KKT system; lstsq rather than solve because the
    Gram matrix is singular whenever the face is affinely dependent
    (more vertices than dimension plus one), and the system is still
    consistent there."""
    r = vs.shape[0]
    kkt = np.zeros((r + 1, r + 1))
    kkt[:r, :r] = vs @ vs.T
    kkt[:r, r] = 1.0
    kkt[r, :r] = 1.0
    rhs = np.empty(r + 1)
    rhs[:r] = vs @ z
    rhs[r] = 1.0
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    a = sol[:r]
    total = a.sum()
    if not np.all(np.isfinite(a)) or abs(total - 1.0) > 1e-6:
        return None
    return a / total


def _active_set_polish(v: np.ndarray, z: np.ndarray, alpha: np.ndarray,
                       x: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Exact minimizer over a face of the active set, if no worse.

    Wolfe's minor cycle: solve over the active set's affine hull; while
    the minimizer has negative coefficients, move toward it until the
    first coefficient reaches zero, drop that vertex, and re-solve.
    Each pass removes a vertex, so it terminates, and the objective
    never increases along the way."""
    active = np.flatnonzero(alpha > 0)
    a_cur = alpha[active] / alpha[active].sum()
    for _ in range(len(active)):
        a_new = _affine_face_minimizer(v[active], z)
        if a_new is None:
            return None
        if np.all(a_new >= -1e-12):
            a_cur = np.maximum(a_new, 0.0)
            a_cur /= a_cur.sum()
            break
        neg = a_new < 0.0
        steps = a_cur[neg] / (a_cur[neg] - a_new[neg])
        t = float(np.min(steps))
        a_cur = (1.0 - t) * a_cur + t * a_new
        keep = a_cur > 1e-12
        if not np.any(keep):
            return None
        active = active[keep]
        a_cur = a_cur[keep] / a_cur[keep].sum()
    x_new = v[active].T @ a_cur
    if float(np.linalg.norm(x_new - z)) > float(np.linalg.norm(x - z)):
        return None
    out = np.zeros(len(alpha))
    out[active] = a_cur
    return out, x_new


def hull_membership(z: np.ndarray, vertices: np.ndarray, tol: float = 1e-4,
                    max_iters: int = 500) -> HullMembership:
    """Is z a convex combination of the vertices, within tol·(1+|z|)?

    Solves min ||V^T a - z|| over the simplex.  The bounding sphere of
    the vertices rejects points that provably cannot be members before
    any iteration runs: every hull point lies within the sphere, so a
    query further than tol away from it is further than tol from the
    hull.
    """
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 1 or z.shape != (v.shape[1],):
        raise ValueError(f"vertices {v.shape} vs query {z.shape}")
    k = v.shape[0]
    tau = tol * (1.0 + float(np.linalg.norm(z)))

    start = int(np.argmin(np.linalg.norm(v - z, axis=1)))
    center = v.mean(axis=0)
    bound = float(np.max(np.linalg.norm(v - center, axis=1)))
    if float(np.linalg.norm(z - center)) > bound + tau:
        alpha = np.zeros(k)
        alpha[start] = 1.0
        return HullMembership(is_member=False,
                              residual=float(np.linalg.norm(v[start] - z)),
                              coefficients=alpha)

    alpha = np.zeros(k)
    alpha[start] = 1.0
    x = v[start].copy()
    # Converge far below the decision threshold: the residual then sits
    # within ~1e-3*tau of the true distance, so only queries that close
    # to the boundary could ever be misclassified.
    gap_tol = 0.5 * (1e-3 * tau) ** 2
    for it in range(max_iters):
        if it % _POLISH_EVERY == _POLISH_EVERY - 1:
            polished = _active_set_polish(v, z, alpha, x)
            if polished is not None:
                alpha, x = polished
        g = v @ (x - z)
        s = int(np.argmin(g))
        gap = float(alpha @ g - g[s])
        if gap <= gap_tol:
            break
        active = np.flatnonzero(alpha > 0)
        a = int(active[np.argmax(g[active])])
        d_fw = v[s] - x
        d_aw = x - v[a]
        if float(g[a] - alpha @ g) >= float(alpha @ g - g[s]):
            d, is_away = d_aw, True
            aa = float(alpha[a])
            gamma_max = aa / (1.0 - aa) if aa < 1.0 else 0.0
        else:
            d, is_away, gamma_max = d_fw, False, 1.0
        dd = float(d @ d)
        if dd <= 0.0 or gamma_max <= 0.0:
            break
        gamma = min(gamma_max, max(0.0, float((z - x) @ d) / dd))
        if gamma <= 0.0:
            break
        if is_away:
            alpha *= 1.0 + gamma
            alpha[a] -= gamma
        else:
            alpha *= 1.0 - gamma
            alpha[s] += gamma
        np.maximum(alpha, 0.0, out=alpha)
        alpha /= alpha.sum()
        if (it + 1) % 64 == 0:
            x = v.T @ alpha
        else:
            x = x + gamma * d
    polished = _active_set_polish(v, z, alpha, v.T @ alpha)
    if polished is not None:
        alpha, x = polished
    x = v.T @ alpha
    residual = float(np.linalg.norm(x - z))
    return HullMembership(is_member=bool(residual <= tau), residual=residual,
                          coefficients=alpha)


def build_plan(pool: SampleStore, dense_modes: Sequence[tuple[np.ndarray, int]],
               reference_indices: Sequence[int], r0: float,
               hull_size: int = 100) -> ImportanceSamplingPlan:
    """Acceptance probabilities and hulls for a list of dense modes.

    ``dense_modes`` pairs each mode embedding with its anchor index.
    ``reference_indices`` are pool positions; the first is recorded as
    the reference sample, and the count used for p averages over all of
    them (passing one matches the original recipe).  A reference with
    an empty neighborhood still contributes a count of 1 so that p
    stays positive.
    """
    check_radius(r0)
    if pool.count == 0:
        raise EmptyStoreError("cannot build a plan from an empty store")
    if not dense_modes:
        raise ValueError("need at least one dense mode")
    if hull_size < 1:
        raise ValueError(f"hull_size must be >= 1, got {hull_size}")
    if not reference_indices:
        raise ValueError("need at least one reference index")
    refs = [int(i) for i in reference_indices]
    for i in refs:
        if not 0 <= i < pool.count:
            raise ValueError(f"reference index {i} outside store of {pool.count}")

    ref_embs = pool.embeddings[refs]
    ref_counts = neighbor_counts(ref_embs, pool.embeddings, r0)
    ref_count = max(1.0, float(np.mean(ref_counts)))

    mode_embs = np.asarray([np.asarray(e, dtype=np.float64) for e, _ in dense_modes])
    mode_idx = [int(i) for _, i in dense_modes]
    dense_counts = neighbor_counts(mode_embs, pool.embeddings, r0)

    entries = []
    size = min(hull_size, pool.count)
    for j in np.argsort(-dense_counts, kind="stable"):
        dc = int(dense_counts[j])
        if dc == 0:
            raise ZeroDenseCountError(
                f"mode at anchor {mode_idx[j]} has no neighbors within {r0}")
        dots = np.clip(pool.embeddings @ mode_embs[j], -1.0, 1.0)
        nearest = np.argsort(np.arccos(dots), kind="stable")[:size]
        p = min(1.0, ref_count / dc)
        entries.append(_finish_entry(p, pool.latents[np.sort(nearest)], dc,
                                     int(round(ref_count)), mode_idx[j]))
    return ImportanceSamplingPlan(
        entries=tuple(entries), reference_index=refs[0],
        reference_latent=pool.latents[refs[0]].copy(),
        reference_embedding=pool.embeddings[refs[0]].copy(),
        r0=float(r0), hull_size=int(hull_size))


def _match_entry(plan: ImportanceSamplingPlan, z: np.ndarray) -> int:
    """Index of the first entry whose hull contains z, else -1."""
    tau_scale = 1.0 + float(np.linalg.norm(z))
    for e, entry in enumerate(plan.entries):
        quick = float(np.linalg.norm(z - entry.bound_center))
        if quick > entry.bound_radius + plan.tol * tau_scale:
            continue
        result = hull_membership(z, entry.vertices, tol=plan.tol,
                                 max_iters=plan.max_iters)
        if result.is_member:
            return e
    return -1


def sample_calibrated_is(plan: ImportanceSamplingPlan, latent_dim: int, n: int,
                         seed: int, max_factor: int = 1000
                         ) -> tuple[np.ndarray, AcceptanceStats]:
    """n accepted prior draws under the plan's hull-gated acceptance.

    Proposal i and its acceptance variate are both addressed by i, so
    the accepted sequence is a pure function of (plan, seed, n).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if latent_dim < 1:
        raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
    for entry in plan.entries:
        if entry.vertices.shape[1] != latent_dim:
            raise ValueError(
                f"plan vertices have dim {entry.vertices.shape[1]}, not {latent_dim}")
    proposals = CounterStream(seed, STREAM_IS_PROPOSAL)
    accepts = CounterStream(seed, STREAM_IS_ACCEPT)
    kept: list[np.ndarray] = []
    total = accepted = in_hull = in_hull_accepted = 0
    offset = 0
    limit = max_factor * n
    while accepted < n:
        if total >= limit:
            raise AcceptanceStallError(
                f"{accepted} acceptances after {total} proposals; "
                "the plan's acceptance probabilities look misconfigured")
        batch = min(_PROPOSAL_BATCH, limit - total)
        z = proposals.normal_rows(offset, batch, latent_dim)
        u = accepts.uniforms(offset, batch)
        keep = np.ones(batch, dtype=bool)
        if plan.entries:
            for i in range(batch):
                e = _match_entry(plan, z[i])
                if e >= 0:
                    in_hull += 1
                    if u[i] <= plan.entries[e].p:
                        in_hull_accepted += 1
                    else:
                        keep[i] = False
        kept.append(z[keep])
        total += batch
        accepted += int(np.count_nonzero(keep))
        offset += batch
    out = np.concatenate(kept)[:n]
    # stats cover every processed proposal, including acceptances past n
    return out, AcceptanceStats(
        proposals=total, accepted=accepted, in_hull=in_hull,
        in_hull_accepted=in_hull_accepted, outside_hull=total - in_hull,
        outside_accepted=accepted - in_hull_accepted)


def save_plan(path: str, plan: ImportanceSamplingPlan,
              provenance: dict | None = None) -> None:
    doc = {
        "schema": 1,
        "kind": "importance",
        "latent_dim": int(plan.reference_latent.shape[0]),
        "r0": plan.r0,
        "hull_size": plan.hull_size,
        "tol": plan.tol,
        "max_iters": plan.max_iters,
        "reference": {
            "index": plan.reference_index,
            "latent": [float(x) for x in plan.reference_latent],
            "embedding": [float(x) for x in plan.reference_embedding],
        },
        "entries": [
            {
                "p": entry.p,
                "dense_count": entry.dense_count,
                "ref_count": entry.ref_count,
                "mode_index": entry.mode_index,
                "vertices": encode_matrix(entry.vertices, "f4"),
            }
            for entry in plan.entries
        ],
    }
    if provenance:
        doc["provenance"] = provenance
    write_json(path, doc, float_style="exact")


def load_plan(path: str) -> ImportanceSamplingPlan:
    doc = read_json(path)
    if doc.get("kind") != "importance":
        raise ValueError(f"{path} is not an importance-sampling plan file")
    entries = tuple(
        _finish_entry(float(e["p"]), decode_matrix(e["vertices"]),
                      int(e["dense_count"]), int(e["ref_count"]),
                      int(e.get("mode_index", -1)))
        for e in doc["entries"])
    for entry in entries:
        if not 0.0 < entry.p <= 1.0:
            raise ValueError(f"plan entry has p={entry.p} outside (0, 1]")
    return ImportanceSamplingPlan(
        entries=entries,
        reference_index=int(doc["reference"]["index"]),
        reference_latent=np.asarray(doc["reference"]["latent"], dtype=np.float64),
        reference_embedding=np.asarray(doc["reference"]["embedding"], dtype=np.float64),
        r0=float(doc["r0"]), hull_size=int(doc["hull_size"]),
        tol=float(doc.get("tol", 1e-4)), max_iters=int(doc.get("max_iters", 500)))
