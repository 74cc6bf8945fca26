"""Online spherical K-means over cached key vectors.

Clusters are created once and never revisited: prefill keys are clustered
right after prefill, and every ``interval`` decoded tokens the newly produced
keys are clustered on their own and appended as a new generation. Values
follow their key's cluster implicitly because both share the token index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, DegenerateVectorError, KVCache

log = logging.getLogger(__name__)

DEFAULT_ITERS = 15
DEFAULT_INTERVAL = 128
DEFAULT_TOKENS_PER_CLUSTER = 32


class ClusteringError(RuntimeError):
    pass


class InfeasibleKError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Cluster:
    id: int
    member_indices: np.ndarray
    centroid: np.ndarray
    generation: int

    @property
    def size(self) -> int:
        return int(self.member_indices.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cluster):
            return NotImplemented
        return (
            self.id == other.id
            and self.generation == other.generation
            and np.array_equal(self.member_indices, other.member_indices)
            and np.array_equal(self.centroid, other.centroid)
        )


@dataclass
class KMeansFit:
    """Raw result of one spherical K-means run.

    ``objective`` holds sum(1 - cos(key, assigned direction)) after every
    assignment round, so ``len(objective) == n_iter``.
    """

    labels: np.ndarray
    objective: list[float]
    n_iter: int


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DegenerateVectorError(f"zero-norm key at row {bad[0]}")
    return x / norms[:, None]


def _pass_seed(seed: int, generation: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(generation)]).generate_state(1)[0])


def _kmeanspp_indices(unit: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = unit.shape[0]
    chosen = [int(rng.integers(n))]
    # squared cosine distance to the nearest chosen seed
    d = 1.0 - unit @ unit[chosen[0]]
    best = np.maximum(d, 0.0)
    for _ in range(1, k):
        w = best**2
        w[chosen] = 0.0
        total = w.sum()
        if total > 0.0:
            nxt = int(rng.choice(n, p=w / total))
        else:
            # every remaining point coincides with a seed; fall back to any unused row
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(free.size)])
        chosen.append(nxt)
        best = np.minimum(best, np.maximum(1.0 - unit @ unit[nxt], 0.0))
    return np.asarray(chosen, dtype=np.int64)


def kmeanspp_init(keys, k: int, seed: int) -> list[np.ndarray]:
    """K-means++ seeding with cosine distance ``1 - cos`` as the D in D^2 weighting.

    Returns ``k`` rows of ``keys`` (distinct rows, in pick order).
    """
    keys = np.asarray(keys)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("kmeanspp_init needs a non-empty 2-D slice")
    if not 1 <= k <= keys.shape[0]:
        raise InfeasibleKError(f"k={k} infeasible for {keys.shape[0]} rows")
    unit = _unit_rows(keys)
    idx = _kmeanspp_indices(unit, k, np.random.default_rng(seed))
    return [np.array(keys[i]) for i in idx]


def _directions(unit: np.ndarray, labels: np.ndarray, k: int, fallback: np.ndarray) -> np.ndarray:
    sums = np.zeros((k, unit.shape[1]))
    np.add.at(sums, labels, unit)
    norms = np.linalg.norm(sums, axis=1)
    out = fallback.copy()
    ok = norms > 0.0
    out[ok] = sums[ok] / norms[ok, None]
    return out


def _repair_empty(labels: np.ndarray, sims: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        own = sims[np.arange(labels.size), labels]
        movable = counts[labels] > 1
        if not movable.any():
            break
        dist = np.where(movable, 1.0 - own, -np.inf)
        p = int(np.argmax(dist))
        counts[labels[p]] -= 1
        labels[p] = j
        counts[j] = 1
        sims[p, j] = 1.0  # p now seeds cluster j
    return labels


def fit_spherical(keys, k: int, iters: int = DEFAULT_ITERS, seed: int = 0) -> KMeansFit:
    """Lloyd iterations on unit-normalised keys with cosine assignment.

    Cluster directions are re-estimated as the normalised mean of member unit
    keys, which keeps the cosine objective non-increasing across rounds.
    Stops early once an assignment round changes nothing.
    """
    keys = np.asarray(keys)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("cannot cluster an empty key slice")
    n = keys.shape[0]
    if k < 1 or iters < 1:
        raise ValueError("k and iters must be >= 1")
    if k > n:
        raise InfeasibleKError(f"k={k} infeasible for {n} rows")
    unit = _unit_rows(keys)
    rng = np.random.default_rng(seed)
    dirs = unit[_kmeanspp_indices(unit, k, rng)]

    labels = None
    objective: list[float] = []
    n_iter = 0
    for _ in range(iters):
        sims = unit @ dirs.T
        new = np.argmax(sims, axis=1)  # first max wins: ties go to the lowest id
        new = _repair_empty(new, sims, k)
        n_iter += 1
        objective.append(float(np.sum(1.0 - sims[np.arange(n), new])))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        dirs = _directions(unit, labels, k, dirs)
    return KMeansFit(labels=labels, objective=objective, n_iter=n_iter)


def _mean_centroid(keys: np.ndarray, members: np.ndarray) -> np.ndarray:
    c = keys[members].astype(np.float64).mean(axis=0)
    if not np.any(c):
        log.warning("cluster with members %s has a zero-norm mean; using first member key", members[:4])
        c = keys[members[0]].astype(np.float64)
    return c.astype(DTYPE)


def _clusters_from_labels(keys, labels, k, token_offset, first_id, generation, token_ids=None) -> list[Cluster]:
    groups = []
    for j in range(k):
        local = np.flatnonzero(labels == j)
        if local.size:
            groups.append(local)
    # stable, position-meaningful ids: order clusters by their first member
    groups.sort(key=lambda g: int(g[0]))
    out = []
    for n, local in enumerate(groups):
        tokens = local + token_offset if token_ids is None else token_ids[local]
        out.append(
            Cluster(
                id=first_id + n,
                member_indices=np.asarray(tokens, dtype=np.int64),
                centroid=_mean_centroid(keys, local),
                generation=generation,
            )
        )
    return out


def spherical_kmeans(keys, k: int, iters: int = DEFAULT_ITERS, seed: int = 0) -> list[Cluster]:
    """Cluster ``keys`` into at most ``k`` clusters.

    Member indices are row positions in ``keys``; each centroid is the plain
    arithmetic mean of its members' keys (not renormalised).
    """
    keys = np.asarray(keys)
    fit = fit_spherical(keys, k, iters, seed)
    return _clusters_from_labels(keys, fit.labels, k, 0, 0, 0)


@dataclass
class ClusterStore:
    """Append-only cluster list plus the buffer of not-yet-clustered tokens."""

    interval: int = DEFAULT_INTERVAL
    tokens_per_cluster_target: int = DEFAULT_TOKENS_PER_CLUSTER
    iters: int = DEFAULT_ITERS
    clusters: list[Cluster] = field(default_factory=list)
    unclustered: list[int] = field(default_factory=list)
    initialized: bool = False

    def __post_init__(self):
        if self.interval < 1 or self.tokens_per_cluster_target < 1 or self.iters < 1:
            raise ValueError("interval, tokens_per_cluster_target and iters must be >= 1")
        self._centroids = np.empty((0, 0), dtype=DTYPE)
        self._sizes = np.empty(0, dtype=np.int64)

    # --- derived views -------------------------------------------------
    @property
    def generation(self) -> int:
        return self.clusters[-1].generation if self.clusters else -1

    @property
    def centroids(self) -> np.ndarray:
        """(n_clusters, d_h) matrix of centroids in id order."""
        return self._centroids

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    def n_clusters_for(self, n_tokens: int) -> int:
        return max(1, n_tokens // self.tokens_per_cluster_target)

    def _extend(self, new: list[Cluster]) -> None:
        if not new:
            return
        self.clusters.extend(new)
        c = np.stack([cl.centroid for cl in new])
        self._centroids = c if self._centroids.size == 0 else np.vstack([self._centroids, c])
        self._sizes = np.concatenate([self._sizes, [cl.size for cl in new]])

    @classmethod
    def from_clusters(cls, clusters: list[Cluster], unclustered=(), **kwargs) -> "ClusterStore":
        store = cls(**kwargs)
        store._extend(list(clusters))
        store.unclustered = list(unclustered)
        store.initialized = True
        return store

    # --- operations ----------------------------------------------------
    def _cluster_tokens(self, cache: KVCache, tokens: np.ndarray, generation: int, seed: int) -> list[Cluster]:
        keys = np.asarray(cache.keys[tokens])
        k = min(self.n_clusters_for(tokens.size), tokens.size)
        fit = fit_spherical(keys, k, self.iters, _pass_seed(seed, generation))
        return _clusters_from_labels(keys, fit.labels, k, 0, len(self.clusters), generation, token_ids=tokens)

    def initial_cluster(self, cache: KVCache, seed: int = 0) -> "ClusterStore":
        if self.initialized or self.clusters:
            raise ClusteringError("cluster store already initialized")
        if cache.prefill_len < 1:
            raise ClusteringError("initial clustering needs at least one prefill token")
        tokens = np.arange(cache.prefill_len, dtype=np.int64)
        self._extend(self._cluster_tokens(cache, tokens, 0, seed))
        self.unclustered = list(range(cache.prefill_len, cache.total_len))
        self.initialized = True
        self._maybe_flush(cache, seed)
        return self

    def append_token(self, cache: KVCache, key, value, seed: int = 0) -> "ClusterStore":
        """Append one decoded (key, value) to ``cache`` and cluster the buffer once it holds ``interval`` tokens."""
        if not self.initialized:
            raise ClusteringError("cluster store not initialized; run initial_cluster first")
        i = cache.append(key, value)
        self.unclustered.append(i)
        self._maybe_flush(cache, seed)
        return self

    def _maybe_flush(self, cache: KVCache, seed: int) -> None:
        while len(self.unclustered) >= self.interval:
            batch = np.asarray(self.unclustered[: self.interval], dtype=np.int64)
            self._extend(self._cluster_tokens(cache, batch, self.generation + 1, seed))
            self.unclustered = self.unclustered[self.interval :]

    def check_invariants(self, total_len: int, keys: np.ndarray | None = None, atol: float = 1e-5) -> None:
        """Raise AssertionError if the partition or centroid invariants are broken."""
        seen = np.zeros(total_len, dtype=np.int64)
        for j, cl in enumerate(self.clusters):
            m = cl.member_indices
            assert cl.id == j, f"cluster id {cl.id} at position {j}"
            assert m.size > 0, f"cluster {j} is empty"
            assert np.all(np.diff(m) > 0), f"cluster {j} members not sorted"
            np.add.at(seen, m, 1)
            if keys is not None:
                err = np.max(np.abs(cl.centroid.astype(np.float64) - keys[m].astype(np.float64).mean(axis=0)))
                assert err < atol or not np.any(keys[m].astype(np.float64).mean(axis=0)), (
                    f"cluster {j} centroid off by {err}"
                )
        if self.unclustered:
            np.add.at(seen, np.asarray(self.unclustered), 1)
        assert np.all(seen == 1), f"token(s) {np.flatnonzero(seen != 1)[:8]} not covered exactly once"
        assert len(self.unclustered) < self.interval
