"""Token selection policies.

Every policy maps a query (plus cache or cluster state) to the set of token
indices attended at one decoding step. Ties in any ranking go to the lower
cluster id, page number or token index, so all policies are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterStore, ClusteringError
from .core import KVCache, SelectionMask, as_vector, token_scores, top_b

DEFAULT_PAGE_SIZE = 16


def _check_budget(budget: int) -> int:
    b = int(budget)
    if b < 1:
        raise ValueError(f"retrieval budget must be >= 1, got {budget}")
    return b


def _take_ranked_groups(ranked: np.ndarray, sizes: np.ndarray, budget: int):
    """Greedy fill: whole groups in rank order, then a prefix of the next one.

    Returns (n_whole, n_partial_tokens) where n_partial_tokens is 0 when the
    budget is met exactly or everything fits.
    """
    csum = np.cumsum(sizes[ranked])
    n_whole = int(np.searchsorted(csum, budget, side="right"))
    taken = int(csum[n_whole - 1]) if n_whole else 0
    partial = 0
    if n_whole < ranked.size and taken < budget:
        partial = budget - taken
    return n_whole, partial


# --- clustered retrieval -------------------------------------------------

@dataclass(eq=False)
class ClusterSelection:
    ranked_cluster_ids: np.ndarray
    included_tokens: SelectionMask
    full_cluster_ids: np.ndarray
    truncated_cluster_id: int | None
    recent_tokens: np.ndarray

    @property
    def attended(self) -> SelectionMask:
        """Budgeted tokens plus the unclustered recent tokens."""
        return SelectionMask(np.union1d(self.included_tokens.indices, self.recent_tokens))

    @property
    def n_selected_clusters(self) -> int:
        return int(self.full_cluster_ids.size + (self.truncated_cluster_id is not None))


def score_clusters(q, store: ClusterStore) -> np.ndarray:
    """Centroid scores ``q . mu_j`` indexed by cluster id."""
    if not store.initialized or not store.clusters:
        raise ClusteringError("cluster store not initialized")
    q = as_vector(q, store.centroids.shape[1])
    return token_scores(q, store.centroids)


def select_starc(q, store: ClusterStore, budget: int) -> ClusterSelection:
    b = _check_budget(budget)
    scores = score_clusters(q, store)
    ranked = np.argsort(-scores, kind="stable")
    n_whole, partial = _take_ranked_groups(ranked, store.sizes, b)
    full_ids = ranked[:n_whole]
    parts = [store.clusters[j].member_indices for j in full_ids]
    truncated = None
    if partial:
        truncated = int(ranked[n_whole])
        parts.append(store.clusters[truncated].member_indices[:partial])
    included = np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
    return ClusterSelection(
        ranked_cluster_ids=ranked,
        included_tokens=SelectionMask(included),
        full_cluster_ids=full_ids,
        truncated_cluster_id=truncated,
        recent_tokens=np.asarray(store.unclustered, dtype=np.int64),
    )


# --- baselines -------------------------------------------------------------

def select_full(cache: KVCache) -> SelectionMask:
    return SelectionMask(np.arange(cache.total_len, dtype=np.int64))


def select_window(cache: KVCache, budget: int) -> SelectionMask:
    b = _check_budget(budget)
    n = cache.total_len
    return SelectionMask(np.arange(max(0, n - b), n, dtype=np.int64))


def select_token_oracle(q, cache: KVCache, budget: int) -> SelectionMask:
    b = _check_budget(budget)
    q = as_vector(q, cache.d_h)
    return SelectionMask(top_b(token_scores(q, cache.keys64), b))


def sparq_components(q, r: int) -> np.ndarray:
    """The ``r`` largest-magnitude query components, ties to lower index, ascending."""
    q = np.asarray(q)
    if not 1 <= r <= q.shape[0]:
        raise ValueError(f"r must be in [1, {q.shape[0]}], got {r}")
    return np.sort(np.argsort(-np.abs(q), kind="stable")[:r])


def select_sparq(q, cache: KVCache, r: int, budget: int) -> SelectionMask:
    """Top-B tokens by the score restricted to the query's r largest components."""
    b = _check_budget(budget)
    q = as_vector(q, cache.d_h)
    comps = sparq_components(q, r)
    approx = token_scores(q[comps], cache.keys64[:, comps])
    return SelectionMask(top_b(approx, b))


@dataclass(eq=False)
class PageIndex:
    page_size: int
    min_key: np.ndarray
    max_key: np.ndarray
    total_len: int

    @property
    def n_pages(self) -> int:
        return int(self.min_key.shape[0])

    def page_sizes(self) -> np.ndarray:
        sizes = np.full(self.n_pages, self.page_size, dtype=np.int64)
        if self.n_pages:
            sizes[-1] = self.total_len - self.page_size * (self.n_pages - 1)
        return sizes


def build_page_index(cache: KVCache, page_size: int = DEFAULT_PAGE_SIZE) -> PageIndex:
    if page_size < 1:
        raise ValueError("page_size must be >= 1")
    keys = cache.keys
    n = keys.shape[0]
    starts = np.arange(0, n, page_size)
    if n == 0:
        empty = np.empty((0, cache.d_h), dtype=keys.dtype)
        return PageIndex(page_size, empty, empty.copy(), 0)
    return PageIndex(
        page_size=page_size,
        min_key=np.minimum.reduceat(keys, starts, axis=0),
        max_key=np.maximum.reduceat(keys, starts, axis=0),
        total_len=n,
    )


def update_page_index(index: PageIndex, cache: KVCache) -> PageIndex:
    """Extend ``index`` to cover tokens appended since it was built.

    Only the previously trailing page and new pages are recomputed.
    """
    n = cache.total_len
    ps = index.page_size
    first = max(index.n_pages - 1, 0)
    if n == index.total_len:
        return index
    keys = cache.keys[first * ps :]
    starts = np.arange(0, keys.shape[0], ps)
    lo = np.minimum.reduceat(keys, starts, axis=0)
    hi = np.maximum.reduceat(keys, starts, axis=0)
    return PageIndex(
        page_size=ps,
        min_key=np.concatenate([index.min_key[:first], lo]),
        max_key=np.concatenate([index.max_key[:first], hi]),
        total_len=n,
    )


def page_scores(q, index: PageIndex) -> np.ndarray:
    """Upper bound on q . k over each page: sum_d max(q_d min_d, q_d max_d)."""
    q = np.asarray(q, dtype=np.float64)
    lo = index.min_key.astype(np.float64) * q
    hi = index.max_key.astype(np.float64) * q
    return np.maximum(lo, hi).sum(axis=1)


def select_page_quest(q, index: PageIndex, budget: int, complete_pages_only: bool = False) -> SelectionMask:
    """Rank pages by their min/max bound and fill the budget page by page.

    With ``complete_pages_only`` a short trailing page is not a candidate, so
    a budget that is a multiple of the page size is met with whole pages only.
    """
    b = _check_budget(budget)
    q = as_vector(q, index.min_key.shape[1]) if index.n_pages else as_vector(q)
    sizes = index.page_sizes()
    n_cand = index.n_pages
    if complete_pages_only and n_cand and sizes[-1] < index.page_size:
        n_cand -= 1
    if n_cand == 0:
        return SelectionMask(np.empty(0, dtype=np.int64))
    scores = page_scores(q, index)[:n_cand]
    ranked = np.argsort(-scores, kind="stable")
    n_whole, partial = _take_ranked_groups(ranked, sizes, b)
    ps = index.page_size
    parts = [np.arange(p * ps, p * ps + sizes[p]) for p in ranked[:n_whole]]
    if partial:
        p = int(ranked[n_whole])
        parts.append(np.arange(p * ps, p * ps + partial))
    return SelectionMask(np.sort(np.concatenate(parts)).astype(np.int64))
