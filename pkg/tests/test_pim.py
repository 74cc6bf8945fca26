import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvremap.clustering import Cluster, ClusterStore
from kvremap.core import SelectionMask
from kvremap.pim import (
    CostModel,
    FetchStats,
    LayoutError,
    PimGeometry,
    cost,
    count_fetches,
    layout_clustered,
    layout_sequential,
    load_hw_config,
    parse_hw_config,
)
from kvremap.retrieval import select_starc
from kvremap.workload import SyntheticConfig, generate

from .helpers import make_cache

G8 = PimGeometry()


def store_from_sizes(sizes, unclustered=()):
    clusters, start = [], 0
    for j, n in enumerate(sizes):
        clusters.append(Cluster(j, np.arange(start, start + n), np.zeros(2, dtype=np.float32), 0))
        start += n
    return ClusterStore.from_clusters(clusters, unclustered=unclustered)


def assert_complete_injective(layout, total, g):
    assert layout.total_len == total
    pairs = set(zip(layout.group_of.tolist(), layout.slot_of.tolist()))
    assert len(pairs) == total
    assert np.all(layout.occupancy <= g)
    assert np.all(np.bincount(layout.group_of, minlength=layout.n_groups) == layout.occupancy)


def test_defaults():
    assert G8.group_size == 8 and G8.row_align_clusters and G8.banks_per_channel == 64


def test_sequential_layout_examples():
    lay = layout_sequential(17, G8)
    assert lay.n_groups == 3 and lay.occupancy.tolist() == [8, 8, 1]
    assert layout_sequential(0, G8).total_len == 0
    assert layout_sequential(17, G8).slot(9) == (1, 1)


def test_clustered_layout_examples():
    lay = layout_clustered(store_from_sizes([8, 8]), G8)
    assert lay.n_groups == 2 and lay.padding(8) == 0
    lay = layout_clustered(store_from_sizes([5, 5]), G8)
    assert lay.occupancy.tolist() == [5, 5] and lay.padding(8) == 6
    lay = layout_clustered(store_from_sizes([5, 5]), PimGeometry(row_align_clusters=False))
    assert lay.occupancy.tolist() == [8, 2]
    assert set(lay.group_of[5:10].tolist()) == {0, 1}  # cluster 2 straddles groups


def test_clustered_layout_recent_tokens_follow_clusters():
    lay = layout_clustered(store_from_sizes([3, 4], unclustered=[7, 8, 9]), G8)
    assert lay.group_of[[7, 8, 9]].tolist() == [2, 2, 2]
    assert lay.slot_of[[7, 8, 9]].tolist() == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=20), st.integers(0, 30), st.integers(1, 16), st.booleans())
def test_layout_complete_and_aligned(sizes, n_recent, g, align):
    total = sum(sizes)
    store = store_from_sizes(sizes, unclustered=list(range(total, total + n_recent)))
    geom = PimGeometry(group_size=g, row_align_clusters=align)
    lay = layout_clustered(store, geom)
    assert_complete_injective(lay, total + n_recent, g)
    if align:
        owner = {}
        for c in store.clusters:
            for grp in set(lay.group_of[c.member_indices].tolist()):
                assert owner.setdefault(grp, c.id) == c.id  # no group shared by two clusters
        assert lay.padding(g) <= (g - 1) * (len(sizes) + 1)


def test_count_fetches_examples():
    stats = count_fetches(SelectionMask.of([0, 8, 16]), layout_sequential(64, G8), G8)
    assert (stats.fetches, stats.processed_tokens, stats.useful_tokens) == (3, 24, 3)
    assert stats.waste_ratio == pytest.approx(21 / 24)


def test_count_fetches_aligned_pages():
    # 64 pages of 16 tokens each, spread over a 4096-token cache
    pages = np.arange(0, 256, 4)[:64]
    mask = SelectionMask(np.concatenate([np.arange(p * 16, p * 16 + 16) for p in pages]))
    stats = count_fetches(mask, layout_sequential(4096, G8), G8)
    assert len(mask) == 1024
    assert stats.fetches == 128 and stats.processed_tokens == 1024 and stats.waste_ratio == 0.0


def _expected_scatter_processed(n: int, m: int, g: int) -> float:
    # a group of g is untouched with probability C(n-g, m) / C(n, m)
    p_miss = math.exp(math.lgamma(n - g + 1) - math.lgamma(n - g - m + 1) - math.lgamma(n + 1) + math.lgamma(n - m + 1))
    return g * (n // g) * (1.0 - p_miss)


def test_count_fetches_random_scatter():
    n, m = 65536, 1024
    expected = _expected_scatter_processed(n, m, 8)
    assert 7700 < expected < 7800  # some groups hold two picks, so below 8 * m
    lay = layout_sequential(n, G8)
    got = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mask = SelectionMask.of(rng.choice(n, size=m, replace=False))
        processed = count_fetches(mask, lay, G8).processed_tokens
        assert abs(processed - expected) <= 0.05 * expected
        got.append(processed)
    assert abs(np.mean(got) - expected) <= 0.01 * expected


def test_count_fetches_missing_token():
    with pytest.raises(LayoutError):
        count_fetches(SelectionMask.of([20]), layout_sequential(10, G8), G8)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 16), st.integers(0, 10_000))
def test_fetch_lower_bound(n, g, seed):
    rng = np.random.default_rng(seed)
    geom = PimGeometry(group_size=g)
    mask = SelectionMask.of(rng.choice(n, size=rng.integers(0, n + 1), replace=False))
    st_ = count_fetches(mask, layout_sequential(n, geom), geom)
    assert st_.fetches >= math.ceil(len(mask) / g)
    assert st_.processed_tokens >= st_.useful_tokens
    assert 0.0 <= st_.waste_ratio < 1.0


def test_cost_examples():
    unit = CostModel()
    assert cost(FetchStats(0, 0, 0), CostModel(t_overhead=3, e_overhead=5)) == (cost(FetchStats(0, 0, 0), CostModel(t_overhead=3, e_overhead=5)))
    r = cost(FetchStats(0, 0, 0), CostModel(t_overhead=3, e_overhead=5))
    assert (r.latency, r.energy) == (3, 5)
    r = cost(FetchStats(128, 1024, 1000), unit)
    assert r.latency == 1152 and r.energy == 1152
    double = CostModel(t_fetch=2, t_gemv=2, e_fetch=2, e_gemv=2)
    r2 = cost(FetchStats(128, 1024, 1000), double)
    assert (r2.latency, r2.energy) == (2 * r.latency, 2 * r.energy)


def test_cost_model_rejects_negative():
    with pytest.raises(ValueError):
        CostModel(t_fetch=-1)


def test_hw_config_parsing(tmp_path):
    text = "# geometry\ngroup_size = 4\nrow_align=false\nt_fetch=2.5\ne_gemv = 0.5 # pJ\nwrite_cost_per_token=1\n"
    geom, cm = parse_hw_config(text)
    assert geom.group_size == 4 and not geom.row_align_clusters
    assert cm.t_fetch == 2.5 and cm.e_gemv == 0.5 and cm.write_cost_per_token == 1 and cm.t_gemv == 1
    p = tmp_path / "hw.cfg"
    p.write_text(text)
    assert load_hw_config(p) == (geom, cm)
    for bad in ("bogus=1", "group_size", "row_align=maybe", "t_fetch=-1", "group_size=0"):
        with pytest.raises(ValueError):
            parse_hw_config(bad)


def _starc_fetch_totals(seed):
    trace = generate(SyntheticConfig(prefill_len=512, decode_len=256, seed=seed))
    cache = make_cache(trace.keys[:512], trace.values[:512])
    store = ClusterStore().initial_cluster(cache, seed)
    clustered = sequential = 0
    for t in range(trace.decode_len):
        i = 512 + t
        store.append_token(cache, trace.keys[i], trace.values[i], seed)
        sel = select_starc(trace.queries[t], store, 256)
        mask = sel.attended
        a = count_fetches(mask, layout_clustered(store, G8), G8)
        b = count_fetches(mask, layout_sequential(cache.total_len, G8), G8)
        recent_groups = -(-sel.recent_tokens.size // 8)
        assert a.processed_tokens <= len(sel.included_tokens) + sel.n_selected_clusters * 7 + recent_groups * 8
        clustered += a.fetches
        sequential += b.fetches
    return clustered, sequential


def test_clustered_layout_dominates_sequential_for_starc_masks():
    totals = [_starc_fetch_totals(seed) for seed in range(20)]
    for clustered, sequential in totals:
        assert clustered <= sequential
