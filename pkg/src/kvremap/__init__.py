"""Clustering-based KV-cache remapping for sparse attention on row-granular PIM."""

from .attention import AttentionOutput, dense_attend, output_error, recall_rate, sparse_attend
from .clustering import Cluster, ClusterStore, kmeanspp_init, spherical_kmeans
from .core import KVCache, SelectionMask, cosine_similarity, dot
from .pim import (
    CostModel,
    CostReport,
    FetchStats,
    LayoutMap,
    PimGeometry,
    cost,
    count_fetches,
    layout_clustered,
    layout_sequential,
)
from .retrieval import (
    ClusterSelection,
    PageIndex,
    build_page_index,
    score_clusters,
    select_full,
    select_page_quest,
    select_sparq,
    select_starc,
    select_token_oracle,
    select_window,
)
from .workload import SyntheticConfig, Trace, generate, load_trace, save_trace

__version__ = "0.1.0"
