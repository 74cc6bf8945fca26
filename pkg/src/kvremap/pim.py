"""Row-granularity fetch accounting for a bank-level PIM attention unit.

One fetch delivers ``group_size`` complete key/value vectors (8 for HBM3
bursts at head dimension 128), and every vector in a fetched group is
processed whether it was selected or not.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .clustering import ClusterStore
from .core import SelectionMask


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class PimGeometry:
    group_size: int = 8
    row_align_clusters: bool = True
    banks_per_channel: int = 64

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")


@dataclass(eq=False)
class LayoutMap:
    """token -> (group, slot). ``group_of[i]`` / ``slot_of[i]`` for token i."""

    group_of: np.ndarray
    slot_of: np.ndarray
    occupancy: np.ndarray

    @property
    def n_groups(self) -> int:
        return int(self.occupancy.size)

    @property
    def total_len(self) -> int:
        return int(self.group_of.size)

    def padding(self, group_size: int) -> int:
        return int(self.n_groups * group_size - self.occupancy.sum())

    def slot(self, token: int) -> tuple[int, int]:
        return int(self.group_of[token]), int(self.slot_of[token])


@dataclass(frozen=True)
class FetchStats:
    fetches: int
    processed_tokens: int
    useful_tokens: int

    @property
    def waste_ratio(self) -> float:
        if self.processed_tokens == 0:
            return 0.0
        return (self.processed_tokens - self.useful_tokens) / self.processed_tokens


@dataclass(frozen=True)
class CostModel:
    t_fetch: float = 1.0
    t_gemv: float = 1.0
    t_overhead: float = 0.0
    e_fetch: float = 1.0
    e_gemv: float = 1.0
    e_overhead: float = 0.0
    write_cost_per_token: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"cost parameter {f.name} must be >= 0")


@dataclass(frozen=True)
class CostReport:
    latency: float
    energy: float


def layout_sequential(total_len: int, geom: PimGeometry) -> LayoutMap:
    g = geom.group_size
    tok = np.arange(total_len, dtype=np.int64)
    n_groups = -(-total_len // g)
    occ = np.full(n_groups, g, dtype=np.int64)
    if n_groups and total_len % g:
        occ[-1] = total_len % g
    return LayoutMap(group_of=tok // g, slot_of=tok % g, occupancy=occ)


def _place_runs(runs: list[np.ndarray], g: int, align) -> LayoutMap:
    """Lay token runs out back to back; runs flagged in ``align`` start a fresh group."""
    sizes = np.fromiter((r.size for r in runs), dtype=np.int64, count=len(runs))
    starts = np.empty(len(runs), dtype=np.int64)
    pos = 0
    for j, (n, fresh) in enumerate(zip(sizes.tolist(), align)):
        if fresh and pos % g:
            pos += g - pos % g
        starts[j] = pos
        pos += n
    tokens = np.concatenate(runs) if runs else np.empty(0, dtype=np.int64)
    total = int(tokens.size)
    if total and (tokens.min() < 0 or np.any(np.bincount(tokens, minlength=total) != 1)):
        raise LayoutError("layout runs do not cover each token exactly once")
    offsets = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    where = np.repeat(starts, sizes) + offsets
    group_of = np.empty(total, dtype=np.int64)
    slot_of = np.empty(total, dtype=np.int64)
    group_of[tokens] = where // g
    slot_of[tokens] = where % g
    n_groups = -(-pos // g)
    occ = np.bincount(group_of, minlength=n_groups).astype(np.int64)
    return LayoutMap(group_of=group_of, slot_of=slot_of, occupancy=occ)


def layout_clustered(store: ClusterStore, geom: PimGeometry) -> LayoutMap:
    """Clusters in id order, members ascending, then unclustered tokens by position."""
    runs = [c.member_indices for c in store.clusters]
    align = [geom.row_align_clusters] * len(runs)
    if store.unclustered:
        runs.append(np.asarray(store.unclustered, dtype=np.int64))
        align.append(geom.row_align_clusters)
    return _place_runs(runs, geom.group_size, align)


def count_fetches(mask: SelectionMask, layout: LayoutMap, geom: PimGeometry) -> FetchStats:
    idx = mask.indices if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=np.int64)
    if idx.size and (idx[-1] >= layout.total_len or idx.min() < 0):
        raise LayoutError(f"token {int(idx.max())} not present in layout of {layout.total_len} tokens")
    groups = layout.group_of[idx]
    if np.any(groups < 0):
        raise LayoutError("mask references an unplaced token")
    fetches = int(np.unique(groups).size)
    return FetchStats(fetches=fetches, processed_tokens=fetches * geom.group_size, useful_tokens=int(idx.size))


def cost(stats: FetchStats, model: CostModel) -> CostReport:
    return CostReport(
        latency=model.t_overhead + stats.fetches * model.t_fetch + stats.processed_tokens * model.t_gemv,
        energy=model.e_overhead + stats.fetches * model.e_fetch + stats.processed_tokens * model.e_gemv,
    )


_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}
_COST_KEYS = {f.name for f in fields(CostModel)}


def parse_hw_config(text: str) -> tuple[PimGeometry, CostModel]:
    """Parse ``key=value`` lines (``#`` comments allowed) into geometry and cost model."""
    geo: dict = {}
    cm: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key == "group_size":
                geo["group_size"] = int(val)
            elif key == "row_align":
                if val.lower() not in _BOOL:
                    raise ValueError(f"not a boolean: {val!r}")
                geo["row_align_clusters"] = _BOOL[val.lower()]
            elif key == "banks_per_channel":
                geo["banks_per_channel"] = int(val)
            elif key in _COST_KEYS:
                cm[key] = float(val)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return PimGeometry(**geo), CostModel(**cm)


def load_hw_config(path) -> tuple[PimGeometry, CostModel]:
    return parse_hw_config(Path(path).read_text())
