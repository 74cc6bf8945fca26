"""Decode-loop simulation: drives a trace through every policy and scores each step."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import output_error, recall_against, sparse_attend
from .clustering import DEFAULT_INTERVAL, DEFAULT_TOKENS_PER_CLUSTER, ClusterStore
from .core import KVCache, SelectionMask, token_scores
from .pim import (
    CostModel,
    PimGeometry,
    count_fetches,
    cost,
    layout_clustered,
    layout_sequential,
)
from .retrieval import (
    build_page_index,
    select_full,
    select_page_quest,
    select_sparq,
    select_starc,
    select_window,
    update_page_index,
)
from .workload import Trace

log = logging.getLogger(__name__)

STEP_FIELDS = [
    "seed", "budget", "step", "cache_len", "policy", "mask_size", "recall", "fetches",
    "processed_tokens", "useful_tokens", "waste_ratio", "latency", "energy", "output_error",
]
SUMMARY_FIELDS = [
    "budget", "policy", "n_seeds", "n_steps", "mask_size", "recall", "recall_seed_std", "recall_seed_min",
    "fetches", "processed_tokens", "waste_ratio", "latency", "energy", "output_error",
    "norm_latency", "norm_energy", "remap_write_cost",
]


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class Policy:
    kind: str
    param: int | None = None

    @property
    def name(self) -> str:
        return self.kind if self.param is None else f"{self.kind}:{self.param}"

    @classmethod
    def parse(cls, text: str) -> "Policy":
        kind, _, arg = text.strip().partition(":")
        if kind in ("full", "window", "token_oracle", "starc"):
            if arg:
                raise ValueError(f"policy {kind!r} takes no parameter")
            return cls(kind)
        if kind in ("sparq", "page"):
            if not arg:
                raise ValueError(f"policy {kind!r} needs a parameter, e.g. {kind}:16")
            n = int(arg)
            if n < 1:
                raise ValueError(f"policy parameter must be >= 1: {text!r}")
            return cls(kind, n)
        raise ValueError(f"unknown policy {text!r}")


@dataclass
class SimConfig:
    policies: list[Policy]
    budgets: list[int]
    geometry: PimGeometry = field(default_factory=PimGeometry)
    cost_model: CostModel = field(default_factory=CostModel)
    interval: int = DEFAULT_INTERVAL
    tokens_per_cluster: int = DEFAULT_TOKENS_PER_CLUSTER
    check_invariants: bool = True
    with_output_error: bool = True

    def __post_init__(self):
        if not self.policies:
            raise ValueError("at least one policy is required")
        if not self.budgets or min(self.budgets) < 1:
            raise ValueError("budgets must be non-empty and >= 1")


def dedupe_budgets(budgets) -> list[int]:
    out: list[int] = []
    for b in budgets:
        b = int(b)
        if b in out:
            log.warning("duplicate budget %d ignored", b)
            continue
        out.append(b)
    return out


def _violation(cond: bool, msg: str) -> None:
    if not cond:
        raise InvariantViolation(msg)


def simulate(trace: Trace, cfg: SimConfig, seed: int = 0) -> dict[str, list]:
    """Run every decoding step of ``trace`` and return column-wise step records.

    Baseline layouts are sequential; the clustered policy is measured on its
    own clustered layout. Recall at step t uses the effective budget
    min(B, L) so that early steps with a short cache are still defined.
    """
    geom, cm = cfg.geometry, cfg.cost_model
    G = geom.group_size
    if trace.prefill_len < 1:
        raise ValueError("trace needs at least one prefill token")
    cache = KVCache.from_prefill(trace.keys[: trace.prefill_len], trace.values[: trace.prefill_len])
    kinds = {p.kind for p in cfg.policies}
    store = None
    if "starc" in kinds:
        store = ClusterStore(interval=cfg.interval, tokens_per_cluster_target=cfg.tokens_per_cluster)
        store.initial_cluster(cache, seed)
    page_sizes = sorted({p.param for p in cfg.policies if p.kind == "page"})

    pages = {ps: build_page_index(cache, ps) for ps in page_sizes}
    rec = {name: [] for name in STEP_FIELDS}

    def emit(b, t, L, pol, mask_size, recall, st, err):
        c = cost(st, cm)
        for name, val in zip(
            STEP_FIELDS,
            (seed, b, t, L, pol, mask_size, recall, st.fetches, st.processed_tokens, st.useful_tokens,
             st.waste_ratio, c.latency, c.energy, err),
        ):
            rec[name].append(val)

    for t in range(trace.decode_len):
        i = trace.prefill_len + t
        if store is not None:
            store.append_token(cache, trace.keys[i], trace.values[i], seed)
        else:
            cache.append(trace.keys[i], trace.values[i])
        q = trace.queries[t]
        L = cache.total_len
        # exact logits and their ranking are shared by the oracle policy and recall
        scores = token_scores(q, cache.keys64)
        order = np.argsort(-scores, kind="stable")
        dense = sparse_attend(q, cache, SelectionMask(np.arange(L)), scores) if cfg.with_output_error else None
        seq = layout_sequential(L, geom)
        pages = {ps: update_page_index(idx, cache) for ps, idx in pages.items()}
        clustered = layout_clustered(store, geom) if store is not None else None

        for b in cfg.budgets:
            truth = np.sort(order[: min(b, L)])
            for pol in cfg.policies:
                sel = None
                if pol.kind == "full":
                    mask = select_full(cache)
                elif pol.kind == "window":
                    mask = select_window(cache, b)
                elif pol.kind == "token_oracle":
                    mask = SelectionMask(truth)
                elif pol.kind == "sparq":
                    mask = select_sparq(q, cache, min(pol.param, cache.d_h), b)
                elif pol.kind == "page":
                    # the in-progress trailing page is scored once it fills up
                    mask = select_page_quest(q, pages[pol.param], b, complete_pages_only=True)
                else:
                    sel = select_starc(q, store, b)
                    mask = sel.attended
                layout = clustered if sel is not None else seq
                st = count_fetches(mask, layout, geom)
                if cfg.check_invariants:
                    _check_step(pol, b, mask, sel, st, G, geom, L)
                err = float("nan")
                if dense is not None and len(mask) == 0:
                    err = float(np.linalg.norm(dense.out))  # nothing attended: zero output
                elif dense is not None:
                    out = dense if len(mask) == L else sparse_attend(q, cache, mask, scores)
                    err = output_error(out, dense)
                emit(b, t, L, pol.name, len(mask), recall_against(mask, truth), st, err)
    if store is not None and cfg.check_invariants:
        try:
            store.check_invariants(cache.total_len, cache.keys)
        except AssertionError as exc:
            raise InvariantViolation(f"cluster store: {exc}") from None
    rec["_remap_tokens"] = [sum(c.size for c in store.clusters) if store is not None else 0]
    return rec


def _check_step(pol, b, mask, sel, st, G, geom, L):
    where = f"policy {pol.name}, B={b}, L={L}"
    _violation(st.processed_tokens >= st.useful_tokens, f"{where}: processed < useful")
    _violation(st.fetches >= math.ceil(len(mask) / G), f"{where}: fetches below ceil(|mask|/G)")
    if pol.kind in ("window", "token_oracle", "sparq", "page"):
        _violation(len(mask) <= b, f"{where}: mask of {len(mask)} exceeds budget")
    if sel is not None:
        _violation(len(sel.included_tokens) <= b, f"{where}: {len(sel.included_tokens)} budgeted tokens")
        if geom.row_align_clusters:
            recent_groups = -(-sel.recent_tokens.size // G)
            bound = len(sel.included_tokens) + sel.n_selected_clusters * (G - 1) + recent_groups * G
            _violation(st.processed_tokens <= bound, f"{where}: processed {st.processed_tokens} > bound {bound}")


def run_seeds(traces, cfg: SimConfig, seeds) -> dict[str, list]:
    """Simulate one trace per seed and concatenate the records."""
    merged = {name: [] for name in STEP_FIELDS}
    remap = []
    for trace, seed in zip(traces, seeds):
        rec = simulate(trace, cfg, seed)
        for name in STEP_FIELDS:
            merged[name].extend(rec[name])
        remap.append(rec["_remap_tokens"][0])
    merged["_remap_tokens"] = remap
    return merged


def full_baseline(records: dict[str, list], cfg: SimConfig) -> tuple[float, float]:
    """Mean latency/energy of retrieving the whole cache on the sequential layout."""
    G = cfg.geometry.group_size
    lens = np.asarray(records["cache_len"])[np.asarray(records["budget"]) == cfg.budgets[0]]
    pol = np.asarray(records["policy"])[np.asarray(records["budget"]) == cfg.budgets[0]]
    lens = lens[pol == cfg.policies[0].name]
    fetches = -(-lens // G)
    cm = cfg.cost_model
    lat = cm.t_overhead + fetches * cm.t_fetch + fetches * G * cm.t_gemv
    en = cm.e_overhead + fetches * cm.e_fetch + fetches * G * cm.e_gemv
    return float(lat.mean()), float(en.mean())


def summarize(records: dict[str, list], cfg: SimConfig) -> list[dict]:
    cols = {k: np.asarray(v) for k, v in records.items() if not k.startswith("_")}
    base_lat, base_en = full_baseline(records, cfg)
    n_remap = float(np.mean(records.get("_remap_tokens", [0]) or [0]))
    rows = []
    for b in cfg.budgets:
        for pol in cfg.policies:
            sel = (cols["budget"] == b) & (cols["policy"] == pol.name)
            seeds = np.unique(cols["seed"][sel])
            per_seed_recall = np.array([cols["recall"][sel & (cols["seed"] == s)].mean() for s in seeds])
            mean = {k: float(cols[k][sel].mean()) for k in (
                "mask_size", "recall", "fetches", "processed_tokens", "waste_ratio", "latency", "energy",
                "output_error")}
            if pol.kind == "full":
                # identically 1.0 by definition of the normalisation baseline
                norm_lat = norm_en = 1.0
            else:
                norm_lat = mean["latency"] / base_lat if base_lat else float("nan")
                norm_en = mean["energy"] / base_en if base_en else float("nan")
            rows.append({
                "budget": b, "policy": pol.name, "n_seeds": int(seeds.size), "n_steps": int(sel.sum()),
                **mean,
                "recall_seed_std": float(per_seed_recall.std()),
                "recall_seed_min": float(per_seed_recall.min()),
                "norm_latency": norm_lat, "norm_energy": norm_en,
                "remap_write_cost": n_remap * cfg.cost_model.write_cost_per_token if pol.kind == "starc" else 0.0,
            })
    return rows


def write_steps_csv(records: dict[str, list], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(STEP_FIELDS)
        w.writerows(zip(*(records[k] for k in STEP_FIELDS)))


def write_summary(rows: list[dict], out_dir) -> None:
    out_dir = Path(out_dir)
    with open(out_dir / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        w.writerows(rows)
    lines = [
        f"{'budget':>7} {'policy':<14} {'recall':>7} {'processed':>10} {'waste':>6} "
        f"{'norm_lat':>9} {'norm_en':>8} {'out_err':>8}"
    ]
    for r in rows:
        lines.append(
            f"{r['budget']:>7} {r['policy']:<14} {r['recall']:>7.4f} {r['processed_tokens']:>10.1f} "
            f"{r['waste_ratio']:>6.3f} {r['norm_latency']:>9.4f} {r['norm_energy']:>8.4f} {r['output_error']:>8.4f}"
        )
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
