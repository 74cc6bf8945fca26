"""Dense and mask-restricted single-head attention plus quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmptySelectionError, KVCache, SelectionMask, as_vector, token_scores, top_b


@dataclass(eq=False)
class AttentionOutput:
    out: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    def weight_map(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.weights.tolist()))


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def sparse_attend(q, cache: KVCache, mask: SelectionMask, scores: np.ndarray | None = None) -> AttentionOutput:
    """softmax(q K_S^T / sqrt(d_h)) V_S over the masked tokens.

    ``scores`` may carry the already computed full-cache logits ``K q``.
    """
    idx = mask.indices if isinstance(mask, SelectionMask) else np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise EmptySelectionError("cannot attend over an empty selection")
    if idx[-1] >= cache.total_len or idx.min() < 0:
        raise IndexError(f"mask index out of range for L={cache.total_len}")
    q = as_vector(q, cache.d_h)
    if scores is None:
        raw = token_scores(q, cache.keys64[idx])
    else:
        raw = np.asarray(scores)[idx]
    w = stable_softmax(raw / np.sqrt(cache.d_h))
    if idx.size * 4 >= cache.total_len:
        # dense weight vector avoids gathering a large block of value rows
        full = np.zeros(cache.total_len)
        full[idx] = w
        out = full @ cache.values64
    else:
        out = w @ cache.values64[idx]
    return AttentionOutput(out=out, indices=idx, weights=w)


def dense_attend(q, cache: KVCache) -> AttentionOutput:
    return sparse_attend(q, cache, SelectionMask(np.arange(cache.total_len, dtype=np.int64)))


def recall_rate(mask: SelectionMask, q, cache: KVCache, budget: int) -> float:
    """|mask intersect top-B by attention weight| / B."""
    b = int(budget)
    if b < 1 or cache.total_len < b:
        raise ValueError(f"recall needs 1 <= B <= L (B={b}, L={cache.total_len})")
    q = as_vector(q, cache.d_h)
    truth = top_b(token_scores(q, cache.keys64), b)
    return recall_against(mask, truth)


def recall_against(mask: SelectionMask, truth: np.ndarray) -> float:
    """Recall of ``mask`` against a precomputed top-B index set."""
    idx = mask.indices if isinstance(mask, SelectionMask) else np.asarray(mask)
    hits = np.intersect1d(idx, truth, assume_unique=True).size
    return hits / truth.size


def output_error(a: AttentionOutput, b: AttentionOutput) -> float:
    if a.out.shape != b.out.shape:
        raise ValueError("attention outputs have different head dimensions")
    return float(np.linalg.norm(a.out - b.out))
