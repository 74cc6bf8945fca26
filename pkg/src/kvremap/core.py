"""Shared cache types and elementary vector math.

Vectors are plain 1-D numpy arrays. Keys and values are stored as float32;
scores that feed a ranking are accumulated in float64 so that different
policies computing the same dot products agree on ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class EmptySelectionError(ValueError):
    pass


def as_vector(x, d_h: int | None = None) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    if d_h is not None and v.shape[0] != d_h:
        raise DimensionError(f"expected length {d_h}, got {v.shape[0]}")
    if v.shape[0] < 1:
        raise DimensionError("vector must have at least one component")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite components")
    return v


def dot(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def token_scores(q, keys: np.ndarray) -> np.ndarray:
    """Exact logits ``keys @ q`` in float64."""
    keys = np.asarray(keys)
    if keys.dtype != np.float64:
        keys = keys.astype(np.float64)
    return keys @ np.asarray(q, dtype=np.float64)


def top_b(scores: np.ndarray, b: int) -> np.ndarray:
    """Indices of the ``b`` largest scores, ties toward the lower index, sorted ascending."""
    b = min(int(b), scores.shape[0])
    order = np.argsort(-scores, kind="stable")[:b]
    return np.sort(order)


@dataclass(frozen=True, eq=False)
class SelectionMask:
    """Sorted, duplicate-free set of token indices attended at one decoding step."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("mask indices must be 1-D")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("mask indices must be strictly increasing")
        if idx.size and idx[0] < 0:
            raise ValueError("mask indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices, length: int | None = None) -> "SelectionMask":
        idx = np.asarray(indices, dtype=np.int64).ravel()
        uniq = np.unique(idx)
        if uniq.size != idx.size:
            raise ValueError("duplicate token index in mask")
        if length is not None and uniq.size and uniq[-1] >= length:
            raise IndexError(f"token index {uniq[-1]} out of range for L={length}")
        return cls(uniq)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __contains__(self, i) -> bool:
        pos = np.searchsorted(self.indices, i)
        return bool(pos < self.indices.size and self.indices[pos] == i)

    def __iter__(self):
        return iter(self.indices.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, SelectionMask):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    def union(self, other: "SelectionMask") -> "SelectionMask":
        return SelectionMask(np.union1d(self.indices, other.indices))

    def __repr__(self) -> str:
        return f"SelectionMask(n={len(self)}, indices={self.indices.tolist()[:8]}{'...' if len(self) > 8 else ''})"


class KVCache:
    """Append-only per-head key/value store.

    ``keys`` and ``values`` return read-only views of the first ``total_len``
    rows; a view taken earlier stays valid (and unchanged) after later appends.
    """

    def __init__(self, d_h: int, capacity: int = 1024):
        if d_h < 1:
            raise DimensionError("head dimension must be >= 1")
        self.d_h = int(d_h)
        self._k = np.empty((max(capacity, 1), self.d_h), dtype=DTYPE)
        self._v = np.empty_like(self._k)
        # float64 mirrors feed score and attention math without per-step casts
        self._k64 = np.empty(self._k.shape)
        self._v64 = np.empty(self._k.shape)
        self.total_len = 0
        self.prefill_len = 0

    @classmethod
    def from_prefill(cls, keys, values) -> "KVCache":
        keys = np.asarray(keys, dtype=DTYPE)
        values = np.asarray(values, dtype=DTYPE)
        if keys.ndim != 2 or keys.shape != values.shape:
            raise DimensionError(f"keys {keys.shape} and values {values.shape} must be matching L x d_h")
        if not (np.all(np.isfinite(keys)) and np.all(np.isfinite(values))):
            raise ValueError("non-finite entries in prefill keys/values")
        cache = cls(keys.shape[1], capacity=max(2 * keys.shape[0], 16))
        n = keys.shape[0]
        cache._k[:n] = keys
        cache._v[:n] = values
        cache._k64[:n] = keys
        cache._v64[:n] = values
        cache.total_len = n
        cache.prefill_len = n
        return cache

    def _grow(self, need: int) -> None:
        cap = self._k.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        n = self.total_len
        for name in ("_k", "_v", "_k64", "_v64"):
            old = getattr(self, name)
            new = np.empty((cap, self.d_h), dtype=old.dtype)
            new[:n] = old[:n]
            setattr(self, name, new)

    def append(self, key, value) -> int:
        """Append one paired (key, value) row and return its token index."""
        key = as_vector(key, self.d_h)
        value = as_vector(value, self.d_h)
        self._grow(self.total_len + 1)
        i = self.total_len
        self._k[i] = key
        self._v[i] = value
        self._k64[i] = self._k[i]
        self._v64[i] = self._v[i]
        self.total_len += 1
        return i

    @property
    def keys(self) -> np.ndarray:
        view = self._k[: self.total_len]
        view.flags.writeable = False
        return view

    @property
    def values(self) -> np.ndarray:
        view = self._v[: self.total_len]
        view.flags.writeable = False
        return view

    @property
    def keys64(self) -> np.ndarray:
        """``keys`` widened to float64 (exactly representable, same values)."""
        view = self._k64[: self.total_len]
        view.flags.writeable = False
        return view

    @property
    def values64(self) -> np.ndarray:
        view = self._v64[: self.total_len]
        view.flags.writeable = False
        return view

    def __len__(self) -> int:
        return self.total_len
