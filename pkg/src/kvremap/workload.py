"""Synthetic key/value/query streams and the binary trace format.

Randomness comes from numpy's PCG64 bit generator (``numpy.random.default_rng``)
seeded with the config seed; draws happen in a fixed order, so a given
(config, numpy version) pair always produces the same trace bytes.

Trace file layout (all integers and floats little-endian)::

    offset  size  field
    0       8     magic  b"KVTRACE\\0"
    8       4     uint32 format version (1)
    12      4     uint32 element encoding (1 = IEEE-754 float32)
    16      4     uint32 head dimension d_h
    20      4     uint32 reserved, must be 0
    24      8     uint64 prefill_len
    32      8     uint64 total_len
    40      ...   keys    total_len x d_h   (row-major)
                  values  total_len x d_h
                  queries (total_len - prefill_len) x d_h, one row per decoding step

Query row t belongs to token ``prefill_len + t``; it is issued after that
token's key and value have been appended to the cache.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"KVTRACE\0"
VERSION = 1
ENC_F32LE = 1
_HEADER = struct.Struct("<8sIIIIQQ")
HEADER_SIZE = _HEADER.size


class TraceFormatError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    d_h: int = 128
    prefill_len: int = 2048
    decode_len: int = 2048
    n_components: int = 64
    drift: float = 0.02
    query_alignment: float = 0.9
    noise_sigma: float = 0.01
    persistence: float = 0.8
    active_components: int = 3
    topic_shift: float = 0.01
    query_noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("d_h", "prefill_len", "decode_len", "n_components", "active_components"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("query_alignment", "persistence", "topic_shift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("drift", "noise_sigma", "query_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(eq=False)
class Trace:
    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    prefill_len: int
    components: np.ndarray | None = None  # generator ground truth, not serialised

    def __post_init__(self):
        self.keys = np.ascontiguousarray(self.keys, dtype="<f4")
        self.values = np.ascontiguousarray(self.values, dtype="<f4")
        self.queries = np.ascontiguousarray(self.queries, dtype="<f4").reshape(-1, self.keys.shape[1])
        self.validate()

    @property
    def d_h(self) -> int:
        return int(self.keys.shape[1])

    @property
    def total_len(self) -> int:
        return int(self.keys.shape[0])

    @property
    def decode_len(self) -> int:
        return self.total_len - self.prefill_len

    def validate(self) -> None:
        if self.keys.ndim != 2 or self.keys.shape[1] < 1:
            raise TraceFormatError(f"keys must be L x d_h, got {self.keys.shape}")
        if self.values.shape != self.keys.shape:
            raise TraceFormatError(f"values {self.values.shape} do not match keys {self.keys.shape}")
        if not 0 <= self.prefill_len <= self.total_len:
            raise TraceFormatError(f"prefill_len {self.prefill_len} outside [0, {self.total_len}]")
        if self.queries.shape != (self.decode_len, self.d_h):
            raise TraceFormatError(f"expected {self.decode_len} query rows, got {self.queries.shape[0]}")
        for name in ("keys", "values", "queries"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise TraceFormatError(f"{name} contain non-finite values")

    def equals(self, other: "Trace") -> bool:
        return (
            self.prefill_len == other.prefill_len
            and self.keys.tobytes() == other.keys.tobytes()
            and self.values.tobytes() == other.values.tobytes()
            and self.queries.tobytes() == other.queries.tobytes()
        )


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _component_sequence(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-token component ids and the active topic set in force at each token."""
    total = cfg.prefill_len + cfg.decode_len
    m = cfg.n_components
    a = min(cfg.active_components, m)
    active = rng.choice(m, size=a, replace=False)
    shift = rng.random(total) < cfg.topic_shift
    shift_slot = rng.integers(a, size=total)
    shift_to = rng.integers(m, size=total)
    stay = rng.random(total) < cfg.persistence
    pick = rng.integers(a, size=total)

    comp = np.empty(total, dtype=np.int64)
    history = np.empty((total, a), dtype=np.int64)
    for i in range(total):
        if i and shift[i]:
            active[shift_slot[i]] = shift_to[i]
        history[i] = active
        comp[i] = comp[i - 1] if (i and stay[i]) else active[pick[i]]
    return comp, history


def generate(config: SyntheticConfig | None = None) -> Trace:
    """Gaussian-mixture keys with topical locality and drifting means.

    Component means start as random unit directions and random-walk during
    decoding (``drift`` is the expected per-step displacement norm; prefill
    means are static). A token keeps its predecessor's component with
    probability ``persistence``; otherwise it draws from a small set of
    ``active_components`` topics, one of which is swapped for a random
    component with probability ``topic_shift`` per token. Queries sit near the
    mean of an active topic with probability ``query_alignment`` and are
    random unit vectors otherwise; values are isotropic.
    """
    cfg = config or SyntheticConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, n_pre, n_dec, m = cfg.d_h, cfg.prefill_len, cfg.decode_len, cfg.n_components
    total = n_pre + n_dec

    means0 = _unit(rng.standard_normal((m, d)))
    steps = rng.standard_normal((n_dec, m, d)) * (cfg.drift / np.sqrt(d))
    means = np.concatenate([np.broadcast_to(means0, (n_pre, m, d)), means0 + np.cumsum(steps, axis=0)])

    comp, active = _component_sequence(cfg, rng)
    noise = rng.standard_normal((total, d)) * cfg.noise_sigma
    keys = means[np.arange(total), comp] + noise
    values = rng.standard_normal((total, d))

    aligned = rng.random(n_dec) < cfg.query_alignment
    q_pick = rng.integers(active.shape[1], size=n_dec)
    q_comp = active[n_pre + np.arange(n_dec), q_pick]
    q_near = means[n_pre + np.arange(n_dec), q_comp] + rng.standard_normal((n_dec, d)) * cfg.query_noise
    q_iso = _unit(rng.standard_normal((n_dec, d)))
    queries = np.where(aligned[:, None], q_near, q_iso)

    return Trace(keys=keys, values=values, queries=queries, prefill_len=n_pre, components=comp)


def trace_bytes(trace: Trace) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, ENC_F32LE, trace.d_h, 0, trace.prefill_len, trace.total_len)
    return header + trace.keys.tobytes() + trace.values.tobytes() + trace.queries.tobytes()


def save_trace(trace: Trace, path) -> None:
    Path(path).write_bytes(trace_bytes(trace))


def expected_payload_size(d_h: int, prefill_len: int, total_len: int) -> int:
    return (2 * total_len + (total_len - prefill_len)) * d_h * 4


def read_header(buf: bytes) -> dict:
    if len(buf) < HEADER_SIZE:
        raise TraceFormatError(f"truncated header: {len(buf)} bytes, need {HEADER_SIZE} (offset 0)")
    magic, version, enc, d_h, reserved, prefill, total = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version} at byte offset 8 (expected {VERSION})")
    if enc != ENC_F32LE:
        raise TraceFormatError(f"unknown element encoding {enc} at byte offset 12")
    if d_h < 1:
        raise TraceFormatError("head dimension 0 at byte offset 16")
    if reserved != 0:
        raise TraceFormatError(f"reserved field is {reserved} at byte offset 20, expected 0")
    if prefill > total:
        raise TraceFormatError(f"prefill_len {prefill} (offset 24) exceeds total_len {total} (offset 32)")
    return {"version": version, "encoding": enc, "d_h": d_h, "prefill_len": prefill, "total_len": total}


def parse_trace(buf: bytes) -> Trace:
    h = read_header(buf)
    d, n_pre, total = h["d_h"], h["prefill_len"], h["total_len"]
    need = expected_payload_size(d, n_pre, total)
    have = len(buf) - HEADER_SIZE
    if have < need:
        raise TraceFormatError(
            f"truncated payload: file ends at byte offset {len(buf)}, expected {HEADER_SIZE + need}"
        )
    if have > need:
        raise TraceFormatError(f"{have - need} trailing bytes after payload end at offset {HEADER_SIZE + need}")
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE)
    kv = total * d
    keys = data[:kv].reshape(total, d)
    values = data[kv : 2 * kv].reshape(total, d)
    queries = data[2 * kv :].reshape(total - n_pre, d)
    return Trace(keys=keys.copy(), values=values.copy(), queries=queries.copy(), prefill_len=n_pre)


def load_trace(path) -> Trace:
    return parse_trace(Path(path).read_bytes())
