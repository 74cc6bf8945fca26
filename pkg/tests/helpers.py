import numpy as np

from kvremap.core import KVCache


def make_cache(keys, values=None, prefill=None):
    keys = np.asarray(keys, dtype=np.float32)
    if values is None:
        values = np.zeros_like(keys)
    n = keys.shape[0] if prefill is None else prefill
    cache = KVCache.from_prefill(keys[:n], np.asarray(values, dtype=np.float32)[:n])
    for i in range(n, keys.shape[0]):
        cache.append(keys[i], values[i])
    return cache
