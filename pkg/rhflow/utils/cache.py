"""
LRU cache for derived geometry, keyed by array digests.
"""

import hashlib
import threading
from dataclasses import dataclass
from typing import Dict, Generic, TypeVar, Optional, Any, Callable

import numpy as np

T = TypeVar('T')


@dataclass
class CacheEntry(Generic[T]):
    value: T
    last_access: int
    access_count: int = 0


def array_key(*parts: Any) -> str:
    """Digest of arrays and scalars identifying a field snapshot."""
    digest = hashlib.sha1()
    for part in parts:
        if isinstance(part, np.ndarray):
            arr = np.ascontiguousarray(part)
            digest.update(str(arr.shape).encode())
            digest.update(str(arr.dtype).encode())
            digest.update(arr.tobytes())
        else:
            digest.update(repr(part).encode())
    return digest.hexdigest()


class LRUCache:
    """Thread-safe LRU cache with hit/miss metrics"""

    def __init__(self, max_size: int = 64):
        self.max_size = max_size
        self._cache: Dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        self._clock = 0
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> Optional[Any]:
        with self._lock:
            self._clock += 1
            entry = self._cache.get(key)
            if entry is None:
                self.misses += 1
                return None
            entry.access_count += 1
            entry.last_access = self._clock
            self.hits += 1
            return entry.value

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            self._clock += 1
            if key not in self._cache and len(self._cache) >= self.max_size:
                oldest = min(self._cache.items(), key=lambda x: x[1].last_access)[0]
                del self._cache[oldest]
            self._cache[key] = CacheEntry(value=value, last_access=self._clock)

    def get_or_compute(self, key: str, compute: Callable[[], Any]) -> Any:
        value = self.get(key)
        if value is None:
            value = compute()
            self.put(key, value)
        return value

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()

    def get_metrics(self) -> Dict[str, Any]:
        """Get cache performance metrics"""
        total_requests = self.hits + self.misses
        hit_rate = self.hits / total_requests if total_requests > 0 else 0
        return {
            'size': len(self._cache),
            'max_size': self.max_size,
            'hit_rate': hit_rate,
            'hits': self.hits,
            'misses': self.misses
        }
