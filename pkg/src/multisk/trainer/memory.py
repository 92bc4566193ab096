"""FIFO memory bank of recent embeddings."""

from __future__ import annotations

import numpy as np

DEFAULT_CAPACITY = 5500


class MemoryBank:
    """
    Per-(space, modality) ring buffers holding the most recent ``capacity`` rows.

    Entries are stored detached (copied) and evicted oldest-first.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self._memory: dict[tuple[str, str], np.ndarray] = {}
        self._ptr: dict[tuple[str, str], int] = {}
        self._size: dict[tuple[str, str], int] = {}

    def push(self, key: tuple[str, str], values: np.ndarray) -> None:
        if self.capacity == 0:
            return
        values = np.asarray(values, dtype=np.float64)
        if key not in self._memory:
            self._memory[key] = np.zeros((self.capacity, values.shape[1]))
            self._ptr[key] = 0
            self._size[key] = 0
        memory = self._memory[key]
        if values.shape[1] != memory.shape[1]:
            raise ValueError(
                f"Bank {key} stores width {memory.shape[1]}, got width {values.shape[1]}"
            )
        values = values[-self.capacity :]
        n = len(values)
        ptr = self._ptr[key]
        residual = self.capacity - ptr
        if residual < n:
            memory[ptr:] = values[:residual]
            memory[: n - residual] = values[residual:]
        else:
            memory[ptr : ptr + n] = values
        self._ptr[key] = (ptr + n) % self.capacity
        self._size[key] = min(self.capacity, self._size[key] + n)

    def contents(self, key: tuple[str, str]) -> np.ndarray:
        """Stored rows for ``key``, oldest first."""
        size = self._size.get(key, 0)
        if size == 0:
            return np.zeros((0, 0))
        memory, ptr = self._memory[key], self._ptr[key]
        if size < self.capacity:
            return memory[:size].copy()
        return np.concatenate([memory[ptr:], memory[:ptr]])

    def contexts(self) -> dict[tuple[str, str], np.ndarray]:
        return {key: self.contents(key) for key in self._memory if self._size[key]}

    def size(self, key: tuple[str, str]) -> int:
        return self._size.get(key, 0)

    def __len__(self) -> int:
        return max(self._size.values(), default=0)
