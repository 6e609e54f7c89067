"""Packed voxel cells and the lock-free minimum-assign contract.

A cell is one 32-bit word: signed 16-bit distance in millimeters (high
half) and unsigned 16-bit weight (low half). Weight 0 means unobserved.

Candidates are ordered by (|value| asc, weight desc, value asc); an
unobserved cell loses to everything. The order is total, so folding
candidates into a cell in any order — including concurrent interleavings
going through compare-exchange — yields the same winner.
"""

from __future__ import annotations

import threading

import numpy as np

_EMPTY_KEY = np.uint64(0xFFFFFFFFFFFFFFFF)


def pack(value, weight):
    """Pack int16 mm values and uint16 weights into uint32 words."""
    v = np.asarray(value, dtype=np.int16)
    w = np.asarray(weight, dtype=np.uint16)
    return (v.astype(np.uint16).astype(np.uint32) << np.uint32(16)) \
        | w.astype(np.uint32)


def unpack(word):
    """Inverse of pack: (value int16, weight uint16)."""
    word = np.asarray(word, dtype=np.uint32)
    v = (word >> np.uint32(16)).astype(np.uint16).view(np.int16)
    w = (word & np.uint32(0xFFFF)).astype(np.uint16)
    return v, w


def order_key(word):
    """Monotone uint64 key of the candidate total order (smaller wins)."""
    v, w = unpack(word)
    v64 = v.astype(np.int64)
    key = (np.abs(v64).astype(np.uint64) << np.uint64(32)) \
        | ((np.uint64(0xFFFF) ^ w.astype(np.uint64)) << np.uint64(16)) \
        | (v64 >= 0).astype(np.uint64)
    return np.where(w == 0, _EMPTY_KEY, key)


def candidate_wins(new_word: int, old_word: int) -> bool:
    """Scalar version of the total order."""
    return bool(order_key(np.uint32(new_word)) < order_key(np.uint32(old_word)))


def merge_packed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise winner of two packed volumes (the min-combine fold)."""
    return np.where(order_key(b) < order_key(a), b, a)


class AtomicPackedGrid:
    """Shared packed voxel grid with compare-exchange cell updates.

    Emulates a single-word atomic: compare_exchange is the only mutation
    primitive, and min_combine is the retry loop built on it, exiting early
    once the incumbent already wins.
    """

    _N_STRIPES = 64

    def __init__(self, n_cells: int):
        self.words = np.zeros(n_cells, dtype=np.uint32)
        self._locks = [threading.Lock() for _ in range(self._N_STRIPES)]

    def load(self, idx: int) -> int:
        return int(self.words[idx])

    def compare_exchange(self, idx: int, expected: int, new: int) -> int:
        """Atomically: if cell == expected, store new. Returns the prior value."""
        with self._locks[idx % self._N_STRIPES]:
            old = int(self.words[idx])
            if old == expected:
                self.words[idx] = np.uint32(new)
            return old

    def min_combine(self, idx: int, value: int, weight: int) -> None:
        new = int(pack(value, weight))
        assumed = self.load(idx)
        while True:
            if not candidate_wins(new, assumed):
                return
            old = self.compare_exchange(idx, assumed, new)
            if old == assumed:
                return  # we won the swap
            assumed = old  # someone else wrote; re-check against their value
