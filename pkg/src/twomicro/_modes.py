"""Integer mode-set helpers shared by the numerical modules."""

from __future__ import annotations

import itertools

import numpy as np


def as_mode_array(modes, d: int | None = None) -> np.ndarray:
    arr = np.asarray(modes, dtype=np.int64)
    if arr.ndim == 1:
        if d is None:
            raise ValueError("cannot infer dimension of a flat mode list")
        arr = arr.reshape(-1, d)
    if arr.ndim != 2:
        raise ValueError("modes must be an (n, d) integer array")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"dimension mismatch: modes have d={arr.shape[1]}, expected {d}")
    return arr


def box_modes(d: int, radius: int | None = None, lo=None, hi=None) -> np.ndarray:
    """All integer vectors of a rectangular box, in lexicographic order.

    Either ``radius`` (the cube ``|k|_inf <= radius``) or per-axis ``lo``/``hi``
    bounds (inclusive) must be given.
    """
    if radius is not None:
        lo = [-radius] * d
        hi = [radius] * d
    lo = [int(v) for v in lo]
    hi = [int(v) for v in hi]
    if len(lo) != d or len(hi) != d:
        raise ValueError("box bounds must have length d")
    axes = [range(a, b + 1) for a, b in zip(lo, hi)]
    out = np.array(list(itertools.product(*axes)), dtype=np.int64)
    return out.reshape(-1, d)


def lexsort_modes(modes: np.ndarray) -> np.ndarray:
    """Permutation sorting rows lexicographically (first column most significant)."""
    if len(modes) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(modes.T[::-1])


class ModeIndex:
    """Vectorised lookup of integer vectors inside a fixed mode list."""

    def __init__(self, modes: np.ndarray):
        self.modes = np.asarray(modes, dtype=np.int64)
        n, d = self.modes.shape
        self.d = d
        if n == 0:
            self._lo = np.zeros(d, dtype=np.int64)
            self._ext = np.ones(d, dtype=np.int64)
        else:
            self._lo = self.modes.min(axis=0)
            self._ext = self.modes.max(axis=0) - self._lo + 1
        keys = self._encode(self.modes)
        order = np.argsort(keys, kind="stable")
        self._keys = keys[order]
        self._order = order
        if n > 1 and np.any(np.diff(self._keys) == 0):
            raise ValueError("duplicate modes")

    def _encode(self, q: np.ndarray) -> np.ndarray:
        rel = q - self._lo
        key = np.zeros(len(q), dtype=np.int64)
        for i in range(self.d):
            key = key * self._ext[i] + rel[:, i]
        return key

    def lookup(self, queries) -> np.ndarray:
        """Index of each query row in the mode list, or -1 if absent."""
        q = np.asarray(queries, dtype=np.int64).reshape(-1, self.d)
        out = np.full(len(q), -1, dtype=np.int64)
        if len(self._keys) == 0 or len(q) == 0:
            return out
        inside = np.all((q >= self._lo) & (q < self._lo + self._ext), axis=1)
        if not inside.any():
            return out
        keys = self._encode(q[inside])
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == keys
        idx = np.where(hit, self._order[pos], -1)
        out[inside] = idx
        return out


def pairs_with_difference(rows: ModeIndex, cols: np.ndarray, m) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (r, c) with ``rows[r] - cols[c] == m``."""
    target = cols + np.asarray(m, dtype=np.int64)
    r = rows.lookup(target)
    c = np.nonzero(r >= 0)[0]
    return r[c], c
