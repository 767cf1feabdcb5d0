"""Edge-token features for a tour.

Each of the ``n`` rows describes the directed tour edge ``u_k -> v_k`` with
``u_k = tour[k]`` and ``v_k = tour[k + 1]`` (cyclic).  Column layout:

    0-1   u coordinates          7-8   cos/sin turn at u
    2-3   v coordinates          9-10  cos/sin turn at v
    4     edge length            11    length / mean of neighbouring lengths
    5-6   unit direction         12    z-score of length over the tour
                                 13    action-history frequency of position k
"""
from __future__ import annotations

import numpy as np

EPS = 1e-6
NUM_FEATURES = 14
HIST_LEN = 16

COL_U = slice(0, 2)
COL_V = slice(2, 4)
COL_LEN = 4
COL_DIR = slice(5, 7)
COL_TURN_U = slice(7, 9)
COL_TURN_V = slice(9, 11)
COL_REL_LEN = 11
COL_Z = 12
COL_HIST = 13


class HistoryBuffer:
    """FIFO of executed moves in tour-position space, padded with -1."""

    def __init__(self, capacity: int = HIST_LEN, entries=None):
        self.capacity = capacity
        self.entries = np.full((capacity, 2), -1, dtype=np.int64)
        if entries is not None:
            for move in entries:
                self.push(move)

    def push(self, move) -> None:
        if self.capacity == 0:
            return
        self.entries[:-1] = self.entries[1:]
        self.entries[-1] = move

    def valid(self) -> np.ndarray:
        return self.entries[self.entries[:, 0] >= 0]

    def recent(self, m: int) -> np.ndarray:
        """The last ``m`` valid moves, oldest first."""
        valid = self.valid()
        return valid[len(valid) - min(m, len(valid)):]

    def copy(self) -> "HistoryBuffer":
        out = HistoryBuffer(self.capacity)
        out.entries = self.entries.copy()
        return out

    def __len__(self) -> int:
        return int((self.entries[:, 0] >= 0).sum())


def edge_sequence(tour) -> list[tuple[int, int]]:
    order = [int(c) for c in tour]
    return list(zip(order, order[1:] + order[:1]))


def history_frequency(entries: np.ndarray, n: int) -> np.ndarray:
    """Per-position endpoint frequency; entries (..., K, 2) with -1 padding."""
    entries = np.asarray(entries)
    ends = entries.reshape(*entries.shape[:-2], -1)
    counts = (ends[..., None] == np.arange(n)).sum(-2).astype(np.float64)
    total = (ends >= 0).sum(-1, keepdims=True).astype(np.float64)
    return np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)


def compute_features_batch(coords: np.ndarray, tours: np.ndarray,
                           history: np.ndarray | None = None) -> np.ndarray:
    """Features for a batch of tours: coords (B, n, 2), tours (B, n) -> (B, n, 14)."""
    coords = np.asarray(coords, dtype=np.float64)
    tours = np.asarray(tours)
    B, n = tours.shape
    x = np.take_along_axis(coords, tours[..., None], axis=1)  # city at position k
    x_next = np.roll(x, -1, axis=1)
    b = x_next - x                       # edge k
    a = np.roll(b, 1, axis=1)            # edge k-1, ends at u_k
    c = np.roll(b, -1, axis=1)           # edge k+1, starts at v_k
    d = np.sqrt((b * b).sum(-1))
    d_prev = np.roll(d, 1, axis=1)
    d_next = np.roll(d, -1, axis=1)

    def turn(p, q, lp, lq):
        denom = np.maximum(lp * lq, EPS)
        cos = (p * q).sum(-1) / denom
        sin = (p[..., 0] * q[..., 1] - p[..., 1] * q[..., 0]) / denom
        return cos, sin

    cos_u, sin_u = turn(a, b, d_prev, d)
    cos_v, sin_v = turn(b, c, d, d_next)
    rel_len = d / np.maximum(0.5 * (d_prev + d_next), EPS)
    mu = d.mean(-1, keepdims=True)
    sigma = np.sqrt(((d - mu) ** 2).mean(-1, keepdims=True))
    z = (d - mu) / np.maximum(sigma, EPS)

    out = np.empty((B, n, NUM_FEATURES), dtype=np.float64)
    out[..., COL_U] = x
    out[..., COL_V] = x_next
    out[..., COL_LEN] = d
    out[..., COL_DIR] = b / np.maximum(d, EPS)[..., None]
    out[..., 7], out[..., 8] = cos_u, sin_u
    out[..., 9], out[..., 10] = cos_v, sin_v
    out[..., COL_REL_LEN] = rel_len
    out[..., COL_Z] = z
    out[..., COL_HIST] = 0.0 if history is None else history_frequency(history, n)
    return out


def compute_features(instance, tour, history: HistoryBuffer | None = None) -> np.ndarray:
    hist = None if history is None else history.entries[None]
    return compute_features_batch(instance.coords[None], np.asarray(tour)[None], hist)[0]
