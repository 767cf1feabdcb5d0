"""Classical local-search baselines with anytime traces.

All three are deterministic: ties on delta are broken towards the
lexicographically smallest move.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .tsp_core import (Instance, SizeLimitError, apply_two_opt, check_tour, delta_matrix,
                       position_distances, tour_cost)

IMPROVE_TOL = 1e-12
THREE_OPT_MAX_N = 500


@dataclass
class AnytimeTrace:
    steps: list[tuple[int, float, float, float]] = field(default_factory=list)
    reason: str = "budget"
    moves: list[tuple] = field(default_factory=list)  # move executed before step k+1

    def add(self, cost: float, best: float, seconds: float) -> None:
        self.steps.append((len(self.steps), cost, best, seconds))

    @property
    def best(self) -> list[float]:
        return [row[2] for row in self.steps]

    @property
    def final_best(self) -> float:
        return self.steps[-1][2]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "cost", "best", "seconds"])
        for step, cost, best, secs in self.steps:
            writer.writerow([step, repr(cost), repr(best), f"{secs:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"reason": self.reason,
                           "steps": [{"step": s, "cost": c, "best": b, "seconds": t}
                                     for s, c, b, t in self.steps]})


def _best_move(delta: np.ndarray, allowed: np.ndarray | None = None):
    """Lexicographically smallest move within IMPROVE_TOL of the minimum delta."""
    cand = delta if allowed is None else np.where(allowed, delta, np.inf)
    best = cand.min()
    if not np.isfinite(best):
        return None, best
    ii, jj = np.nonzero(cand <= best + IMPROVE_TOL)
    return (int(ii[0]), int(jj[0])), float(best)


def greedy_two_opt(instance: Instance, start, budget: int):
    """Best-improvement 2-opt descent for at most ``budget`` moves."""
    t0 = time.perf_counter()
    tour = check_tour(instance, start).copy()
    cost = tour_cost(instance, tour)
    trace = AnytimeTrace()
    trace.add(cost, cost, 0.0)
    for _ in range(budget):
        move, delta = _best_move(delta_matrix(instance, tour))
        if move is None or delta >= -IMPROVE_TOL:
            trace.reason = "local_optimum"
            break
        tour = apply_two_opt(tour, move)
        cost = tour_cost(instance, tour)
        trace.moves.append(move)
        trace.add(cost, cost, time.perf_counter() - t0)
    return tour, trace


# 3-opt reconnections.  Cutting after positions i < j < k leaves segments
#   A = ..a | B = b..c | C = d..e | D = f..
# with a=t[i], b=t[i+1], c=t[j], d=t[j+1], e=t[k], f=t[k+1].
# Removed edges: (a,b) (c,d) (e,f).  Non-identity reconnections:
#   0  A B' C  D    added (a,c) (b,d) (e,f)
#   1  A B  C' D    added (a,b) (c,e) (d,f)
#   2  A C' B' D    added (a,e) (d,c) (b,f)
#   3  A B' C' D    added (a,c) (b,e) (d,f)
#   4  A C  B  D    added (a,d) (e,b) (c,f)
#   5  A C  B' D    added (a,d) (e,c) (b,f)
#   6  A C' B  D    added (a,e) (d,b) (c,f)
_RECONNECT = [
    (("a", "c"), ("b", "d"), ("e", "f")),
    (("a", "b"), ("c", "e"), ("d", "f")),
    (("a", "e"), ("d", "c"), ("b", "f")),
    (("a", "c"), ("b", "e"), ("d", "f")),
    (("a", "d"), ("e", "b"), ("c", "f")),
    (("a", "d"), ("e", "c"), ("b", "f")),
    (("a", "e"), ("d", "b"), ("c", "f")),
]


def three_opt_apply(tour: np.ndarray, i: int, j: int, k: int, kind: int) -> np.ndarray:
    A, B, C, D = tour[:i + 1], tour[i + 1:j + 1], tour[j + 1:k + 1], tour[k + 1:]
    parts = {
        0: (A, B[::-1], C, D),
        1: (A, B, C[::-1], D),
        2: (A, C[::-1], B[::-1], D),
        3: (A, B[::-1], C[::-1], D),
        4: (A, C, B, D),
        5: (A, C, B[::-1], D),
        6: (A, C[::-1], B, D),
    }[kind]
    return np.concatenate(parts)


def _three_opt_scan(pd: np.ndarray, n: int):
    """Best (delta, i, j, k, kind) over all cut triples, lexicographic on ties."""
    nxt = np.roll(np.arange(n), -1)
    best = (np.inf, None)
    for i in range(n - 2):
        jj, kk = np.triu_indices(n, k=1)
        sel = (jj > i) & (kk > jj)
        jj, kk = jj[sel], kk[sel]
        if jj.size == 0:
            continue
        pos = {"a": np.full_like(jj, i), "b": np.full_like(jj, i + 1), "c": jj, "d": nxt[jj],
               "e": kk, "f": nxt[kk]}
        removed = pd[i, i + 1] + pd[jj, nxt[jj]] + pd[kk, nxt[kk]]
        deltas = np.stack([pd[pos[p], pos[q]] + pd[pos[r], pos[s]] + pd[pos[u], pos[v]] - removed
                           for (p, q), (r, s), (u, v) in _RECONNECT], axis=1)  # (M, 7)
        m = deltas.min()
        if m < best[0] - IMPROVE_TOL:
            r, kind = np.argwhere(deltas <= m + IMPROVE_TOL)[0]
            best = (float(m), (i, int(jj[r]), int(kk[r]), int(kind)))
    return best


def greedy_three_opt(instance: Instance, start, budget: int, max_n: int = THREE_OPT_MAX_N):
    n = instance.n
    if n < 6:
        raise ValueError(f"greedy 3-opt needs n >= 6, got n={n}")
    if n > max_n:
        raise SizeLimitError(f"greedy 3-opt is O(n^3) per step; n={n} exceeds max_n={max_n}")
    t0 = time.perf_counter()
    tour = check_tour(instance, start).copy()
    cost = tour_cost(instance, tour)
    trace = AnytimeTrace()
    trace.add(cost, cost, 0.0)
    for _ in range(budget):
        delta, move = _three_opt_scan(position_distances(instance.coords, tour), n)
        if move is None or delta >= -IMPROVE_TOL:
            trace.reason = "local_optimum"
            break
        tour = three_opt_apply(tour, *move)
        cost = tour_cost(instance, tour)
        trace.moves.append(move)
        trace.add(cost, cost, time.perf_counter() - t0)
    return tour, trace


def tabu_search(instance: Instance, start, budget: int, tenure: int = 8,
                aspiration: bool = True):
    """Best-admissible 2-opt moves with a FIFO tabu list of undirected moves.

    Returns the best tour seen, not the final one.
    """
    t0 = time.perf_counter()
    tour = check_tour(instance, start).copy()
    n = tour.shape[0]
    cost = tour_cost(instance, tour)
    best_cost, best_tour = cost, tour.copy()
    trace = AnytimeTrace()
    trace.add(cost, best_cost, 0.0)
    tabu: list[tuple[int, int]] = []
    for _ in range(budget):
        delta = delta_matrix(instance, tour)
        if not np.isfinite(delta).any():
            trace.reason = "local_optimum"
            break
        active = list(tabu)
        while True:
            allowed = np.ones((n, n), dtype=bool)
            for i, j in active:
                allowed[i, j] = allowed[j, i] = False
            if aspiration:
                allowed |= cost + delta < best_cost - IMPROVE_TOL
            move, _ = _best_move(delta, allowed)
            if move is not None:
                break
            active.pop(0)  # liveness: release the oldest tabu entry
        tour = apply_two_opt(tour, move)
        cost = tour_cost(instance, tour)
        if cost < best_cost:
            best_cost, best_tour = cost, tour.copy()
        trace.moves.append(move)
        if tenure > 0:
            tabu.append(move)
            del tabu[:-tenure]
        trace.add(cost, best_cost, time.perf_counter() - t0)
    return best_tour, trace
