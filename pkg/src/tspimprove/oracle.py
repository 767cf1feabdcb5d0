"""Exact K-step 2-opt lookahead used as the imitation teacher.

Every feasible move sequence of length K is scored by the tour cost after
its last move (intermediate steps need not improve).  The teacher's label
is the set of first moves that start a minimum-cost sequence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .features import HistoryBuffer
from .search import SearchState
from .tsp_core import (Instance, SizeLimitError, apply_two_opt, delta_matrix,
                       num_feasible_moves, tour_cost)

TIE_TOL = 1e-9
ENUMERATION_LIMIT = 10 ** 7


@dataclass
class OracleResult:
    optimal_actions: list[tuple[int, int]]
    best_final_cost: float
    one_optimal_sequence: list[tuple[int, int]]


def _best_rest(instance: Instance, tour: np.ndarray, depth: int) -> float:
    """Minimum total delta over all move sequences of length ``depth``."""
    if depth == 0:
        return 0.0
    delta = delta_matrix(instance, tour)
    if depth == 1:
        return float(delta.min())
    best = np.inf
    for i, j in zip(*np.nonzero(np.isfinite(delta))):
        val = delta[i, j] + _best_rest(instance, apply_two_opt(tour, (i, j)), depth - 1)
        best = min(best, val)
    return best


def _move_values(instance: Instance, tour: np.ndarray, depth: int):
    """(moves in lexicographic order, value of the best sequence starting with each)."""
    delta = delta_matrix(instance, tour)
    ii, jj = np.nonzero(np.isfinite(delta))
    moves = list(zip(ii.tolist(), jj.tolist()))
    if depth == 1:
        return moves, delta[ii, jj]
    values = np.array([delta[i, j] + _best_rest(instance, apply_two_opt(tour, (i, j)), depth - 1)
                       for i, j in moves])
    return moves, values


def check_budget(n: int, K: int) -> None:
    size = num_feasible_moves(n) ** K
    if size > ENUMERATION_LIMIT:
        raise SizeLimitError(f"lookahead enumerates {size} sequences for n={n}, K={K}; "
                             f"limit is {ENUMERATION_LIMIT}")


def k_step_lookahead(instance: Instance, tour, K: int = 2) -> OracleResult:
    if K < 1:
        raise ValueError("lookahead depth K must be >= 1")
    tour = np.asarray(tour, dtype=np.int64)
    n = tour.shape[0]
    check_budget(n, K)
    moves, values = _move_values(instance, tour, K)
    best = float(values.min())
    optimal = [m for m, v in zip(moves, values) if v <= best + TIE_TOL]

    # lexicographically first sequence that stays within the tie band
    sequence, current, remaining = [], tour, best
    for depth in range(K, 0, -1):
        if depth == K:
            step_moves, step_values = moves, values
        else:
            step_moves, step_values = _move_values(instance, current, depth)
        k = next(k for k, v in enumerate(step_values) if v <= remaining + TIE_TOL)
        move = step_moves[k]
        remaining -= float(delta_matrix(instance, current)[move])
        sequence.append(move)
        current = apply_two_opt(current, move)
    return OracleResult(optimal, tour_cost(instance, tour) + best, sequence)


def oracle_rollout(instance: Instance, start_tour, K: int = 2, steps: int | None = None,
                   history: HistoryBuffer | None = None):
    """Follow the teacher for ``steps`` moves (default K).

    Returns a list of (SearchState, optimal_actions) pairs, one per step,
    each state recorded before its move.
    """
    steps = K if steps is None else steps
    state = SearchState(instance, np.asarray(start_tour, dtype=np.int64).copy(),
                        history.copy() if history is not None else HistoryBuffer())
    records = []
    for _ in range(steps):
        result = k_step_lookahead(instance, state.tour, K)
        records.append((state.copy(), result.optimal_actions))
        move = result.one_optimal_sequence[0]
        state.tour = apply_two_opt(state.tour, move)
        state.history.push(move)
    return records


def supervision_jsonl(records, instance_id: str = "") -> str:
    lines = []
    for state, actions in records:
        lines.append(json.dumps({"id": instance_id or state.instance.id,
                                 "tour": state.tour.tolist(),
                                 "optimal_actions": [list(map(int, a)) for a in actions]}))
    return "\n".join(lines) + "\n"
