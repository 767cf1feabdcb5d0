"""Batched improvement rollouts for the neural (and uniform-random) 2-opt policies."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .features import HIST_LEN, HistoryBuffer
from .policy import EdgePolicy, PolicyOutput, action_distribution, action_mask, sample_and_logprob
from .tsp_core import Instance, batch_tour_costs, check_tour, tour_cost


@dataclass
class SearchState:
    """One MDP state: instance, current tour and the action history."""

    instance: Instance
    tour: np.ndarray
    history: HistoryBuffer = field(default_factory=HistoryBuffer)

    @property
    def cost(self) -> float:
        return tour_cost(self.instance, self.tour)

    def copy(self) -> "SearchState":
        return SearchState(self.instance, self.tour.copy(), self.history.copy())


class Batch:
    """B same-size states advanced in lock-step."""

    def __init__(self, coords, tours, history=None, hist_len: int = HIST_LEN):
        self.coords = np.asarray(coords, dtype=np.float64)
        self.tours = np.array(tours, dtype=np.int64)
        B = self.tours.shape[0]
        if history is None:
            history = np.full((B, hist_len, 2), -1, dtype=np.int64)
        self.history = np.array(history, dtype=np.int64)
        self.costs = batch_tour_costs(self.coords, self.tours)
        self.best_costs = self.costs.copy()
        self.best_tours = self.tours.copy()

    @classmethod
    def from_states(cls, states: list[SearchState]) -> "Batch":
        return cls(np.stack([s.instance.coords for s in states]),
                   np.stack([s.tour for s in states]),
                   np.stack([s.history.entries for s in states]))

    @property
    def size(self) -> int:
        return self.tours.shape[0]

    @property
    def n(self) -> int:
        return self.tours.shape[1]

    def state(self, b: int, instance: Instance | None = None) -> SearchState:
        inst = instance or Instance(self.coords[b])
        hist = HistoryBuffer(self.history.shape[1])
        hist.entries = self.history[b].copy()
        return SearchState(inst, self.tours[b].copy(), hist)

    def apply(self, moves: np.ndarray, active: np.ndarray | None = None) -> None:
        """Reverse positions i+1..j of each active row and push the move to history."""
        B = self.size
        active = np.ones(B, dtype=bool) if active is None else active
        for b in np.flatnonzero(active):
            i, j = moves[b]
            self.tours[b, i + 1:j + 1] = self.tours[b, i + 1:j + 1][::-1].copy()
        if self.history.shape[1] > 0:
            rolled = np.concatenate([self.history[:, 1:], moves[:, None, :]], axis=1)
            self.history = np.where(active[:, None, None], rolled, self.history)
        self.costs = batch_tour_costs(self.coords, self.tours)
        better = self.costs < self.best_costs
        self.best_costs = np.where(better, self.costs, self.best_costs)
        self.best_tours[better] = self.tours[better]

    def replicate(self, g: int) -> "Batch":
        """Each row repeated ``g`` times consecutively (row b*g + k is copy k of row b)."""
        out = Batch.__new__(Batch)
        out.coords = np.repeat(self.coords, g, axis=0)
        out.tours = np.repeat(self.tours, g, axis=0)
        out.history = np.repeat(self.history, g, axis=0)
        out.costs = np.repeat(self.costs, g)
        out.best_costs = out.costs.copy()
        out.best_tours = out.tours.copy()
        return out


def uniform_output(n: int, mask: np.ndarray) -> PolicyOutput:
    logits = torch.zeros(mask.shape, dtype=torch.float64)
    return action_distribution(logits, mask)


def policy_output(policy: EdgePolicy | None, batch: Batch, recency: bool | None = None,
                  uniform_mask_len: int = 8) -> PolicyOutput:
    """Distribution for every row; ``policy=None`` is the uniform-random policy.

    ``recency=None`` defers to the policy config (the uniform policy masks).
    """
    if policy is None:
        mask_len = 0 if recency is False else uniform_mask_len
        return uniform_output(batch.n, action_mask(batch.n, batch.history, mask_len))
    with torch.no_grad():
        return policy.distribution(batch.coords, batch.tours, batch.history, recency=recency)


@dataclass
class Rollout:
    """Per-step record of a batched rollout; arrays indexed [step, row]."""

    tours: np.ndarray       # (T, B, n) tour before the action
    history: np.ndarray     # (T, B, K, 2) history before the action
    moves: np.ndarray       # (T, B, 2)
    log_probs: np.ndarray   # (T, B)
    costs: np.ndarray       # (T + 1, B) cost before step 0 and after every step


def rollout(policy: EdgePolicy | None, batch: Batch, steps: int, rngs, greedy: bool = False,
            recency: bool | None = None, record: bool = False, active_steps: np.ndarray | None = None):
    """Advance ``batch`` in place for ``steps`` policy moves.

    ``active_steps`` (B,) optionally limits row b to its first
    ``active_steps[b]`` moves (used by the warmup).  Returns a Rollout when
    ``record`` is set.
    """
    tours, hists, moves_rec, logp_rec = [], [], [], []
    costs = [batch.costs.copy()]
    for t in range(steps):
        active = None if active_steps is None else active_steps > t
        if active is not None and not active.any():
            break
        out = policy_output(policy, batch, recency)
        moves, logp = sample_and_logprob(out, rngs, greedy=greedy)
        if record:
            tours.append(batch.tours.copy())
            hists.append(batch.history.copy())
            moves_rec.append(moves)
            logp_rec.append(logp)
        batch.apply(moves, active)
        costs.append(batch.costs.copy())
    if record:
        return Rollout(np.stack(tours), np.stack(hists), np.stack(moves_rec),
                       np.stack(logp_rec), np.stack(costs))
    return None


@dataclass
class Trace:
    """Anytime trace: best-so-far per step plus wall-clock seconds."""

    costs: list = field(default_factory=list)
    best: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    reason: str = "budget"

    def rows(self):
        return [(k, c, b, s) for k, (c, b, s) in enumerate(zip(self.costs, self.best, self.seconds))]


def improve_batch(policy: EdgePolicy | None, coords, tours, budget: int, rngs,
                  greedy: bool = False, recency: bool | None = None, time_limit: float | None = None):
    """Run a policy for ``budget`` steps on B tours of one instance size.

    Returns (best_tours, traces); trace k has ``budget + 1`` rows unless the
    time limit cuts it short.
    """
    batch = Batch(coords, tours)
    traces = [Trace() for _ in range(batch.size)]
    start = time.perf_counter()

    def record():
        now = time.perf_counter() - start
        for b, tr in enumerate(traces):
            tr.costs.append(float(batch.costs[b]))
            tr.best.append(float(batch.best_costs[b]))
            tr.seconds.append(now)

    record()
    for _ in range(budget):
        if time_limit is not None and time.perf_counter() - start >= time_limit:
            for tr in traces:
                tr.reason = "time_limit"
            break
        out = policy_output(policy, batch, recency)
        moves, _ = sample_and_logprob(out, rngs, greedy=greedy)
        batch.apply(moves)
        record()
    return batch.best_tours.copy(), traces


def start_tours(instance: Instance, tours) -> np.ndarray:
    return np.stack([check_tour(instance, t) for t in tours])
