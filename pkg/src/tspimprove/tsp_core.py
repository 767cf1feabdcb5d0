"""Instances, tours, 2-opt move algebra and an exact small-n solver.

Positions and city indices are 0-based throughout.  A 2-opt move ``(i, j)``
with ``0 <= i < j <= n - 1``, ``j >= i + 2`` and ``(i, j) != (0, n - 1)``
removes the tour edges starting at positions ``i`` and ``j`` and reverses
the segment at positions ``i + 1 .. j``.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

MATRIX_CACHE_THRESHOLD = 512
EXACT_MAX_N = 16


class InvalidInputError(ValueError):
    pass


class InvalidMoveError(ValueError):
    pass


class ParseError(ValueError):
    pass


class SizeLimitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Instance:
    coords: np.ndarray
    id: str = ""
    opt_cost: float | None = None
    cache_matrix: bool = True
    _matrix: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise InvalidInputError(f"coords must have shape (n, 2), got {coords.shape}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def dist(self, a: int, b: int) -> float:
        dx = self.coords[a, 0] - self.coords[b, 0]
        dy = self.coords[a, 1] - self.coords[b, 1]
        return math.sqrt(dx * dx + dy * dy)

    def distance_matrix(self) -> np.ndarray:
        """Full pairwise matrix; cached only above ``MATRIX_CACHE_THRESHOLD`` cities."""
        if self._matrix:
            return self._matrix[0]
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        mat = np.sqrt((diff * diff).sum(-1))
        if self.n > MATRIX_CACHE_THRESHOLD and self.cache_matrix:
            mat.setflags(write=False)
            self._matrix.append(mat)
        return mat

    def to_dict(self) -> dict:
        out = {"id": self.id, "n": self.n, "coords": self.coords.tolist()}
        if self.opt_cost is not None:
            out["opt_cost"] = self.opt_cost
        return out

    def with_opt_cost(self, opt_cost: float) -> "Instance":
        return Instance(self.coords, self.id, float(opt_cost), self.cache_matrix)


def as_tour(tour, n: int | None = None) -> np.ndarray:
    order = np.asarray(tour, dtype=np.int64)
    if order.ndim != 1:
        raise InvalidInputError("tour must be a 1-d sequence of city indices")
    if n is not None and order.shape[0] != n:
        raise InvalidInputError(f"tour has {order.shape[0]} cities, instance has {n}")
    return order


def is_valid_tour(tour, n: int) -> bool:
    order = np.asarray(tour)
    return order.shape == (n,) and np.array_equal(np.sort(order), np.arange(n))


def check_tour(instance: Instance, tour) -> np.ndarray:
    order = as_tour(tour, instance.n)
    if not is_valid_tour(order, instance.n):
        raise InvalidInputError("tour is not a permutation of the instance's cities")
    return order


def tour_cost(instance: Instance, tour) -> float:
    """Closed tour length, summed over positions 0..n-1 in order."""
    if instance.n < 3:
        raise InvalidInputError(f"tour cost needs n >= 3, got n={instance.n}")
    order = check_tour(instance, tour)
    pts = instance.coords[order]
    seg = np.roll(pts, -1, axis=0) - pts
    lengths = np.sqrt((seg * seg).sum(-1))
    total = 0.0
    for x in lengths.tolist():
        total += x
    return total


def batch_tour_costs(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Costs for a batch: coords (B, n, 2), tours (B, n); bit-identical to tour_cost."""
    pts = np.take_along_axis(coords, tours[..., None], axis=1)
    seg = np.roll(pts, -1, axis=1) - pts
    # cumsum adds left to right, matching tour_cost (sum() would go pairwise)
    return np.cumsum(np.sqrt((seg * seg).sum(-1)), axis=-1)[..., -1]


def num_feasible_moves(n: int) -> int:
    return n * (n - 3) // 2 if n >= 4 else 0


def is_feasible_move(n: int, move) -> bool:
    i, j = move
    return 0 <= i < j <= n - 1 and j >= i + 2 and not (i == 0 and j == n - 1)


def feasible_moves(n: int) -> list[tuple[int, int]]:
    if n < 4:
        return []
    return [(i, j) for i in range(n) for j in range(i + 2, n) if not (i == 0 and j == n - 1)]


def feasible_mask(n: int) -> np.ndarray:
    """(n, n) boolean matrix, True exactly on canonical upper-triangle feasible cells."""
    mask = np.triu(np.ones((n, n), dtype=bool), k=2)
    if n >= 2:
        mask[0, n - 1] = False
    return mask


def apply_two_opt(tour, move) -> np.ndarray:
    order = as_tour(tour)
    n = order.shape[0]
    if not is_feasible_move(n, move):
        raise InvalidMoveError(f"move {tuple(move)} is not a feasible 2-opt move for n={n}")
    i, j = move
    out = order.copy()
    out[i + 1:j + 1] = order[i + 1:j + 1][::-1]
    return out


def two_opt_delta(instance: Instance, tour, move) -> float:
    order = as_tour(tour)
    n = order.shape[0]
    if not is_feasible_move(n, move):
        raise InvalidMoveError(f"move {tuple(move)} is not a feasible 2-opt move for n={n}")
    i, j = move
    a, b = order[i], order[i + 1]
    c, d = order[j], order[(j + 1) % n]
    dist = instance.dist
    return dist(a, c) + dist(b, d) - dist(a, b) - dist(c, d)


def position_distances(coords: np.ndarray, tour: np.ndarray) -> np.ndarray:
    """Distances between the cities at tour positions p and q, shape (n, n)."""
    pts = coords[tour]
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def delta_matrix(instance: Instance, tour) -> np.ndarray:
    """All 2-opt deltas at once; infeasible cells hold +inf."""
    order = as_tour(tour)
    n = order.shape[0]
    pd = position_distances(instance.coords, order)
    nxt = np.roll(np.arange(n), -1)
    edge = pd[np.arange(n), nxt]
    delta = pd + pd[np.ix_(nxt, nxt)] - edge[:, None] - edge[None, :]
    delta[~feasible_mask(n)] = np.inf
    return delta


def _instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def generate_uniform(n: int, seed: int, index: int = 0, id: str | None = None) -> Instance:
    """Uniform unit-square instance keyed by ``(seed, index)``; batch order never matters."""
    if n < 4:
        raise InvalidInputError(f"generated instances need n >= 4, got {n}")
    coords = _instance_rng(seed, index).random((n, 2))
    return Instance(coords, id if id is not None else f"u{n}-s{seed}-{index}")


def random_tour(n: int, seed: int | np.random.Generator) -> np.ndarray:
    if n < 3:
        raise InvalidInputError(f"random tours need n >= 3, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.permutation(n).astype(np.int64)


def exact_optimum(instance: Instance) -> tuple[float, np.ndarray]:
    """Held-Karp dynamic programme over subsets; city 0 is the fixed start."""
    n = instance.n
    if n > EXACT_MAX_N:
        raise SizeLimitError(f"exact_optimum supports n <= {EXACT_MAX_N}, got n={n}")
    if n < 3:
        raise InvalidInputError(f"exact_optimum needs n >= 3, got n={n}")
    dist = instance.distance_matrix()
    m = n - 1  # cities 1..n-1 are bit positions 0..m-1
    full = 1 << m
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int64)
    for j in range(m):
        dp[1 << j, j] = dist[0, j + 1]
    sub = dist[1:, 1:]
    for mask in range(1, full):
        if mask & (mask - 1) == 0:
            continue
        for j in range(m):
            bit = 1 << j
            if not mask & bit:
                continue
            row = dp[mask ^ bit] + sub[:, j]
            k = int(np.argmin(row))
            dp[mask, j] = row[k]
            parent[mask, j] = k
    closing = dp[full - 1] + dist[1:, 0]
    last = int(np.argmin(closing))
    order = []
    mask, j = full - 1, last
    while j >= 0:
        order.append(j + 1)
        k = parent[mask, j]
        mask ^= 1 << j
        j = int(k)
    order.append(0)
    tour = np.array(order[::-1], dtype=np.int64)
    # recompute in the canonical summation order for bit-stable reporting
    return tour_cost(instance, tour), tour


def brute_force_optimum(instance: Instance) -> tuple[float, np.ndarray]:
    """Enumerate all (n-1)!/2 tours; test oracle for tiny n."""
    n = instance.n
    best, best_tour = math.inf, None
    for perm in itertools.permutations(range(1, n)):
        if perm[0] > perm[-1]:
            continue
        tour = (0,) + perm
        cost = tour_cost(instance, tour)
        if cost < best:
            best, best_tour = cost, tour
    return best, np.array(best_tour, dtype=np.int64)


# --- parsing / serialisation ---------------------------------------------

def _parse_tsplib(text: str) -> Instance:
    name, dim, weight_type = "", None, None
    lines = text.splitlines()
    coords: dict[int, tuple[float, float]] = {}
    in_coords = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        if in_coords:
            parts = line.split()
            if len(parts) != 3:
                if ":" in line or parts[0].isalpha():
                    in_coords = False
                else:
                    raise ParseError(f"line {lineno}: malformed coordinate line {raw!r}")
            if in_coords:
                try:
                    node, x, y = int(parts[0]), float(parts[1]), float(parts[2])
                except ValueError:
                    raise ParseError(f"line {lineno}: malformed coordinate line {raw!r}") from None
                coords[node] = (x, y)
                continue
        if line.startswith("NODE_COORD_SECTION"):
            if weight_type is None:
                raise ParseError(f"line {lineno}: NODE_COORD_SECTION before EDGE_WEIGHT_TYPE")
            in_coords = True
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ParseError(f"line {lineno}: expected 'KEY : VALUE', got {raw!r}")
        key, value = key.strip().upper(), value.strip()
        if key == "NAME":
            name = value
        elif key == "DIMENSION":
            try:
                dim = int(value)
            except ValueError:
                raise ParseError(f"line {lineno}: bad DIMENSION {value!r}") from None
        elif key == "EDGE_WEIGHT_TYPE":
            if value != "EUC_2D":
                raise ParseError(f"line {lineno}: unsupported EDGE_WEIGHT_TYPE {value!r} (only EUC_2D)")
            weight_type = value
        elif key in ("TYPE", "COMMENT"):
            pass
        else:
            raise ParseError(f"line {lineno}: unsupported keyword {key!r}")
    if dim is None:
        raise ParseError("missing DIMENSION")
    if sorted(coords) != list(range(1, dim + 1)):
        raise ParseError(f"expected node ids 1..{dim}, got {len(coords)} coordinate lines")
    return Instance(np.array([coords[k] for k in range(1, dim + 1)]), name)


def _parse_json_line(line: str, lineno: int = 1) -> Instance:
    try:
        obj = json.loads(line)
        coords = np.array(obj["coords"], dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coords must be a list of [x, y] pairs")
        if "n" in obj and int(obj["n"]) != coords.shape[0]:
            raise ValueError(f"n={obj['n']} but {coords.shape[0]} coordinate pairs")
        opt = obj.get("opt_cost")
        return Instance(coords, str(obj.get("id", f"line{lineno}")),
                        None if opt is None else float(opt))
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"line {lineno}: {exc}") from None


def parse_instance(text: str, format: str = "tsplib_euc2d") -> Instance:
    if format == "tsplib_euc2d":
        return _parse_tsplib(text)
    if format == "jsonl":
        instances = parse_instances(text, "jsonl")
        if len(instances) != 1:
            raise ParseError(f"expected exactly one instance, found {len(instances)}")
        return instances[0]
    raise ParseError(f"unknown format {format!r}")


def parse_instances(text: str, format: str = "jsonl") -> list[Instance]:
    if format == "tsplib_euc2d":
        return [_parse_tsplib(text)]
    if format != "jsonl":
        raise ParseError(f"unknown format {format!r}")
    return [_parse_json_line(line, k) for k, line in enumerate(text.splitlines(), start=1)
            if line.strip()]


def to_tsplib(instance: Instance) -> str:
    lines = [f"NAME : {instance.id}", "TYPE : TSP", f"DIMENSION : {instance.n}",
             "EDGE_WEIGHT_TYPE : EUC_2D", "NODE_COORD_SECTION"]
    lines += [f"{k + 1} {x!r} {y!r}" for k, (x, y) in enumerate(instance.coords.tolist())]
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def to_jsonl(instances) -> str:
    return "".join(json.dumps(inst.to_dict()) + "\n" for inst in instances)


def load_instances(path) -> list[Instance]:
    with open(path) as fh:
        text = fh.read()
    fmt = "jsonl" if text.lstrip().startswith("{") else "tsplib_euc2d"
    return parse_instances(text, fmt)


def tour_record(instance_id: str, tour, cost: float) -> dict:
    return {"id": instance_id, "order": [int(c) for c in tour], "cost": float(cost)}


def load_tours(path) -> dict[str, list[np.ndarray]]:
    """Tour file: one JSON object ``{"id", "order", "cost"}`` per line (or a JSON list)."""
    with open(path) as fh:
        text = fh.read().strip()
    if text.startswith("["):
        records = json.loads(text)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    tours: dict[str, list[np.ndarray]] = {}
    for rec in records:
        tours.setdefault(str(rec["id"]), []).append(np.asarray(rec["order"], dtype=np.int64))
    return tours
