"""Command-line harness: data generation, training, improvement runs and reports.

Report JSON (``report.json`` in every improve/refine output directory)::

    {
      "run":       run settings (method, budget, restarts, decode, seeds, ...),
      "dataset":   {"name", "sha256", "count"},
      "instances": [{"id", "n", "best_cost", "restart_bests", "initial_cost",
                     "opt_cost", "gap", "steps", "search_seconds"}],
      "aggregate": {"count", "mean_cost", "std_cost", "mean_gap", "mean_search_seconds"}
    }

Every timing field has "seconds" in its key; everything else is a pure
function of the inputs and seeds.  ``gap`` is 100 * (cost - opt) / opt and
is null when no optimum is known.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .baselines import greedy_three_opt, greedy_two_opt, tabu_search
from .policy import EdgePolicy, PolicyConfig, load_checkpoint
from .search import improve_batch
from .tensor_nn import CheckpointError, ConfigError
from .training import TrainConfig, parse_config_text, preset_path, rng_for, train
from .tsp_core import (InvalidInputError, ParseError, SizeLimitError, check_tour, exact_optimum,
                       generate_uniform, load_instances, load_tours, to_jsonl, tour_cost)

log = logging.getLogger("tspimprove")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
METHODS = ("neural", "greedy2opt", "greedy3opt", "tabu", "random_policy")
EXACT_MAX_N = 14


class DataError(Exception):
    """Bad or inconsistent input data (exit code 3)."""


class UsageError(Exception):
    """Invalid argument combination (exit code 2)."""


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def gap_percent(cost: float, opt: float | None) -> float | None:
    return None if opt is None else 100.0 * (cost - opt) / opt


# --- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.n < 3 or args.count < 1:
        raise UsageError("need n >= 3 and count >= 1")
    if args.with_optimum and args.n > EXACT_MAX_N:
        raise UsageError(f"--with-optimum is limited to n <= {EXACT_MAX_N}")
    instances = []
    for k in range(args.count):
        inst = generate_uniform(args.n, args.seed, index=k)
        if args.with_optimum:
            inst = inst.with_opt_cost(exact_optimum(inst)[0])
        instances.append(inst)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(to_jsonl(instances))
    print(f"wrote {len(instances)} instances to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------

def resolve_config(presets, config_files, overrides) -> tuple[PolicyConfig, TrainConfig]:
    """Merge presets, then config files, then ``key=value`` overrides, in order."""
    pol, train_kw = {}, {}
    texts = [preset_path(name).read_text() for name in presets or []]
    texts += [Path(p).read_text() for p in config_files or []]
    texts.append("\n".join(overrides or []))
    for text in texts:
        p, t = parse_config_text(text)
        pol.update(p)
        train_kw.update(t)
    try:
        return PolicyConfig(**pol), TrainConfig(**train_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if args.time_limit is not None:
        overrides.append(f"time_limit = {args.time_limit}")
    pol, cfg = resolve_config(args.preset, args.config, overrides)
    last, metrics = train(cfg, args.out, pol, checkpoint_in=args.checkpoint)
    print(f"{cfg.stage}: {len(metrics)} epoch(s), checkpoint {last}")
    return EXIT_OK


# --- improve / refine ---------------------------------------------------------

def _pad(series: list, length: int) -> list:
    return series + [series[-1]] * (length - len(series))


def _merge_traces(rows_per_restart: list[list[tuple]]) -> list[tuple]:
    """Per step: min current cost and min best-so-far across restarts."""
    steps = max(len(r) for r in rows_per_restart)
    padded = [_pad(r, steps) for r in rows_per_restart]
    out = []
    for k in range(steps):
        col = [r[k] for r in padded]
        out.append((k, min(c[1] for c in col), min(c[2] for c in col), max(c[3] for c in col)))
    return out


def run_instance(inst, index: int, method: str, budget: int, starts: list, seed: int,
                 policy=None, decode: str = "sample", time_limit=None, tabu_tenure: int = 8,
                 aspiration: bool = True, three_opt_max_n: int = 500):
    """All restarts on one instance; returns (restart bests, merged trace rows, search seconds)."""
    t0 = time.perf_counter()
    if method in ("neural", "random_policy"):
        R = len(starts)
        coords = np.repeat(inst.coords[None], R, axis=0)
        rngs = [rng_for(seed, index, r, 1) for r in range(R)]
        best, traces = improve_batch(policy if method == "neural" else None, coords,
                                     np.stack(starts), budget, rngs,
                                     greedy=(decode == "greedy"), time_limit=time_limit)
        bests = [tour_cost(inst, t) for t in best]
        rows = [tr.rows() for tr in traces]
    else:
        bests, rows = [], []
        for start in starts:
            if method == "greedy2opt":
                tour, trace = greedy_two_opt(inst, start, budget)
            elif method == "greedy3opt":
                tour, trace = greedy_three_opt(inst, start, budget, max_n=three_opt_max_n)
            else:
                tour, trace = tabu_search(inst, start, budget, tenure=tabu_tenure,
                                          aspiration=aspiration)
            bests.append(tour_cost(inst, tour))
            rows.append(trace.steps)
    return bests, _merge_traces(rows), time.perf_counter() - t0


def initial_tours(instances, restarts: int, init_seed: int, supplied=None) -> list[list[np.ndarray]]:
    out = []
    for k, inst in enumerate(instances):
        if supplied is None:
            out.append([rng_for(init_seed, k, r, 0).permutation(inst.n) for r in range(restarts)])
            continue
        tours = supplied.get(inst.id)
        if not tours:
            raise DataError(f"initial-tours file has no tour for instance id {inst.id!r}")
        try:
            out.append([check_tour(inst, tours[r % len(tours)]) for r in range(restarts)])
        except InvalidInputError as exc:
            raise DataError(f"instance {inst.id!r}: {exc}") from None
    return out


def load_policy(checkpoint) -> EdgePolicy:
    if checkpoint is None:
        raise UsageError("method neural needs --checkpoint")
    policy, _, _ = load_checkpoint(checkpoint)
    policy.requires_grad_(False)
    return policy


def execute_run(instances, method: str, *, budget=None, budget_factor: int = 10, restarts: int = 1,
                seed: int = 0, init_seed=None, policy=None, decode: str = "sample",
                supplied=None, time_limit=None, threads: int = 1, tabu_tenure: int = 8,
                aspiration: bool = True, three_opt_max_n: int = 500):
    """Runs ``method`` on every instance; returns (per-instance records, merged traces)."""
    if restarts < 1:
        raise UsageError("restarts must be >= 1")
    if budget is not None and budget < 1:
        raise UsageError("budget must be >= 1")
    init_seed = seed if init_seed is None else init_seed
    starts = initial_tours(instances, restarts, init_seed, supplied)

    def one(k):
        inst = instances[k]
        steps = budget if budget is not None else budget_factor * inst.n
        try:
            bests, rows, secs = run_instance(inst, k, method, steps, starts[k], seed, policy,
                                             decode, time_limit, tabu_tenure, aspiration,
                                             three_opt_max_n)
        except SizeLimitError as exc:
            raise DataError(f"instance {inst.id!r}: {exc}") from None
        initial = min(tour_cost(inst, t) for t in starts[k])
        best = min(bests)
        rec = {"id": inst.id, "n": inst.n, "best_cost": best, "restart_bests": bests,
               "initial_cost": initial, "opt_cost": inst.opt_cost,
               "gap": gap_percent(best, inst.opt_cost), "steps": steps,
               "search_seconds": secs}
        return rec, rows

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(len(instances))))
    else:
        results = [one(k) for k in range(len(instances))]
    return [r for r, _ in results], [t for _, t in results]


def aggregate(records) -> dict:
    costs = np.array([r["best_cost"] for r in records])
    gaps = [r["gap"] for r in records if r["gap"] is not None]
    return {"count": len(records), "mean_cost": float(costs.mean()),
            "std_cost": float(costs.std()),
            "mean_gap": float(np.mean(gaps)) if gaps else None,
            "mean_search_seconds": float(np.mean([r["search_seconds"] for r in records]))}


def write_trace_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "cost", "best", "seconds"])
        for step, cost, best, secs in rows:
            writer.writerow([step, repr(float(cost)), repr(float(best)), f"{secs:.6f}"])


def _run_common(args, supplied=None) -> int:
    try:
        instances = load_instances(args.dataset)
    except (OSError, ParseError, InvalidInputError, ValueError) as exc:
        raise DataError(f"cannot load dataset {args.dataset}: {exc}") from None
    if not instances:
        raise DataError(f"dataset {args.dataset} is empty")
    policy = load_policy(args.checkpoint) if args.method == "neural" else None
    records, traces = execute_run(
        instances, args.method, budget=args.budget, budget_factor=args.budget_factor,
        restarts=args.restarts, seed=args.seed, init_seed=args.init_seed, policy=policy,
        decode=args.decode, supplied=supplied, time_limit=args.time_limit,
        threads=args.threads, tabu_tenure=args.tabu_tenure, aspiration=not args.no_aspiration,
        three_opt_max_n=args.three_opt_max_n)
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    run = {"method": args.method, "budget": args.budget, "budget_factor": args.budget_factor,
            "restarts": args.restarts, "decode": args.decode, "seed": args.seed,
            "init_seed": args.seed if args.init_seed is None else args.init_seed,
            "checkpoint_sha256": file_digest(args.checkpoint) if policy is not None else None,
            "refine": supplied is not None, "time_limit_seconds": args.time_limit}
    if args.method == "tabu":
        run.update(tabu_tenure=args.tabu_tenure, aspiration=not args.no_aspiration)
    report = {"run": run,
              "dataset": {"name": Path(args.dataset).name, "sha256": file_digest(args.dataset),
                          "count": len(instances)},
              "instances": records, "aggregate": aggregate(records)}
    (out / "report.json").write_text(dump_json(report))
    for rec, rows in zip(records, traces):
        write_trace_csv(out / "traces" / f"{safe_name(rec['id'])}.csv", rows)
    agg = report["aggregate"]
    gap = "n/a" if agg["mean_gap"] is None else f"{agg['mean_gap']:.3f}%"
    print(f"{args.method}: mean cost {agg['mean_cost']:.6f}, mean gap {gap}, "
          f"mean search time {agg['mean_search_seconds']:.3f}s")
    return EXIT_OK


def safe_name(instance_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in instance_id)


def cmd_improve(args) -> int:
    return _run_common(args)


def cmd_refine(args) -> int:
    try:
        supplied = load_tours(args.tours)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load initial tours {args.tours}: {exc}") from None
    return _run_common(args, supplied)


# --- variability ----------------------------------------------------------

def variability_table(costs: np.ndarray) -> dict:
    """``costs[c, s]``: mean best cost for checkpoint c under inference seed s."""
    return {"mean_cost": float(costs.mean()),
            "training_std": float(costs.mean(axis=1).std()),
            "inference_std": float(costs[0].std()),
            "checkpoints": costs.shape[0], "inference_seeds": costs.shape[1]}


def cmd_variability(args) -> int:
    instances = load_instances(args.dataset)
    if args.method == "neural" and not args.checkpoints:
        raise UsageError("variability with method neural needs at least one checkpoint")
    policies = [load_policy(c) for c in args.checkpoints] if args.method == "neural" else [None]
    costs = np.zeros((len(policies), args.inference_seeds))
    for c, policy in enumerate(policies):
        for s in range(args.inference_seeds):
            records, _ = execute_run(instances, args.method, budget=args.budget,
                                     budget_factor=args.budget_factor, seed=args.seed + s,
                                     init_seed=args.seed, policy=policy, decode=args.decode,
                                     threads=args.threads)
            costs[c, s] = np.mean([r["best_cost"] for r in records])
    table = variability_table(costs)
    table["per_run_mean_cost"] = costs.tolist()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "variability.json").write_text(dump_json(table))
    md = ("| Method | Avg cost | Training std | Inference std |\n|---|---|---|---|\n"
          f"| {args.method} | {table['mean_cost']:.4f} | {table['training_std']:.6f} | "
          f"{table['inference_std']:.6f} |\n")
    (out / "variability.md").write_text(md)
    print(md, end="")
    return EXIT_OK


# --- report -----------------------------------------------------------------

def read_trace_csv(path: Path) -> list[tuple]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["cost"]), float(r["best"]), float(r["seconds"])) for r in rows]


def load_run(run_dir) -> tuple[dict, dict]:
    run = Path(run_dir)
    try:
        report = json.loads((run / "report.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{run}: cannot read report.json ({exc})") from None
    traces = {rec["id"]: read_trace_csv(run / "traces" / f"{safe_name(rec['id'])}.csv")
              for rec in report["instances"]}
    return report, traces


def _curve_value(best: float, rec: dict) -> float:
    """Gap in percent when the optimum is known, else the raw best cost."""
    return best if rec["opt_cost"] is None else gap_percent(best, rec["opt_cost"])


def step_curve(report: dict, traces: dict) -> list[float]:
    recs = report["instances"]
    length = max(len(traces[r["id"]]) for r in recs)
    series = [[_curve_value(b, r) for b in _pad([row[2] for row in traces[r["id"]]], length)]
              for r in recs]
    return np.mean(series, axis=0).tolist()


def time_curve(report: dict, traces: dict, grid: np.ndarray) -> list[float]:
    vals = []
    for r in report["instances"]:
        rows = traces[r["id"]]
        secs = np.array([row[3] for row in rows])
        best = np.array([_curve_value(row[2], r) for row in rows])
        idx = np.searchsorted(secs, grid, side="right") - 1
        vals.append(best[np.clip(idx, 0, None)])
    return np.mean(vals, axis=0).tolist()


def cmd_report(args) -> int:
    runs = [load_run(d) for d in args.runs]
    digests = {r["dataset"]["sha256"] for r, _ in runs}
    if len(digests) > 1:
        raise DataError("runs use different datasets; refusing to merge "
                        + ", ".join(sorted(r["dataset"]["name"] for r, _ in runs)))
    labels = [f"{Path(d).name}" for d in args.runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    curves = [step_curve(r, t) for r, t in runs]
    length = max(len(c) for c in curves)
    curves = [_pad(c, length) for c in curves]
    with open(out / "curve_steps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + labels)
        for k in range(length):
            w.writerow([k] + [repr(c[k]) for c in curves])

    t_max = max(row[3] for _, tr in runs for rows in tr.values() for row in rows)
    grid = np.linspace(0.0, t_max, args.time_points)
    tcurves = [time_curve(r, t, grid) for r, t in runs]
    with open(out / "curve_seconds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seconds"] + labels)
        for k, s in enumerate(grid):
            w.writerow([f"{s:.6f}"] + [repr(c[k]) for c in tcurves])

    lines = ["| Run | Method | Cost | Gap | Time |", "|---|---|---|---|---|"]
    for label, (rep, _) in zip(labels, runs):
        lines.append(_table_row(label, rep["run"]["method"], rep["instances"]))
    if len(runs) > 1:
        lines.append(_table_row("mean", "all", [rec for rep, _ in runs for rec in rep["instances"]]))
    md = "\n".join(lines) + "\n"
    (out / "table.md").write_text(md)
    print(md, end="")
    return EXIT_OK


def _table_row(label: str, method: str, records) -> str:
    agg = aggregate(records)
    gap = "-" if agg["mean_gap"] is None else f"{agg['mean_gap']:.3f}%"
    return (f"| {label} | {method} | {agg['mean_cost']:.4f} | {gap} | "
            f"{agg['mean_search_seconds']:.3f}s |")


# --- policy-info ------------------------------------------------------------

def cmd_policy_info(args) -> int:
    if args.checkpoint:
        policy, header, _ = load_checkpoint(args.checkpoint)
        extra = {"stage": header.get("stage"), "epoch": header.get("epoch")}
    else:
        pol, _ = resolve_config(args.preset, args.config, args.set)
        policy, extra = EdgePolicy(pol), {}
    counts = policy.param_counts()
    info = {"config": asdict(policy.config), "parameters": counts,
            "total_parameters": sum(counts.values()), **extra}
    text = dump_json(info)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed (default 0; train: config value)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tspimprove", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write uniform random instances")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--with-optimum", action="store_true",
                   help=f"annotate exact optima (n <= {EXACT_MAX_N})")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    def config_args(q):
        q.add_argument("--preset", action="append", help="named preset, repeatable")
        q.add_argument("--config", action="append", help="key = value config file, repeatable")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="single override")

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    config_args(p)
    p.add_argument("--checkpoint", help="resume, or start RL from an IL checkpoint")
    p.add_argument("--time-limit", type=float, help="wall-clock cap in seconds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    def run_args(q):
        q.add_argument("--method", choices=METHODS, default="neural")
        q.add_argument("--dataset", required=True)
        q.add_argument("--checkpoint")
        q.add_argument("--budget", type=int, help="steps per run (default budget-factor * n)")
        q.add_argument("--budget-factor", type=int, default=10)
        q.add_argument("--restarts", type=int, default=1)
        q.add_argument("--decode", choices=("sample", "greedy"), default="sample")
        q.add_argument("--init-seed", type=int, help="seed for random initial tours")
        q.add_argument("--time-limit", type=float, help="per-instance wall-clock cap")
        q.add_argument("--tabu-tenure", type=int, default=8)
        q.add_argument("--no-aspiration", action="store_true")
        q.add_argument("--three-opt-max-n", type=int, default=500)
        q.add_argument("--out", required=True)

    p = sub.add_parser("improve", parents=[common], help="improve random initial tours")
    run_args(p)
    p.set_defaults(func=cmd_improve)

    p = sub.add_parser("refine", parents=[common], help="improve supplied initial tours")
    run_args(p)
    p.add_argument("--tours", required=True, help="tour file (JSONL of {id, order, cost})")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("variability", parents=[common], help="training/inference spread")
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--method", choices=METHODS, default="neural")
    p.add_argument("--dataset", required=True)
    p.add_argument("--inference-seeds", type=int, default=20)
    p.add_argument("--budget", type=int)
    p.add_argument("--budget-factor", type=int, default=10)
    p.add_argument("--decode", choices=("sample", "greedy"), default="sample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_variability)

    p = sub.add_parser("report", parents=[common], help="merge run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--time-points", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("policy-info", parents=[common], help="config and parameter counts")
    config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_policy_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.seed is None and args.command != "train":
        args.seed = 0
    # parallelism is across instances; each worker runs single-threaded kernels
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ParseError, InvalidInputError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
