import itertools
import json

import numpy as np
import pytest

from tspimprove.cli import EXIT_CHECKPOINT, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, variability_table
from tspimprove.policy import EdgePolicy, PolicyConfig, save_checkpoint
from tspimprove.tsp_core import (exact_optimum, generate_uniform, load_instances, to_jsonl,
                                 tour_cost, tour_record)

TINY = PolicyConfig(n_layers=1, d_model=16, d_hidden=16, n_heads=2)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--n", "12", "--count", "3", "--seed", "4", "--with-optimum",
                 "--out", str(root / "small.jsonl")]) == EXIT_OK
    save_checkpoint(root / "tiny.ckpt", EdgePolicy(TINY, seed=0), stage="RL", epoch=0)
    return root


def improve(work, out, *extra, dataset="small.jsonl"):
    argv = ["improve", "--dataset", str(work / dataset), "--out", str(work / out), *extra]
    code = main(argv)
    report = json.loads((work / out / "report.json").read_text()) if code == EXIT_OK else None
    return code, report


def strip_seconds(obj):
    if isinstance(obj, dict):
        return {k: strip_seconds(v) for k, v in obj.items() if "seconds" not in k}
    if isinstance(obj, list):
        return [strip_seconds(v) for v in obj]
    return obj


# --- generate ---------------------------------------------------------------

def test_generate_byte_identical(tmp_path):
    for name in ("a", "b"):
        main(["generate", "--n", "50", "--count", "100", "--seed", "7", "--out",
              str(tmp_path / f"{name}.jsonl")])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert len(load_instances(tmp_path / "a.jsonl")) == 100


def test_generate_with_optimum(work):
    for inst in load_instances(work / "small.jsonl"):
        assert inst.n == 12 and inst.opt_cost >= 0


def brute_force_optimum(coords):
    n = len(coords)
    dist = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    perms = np.array(list(itertools.permutations(range(1, n))))
    tours = np.concatenate([np.zeros((len(perms), 1), dtype=int), perms], axis=1)
    return dist[tours, np.roll(tours, -1, axis=1)].sum(axis=1).min()


def test_generated_optimum_matches_brute_force(tmp_path):
    main(["generate", "--n", "10", "--count", "2", "--seed", "1", "--with-optimum",
          "--out", str(tmp_path / "d.jsonl")])
    for inst in load_instances(tmp_path / "d.jsonl"):
        assert abs(inst.opt_cost - brute_force_optimum(inst.coords)) < 1e-9


def test_generate_usage_errors(tmp_path):
    assert main(["generate", "--n", "20", "--count", "1", "--with-optimum",
                 "--out", str(tmp_path / "x.jsonl")]) == EXIT_USAGE


# --- improve ----------------------------------------------------------------

def test_restarts_take_minimum(work):
    _, one = improve(work, "r1", "--method", "neural", "--checkpoint", str(work / "tiny.ckpt"),
                     "--budget", "15")
    _, eight = improve(work, "r8", "--method", "neural", "--checkpoint", str(work / "tiny.ckpt"),
                       "--budget", "15", "--restarts", "8")
    for a, b in zip(one["instances"], eight["instances"]):
        assert b["best_cost"] == min(b["restart_bests"])
        assert len(b["restart_bests"]) == 8
        assert b["restart_bests"][0] == a["best_cost"]  # restart 0 shares its seed stream
        assert b["best_cost"] <= a["best_cost"]
        assert b["gap"] >= -1e-9


def test_random_policy_trace(work):
    code, rep = improve(work, "rand", "--method", "random_policy", "--budget", "30")
    assert code == EXIT_OK
    rows = (work / "rand" / "traces" / f"{rep['instances'][0]['id']}.csv").read_text().splitlines()
    assert rows[0] == "step,cost,best,seconds" and len(rows) == 32
    best = [float(r.split(",")[2]) for r in rows[1:]]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert best[-1] == rep["instances"][0]["best_cost"]


def test_default_budget_is_ten_n(work):
    _, rep = improve(work, "g2", "--method", "greedy2opt")
    assert all(r["steps"] == 120 for r in rep["instances"])


@pytest.mark.parametrize("method", ["greedy2opt", "greedy3opt", "tabu", "random_policy", "neural"])
def test_report_deterministic(work, method):
    extra = ["--method", method, "--budget", "10", "--restarts", "2"]
    if method == "neural":
        extra += ["--checkpoint", str(work / "tiny.ckpt")]
    _, a = improve(work, f"det_{method}_a", *extra)
    _, b = improve(work, f"det_{method}_b", *extra, "--threads", "2")
    assert strip_seconds(a) == strip_seconds(b)
    assert a["aggregate"]["count"] == 3


def test_exit_codes(work, tmp_path):
    assert improve(work, "e1", "--method", "neural")[0] == EXIT_USAGE
    assert improve(work, "e2", "--restarts", "0", "--method", "tabu")[0] == EXIT_USAGE
    assert improve(work, "e3", dataset="missing.jsonl")[0] == EXIT_DATA
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert improve(work, "e4", "--method", "neural", "--checkpoint", str(bad))[0] == EXIT_CHECKPOINT
    with pytest.raises(SystemExit) as exc:
        main(["improve", "--method", "lk"])
    assert exc.value.code == EXIT_USAGE


# --- refine -----------------------------------------------------------------

def write_tours(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_refine_optimal_tours_never_worsen(work, tmp_path):
    insts = load_instances(work / "small.jsonl")
    recs = []
    for inst in insts:
        cost, tour = exact_optimum(inst)
        recs.append(tour_record(inst.id, tour, cost))
    write_tours(tmp_path / "opt.jsonl", recs)
    assert main(["refine", "--dataset", str(work / "small.jsonl"), "--tours",
                 str(tmp_path / "opt.jsonl"), "--method", "random_policy", "--budget", "20",
                 "--out", str(tmp_path / "ref")]) == EXIT_OK
    rep = json.loads((tmp_path / "ref" / "report.json").read_text())
    for r in rep["instances"]:
        assert r["best_cost"] <= r["initial_cost"]
        assert abs(r["gap"]) < 1e-9
    assert rep["run"]["refine"] is True


def test_refine_missing_tour_is_data_error(work, tmp_path):
    write_tours(tmp_path / "partial.jsonl", [tour_record("nobody", range(12), 0.0)])
    assert main(["refine", "--dataset", str(work / "small.jsonl"), "--tours",
                 str(tmp_path / "partial.jsonl"), "--method", "greedy2opt",
                 "--out", str(tmp_path / "x")]) == EXIT_DATA


def nearest_neighbour(coords):
    left = set(range(1, len(coords)))
    tour = [0]
    while left:
        last = coords[tour[-1]]
        nxt = min(left, key=lambda c: (np.hypot(*(coords[c] - last)), c))
        tour.append(nxt)
        left.remove(nxt)
    return tour


def test_stronger_starts_refine_lower(tmp_path):
    insts = [generate_uniform(50, 3, index=k) for k in range(20)]
    (tmp_path / "d.jsonl").write_text(to_jsonl(insts))
    write_tours(tmp_path / "nn.jsonl", [tour_record(i.id, t, tour_cost(i, t)) for i in insts
                                        for t in [nearest_neighbour(i.coords)]])
    base = ["--dataset", str(tmp_path / "d.jsonl"), "--method", "greedy2opt"]
    main(["improve", *base, "--out", str(tmp_path / "rand")])
    main(["refine", *base, "--tours", str(tmp_path / "nn.jsonl"), "--out", str(tmp_path / "nn")])
    rand = json.loads((tmp_path / "rand" / "report.json").read_text())["aggregate"]["mean_cost"]
    nn = json.loads((tmp_path / "nn" / "report.json").read_text())["aggregate"]["mean_cost"]
    assert nn < rand


# --- variability --------------------------------------------------------------

def test_variability_degenerate_and_deterministic(work, tmp_path):
    assert main(["variability", "--checkpoints", str(work / "tiny.ckpt"), "--dataset",
                 str(work / "small.jsonl"), "--inference-seeds", "1", "--budget", "10",
                 "--out", str(tmp_path / "v1")]) == EXIT_OK
    v = json.loads((tmp_path / "v1" / "variability.json").read_text())
    assert v["training_std"] == 0 and v["inference_std"] == 0
    main(["variability", "--method", "greedy2opt", "--dataset", str(work / "small.jsonl"),
          "--inference-seeds", "3", "--out", str(tmp_path / "v2")])
    v = json.loads((tmp_path / "v2" / "variability.json").read_text())
    assert v["inference_std"] == 0.0
    assert "Inference std" in (tmp_path / "v2" / "variability.md").read_text()


def test_variability_table_arithmetic():
    t = variability_table(np.array([[1.0, 3.0], [5.0, 7.0]]))
    assert t["mean_cost"] == 4.0 and t["training_std"] == 2.0 and t["inference_std"] == 1.0


def test_variability_needs_checkpoint(work, tmp_path):
    assert main(["variability", "--dataset", str(work / "small.jsonl"),
                 "--out", str(tmp_path / "v")]) == EXIT_USAGE


# --- report -----------------------------------------------------------------

def test_report_single_and_mean(work, tmp_path):
    _, a = improve(work, "rep_a", "--method", "greedy2opt")
    _, b = improve(work, "rep_b", "--method", "random_policy", "--budget", "5")
    assert main(["report", str(work / "rep_a"), "--out", str(tmp_path / "one")]) == EXIT_OK
    row = (tmp_path / "one" / "table.md").read_text().splitlines()[2]
    assert f"{a['aggregate']['mean_cost']:.4f}" in row and f"{a['aggregate']['mean_gap']:.3f}%" in row
    main(["report", str(work / "rep_a"), str(work / "rep_b"), "--out", str(tmp_path / "two")])
    lines = (tmp_path / "two" / "table.md").read_text().splitlines()
    bests = [r["best_cost"] for rep in (a, b) for r in rep["instances"]]
    assert lines[-1].startswith("| mean |") and f"{np.mean(bests):.4f}" in lines[-1]
    steps = (tmp_path / "two" / "curve_steps.csv").read_text().splitlines()
    assert steps[0] == "step,rep_a,rep_b"
    assert len((tmp_path / "two" / "curve_seconds.csv").read_text().splitlines()) == 51


def test_report_gap_of_optimum_is_zero(work, tmp_path):
    insts = load_instances(work / "small.jsonl")
    write_tours(tmp_path / "opt.jsonl", [tour_record(i.id, exact_optimum(i)[1], 0.0)
                                         for i in insts])
    main(["refine", "--dataset", str(work / "small.jsonl"), "--tours", str(tmp_path / "opt.jsonl"),
          "--method", "greedy2opt", "--out", str(tmp_path / "opt")])
    main(["report", str(tmp_path / "opt"), "--out", str(tmp_path / "r")])
    assert "| 0.000% |" in (tmp_path / "r" / "table.md").read_text()


def test_report_refuses_mixed_datasets(work, tmp_path):
    main(["generate", "--n", "8", "--count", "2", "--out", str(tmp_path / "other.jsonl")])
    main(["improve", "--dataset", str(tmp_path / "other.jsonl"), "--method", "greedy2opt",
          "--out", str(tmp_path / "other")])
    improve(work, "mix_a", "--method", "greedy2opt")
    assert main(["report", str(work / "mix_a"), str(tmp_path / "other"),
                 "--out", str(tmp_path / "m")]) == EXIT_DATA


# --- train and policy-info --------------------------------------------------

def test_train_and_policy_info(tmp_path, capsys):
    sets = ["d_model=16", "d_hidden=16", "n_heads=2", "n_layers=1", "epochs=1",
            "updates_per_epoch=1", "batch_size=2", "n_low=7", "n_high=7"]
    argv = ["train", "--preset", "smoke_il", "--out", str(tmp_path / "il")]
    for s in sets:
        argv += ["--set", s]
    assert main(argv) == EXIT_OK
    assert (tmp_path / "il" / "last.ckpt").exists()
    capsys.readouterr()
    assert main(["policy-info", "--checkpoint", str(tmp_path / "il" / "last.ckpt")]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["stage"] == "IL" and info["config"]["d_model"] == 16
    assert info["total_parameters"] == sum(info["parameters"].values())
    assert main(["train", "--preset", "smoke_il", "--set", "bogus=1",
                 "--out", str(tmp_path / "x")]) == EXIT_USAGE
