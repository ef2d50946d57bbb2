"""Acceptance checks, one PASS/FAIL line per criterion.

Run ``pytest tests/test_acceptance.py -v`` (the lines are written to the
terminal even with output capture on) or ``python tests/test_acceptance.py``.
The benchmark criteria (6-8) share one sweep over ten environments and take
several minutes on one core.
"""
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from sensepath import ExperimentConfig
from sensepath.acquisition import expected_improvement
from sensepath.cli import main as cli_main
from sensepath.harness import auprc, benchmark_env, eval_lattice, run_benchmark
from sensepath.occupancy import HingeSet, init_posterior, learn_params
from sensepath.planner import astar

sys.path.insert(0, str(Path(__file__).parent))
from oracles import (  # noqa: E402
    brute_auprc,
    dijkstra_costs,
    graph_adjacency,
    logistic_posterior_1d,
    random_grid_graph,
)

# tolerances and thresholds
SEARCH_INSTANCES = 1000
SEARCH_SECONDS = 10.0
EI_SAMPLES = 1_000_000
EI_SIGMAS = 3.0
PHI0 = 1.0 / math.sqrt(2.0 * math.pi)
PHI0_TOL = 1e-9
BHM_TOL = 1e-2
BHM_STEPS = 10_000
AUPRC_TOL = 1e-12
SL_RATIO = 0.9
REPLAN_RATIO = 0.95
AUPRC_MEAN_MIN = 0.75
AUPRC_BASE_FACTOR = 10.0
BENCH_SECONDS = 30 * 60
BENCH_SEEDS = tuple(range(10))

_lines: list[str] = []


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(number: int, ok: bool, detail: str):
        line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}"
        _lines.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line

    return emit


def _instance_pair(seed):
    g = random_grid_graph(seed)
    start, goal = (int(v) for v in np.random.default_rng(seed).integers(0, g.n_vertices, 2))
    return g, start, goal


def test_1_search_matches_dijkstra(verdict):
    mismatches = 0
    elapsed = 0.0
    for seed in range(SEARCH_INSTANCES):
        g, start, goal = _instance_pair(seed)
        for mode, costs in (("full", g.edge_costs), ("distance_only", g.edge_length)):
            tic = time.perf_counter()
            traj = astar(g, start, goal, mode)
            elapsed += time.perf_counter() - tic
            if traj.cost != dijkstra_costs(g.n_vertices, graph_adjacency(g, costs), start)[goal]:
                mismatches += 1
    verdict(1, mismatches == 0 and elapsed < SEARCH_SECONDS,
            f"{mismatches} cost mismatches over {2 * SEARCH_INSTANCES} searches, A* time {elapsed:.2f} s")


def test_2_heuristic_admissible(verdict):
    violations = popped = 0
    for seed in range(SEARCH_INSTANCES):
        g, start, goal = _instance_pair(seed)
        for mode, costs in (("full", g.edge_costs), ("distance_only", g.edge_length)):
            trace = []
            astar(g, start, goal, mode, trace=trace)
            remaining = dijkstra_costs(g.n_vertices, graph_adjacency(g, costs), goal)
            popped += len(trace)
            violations += sum(h > remaining[v] for v, h in trace)
    verdict(2, violations == 0, f"{violations} violations over {popped} popped vertices")


def test_3_expected_improvement(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for gain in np.linspace(-1.5, 1.5, 10):
        for std in np.linspace(0.5, 3.0, 10):
            f_plus, xi = 0.2, 0.01
            mean = gain + f_plus + xi
            g = mean + std * rng.standard_normal(EI_SAMPLES)
            imp = np.maximum(0.0, g - f_plus - xi)
            se = imp.std(ddof=1) / math.sqrt(EI_SAMPLES)
            worst = max(worst, abs(expected_improvement(mean, std, f_plus, xi) - imp.mean()) / se)
    anchor = abs(expected_improvement(1.01, 1.0, 1.0, 0.01) - PHI0)
    verdict(3, worst <= EI_SIGMAS and anchor <= PHI0_TOL,
            f"worst deviation {worst:.2f} standard errors on 100 points; |EI - phi(0)| = {anchor:.1e}")


def _orthogonal_instance(rng):
    m = int(rng.integers(1, 11))
    pts = np.column_stack([np.arange(m) * 10.0, np.zeros(m), np.zeros(m)])
    hinges = HingeSet(pts, gamma=math.log(2.0))
    xs, ys, counts = [], [], []
    for j in range(m):
        n = int(rng.integers(300, 601))
        n1 = int(round(n * rng.uniform(0.35, 0.65)))
        xs += [pts[j]] * n
        ys += [1] * n1 + [0] * (n - n1)
        counts.append((n1, n - n1))
    return hinges, np.array(xs), np.array(ys), counts


def test_4_bhm_inference(verdict):
    worst = 0.0
    for seed in range(20):
        hinges, xs, ys, counts = _orthogonal_instance(np.random.default_rng(seed))
        post = learn_params(init_posterior(hinges.m), (xs, ys), hinges, tol=1e-10, max_iters=1000)
        for j, (n1, n0) in enumerate(counts):
            m, sd = logistic_posterior_1d(n1, n0, 1e4)
            worst = max(worst, abs(post.mu[j] - m), abs(math.sqrt(post.sigma_sq[j]) - sd))

    rng = np.random.default_rng(7)
    grew = 0
    steps = 0
    while steps < BHM_STEPS:
        hinges = HingeSet(rng.uniform(0, 3, (int(rng.integers(2, 11)), 3)), gamma=1.0)
        post = init_posterior(hinges.m, float(rng.choice([1.0, 1e2, 1e4])))
        for _ in range(50):
            n = int(rng.integers(1, 20))
            before = post.sigma_sq
            post = learn_params(post, (rng.uniform(0, 3, (n, 3)), rng.integers(0, 2, n)), hinges)
            grew += int(np.any(post.sigma_sq > before))
            steps += 1
    verdict(4, worst <= BHM_TOL and grew == 0,
            f"max |mu|,|sigma| error vs quadrature {worst:.4f} (tol {BHM_TOL}); "
            f"variance grew in {grew} of {steps} updates")


def test_5_auprc(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(2000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = (1, 0)
        labels = rng.permutation(labels)
        levels = int(rng.integers(1, 8))
        scores = rng.integers(0, levels + 1, n) / levels if levels < 7 else rng.uniform(size=n)
        worst = max(worst, abs(auprc(scores, labels) - brute_auprc(scores, labels)))
    const_ok = all(
        auprc(np.full(n, 0.4), lab) == lab.mean()
        for n, lab in ((k, (np.arange(k) % 3 == 0).astype(int)) for k in range(2, 51))
    )
    verdict(5, worst <= AUPRC_TOL and const_ok,
            f"max deviation from enumeration {worst:.1e}; constant scores give the positive fraction: {const_ok}")


@pytest.fixture(scope="module")
def bench():
    cfg = ExperimentConfig(env_seeds=BENCH_SEEDS, planners=("full", "SL", "AD", "DE", "no_replan"))
    tic = time.perf_counter()
    report = run_benchmark(cfg)
    return report, time.perf_counter() - tic


def test_6_efficiency_ordering(verdict, bench):
    report, seconds = bench
    m = {p: report.summary(p).arc_mean for p in ("full", "SL", "AD", "DE")}
    ok = m["full"] < m["DE"] and m["full"] < m["AD"] and m["full"] < m["SL"] and m["full"] <= SL_RATIO * m["SL"]
    ok = ok and seconds < BENCH_SECONDS
    done = {p: f"{report.summary(p).n_success}/{report.summary(p).n}" for p in m}
    verdict(6, ok,
            "mean arc to 95% (cm): " + ", ".join(f"{p} {v:.1f} ({done[p]})" for p, v in m.items())
            + f"; full/SL = {m['full'] / m['SL']:.3f}; sweep of 5 planners took {seconds / 60:.1f} min")


def test_7_replanning_ablation(verdict, bench):
    report, _ = bench
    full, once = report.summary("full").arc_mean, report.summary("no_replan").arc_mean
    verdict(7, full <= REPLAN_RATIO * once,
            f"full {full:.1f} cm vs no-replanning {once:.1f} cm, ratio {full / once:.3f} (need <= {REPLAN_RATIO})")


def test_8_accuracy(verdict, bench):
    report, _ = bench
    rows = [r for r in report.rows if r.planner == "full"]
    base = {s: eval_lattice(benchmark_env(report.config, s), report.config.eval_resolution_cm).positive_fraction
            for s in {r.env_seed for r in rows}}
    scores = [r.auprc for r in rows]
    mean = float(np.mean(scores))
    above = all(r.auprc > AUPRC_BASE_FACTOR * base[r.env_seed] for r in rows)
    worst_ratio = min(r.auprc / base[r.env_seed] for r in rows)
    verdict(8, mean >= AUPRC_MEAN_MIN and above,
            f"mean AUPRC {mean:.3f} over {len(rows)} full-method trials; "
            f"lowest AUPRC / base rate = {worst_ratio:.1f}")


def _tree(path: Path) -> dict:
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_9_determinism(verdict, tmp_path):
    conf = tmp_path / "config.json"
    conf.write_text(json.dumps(ExperimentConfig(env_seeds=(3,), planners=("full", "SL")).to_dict()))
    same = []
    for kind, args in (
        ("run", ["run", "--env-seed", "3", "--planner", "full", "--seed", "5", "--config", str(conf)]),
        ("bench", ["bench", "--config", str(conf)]),
    ):
        outs = []
        for k in range(2):
            out = tmp_path / f"{kind}{k}"
            cli_main(args + ["--out", str(out)])
            outs.append(_tree(out))
        same.append((kind, outs[0] == outs[1] and len(outs[0]) > 0, len(outs[0])))
    verdict(9, all(ok for _, ok, _ in same),
            "; ".join(f"{kind}: {n} files {'identical' if ok else 'DIFFER'}" for kind, ok, n in same))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
