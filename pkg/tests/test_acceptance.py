"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``C<k> PASS|FAIL|SKIP`` line with the measured numbers,
then asserts. Expensive runs are cached at module level so later criteria
(descent, equivalence) reuse the traces of earlier ones.
"""

from functools import lru_cache

import numpy as np
import pytest

from certpgo.certify import DC2Config, PowerConfig, dc2_pgo, min_eig
from certpgo.netsim import run_distributed
from certpgo.posegraph import SimulationParams, read_g2o, simulate_grid
from certpgo.rbcd import SolverConfig, rbcd, rbcd_pp

from conftest import (
    CONSISTENCY_TOLERANCES, consistency_errors, data_dir, descent_violations, three_robot_graph,
    gapped_matrix, grid9_run, make_central, random_certificate,
)
from test_netsim import drop_inter_edges, one_pose_round_payload


def verdict(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nC{k} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- 1. benchmark regression -------------------------------------------------

BENCHMARKS = {
    # file-name key: (accepted objective interval)
    "csail": (31.47 * 0.999, 31.47 * 1.001),
    "intel": (393.7 * 0.999, 393.7 * 1.001),
    "sphere2500": (1687 * 0.999, 1687 * 1.001),
    "torus3d": (24227 * 0.999, 24227 * 1.001),
    "cubicle": (717.1 * 0.999, 717.1 * 1.001),
    "killian": (61.15, 61.25),
}


def _find_dataset(root, key):
    for p in sorted(root.glob("*.g2o")):
        if p.stem.lower() == key:
            return p
    return None


def test_c1_benchmark_regression(capsys):
    root = data_dir()
    found = {} if root is None else {k: _find_dataset(root, k) for k in BENCHMARKS}
    found = {k: p for k, p in found.items() if p is not None}
    if not found:
        with capsys.disabled():
            print("\nC1 SKIP: no benchmark g2o files (set CERTPGO_DATA to a directory containing them)")
        pytest.skip("benchmark datasets unavailable")
    results, ok = [], True
    for key, path in found.items():
        lo, hi = BENCHMARKS[key]
        report = dc2_pgo(read_g2o(path, num_robots=5), DC2Config())
        good = report.certified and lo <= report.cost <= hi
        ok &= good
        results.append(f"{key}={report.cost:.6g}{'' if report.certified else '(uncertified)'}")
    missing = sorted(set(BENCHMARKS) - set(found))
    detail = " ".join(results) + (f"; not available: {','.join(missing)}" if missing else "")
    verdict(capsys, 1, ok, detail)


# -- 2. exactness at desk scale ----------------------------------------------

@lru_cache(maxsize=None)
def grid_report(seed, sigma_R=3.0):
    g, T = simulate_grid(SimulationParams(sigma_R_deg=sigma_R, seed=seed))
    return dc2_pgo(g, DC2Config(seed=seed), reference=T)


def test_c2_exactness_desk_scale(capsys):
    rows = []
    for seed in range(10):
        rep = grid_report(seed)
        good = rep.certified and rep.relative_suboptimality <= 1e-4 and len(rep.ranks) <= 2
        rows.append((seed, good, rep.relative_suboptimality, rep.rank_trace))
    passed = sum(r[1] for r in rows)
    worst = max(r[2] for r in rows)
    detail = (f"{passed}/10 seeds certified at rank <= 2nd with rel. subopt <= 1e-4 "
              f"(worst {worst:.2e}, ranks {sorted({tuple(r[3]) for r in rows})})")
    verdict(capsys, 2, passed >= 9, detail)


# -- 3. noise sweep -----------------------------------------------------------

def test_c3_noise_sweep(capsys):
    rows = []
    for sigma in (5.0, 8.0, 11.0):
        rep = grid_report(0, sigma)
        rows.append((sigma, rep.relative_suboptimality, rep.certified))
    ok = all(rel <= 1e-3 for _, rel, _ in rows)
    detail = ", ".join(f"sigma_R={s:g}deg: {rel:.2e}" for s, rel, _ in rows)
    verdict(capsys, 3, ok, detail + " (above 15deg failure is allowed and not run here)")


# -- 4. acceleration ----------------------------------------------------------

def test_c4_acceleration(capsys):
    rows = []
    for seed in range(3):
        plain = grid9_run(seed, accelerated=False).first_below(1e-2)
        fast = grid9_run(seed, accelerated=True).first_below(1e-2)
        rows.append((seed, plain, fast))
    ok = all(p is not None and f is not None and f < p and f <= 200 for _, p, f in rows)
    detail = ", ".join(f"seed {s}: RBCD {p} vs RBCD++ {f}" for s, p, f in rows)
    verdict(capsys, 4, ok, detail)


# -- 5. descent invariant -----------------------------------------------------

def _small_matrix_logs():
    g, _ = simulate_grid(SimulationParams(num_robots=3, poses_per_robot=27, dimension=3, seed=0))
    team = make_central(g)
    from certpgo import manifold as mf
    from certpgo.certify import init_chordal
    X0 = mf.random_lift(init_chordal(g, team=team), 5, seed=0)
    logs = []
    for rule in ("greedy", "uniform", "importance"):
        for parallel in (True, False):
            cfg = SolverConfig(grad_tol=1e-3, max_iters=500, selection=rule, parallel=parallel, seed=1)
            logs.append(rbcd(team, X0, cfg)[1])
            logs.append(rbcd_pp(team, X0, cfg)[1])
    return logs


def test_c5_descent_invariant(capsys):
    logs = [grid9_run(s, a) for s in range(3) for a in (False, True)]
    logs += _small_matrix_logs()
    count = sum(len(log.costs) for log in logs)
    bad = sum(descent_violations(log.costs) for log in logs)
    traces = [grid_report(s).cost_trace for s in range(10)]
    traces += [grid_report(0, s).cost_trace for s in (5.0, 8.0, 11.0)]
    count += sum(len(t) for t in traces)
    bad += sum(descent_violations(t) for t in traces)
    verdict(capsys, 5, bad == 0, f"{bad} violations over {count} logged iterations "
                                 f"({len(logs)} solver logs, {len(traces)} staircase traces)")


# -- 6. numerical consistency --------------------------------------------------

def test_c6_numerical_consistency(capsys):
    worst = {k: 0.0 for k in CONSISTENCY_TOLERANCES}
    for seed in range(100):
        for k, v in consistency_errors(seed).items():
            worst[k] = max(worst[k], v)
    ok = all(worst[k] <= tol for k, tol in CONSISTENCY_TOLERANCES.items())
    detail = "100 instances, worst " + ", ".join(
        f"{k} {worst[k]:.1e}<={CONSISTENCY_TOLERANCES[k]:.0e}" for k in CONSISTENCY_TOLERANCES)
    verdict(capsys, 6, ok, detail)


# -- 7. eigensolver oracle ----------------------------------------------------

def test_c7_eigensolver_oracle(capsys):
    worst = 0.0
    for seed in range(50):
        S = random_certificate(seed)
        ev = np.linalg.eigvalsh(S.dense())
        res = min_eig(S, PowerConfig(), seed=seed)
        worst = max(worst, abs(res.value - ev[0]) / np.abs(ev).max())
    ratios = []
    for gap in (1e-2, 5e-3):
        for seed in range(3):
            M = gapped_matrix(200, 10.0, gap, seed)
            fast = min_eig(M, PowerConfig(tol=1e-6, max_iters=200_000), seed=seed)
            slow = min_eig(M, PowerConfig(tol=1e-6, max_iters=200_000, accelerated=False), seed=seed)
            assert fast.converged and slow.converged
            ratios.append(fast.iterations / slow.iterations)
    ok = worst <= 1e-4 and max(ratios) <= 0.5
    detail = (f"50 certificates worst |dlambda|/||S|| {worst:.1e}<=1e-4; "
              f"accelerated/plain iterations max {max(ratios):.2f}<=0.5 on 6 gapped matrices")
    verdict(capsys, 7, ok, detail)


# -- 8. saddle escape ---------------------------------------------------------

def test_c8_saddle_escape(capsys):
    g, T = simulate_grid(SimulationParams(num_robots=4, poses_per_robot=49, dimension=2, sigma_R_deg=3, seed=0))
    rep = dc2_pgo(g, DC2Config(init="random", r0=2, seed=0), reference=T)
    escapes = rep.ranks[:-1]
    strict = all(rec.escape_cost is not None and rec.escape_cost < rec.cost for rec in escapes)
    # the run after each escape starts at the escaped point; its first logged gradient is the exit gradient
    exit_grads = [rep.logs[k + 1].records[0].grad_norm for k in range(len(escapes))]
    nonzero = all(gn is not None and gn > 0 for gn in exit_grads)
    ok = len(escapes) >= 1 and rep.certified and strict and nonzero
    detail = (f"ranks {rep.rank_trace}, certified={rep.certified}, "
              f"escape cost drops {[round(r.cost - r.escape_cost, 6) for r in escapes]}, "
              f"exit grad norms {[f'{x:.2e}' for x in exit_grads]}")
    verdict(capsys, 8, ok, detail)


# -- 9. distributed equivalence -------------------------------------------------

def test_c9_distributed_equivalence(capsys):
    mismatches, leaks, runs = 0, 0, 0
    for seed in range(10):
        g, _ = three_robot_graph(seed=seed)
        for rule in ("greedy", "uniform", "importance"):
            cfg = DC2Config(seed=seed, solver=SolverConfig(grad_tol=1e-1, max_iters=2000, selection=rule, seed=seed))
            central = dc2_pgo(g, cfg)
            dist, team = run_distributed(g, config=cfg)
            runs += 1
            mismatches += dist.cost_trace != central.cost_trace
            leaks += team.audit()["private_leaks"]
    g, _ = simulate_grid(SimulationParams(seed=0))
    full, _ = one_pose_round_payload(g)
    half, _ = one_pose_round_payload(drop_inter_edges(g))
    ratio = full / half
    ok = mismatches == 0 and leaks == 0 and 1.8 <= ratio <= 2.2
    detail = (f"{runs - mismatches}/{runs} runs bitwise equal, {leaks} private leaks, "
              f"payload ratio on doubled inter-robot edges {ratio:.3f}")
    verdict(capsys, 9, ok, detail)
