"""Shared fixtures and small independent oracles for the test suite."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from certpgo import manifold as mf
from certpgo.posegraph import (
    PoseGraph, Poses, RelativeMeasurement, SimulationParams, build_connection_laplacian,
    partition, project_to_rotation, simulate_grid,
)
from certpgo.rbcd import CentralTeam


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    return project_to_rotation(rng.standard_normal((d, d)))


def random_graph(n: int, d: int, seed: int, extra: int = 3, num_robots: int = 1) -> PoseGraph:
    """Odometry chain plus ``extra`` random loop closures with random weights."""
    rng = np.random.default_rng(seed)
    pairs = [(i, i + 1) for i in range(n - 1)]
    seen = set(pairs)
    for _ in range(10 * extra):
        if len(pairs) >= n - 1 + extra:
            break
        i, j = sorted(rng.choice(n, size=2, replace=False).tolist())
        if (i, j) not in seen:
            seen.add((i, j))
            pairs.append((i, j))
    edges = [RelativeMeasurement(i, j, random_rotation(d, rng), rng.standard_normal(d),
                                 float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.5, 5.0)))
             for i, j in pairs]
    owner = np.sort(rng.integers(0, num_robots, size=n)) if num_robots > 1 else np.zeros(n, int)
    # make robot ids dense
    _, owner = np.unique(owner, return_inverse=True)
    return PoseGraph(d, n, tuple(edges), owner)


def graph_from_poses(T: Poses, pairs, owner, kappa: float = 1.0, tau: float = 1.0) -> PoseGraph:
    """Noiseless measurements between the given pose pairs."""
    R, t = T.rotations, T.translations
    edges = [RelativeMeasurement(i, j, R[i].T @ R[j], R[i].T @ (t[j] - t[i]), kappa, tau)
             for i, j in pairs]
    return PoseGraph(T.d, T.n, tuple(edges), np.asarray(owner))


def random_poses_rng(n: int, d: int, rng: np.random.Generator, scale: float = 3.0) -> Poses:
    return Poses(np.array([random_rotation(d, rng) for _ in range(n)]), scale * rng.standard_normal((n, d)))


def expanded_cost(graph: PoseGraph, X: np.ndarray) -> float:
    """Plain per-edge loop: sum kappa ||Y_j - Y_i R||^2 + tau ||p_j - p_i - Y_i t||^2."""
    d = graph.d
    D = d + 1
    total = 0.0
    for e in graph.edges:
        Yi, pi = X[:, e.i * D:e.i * D + d], X[:, e.i * D + d]
        Yj, pj = X[:, e.j * D:e.j * D + d], X[:, e.j * D + d]
        total += e.kappa * np.sum((Yj - Yi @ e.rotation) ** 2)
        total += e.tau * np.sum((pj - pi - Yi @ e.translation) ** 2)
    return float(total)


def make_central(graph: PoseGraph) -> CentralTeam:
    return CentralTeam(graph, partition(graph), build_connection_laplacian(graph))


def three_robot_graph(poses_per_robot: int = 6, d: int = 3, seed: int = 0, noise: float = 0.05) -> tuple[PoseGraph, Poses]:
    """Three robots (alpha=0, beta=1, gamma=2); gamma shares loop closures with both others."""
    rng = np.random.default_rng(seed)
    n = 3 * poses_per_robot
    T = random_poses_rng(n, d, rng)
    owner = np.repeat(np.arange(3), poses_per_robot)
    pairs = [(i, i + 1) for i in range(n - 1) if owner[i] == owner[i + 1]]
    k = poses_per_robot
    pairs += [(0, 2 * k), (2, 2 * k + 2), (k, 2 * k + 3), (k + 2, 2 * k + 5), (1, 3), (k + 1, k + 4)]
    edges = []
    for i, j in pairs:
        R = T.rotations[i].T @ T.rotations[j]
        t = T.rotations[i].T @ (T.translations[j] - T.translations[i])
        R = project_to_rotation(R + noise * rng.standard_normal((d, d)))
        edges.append(RelativeMeasurement(i, j, R, t + noise * rng.standard_normal(d), 10.0, 10.0))
    return PoseGraph(d, n, tuple(edges), owner), T


@pytest.fixture(scope="session")
def small_sim():
    """3 robots x 27 poses in 3D with default noise."""
    return simulate_grid(SimulationParams(num_robots=3, poses_per_robot=27, dimension=3, seed=0))


@pytest.fixture(scope="session")
def small_sim_2d():
    return simulate_grid(SimulationParams(num_robots=3, poses_per_robot=16, dimension=2, seed=1))


@pytest.fixture(scope="session")
def noiseless_sim():
    return simulate_grid(SimulationParams(num_robots=3, poses_per_robot=27, dimension=3,
                                          sigma_R_deg=0.0, sigma_t=0.0, seed=3))


@pytest.fixture(scope="session")
def grid9():
    """The default 9-robot, 125-pose 3D simulation."""
    return simulate_grid(SimulationParams(seed=0))


def data_dir() -> Path | None:
    """Directory with public g2o benchmark files, if the environment provides one."""
    p = os.environ.get("CERTPGO_DATA")
    return Path(p) if p and Path(p).is_dir() else None


def lift_truth(T: Poses, r: int) -> np.ndarray:
    return mf.random_lift(T, r, seed=None, Y_rand=np.eye(r, T.d))


def consistency_errors(seed: int) -> dict[str, float]:
    """Relative errors of the derivative and Laplacian identities on one random instance."""
    from certpgo.objective import cost, hessian_vec, riemannian_gradient
    from certpgo.posegraph import null_vector

    rng = np.random.default_rng(seed)
    d = int(rng.choice([2, 3]))
    n = int(rng.integers(4, 11))
    r = d + int(rng.integers(0, 4))
    g = random_graph(n, d, seed=seed, extra=int(rng.integers(1, 6)))
    Q = build_connection_laplacian(g)
    X = mf.random_point(n, d, r, rng)
    eta = mf.random_tangent(X, d, rng)
    eta /= np.linalg.norm(eta)
    eta2 = mf.random_tangent(X, d, rng)
    eta2 /= np.linalg.norm(eta2)
    out = {}

    G = riemannian_gradient(Q, X, d)
    h = 1e-5
    fd = (cost(Q, mf.retract(X, h * eta, d)) - cost(Q, mf.retract(X, -h * eta, d))) / (2 * h)
    exact = mf.inner(G, eta)
    out["gradient"] = abs(fd - exact) / max(abs(exact), np.linalg.norm(G))

    h = 1e-5
    Gp = mf.project_to_tangent(X, riemannian_gradient(Q, mf.retract(X, h * eta, d), d), d)
    Gm = mf.project_to_tangent(X, riemannian_gradient(Q, mf.retract(X, -h * eta, d), d), d)
    H = hessian_vec(Q, X, eta, d)
    out["hessian"] = np.linalg.norm((Gp - Gm) / (2 * h) - H) / max(np.linalg.norm(H), 1e-300)

    H2 = hessian_vec(Q, X, eta2, d)
    a, b = mf.inner(eta, H2), mf.inner(eta2, H)
    out["symmetry"] = abs(a - b) / max(np.linalg.norm(H) + np.linalg.norm(H2), 1e-300)

    quad = cost(Q, X)
    ref = expanded_cost(g, X)
    out["expanded"] = abs(quad - ref) / max(ref, 1.0)

    out["null"] = float(np.abs(Q @ null_vector(n, d)).max())

    U = rng.standard_normal(X.shape)
    PU = mf.project_to_tangent(X, U, d)
    out["idempotence"] = float(np.abs(mf.project_to_tangent(X, PU, d) - PU).max())
    return out


CONSISTENCY_TOLERANCES = {"gradient": 1e-5, "hessian": 1e-4, "symmetry": 1e-9,
                          "expanded": 1e-9, "null": 1e-9, "idempotence": 1e-10}


_GRID9_CACHE: dict = {}


def grid9_run(seed: int, accelerated: bool, selection: str = "greedy"):
    """Cached RBCD / RBCD++ run on the default 9-robot sim: chordal init lifted to r = 5, tol 1e-2."""
    key = (seed, accelerated, selection)
    if key not in _GRID9_CACHE:
        from certpgo.certify import init_chordal
        from certpgo.rbcd import SolverConfig, rbcd, rbcd_pp

        g, _ = simulate_grid(SimulationParams(seed=seed))
        team = make_central(g)
        X0 = mf.random_lift(init_chordal(g, team=team), 5, seed=seed)
        cfg = SolverConfig(grad_tol=1e-2, max_iters=1000, selection=selection, seed=seed)
        _GRID9_CACHE[key] = (rbcd_pp if accelerated else rbcd)(team, X0, cfg)[1]
    return _GRID9_CACHE[key]


def descent_violations(costs) -> int:
    return sum(1 for a, b in zip(costs, costs[1:]) if b > a)


def random_certificate(seed: int):
    """Certificate operator S(X) at a random point of a random graph, with (d+1)n <= 300."""
    from certpgo.objective import certificate

    rng = np.random.default_rng(seed)
    d = int(rng.choice([2, 3]))
    n = int(rng.integers(5, 300 // (d + 1) + 1))
    g = random_graph(n, d, seed=seed, extra=int(rng.integers(1, n)))
    Q = build_connection_laplacian(g)
    X = mf.random_point(n, d, d + int(rng.integers(0, 3)), rng)
    return certificate(Q, X, d)


def gapped_matrix(dim: int, top: float, gap: float, seed: int) -> np.ndarray:
    """Symmetric matrix with eigenvalues 0, gap*top, a spread in [2 gap top, top/2], and top."""
    rng = np.random.default_rng(seed)
    vals = np.concatenate([[0.0, gap * top], rng.uniform(2 * gap * top, 0.5 * top, dim - 3), [top]])
    U, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (U * vals) @ U.T
