"""Certification and the outer solver.

Minimum-eigenpair estimation for the certificate matrix S(X) by power and
accelerated power iteration, saddle escape after a rank lift, the Riemannian
Staircase, initialization (spanning tree, chordal, random), rounding, pose
error metrics and the end-to-end ``dc2_pgo`` driver.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, asdict, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial.transform import Rotation

from . import manifold as mf
from .objective import CertificateOperator
from .posegraph import (
    PoseGraph, Poses, BlockPartition, build_connection_laplacian, edge_residual_cost,
    laplacian_from_arrays, partition, pose_columns, project_to_rotation, rng_from_seed,
)
from .rbcd import CentralTeam, IterationLog, SolverConfig, rbcd_pp


class EscapeFailedError(RuntimeError):
    """Backtracking along a negative-curvature direction found no decrease."""


class RoundingError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# MinEig


@dataclass
class PowerConfig:
    gamma: float = 0.999
    tol: float = 1e-2
    max_iters: int = 20000
    dominant_tol: float = 1e-6
    dominant_max_iters: int = 5000
    accelerated: bool = True

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.tol > 0:
            raise ValueError("residual tolerance must be positive")


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    residual: float
    iterations: int
    converged: bool
    dominant: float
    dominant_iterations: int
    dominant_converged: bool


def _as_operator(S, dim):
    if isinstance(S, CertificateOperator):
        return S.apply, S.dim
    if isinstance(S, np.ndarray):
        return (lambda w: S @ w), S.shape[0]
    if dim is None:
        raise ValueError("dim is required for a callable operator")
    return S, dim


def min_eig(S, config: PowerConfig | None = None, seed: int = 0, *, dim: int | None = None,
            dot: Callable[[np.ndarray, np.ndarray], float] | None = None,
            x0: np.ndarray | None = None) -> EigenResult:
    """Estimate the minimum eigenpair of a symmetric operator.

    Phase 1 runs plain power iteration for the dominant (largest-magnitude)
    eigenpair. If that eigenvalue is negative it is the minimum. Otherwise the
    maximum eigenpair of C = lambda_dom I - S is found by power iteration with
    momentum beta = gamma^2 lambda_dom^2 / 4 (beta = 0 when
    ``config.accelerated`` is false), stopping on the Ritz residual
    ||S v - (v^T S v) v|| <= tol.

    ``S`` may be a ``CertificateOperator``, a dense array, or a callable (then
    ``dim`` is needed). ``dot`` replaces the inner product, which lets
    distributed callers fix the reduction order.
    """
    cfg = config or PowerConfig()
    apply, n = _as_operator(S, dim)
    dot = dot or (lambda a, b: float(np.dot(a, b)))
    rng = rng_from_seed(seed)

    def unit(v):
        return v / math.sqrt(dot(v, v))

    # phase 1: dominant eigenpair
    x = unit(rng.standard_normal(n))
    theta, res, dom_conv, it1 = 0.0, math.inf, False, 0
    for it1 in range(1, cfg.dominant_max_iters + 1):
        y = apply(x)
        theta = dot(x, y)
        r = y - theta * x
        res = math.sqrt(dot(r, r))
        if res <= cfg.dominant_tol * abs(theta):
            dom_conv = True
            break
        x = unit(y)
    lam_dom = theta
    if not dom_conv:
        # no clear dominant eigenvalue (e.g. a +/- pair or a slow gap): shift by an estimate of ||S||
        y = apply(x)
        lam_dom = 1.01 * math.sqrt(dot(y, y))
    elif lam_dom < 0:
        return EigenResult(lam_dom, x, res, 0, dom_conv, lam_dom, it1, dom_conv)

    # phase 2: top eigenpair of C = lam_dom I - S
    beta = (cfg.gamma * lam_dom) ** 2 / 4.0 if cfg.accelerated else 0.0
    v = unit(x0.astype(float).ravel() if x0 is not None else rng.standard_normal(n))
    v_prev = np.zeros(n)
    lam, res, conv, k = math.inf, math.inf, False, 0
    for k in range(1, cfg.max_iters + 1):
        Sv = apply(v)
        lam = dot(v, Sv)
        r = Sv - lam * v
        res = math.sqrt(dot(r, r))
        if res <= cfg.tol:
            conv = True
            break
        y = lam_dom * v - Sv - beta * v_prev
        scale = math.sqrt(dot(y, y))
        # both iterates share one scale factor, so the recurrence is unchanged
        v_prev, v = v / scale, y / scale
    if not conv:
        Sv = apply(v)
        lam = dot(v, Sv)
        r = Sv - lam * v
        res = math.sqrt(dot(r, r))
    return EigenResult(lam, v, res, k, conv, lam_dom, it1, dom_conv)


# ---------------------------------------------------------------------------
# Saddle escape


def escape_saddle(X_plus: np.ndarray, X_dot: np.ndarray, d: int,
                  cost_fn: Callable[[np.ndarray], float],
                  grad_norm_fn: Callable[[np.ndarray], float],
                  alpha0: float = 1.0, min_alpha: float = 1e-16,
                  f_plus: float | None = None,
                  on_step: Callable[[float], None] | None = None) -> tuple[np.ndarray, float]:
    """Backtrack along the second-order descent direction ``X_dot`` from ``X_plus``.

    Returns the first retraction ``R(X_plus, alpha X_dot)`` (alpha halved from
    ``alpha0``) with strictly smaller cost and nonzero gradient, together with
    the accepted alpha.
    """
    f0 = cost_fn(X_plus) if f_plus is None else f_plus
    alpha = alpha0
    while alpha >= min_alpha:
        if on_step is not None:
            on_step(alpha)
        try:
            X = mf.retract(X_plus, alpha * X_dot, d)
        except mf.SingularityError:
            alpha /= 2.0
            continue
        if cost_fn(X) < f0 and grad_norm_fn(X) > 0:
            return X, alpha
        alpha /= 2.0
    raise EscapeFailedError("step size underflow while escaping saddle")


# ---------------------------------------------------------------------------
# Staircase


@dataclass
class StaircaseConfig:
    r0: int | None = None
    rank_max: int | None = None
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(grad_tol=1e-1, max_iters=2000))
    power: PowerConfig = field(default_factory=PowerConfig)
    eig_tol_rel: float = 1e-4
    polish_grad_tol: float | None = 1e-4
    seed: int = 0


@dataclass
class RankRecord:
    rank: int
    iterations: int
    converged: bool
    cost: float
    grad_norm: float
    lambda_min: float
    residual: float
    eig_converged: bool
    eig_iterations: int
    lambda_dom: float
    eps_tol: float
    certified: bool
    escape_cost: float | None = None
    escape_alpha: float | None = None


@dataclass
class StaircaseResult:
    X: np.ndarray
    f_sdp: float
    certified: bool
    ranks: list[RankRecord]
    logs: list[IterationLog]


def _team_grad_norm(team, X):
    return math.sqrt(team.total(team.grad_norms2(X, team.linear_terms(X)), "gradnorm2"))


def team_min_eig(team, X: np.ndarray, config: PowerConfig, seed: int) -> EigenResult:
    Lam = team.multipliers(X)
    return min_eig(team.certificate_apply(Lam), config, seed, dim=X.shape[1], dot=team.dot)


def staircase(team, X0: np.ndarray, config: StaircaseConfig | None = None) -> StaircaseResult:
    """Riemannian Staircase: local search, certification, and escape to the next rank."""
    cfg = config or StaircaseConfig()
    d = team.d
    r = X0.shape[0]
    if r < d:
        raise ValueError("initial rank must be at least d")
    rank_max = cfg.rank_max if cfg.rank_max is not None else r + 5
    X = X0
    ranks: list[RankRecord] = []
    logs: list[IterationLog] = []
    while True:
        X, log = rbcd_pp(team, X, cfg.solver)
        logs.append(log)
        f = team.cost(X)
        gnorm = _team_grad_norm(team, X)
        eig = team_min_eig(team, X, cfg.power, cfg.seed + r)
        eps = cfg.eig_tol_rel * (1.0 + abs(eig.dominant))
        certified = eig.value >= -eps and eig.converged
        rec = RankRecord(r, log.iterations, log.converged, f, gnorm, eig.value, eig.residual,
                         eig.converged, eig.iterations, eig.dominant, eps, certified)
        ranks.append(rec)
        team.control("certificate", certified)
        if certified or eig.value >= -eps or r >= rank_max:
            if certified and cfg.polish_grad_tol is not None and gnorm > cfg.polish_grad_tol:
                # tighten the estimate of the SDP value at the certified rank
                polish = replace(cfg.solver, grad_tol=cfg.polish_grad_tol)
                X, log = rbcd_pp(team, X, polish)
                logs.append(log)
                f = team.cost(X)
            return StaircaseResult(X, f, certified, ranks, logs)
        X_plus = mf.lift_rank(X)
        X_dot = np.zeros_like(X_plus)
        X_dot[-1] = eig.vector
        X, alpha = escape_saddle(X_plus, X_dot, d, team.cost, lambda Z: _team_grad_norm(team, Z),
                                 f_plus=f, on_step=lambda a: team.control("stepsize", a))
        rec.escape_alpha = alpha
        rec.escape_cost = team.cost(X)
        team.control("rank", r + 1)
        r += 1


# ---------------------------------------------------------------------------
# Initialization


def init_spanning_tree(graph: PoseGraph) -> Poses:
    """Compose measurements along a BFS tree rooted at pose 0."""
    d, n = graph.d, graph.n
    adj: list[list[tuple[int, int, bool]]] = [[] for _ in range(n)]
    for k, e in enumerate(graph.edges):
        adj[e.i].append((e.j, k, True))
        adj[e.j].append((e.i, k, False))
    Rs = np.zeros((n, d, d))
    ts = np.zeros((n, d))
    seen = np.zeros(n, dtype=bool)
    Rs[0], seen[0] = np.eye(d), True
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b, k, forward in adj[a]:
            if seen[b]:
                continue
            e = graph.edges[k]
            if forward:
                Rs[b] = Rs[a] @ e.rotation
                ts[b] = ts[a] + Rs[a] @ e.translation
            else:
                Rs[b] = Rs[a] @ e.rotation.T
                ts[b] = ts[a] - Rs[b] @ e.translation
            seen[b] = True
            queue.append(b)
    return Poses(Rs, ts)


class _InitBlock:
    """One robot's share of the quadratic <M, Z^T Z> restricted to its free columns."""

    def __init__(self, M: sp.csr_matrix, cols: np.ndarray, nbr_cols: np.ndarray, free_mask: np.ndarray):
        rows = M[cols]
        self.free = np.flatnonzero(free_mask)
        rows_f = rows[self.free]
        self.M_own = rows_f[:, cols].tocsr()
        self.M_nbr = rows_f[:, nbr_cols].tocsr()
        self.lu = splu(sp.csc_matrix(rows_f[:, cols[self.free]])) if self.free.size else None

    def product(self, Z_b: np.ndarray, Z_nbr: np.ndarray) -> np.ndarray:
        """Free columns of Z M, from this robot's columns and its neighbors' columns."""
        out = (self.M_own @ Z_b.T).T
        if self.M_nbr.shape[1]:
            out = out + (self.M_nbr @ Z_nbr.T).T
        return out

    def precondition(self, r: np.ndarray) -> np.ndarray:
        if self.lu is None:
            return r
        return self.lu.solve(np.ascontiguousarray(r.T)).T


def _block_pcg(team, M: sp.csr_matrix, Z: np.ndarray, free: np.ndarray, max_iters: int,
               rtol: float = 1e-12) -> np.ndarray:
    """Minimize <M, Z^T Z> over the free columns of Z by block-Jacobi preconditioned CG.

    Each robot factors its own free block once; an iteration costs one exchange
    of neighbor columns and two scalar reductions.
    """
    blocks = [_InitBlock(M, blk.cols, blk.nbr_cols, free[blk.cols]) for blk in team.blocks]
    cols = [blk.cols[ib.free] for blk, ib in zip(team.blocks, blocks)]
    nbrs = team.share(Z, "init")
    r = [-ib.product(Z[:, blk.cols], nb) for ib, blk, nb in zip(blocks, team.blocks, nbrs)]
    z = [ib.precondition(rb) for ib, rb in zip(blocks, r)]
    p = [zb.copy() for zb in z]
    rz = team.total([float(np.vdot(rb, zb)) for rb, zb in zip(r, z)], "init")
    if rz <= 0.0:
        return Z
    stop = rtol * rtol * rz
    P = np.zeros_like(Z)
    for _ in range(max_iters):
        for c, pb in zip(cols, p):
            P[:, c] = pb
        nbrs = team.share(P, "init")
        q = [ib.product(P[:, blk.cols], nb) for ib, blk, nb in zip(blocks, team.blocks, nbrs)]
        pq = team.total([float(np.vdot(pb, qb)) for pb, qb in zip(p, q)], "init")
        if pq <= 0.0:
            break
        alpha = rz / pq
        for b, c in enumerate(cols):
            Z[:, c] += alpha * p[b]
            r[b] = r[b] - alpha * q[b]
        z = [ib.precondition(rb) for ib, rb in zip(blocks, r)]
        rz_new = team.total([float(np.vdot(rb, zb)) for rb, zb in zip(r, z)], "init")
        if rz_new <= stop:
            break
        beta = rz_new / rz
        p = [zb + beta * pb for zb, pb in zip(z, p)]
        rz = rz_new
    return Z


def init_chordal(graph: PoseGraph, max_gs_iters: int = 50, team=None) -> Poses:
    """Chordal relaxation solved distributedly, robot blocks as preconditioner.

    Rotations: unconstrained least squares of sum kappa ||R_j - R_i R_ij||^2 with
    R_0 = I, then projection onto SO(d). Translations: least squares with those
    rotations fixed and t_0 = 0. Each stage runs at most ``max_gs_iters``
    block-Jacobi preconditioned CG iterations.
    """
    if team is None:
        part = partition(graph)
        team = CentralTeam(graph, part, build_connection_laplacian(graph))
    d, n = graph.d, graph.n
    D = d + 1
    M_rot = laplacian_from_arrays(d, n, graph.tails, graph.heads, graph.rotations,
                                  graph.translations, graph.kappas, np.zeros(len(graph.edges)))
    Z = np.zeros((d, D * n))
    Z[:, :d] = np.eye(d)
    free = np.zeros(D * n, dtype=bool)
    free.reshape(n, D)[:, :d] = True
    free[:d] = False
    Z = _block_pcg(team, M_rot, Z, free, max_gs_iters)
    B = Z.reshape(d, n, D)
    Rs = project_to_rotation(B[:, :, :d].transpose(1, 0, 2))

    Z = Poses(Rs, np.zeros((n, d))).matrix()
    free = np.zeros(D * n, dtype=bool)
    free.reshape(n, D)[:, d] = True
    free[d] = False
    Z = _block_pcg(team, team.Q, Z, free, max_gs_iters)
    return Poses(Rs, Z.reshape(d, n, D)[:, :, d].T.copy())


def random_poses(n: int, d: int, seed: int = 0, translation_scale: float = 1.0) -> Poses:
    rng = rng_from_seed(seed)
    if d == 2:
        th = rng.uniform(-math.pi, math.pi, n)
        c, s = np.cos(th), np.sin(th)
        Rs = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    else:
        Rs = Rotation.random(n, random_state=rng).as_matrix()
    return Poses(Rs, translation_scale * rng.standard_normal((n, d)))


# ---------------------------------------------------------------------------
# Rounding and metrics


def round_solution(X: np.ndarray, d: int, Y1: np.ndarray | None = None) -> Poses:
    """Poses in the frame of pose 0: R_i = proj_SO(Y_1^T Y_i), t_i = Y_1^T p_i."""
    Y = mf.stiefel_part(X, d)
    p = mf.translation_part(X, d)
    if Y1 is None:
        Y1 = Y[0]
    A = np.swapaxes(Y1, 0, 1)[None] @ Y
    s = np.linalg.svd(A, compute_uv=False)
    if (s[:, -1] <= 1e-12 * np.maximum(s[:, 0], 1e-300)).any():
        raise RoundingError("degenerate block in rounding")
    Rs = project_to_rotation(A)
    if np.array_equal(Y1, Y[0]):
        Rs[0] = np.eye(d)
    ts = (Y1.T @ p).T
    return Poses(Rs, ts)


def metrics(T: Poses, T_ref: Poses) -> tuple[float, float]:
    """(rotation RMSE, translation RMSE) after optimal global alignment."""
    if T.n != T_ref.n or T.d != T_ref.d:
        raise ValueError("pose sets differ in size or dimension")
    n = T.n
    G = project_to_rotation(np.einsum("nij,nkj->ik", T.rotations, T_ref.rotations))
    dR = T.rotations - G[None] @ T_ref.rotations
    rot = math.sqrt(float(np.sum(dR * dR)) / n)
    a = T.translations - T.translations.mean(0)
    b = T_ref.translations - T_ref.translations.mean(0)
    H = project_to_rotation(a.T @ b)
    dt = a - b @ H.T
    trans = math.sqrt(float(np.sum(dt * dt)) / n)
    return rot, trans


# ---------------------------------------------------------------------------
# End-to-end driver


INIT_METHODS = ("chordal", "spanning-tree", "random")


@dataclass
class DC2Config:
    init: str = "chordal"
    r0: int | None = None
    rank_max: int | None = None
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(grad_tol=1e-1, max_iters=2000))
    power: PowerConfig = field(default_factory=PowerConfig)
    eig_tol_rel: float = 1e-4
    polish_grad_tol: float | None = 1e-4
    max_gs_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.init not in INIT_METHODS:
            raise ValueError(f"unknown init method {self.init!r}")

    def staircase_config(self, d: int) -> StaircaseConfig:
        r0 = self.r0 if self.r0 is not None else d + 1
        if r0 < d:
            raise ValueError("r0 must be at least d")
        rank_max = self.rank_max if self.rank_max is not None else r0 + 5
        return StaircaseConfig(r0, rank_max, self.solver, self.power, self.eig_tol_rel,
                               self.polish_grad_tol, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolveReport:
    poses: Poses
    cost: float
    f_sdp: float
    suboptimality: float
    relative_suboptimality: float
    certified: bool
    ranks: list[RankRecord]
    logs: list[IterationLog]
    metrics: tuple[float, float] | None = None

    @property
    def rank_trace(self) -> list[int]:
        return [rec.rank for rec in self.ranks]

    @property
    def cost_trace(self) -> list[float]:
        return [c for log in self.logs for c in log.costs]

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "f_sdp": self.f_sdp,
            "suboptimality": self.suboptimality,
            "relative_suboptimality": self.relative_suboptimality,
            "certified": self.certified,
            "ranks": [asdict(r) for r in self.ranks],
            "cost_trace": self.cost_trace,
            "metrics": None if self.metrics is None else {"rotation_rmse": self.metrics[0],
                                                          "translation_rmse": self.metrics[1]},
            "poses": {"dimension": self.poses.d,
                      "rotations": self.poses.rotations.tolist(),
                      "translations": self.poses.translations.tolist()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def initial_poses(graph: PoseGraph, cfg: DC2Config, team=None) -> Poses:
    if cfg.init == "chordal":
        return init_chordal(graph, cfg.max_gs_iters, team)
    if cfg.init == "spanning-tree":
        return init_spanning_tree(graph)
    scale = float(np.abs(graph.translations).max()) if graph.edges else 1.0
    return random_poses(graph.n, graph.d, cfg.seed, translation_scale=scale)


def dc2_pgo(graph: PoseGraph, config: DC2Config | None = None, team=None,
            reference: Poses | None = None) -> SolveReport:
    """Initialize, lift, run the staircase, round, and bound the suboptimality."""
    cfg = config or DC2Config()
    d = graph.d
    if team is None:
        team = CentralTeam(graph, partition(graph), build_connection_laplacian(graph),
                           cfg.solver.precon_lambda_scale)
    sc = cfg.staircase_config(d)
    T0 = initial_poses(graph, cfg, team)
    X0 = mf.random_lift(T0, sc.r0, seed=cfg.seed)
    result = staircase(team, X0, sc)
    Y1 = team.relay(mf.stiefel_part(result.X[:, team.blocks[0].cols[: d + 1]], d)[0], "Y1")
    T = round_solution(result.X, d, Y1)
    fT = team.cost(T.matrix())
    gap = fT - result.f_sdp
    rel = gap / result.f_sdp if result.f_sdp > 0 else gap
    met = metrics(T, reference) if reference is not None else None
    return SolveReport(T, fT, result.f_sdp, gap, rel, result.certified, result.ranks, result.logs, met)
