"""Riemannian block-coordinate descent.

Contains the trust-region block update with a truncated conjugate-gradient
inner solver, block/color selection rules, and the RBCD and accelerated RBCD++
drivers. Drivers talk to the robots through a *team* object: ``CentralTeam``
evaluates everything in-process, while ``certpgo.netsim`` supplies a team that
routes the same data through simulated messages. Both run identical arithmetic,
so their iterates agree bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import manifold as mf
from .objective import Preconditioner, ReducedProblem, right_multiply
from .posegraph import BlockPartition, PoseGraph, edge_cost, pose_columns, rng_from_seed

SELECTION_RULES = ("uniform", "importance", "greedy")
RESTART_MODES = ("adaptive", "fixed", "none")


class ContractViolation(RuntimeError):
    """An execution contract (coloring, privacy) was broken."""


@dataclass
class SolverConfig:
    grad_tol: float = 1e-2
    max_iters: int = 1000
    selection: str = "greedy"
    restart: str = "adaptive"
    restart_period: int = 50
    c1: float = 1e-4
    delta0_scale: float = 10.0
    rho_threshold: float = 0.25
    max_tr_rejections: int = 30
    tcg_max_iters: int = 100
    tcg_kappa: float = 0.1
    tcg_theta: float = 1.0
    precon_lambda_scale: float = 1e-3
    parallel: bool = True
    seed: int = 0
    check_period: int = 1

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.c1 > 0:
            raise ValueError("c1 must be positive")
        if not self.delta0_scale > 0:
            raise ValueError("delta0_scale must be positive")
        if not 0 < self.rho_threshold < 1:
            raise ValueError("rho_threshold must lie in (0, 1)")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.restart not in RESTART_MODES:
            raise ValueError(f"unknown restart mode {self.restart!r}")
        if self.restart == "fixed" and self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        if self.check_period < 1:
            raise ValueError("check_period must be >= 1")


@dataclass
class IterationRecord:
    iteration: int
    selected: int | None
    cost: float
    grad_norm: float | None
    restart: bool
    wall_time: float


@dataclass
class IterationLog:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        """Number of block-update iterations performed (record 0 is the start point)."""
        return max(0, len(self.records) - 1)

    @property
    def costs(self) -> list[float]:
        return [rec.cost for rec in self.records]

    @property
    def grad_norms(self) -> list[float | None]:
        return [rec.grad_norm for rec in self.records]

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)

    def first_below(self, tol: float) -> int | None:
        """First iteration whose logged gradient norm is <= tol."""
        for rec in self.records:
            if rec.grad_norm is not None and rec.grad_norm <= tol:
                return rec.iteration
        return None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(rec)) + "\n" for rec in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(IterationRecord.__dataclass_fields__))
        writer.writeheader()
        for rec in self.records:
            writer.writerow(asdict(rec))
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Truncated CG and the trust-region block update


@dataclass
class TCGResult:
    eta: np.ndarray
    Heta: np.ndarray
    model_value: float
    iterations: int
    stop_reason: str


def _boundary_step(eta, delta, Delta):
    """tau >= 0 with ||eta + tau delta|| = Delta."""
    a = float(np.vdot(delta, delta))
    b = 2.0 * float(np.vdot(eta, delta))
    c = float(np.vdot(eta, eta)) - Delta * Delta
    disc = max(b * b - 4.0 * a * c, 0.0)
    return (-b + math.sqrt(disc)) / (2.0 * a)


def tcg(g: np.ndarray, hess: Callable[[np.ndarray], np.ndarray], Delta: float,
        precon: Callable[[np.ndarray], np.ndarray] | None = None,
        max_iters: int = 100, kappa: float = 0.1, theta: float = 1.0) -> TCGResult:
    """Preconditioned Steihaug-Toint CG for min <g,eta> + 1/2 <eta,H eta>, ||eta|| <= Delta.

    The trust region is measured in the Euclidean norm. The result is compared
    against the Cauchy point and whichever has the lower model value is
    returned, so the model decrease is never below the Cauchy decrease.
    """
    precon = precon if precon is not None else (lambda v: v)
    eta = np.zeros_like(g)
    Heta = np.zeros_like(g)
    r = g.copy()
    z = precon(r)
    rz = float(np.vdot(r, z))
    delta = -z
    r0 = math.sqrt(float(np.vdot(r, r)))
    reason = "max_iters"
    j = 0
    if r0 == 0.0:
        return TCGResult(eta, Heta, 0.0, 0, "zero_gradient")
    for j in range(1, max_iters + 1):
        Hd = hess(delta)
        dHd = float(np.vdot(delta, Hd))
        if dHd <= 0.0 or rz <= 0.0:
            tau = _boundary_step(eta, delta, Delta)
            eta, Heta = eta + tau * delta, Heta + tau * Hd
            reason = "negative_curvature"
            break
        alpha = rz / dHd
        eta_new = eta + alpha * delta
        if math.sqrt(float(np.vdot(eta_new, eta_new))) >= Delta:
            tau = _boundary_step(eta, delta, Delta)
            eta, Heta = eta + tau * delta, Heta + tau * Hd
            reason = "trust_region"
            break
        eta, Heta = eta_new, Heta + alpha * Hd
        r = r + alpha * Hd
        rnorm = math.sqrt(float(np.vdot(r, r)))
        if rnorm <= r0 * min(r0 ** theta, kappa):
            reason = "converged"
            break
        z = precon(r)
        rz_new = float(np.vdot(r, z))
        delta = -z + (rz_new / rz) * delta
        rz = rz_new

    model = float(np.vdot(g, eta) + 0.5 * np.vdot(eta, Heta))
    # Cauchy point safeguard
    gnorm = r0
    Hg = hess(g)
    gHg = float(np.vdot(g, Hg))
    t = Delta / gnorm
    if gHg > 0:
        t = min(gnorm * gnorm / gHg, t)
    cauchy_model = -t * gnorm * gnorm + 0.5 * t * t * gHg
    if cauchy_model < model:
        return TCGResult(-t * g, -t * Hg, cauchy_model, j, "cauchy")
    return TCGResult(eta, Heta, model, j, reason)


@dataclass
class BlockUpdateInfo:
    accepted: bool
    cost_change: float
    model_decrease: float
    radius: float
    rejections: int
    grad_norm: float


def block_update(rp: ReducedProblem, X_b: np.ndarray, config: SolverConfig | None = None,
                 precon: Preconditioner | None = None,
                 Delta0: float | None = None) -> tuple[np.ndarray, BlockUpdateInfo]:
    """One trust-region step on the reduced problem; returns X_b unchanged if no step is accepted."""
    cfg = config or SolverConfig()
    d = rp.d
    G = rp.euclidean_gradient(X_b)
    g = mf.project_to_tangent(X_b, G, d)
    gnorm = mf.norm(g)
    if not np.isfinite(gnorm):
        raise FloatingPointError("non-finite gradient in block update")
    if gnorm == 0.0:
        return X_b, BlockUpdateInfo(False, 0.0, 0.0, 0.0, 0, 0.0)
    W = rp.weingarten_blocks(X_b, G)

    def hess(v):
        return rp.hessian_vec(X_b, v, W)

    P = None if precon is None else (lambda v: precon.apply_tangent(X_b, v, d))
    Delta = Delta0 if Delta0 is not None else cfg.delta0_scale * gnorm
    for k in range(cfg.max_tr_rejections + 1):
        res = tcg(g, hess, Delta, P, cfg.tcg_max_iters, cfg.tcg_kappa, cfg.tcg_theta)
        model_dec = -res.model_value
        if not np.isfinite(model_dec):
            raise FloatingPointError("non-finite model value in block update")
        try:
            X_new = mf.retract(X_b, res.eta, d)
        except mf.SingularityError:
            Delta /= 4.0
            continue
        change = rp.cost_change(X_b, X_new)
        if model_dec > 0 and change < 0 and -change / model_dec > cfg.rho_threshold:
            return X_new, BlockUpdateInfo(True, change, model_dec, Delta, k, gnorm)
        Delta /= 4.0
    return X_b, BlockUpdateInfo(False, 0.0, 0.0, Delta, cfg.max_tr_rejections + 1, gnorm)


# ---------------------------------------------------------------------------
# Selection


def select(rule: str, norms: Sequence[float], rng: np.random.Generator | None = None) -> int:
    """Pick a block (or color) index from per-block gradient norms.

    ``importance`` samples proportionally to squared norms and falls back to
    uniform sampling when all norms vanish; ``greedy`` takes the argmax with
    ties broken by smallest index. Randomized rules draw exactly one number.
    """
    norms = np.asarray(norms, dtype=float)
    k = norms.size
    if rule == "greedy":
        return int(np.argmax(norms))
    if rng is None:
        raise ValueError(f"rule {rule!r} needs a random generator")
    u = rng.random()
    if rule == "uniform":
        return min(int(u * k), k - 1)
    if rule == "importance":
        w = norms * norms
        total = math.fsum(w)
        if total == 0.0:
            return min(int(u * k), k - 1)
        cdf = np.cumsum(w) / total
        return min(int(np.searchsorted(cdf, u, side="right")), k - 1)
    raise ValueError(f"unknown selection rule {rule!r}")


# ---------------------------------------------------------------------------
# Per-robot kernels and the in-process team


class BlockProblem:
    """Static per-robot data: Q_b, coupling to neighbor public poses, owned edges, preconditioner.

    Robot ``b`` owns every edge whose tail pose it owns. The coupling matrix maps
    the columns of neighbouring public poses (sorted by pose index) to the
    linear term F_b of the reduced problem.
    """

    def __init__(self, Q: sp.csr_matrix, graph: PoseGraph, part: BlockPartition, b: int,
                 precon_lambda_scale: float = 1e-3):
        d = graph.d
        self.b, self.d = b, d
        self.poses = part.poses_of[b]
        self.cols = pose_columns(self.poses, d)
        D = d + 1
        Q_rows = Q[self.cols]
        touched = np.unique(Q_rows.indices // D)
        nbr = touched[part.owner[touched] != b]
        if nbr.size and not part.is_public[nbr].all():
            raise ContractViolation(f"robot {b} is coupled to a private pose of another robot")
        self.nbr_poses = nbr
        self.nbr_cols = pose_columns(nbr, d)
        self.Q_b = Q_rows[:, self.cols].tocsr()
        self.CT = Q_rows[:, self.nbr_cols].tocsr()  # (cols x nbr_cols) = coupling transposed
        self.precon = Preconditioner(self.Q_b, lam_scale=precon_lambda_scale)

        local = np.full(graph.n, -1, dtype=np.int64)
        local[self.poses] = np.arange(self.poses.size)
        local[nbr] = self.poses.size + np.arange(nbr.size)
        owned = np.flatnonzero(part.owner[graph.tails] == b)
        self.edge_i = local[graph.tails[owned]]
        self.edge_j = local[graph.heads[owned]]
        if (self.edge_j < 0).any():
            raise ContractViolation(f"robot {b} owns an edge to a pose it cannot see")
        self.edge_R = graph.rotations[owned]
        self.edge_t = graph.translations[owned]
        self.edge_kappa = graph.kappas[owned]
        self.edge_tau = graph.taus[owned]

    def linear_term(self, Z_nbr: np.ndarray) -> np.ndarray:
        """F_b = Z_nbr Q_{nbr,b}; zero when the robot has no neighbors."""
        if self.nbr_cols.size == 0:
            return np.zeros((Z_nbr.shape[0], self.cols.size))
        return np.asarray((self.CT @ Z_nbr.T).T)

    def reduced(self, Z_nbr: np.ndarray) -> ReducedProblem:
        return ReducedProblem(self.b, self.d, self.Q_b, self.linear_term(Z_nbr))

    def grad_norm2(self, X_b: np.ndarray, F_b: np.ndarray) -> float:
        G = 2.0 * (right_multiply(X_b, self.Q_b) + F_b)
        g = mf.project_to_tangent(X_b, G, self.d)
        return float(np.vdot(g, g))

    def owned_cost(self, X_b: np.ndarray, X_nbr: np.ndarray) -> float:
        if self.edge_i.size == 0:
            return 0.0
        Z = np.ascontiguousarray(np.concatenate([X_b, X_nbr], axis=1))
        return edge_cost(Z, self.d, self.edge_i, self.edge_j, self.edge_R, self.edge_t,
                         self.edge_kappa, self.edge_tau)

    def multipliers(self, X_b: np.ndarray, F_b: np.ndarray) -> np.ndarray:
        """This robot's blocks of Lambda(X) = SymBlockDiag+(X^T X Q)."""
        return mf.sym_block_products(X_b, right_multiply(X_b, self.Q_b) + F_b, self.d)

    def apply_certificate(self, w_b: np.ndarray, w_nbr: np.ndarray, Lam_b: np.ndarray) -> np.ndarray:
        """Rows of S(X) w owned by this robot, for a row-stacked w."""
        out = right_multiply(w_b, self.Q_b) + self.linear_term(w_nbr)
        return out - mf.right_multiply_blocks(w_b, Lam_b, self.d)


class CentralTeam:
    """In-process execution of the per-robot kernels."""

    def __init__(self, graph: PoseGraph, part: BlockPartition, Q: sp.spmatrix,
                 precon_lambda_scale: float = 1e-3):
        self.graph, self.part, self.d = graph, part, graph.d
        self.Q = sp.csr_matrix(Q)
        self.blocks = [BlockProblem(self.Q, graph, part, b, precon_lambda_scale)
                       for b in range(part.num_robots)]

    @property
    def num_robots(self) -> int:
        return self.part.num_robots

    # communication primitives (trivial in-process)
    def share(self, Z: np.ndarray, tag: str = "pose") -> list[np.ndarray]:
        """Neighbor public-pose columns of Z, as seen by each robot."""
        return [np.ascontiguousarray(Z[:, blk.nbr_cols]) for blk in self.blocks]

    def total(self, values: Sequence[float], tag: str = "sum") -> float:
        return math.fsum(values)

    def flood(self, values: Sequence[float], tag: str = "gradnorm") -> list[float]:
        return list(values)

    def control(self, kind: str, value=None) -> None:
        pass

    def relay(self, M: np.ndarray, tag: str = "relay") -> np.ndarray:
        return M

    # helpers built on the primitives
    def slices(self, Z: np.ndarray) -> list[np.ndarray]:
        return [np.ascontiguousarray(Z[:, blk.cols]) for blk in self.blocks]

    def cost(self, X: np.ndarray) -> float:
        nbrs = self.share(X, "pose")
        return self.total([blk.owned_cost(X[:, blk.cols], Xn) for blk, Xn in zip(self.blocks, nbrs)], "cost")

    def linear_terms(self, X: np.ndarray) -> list[np.ndarray]:
        nbrs = self.share(X, "pose")
        return [blk.linear_term(Xn) for blk, Xn in zip(self.blocks, nbrs)]

    def grad_norms2(self, X: np.ndarray, F: list[np.ndarray]) -> list[float]:
        return [blk.grad_norm2(X[:, blk.cols], Fb) for blk, Fb in zip(self.blocks, F)]

    def dot(self, a: np.ndarray, b: np.ndarray) -> float:
        """Blockwise inner product with a fixed reduction order."""
        if a.ndim == 1:
            a, b = a[None, :], b[None, :]
        return self.total([float(np.vdot(a[:, blk.cols], b[:, blk.cols])) for blk in self.blocks], "dot")

    def certificate_apply(self, Lam: list[np.ndarray]) -> Callable[[np.ndarray], np.ndarray]:
        def apply(w: np.ndarray) -> np.ndarray:
            W = w[None, :] if w.ndim == 1 else w
            nbrs = self.share(W, "eig")
            out = np.empty_like(W)
            for blk, Wn, L in zip(self.blocks, nbrs, Lam):
                out[:, blk.cols] = blk.apply_certificate(W[:, blk.cols], Wn, L)
            return out[0] if w.ndim == 1 else out
        return apply

    def multipliers(self, X: np.ndarray) -> list[np.ndarray]:
        F = self.linear_terms(X)
        return [blk.multipliers(X[:, blk.cols], Fb) for blk, Fb in zip(self.blocks, F)]


def make_team(graph: PoseGraph, part: BlockPartition, Q: sp.spmatrix, config: SolverConfig | None = None) -> CentralTeam:
    cfg = config or SolverConfig()
    return CentralTeam(graph, part, Q, cfg.precon_lambda_scale)


# ---------------------------------------------------------------------------
# Drivers


def _groups(team, cfg: SolverConfig) -> tuple[tuple[int, ...], ...]:
    if cfg.parallel:
        part = team.part
        if not part.is_proper():
            raise ContractViolation("coloring is not proper on the dependency graph")
        return part.color_groups
    return tuple((b,) for b in range(team.num_robots))


def _group_scores(groups, g2: Sequence[float]) -> list[float]:
    return [math.sqrt(math.fsum(g2[b] for b in grp)) for grp in groups]


def _update_group(team, Z: np.ndarray, F: list[np.ndarray], robots: Sequence[int], cfg: SolverConfig) -> np.ndarray:
    """Block updates of ``robots`` against the snapshot ``Z``; other blocks copied verbatim."""
    out = Z.copy()
    for b in robots:
        blk = team.blocks[b]
        rp = ReducedProblem(b, team.d, blk.Q_b, F[b])
        X_b, _ = block_update(rp, Z[:, blk.cols], cfg, blk.precon)
        out[:, blk.cols] = X_b
    return out


def parallel_sweep(team, X: np.ndarray, color: int, config: SolverConfig | None = None) -> np.ndarray:
    """Update every robot of one color against a frozen snapshot of X."""
    cfg = config or SolverConfig()
    part = team.part
    if not part.is_proper():
        raise ContractViolation("coloring is not proper on the dependency graph")
    return _update_group(team, X, team.linear_terms(X), part.color_groups[color], cfg)


def _blockwise_project(team, Z: np.ndarray) -> np.ndarray:
    out = np.empty_like(Z)
    for blk in team.blocks:
        out[:, blk.cols] = mf.project_to_manifold(Z[:, blk.cols], team.d)
    return out


def nesterov_step(gamma_prev: float, N: int) -> tuple[float, float]:
    """Next (gamma, alpha) of the accelerated scheme for N blocks (or colors)."""
    gamma = (1.0 + math.sqrt(1.0 + 4.0 * N * N * gamma_prev * gamma_prev)) / (2.0 * N)
    return gamma, 1.0 / (gamma * N)


def _run(team, X0: np.ndarray, cfg: SolverConfig, accelerated: bool) -> tuple[np.ndarray, IterationLog]:
    groups = _groups(team, cfg)
    N = len(groups)
    rng = rng_from_seed(cfg.seed)
    log = IterationLog()
    t0 = time.perf_counter()

    X = X0.copy()
    F_X = team.linear_terms(X)
    g2X = team.grad_norms2(X, F_X)
    fX = team.cost(X)
    gnorm = math.sqrt(team.total(g2X, "gradnorm2"))
    log.append(IterationRecord(0, None, fX, gnorm, False, 0.0))
    if gnorm <= cfg.grad_tol:
        log.converged = True
        return X, log

    V = X.copy()
    gamma = 0.0
    Y_is_X = True
    for k in range(1, cfg.max_iters + 1):
        if accelerated:
            gamma_new, alpha = nesterov_step(gamma, N)
            if Y_is_X:
                Y, F_Y, g2Y = X, F_X, g2X
            else:
                Y = V.copy() if alpha == 1.0 else _blockwise_project(team, (1.0 - alpha) * X + alpha * V)
                F_Y = team.linear_terms(Y)
                g2Y = team.grad_norms2(Y, F_Y)
        else:
            Y, F_Y, g2Y = X, F_X, g2X

        scores = _group_scores(groups, team.flood(g2Y, "gradnorm"))
        sel = select(cfg.selection, scores, rng)
        robots = groups[sel]
        Xn = _update_group(team, Y, F_Y, robots, cfg)
        fXn = team.cost(Xn)
        restart = False
        if accelerated:
            if cfg.restart == "adaptive":
                sel_g2 = team.total([g2X[b] if b in robots else 0.0 for b in range(len(g2X))], "gradnorm2")
                restart = fX - fXn < cfg.c1 * sel_g2
            elif cfg.restart == "fixed":
                restart = k % cfg.restart_period == 0
            if restart:
                team.control("restart", k)
                Xn = _update_group(team, X, F_X, robots, cfg)
                fXn = team.cost(Xn)
                if cfg.restart == "adaptive" and fXn > fX:
                    Xn, fXn = X, fX
                V = Xn.copy()
                gamma = 0.0
                Y_is_X = True
            else:
                V = _blockwise_project(team, V + gamma_new * (Xn - Y))
                gamma = gamma_new
                Y_is_X = False
        elif fXn > fX:
            Xn, fXn = X, fX

        X, fX = Xn, fXn
        F_X = team.linear_terms(X)
        g2X = team.grad_norms2(X, F_X)
        gnorm = None
        if k % cfg.check_period == 0 or k == cfg.max_iters:
            gnorm = math.sqrt(team.total(g2X, "gradnorm2"))
        log.append(IterationRecord(k, int(sel), fX, gnorm, restart, time.perf_counter() - t0))
        if gnorm is not None and gnorm <= cfg.grad_tol:
            log.converged = True
            break
    return X, log


def rbcd(team, X0: np.ndarray, config: SolverConfig | None = None) -> tuple[np.ndarray, IterationLog]:
    """Riemannian block-coordinate descent (one trust-region block update per iteration)."""
    return _run(team, X0, config or SolverConfig(), accelerated=False)


def rbcd_pp(team, X0: np.ndarray, config: SolverConfig | None = None) -> tuple[np.ndarray, IterationLog]:
    """Accelerated RBCD with adaptive, fixed-period, or no restart."""
    return _run(team, X0, config or SolverConfig(), accelerated=True)
