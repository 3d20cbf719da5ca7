"""Pose-graph data model, g2o I/O, grid simulation, robot partitioning and the
connection Laplacian.

Poses are indexed densely ``0..n-1``. Every lifted or ground-truth variable is
laid out column-blocked as ``[R_1 t_1 ... R_n t_n]`` so that pose ``i`` owns the
columns ``i*(d+1) : (i+1)*(d+1)``; the last column of each block is the
translation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class G2OParseError(ValueError):
    """Malformed g2o input; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class GraphValidationError(ValueError):
    pass


def rng_from_seed(seed: int) -> np.random.Generator:
    """Counter-based generator used everywhere a seed is accepted."""
    return np.random.Generator(np.random.Philox(int(seed)))


def rotation_2d(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Closest element of SO(d) to ``M`` (batched over leading axes)."""
    U, _, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    D = np.ones(U.shape[:-1])
    D[..., -1] = np.sign(det)
    D[D == 0] = 1.0
    return (U * D[..., None, :]) @ Vt


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class RelativeMeasurement:
    i: int
    j: int
    rotation: np.ndarray
    translation: np.ndarray
    kappa: float
    tau: float
    information: tuple[float, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        d = R.shape[0]
        if R.shape != (d, d) or t.shape != (d,):
            raise ValueError("rotation must be d x d and translation a d-vector")
        if np.abs(R.T @ R - np.eye(d)).max() > ORTHO_TOL:
            raise ValueError(f"edge ({self.i},{self.j}): rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError(f"edge ({self.i},{self.j}): rotation has det != +1")
        if not (self.kappa > 0 and self.tau > 0):
            raise ValueError(f"edge ({self.i},{self.j}): precisions must be positive")
        if self.i == self.j:
            raise ValueError("self-loop measurement")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class Poses:
    """A set of ``n`` poses in SE(d): rotations ``(n,d,d)``, translations ``(n,d)``."""

    rotations: np.ndarray
    translations: np.ndarray

    @property
    def n(self) -> int:
        return self.rotations.shape[0]

    @property
    def d(self) -> int:
        return self.rotations.shape[1]

    def matrix(self) -> np.ndarray:
        """The d x (d+1)n block-row matrix ``[R_1 t_1 ... R_n t_n]``."""
        n, d = self.n, self.d
        T = np.concatenate([self.rotations, self.translations[:, :, None]], axis=2)
        return T.transpose(1, 0, 2).reshape(d, n * (d + 1))

    @classmethod
    def from_matrix(cls, T: np.ndarray, d: int) -> "Poses":
        n = T.shape[1] // (d + 1)
        blocks = T.reshape(T.shape[0], n, d + 1).transpose(1, 0, 2)
        return cls(blocks[:, :, :d].copy(), blocks[:, :, d].copy())

    @classmethod
    def identity(cls, n: int, d: int) -> "Poses":
        return cls(np.tile(np.eye(d), (n, 1, 1)), np.zeros((n, d)))


@dataclass(frozen=True)
class PoseGraph:
    dimension: int
    num_poses: int
    edges: tuple[RelativeMeasurement, ...]
    ownership: np.ndarray
    initial_poses: Poses | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise GraphValidationError("dimension must be 2 or 3")
        object.__setattr__(self, "edges", tuple(self.edges))
        own = np.asarray(self.ownership, dtype=np.int64).reshape(-1)
        if own.shape != (self.num_poses,):
            raise GraphValidationError("ownership must assign every pose to a robot")
        object.__setattr__(self, "ownership", own)
        for e in self.edges:
            if not (0 <= e.i < self.num_poses and 0 <= e.j < self.num_poses):
                raise GraphValidationError(f"edge ({e.i},{e.j}) references unknown pose")
            if e.rotation.shape[0] != self.dimension:
                raise GraphValidationError("mixed measurement dimensions")
        if self.num_poses > 1:
            adj = sp.coo_matrix(
                (np.ones(len(self.edges)), (self.tails, self.heads)),
                shape=(self.num_poses, self.num_poses),
            )
            ncomp, _ = connected_components(adj, directed=True, connection="weak")
            if ncomp != 1:
                raise GraphValidationError(f"pose graph is not connected ({ncomp} components)")

    @property
    def d(self) -> int:
        return self.dimension

    @property
    def n(self) -> int:
        return self.num_poses

    @property
    def num_robots(self) -> int:
        return int(self.ownership.max()) + 1 if self.num_poses else 0

    @cached_property
    def tails(self) -> np.ndarray:
        return np.array([e.i for e in self.edges], dtype=np.int64)

    @cached_property
    def heads(self) -> np.ndarray:
        return np.array([e.j for e in self.edges], dtype=np.int64)

    @cached_property
    def rotations(self) -> np.ndarray:
        return np.array([e.rotation for e in self.edges]).reshape(-1, self.d, self.d)

    @cached_property
    def translations(self) -> np.ndarray:
        return np.array([e.translation for e in self.edges]).reshape(-1, self.d)

    @cached_property
    def kappas(self) -> np.ndarray:
        return np.array([e.kappa for e in self.edges], dtype=float)

    @cached_property
    def taus(self) -> np.ndarray:
        return np.array([e.tau for e in self.edges], dtype=float)

    def with_ownership(self, ownership: Sequence[int]) -> "PoseGraph":
        return PoseGraph(self.dimension, self.num_poses, self.edges,
                         np.asarray(ownership), self.initial_poses)

    def split_contiguous(self, num_robots: int) -> "PoseGraph":
        """Assign poses to ``num_robots`` robots in contiguous index ranges."""
        if num_robots < 1:
            raise ValueError("need at least one robot")
        owner = np.empty(self.num_poses, dtype=np.int64)
        for b, idx in enumerate(np.array_split(np.arange(self.num_poses), num_robots)):
            owner[idx] = b
        return self.with_ownership(owner)


@dataclass
class SimulationParams:
    """Lawn-mower grid simulation.

    Each robot sweeps its own cube (square in 2D) of side ``ceil(poses ** (1/d))``;
    robot cells are tiled next to each other in the x-y plane so that
    neighbouring robots can close loops across cell boundaries.
    """

    num_robots: int = 9
    poses_per_robot: int = 125
    dimension: int = 3
    loop_closure_probability: float = 0.3
    loop_closure_radius: float = 1.0
    sigma_R_deg: float = 3.0
    sigma_t: float = 0.05
    spacing: float = 1.0
    seed: int = 0
    inter_robot_probability: float | None = None

    def __post_init__(self):
        if self.num_robots < 1 or self.poses_per_robot < 1:
            raise ValueError("simulation needs at least one robot and one pose per robot")
        if self.dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        for p in (self.loop_closure_probability, self.inter_robot_probability):
            if p is not None and not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.sigma_R_deg < 0 or self.sigma_t < 0:
            raise ValueError("noise levels must be nonnegative")

    @classmethod
    def from_file(cls, path: str | Path) -> "SimulationParams":
        """Load from a JSON object whose keys are the field names above."""
        data = json.loads(Path(path).read_text())
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_SIGMA_R = math.radians(3.0)
DEFAULT_SIGMA_T = 0.05


def rotation_precision(sigma_R: float) -> float:
    """kappa for tangent-space rotation noise of per-axis std ``sigma_R`` (radians).

    Small-angle matching of kappa*||R - I||_F^2 ~ 2*kappa*theta^2 against the
    Gaussian negative log-likelihood gives kappa = 1 / (2 sigma^2). Zero noise
    falls back to the default noise level so weights stay finite.
    """
    s = sigma_R if sigma_R > 0 else DEFAULT_SIGMA_R
    return 1.0 / (2.0 * s * s)


def translation_precision(sigma_t: float) -> float:
    s = sigma_t if sigma_t > 0 else DEFAULT_SIGMA_T
    return 1.0 / (s * s)


# ---------------------------------------------------------------------------
# g2o


def _info_from_upper(values: Sequence[float], size: int) -> np.ndarray:
    M = np.zeros((size, size))
    M[np.triu_indices(size)] = values
    return M + np.triu(M, 1).T


def _precisions_from_information(info: np.ndarray, d: int) -> tuple[float, float]:
    # Same isotropic reduction SE-Sync applies to g2o information matrices.
    Itt = info[:d, :d]
    tau = d / np.trace(np.linalg.inv(Itt))
    if d == 2:
        kappa = info[2, 2]
    else:
        kappa = 3.0 / (2.0 * np.trace(np.linalg.inv(info[3:, 3:])))
    return float(kappa), float(tau)


def parse_g2o(text: str | Iterable[str], num_robots: int = 1) -> PoseGraph:
    """Parse g2o ``SE2`` or ``SE3:QUAT`` vertex/edge records.

    Vertex ids are remapped to dense indices in increasing id order. Poses are
    split into ``num_robots`` contiguous ranges.
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    vertices: dict[int, np.ndarray] = {}
    raw_edges: list[tuple[int, int, int, np.ndarray, np.ndarray, np.ndarray]] = []
    dim: int | None = None

    def set_dim(value: int, lineno: int):
        nonlocal dim
        if dim is None:
            dim = value
        elif dim != value:
            raise G2OParseError("mixed 2D and 3D records", lineno)

    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#"):
            continue
        tag, args = tokens[0], tokens[1:]
        try:
            if tag == "VERTEX_SE2":
                set_dim(2, lineno)
                if len(args) != 4:
                    raise G2OParseError("VERTEX_SE2 expects 4 fields", lineno)
                vertices[int(args[0])] = np.array([float(v) for v in args[1:]])
            elif tag == "VERTEX_SE3:QUAT":
                set_dim(3, lineno)
                if len(args) != 8:
                    raise G2OParseError("VERTEX_SE3:QUAT expects 8 fields", lineno)
                vertices[int(args[0])] = np.array([float(v) for v in args[1:]])
            elif tag == "EDGE_SE2":
                set_dim(2, lineno)
                if len(args) != 11:
                    raise G2OParseError("EDGE_SE2 expects 11 fields", lineno)
                vals = [float(v) for v in args[2:]]
                info = _info_from_upper(vals[3:], 3)
                R = rotation_2d(vals[2])
                raw_edges.append((lineno, int(args[0]), int(args[1]), R, np.array(vals[:2]), info))
            elif tag == "EDGE_SE3:QUAT":
                set_dim(3, lineno)
                if len(args) != 30:
                    raise G2OParseError("EDGE_SE3:QUAT expects 30 fields", lineno)
                vals = [float(v) for v in args[2:]]
                q = np.array(vals[3:7])
                if np.linalg.norm(q) == 0:
                    raise G2OParseError("zero quaternion", lineno)
                R = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
                info = _info_from_upper(vals[7:], 6)
                raw_edges.append((lineno, int(args[0]), int(args[1]), R, np.array(vals[:3]), info))
            elif tag == "FIX":
                continue
            else:
                raise G2OParseError(f"unsupported record type {tag!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, G2OParseError):
                raise
            raise G2OParseError(f"bad numeric field ({exc})", lineno) from None

    if dim is None:
        raise G2OParseError("no pose records found")
    if vertices:
        known = vertices.keys()
        for lineno, i, j, *_ in raw_edges:
            if i not in known or j not in known:
                raise G2OParseError(f"edge references undeclared vertex ({i}, {j})", lineno)
        ids = sorted(vertices)
    else:
        ids = sorted({i for _, i, _, *_ in raw_edges} | {j for _, _, j, *_ in raw_edges})
    index = {v: k for k, v in enumerate(ids)}

    edges = []
    for lineno, i, j, R, t, info in raw_edges:
        kappa, tau = _precisions_from_information(info, dim)
        upper = tuple(info[np.triu_indices(info.shape[0])])
        try:
            edges.append(RelativeMeasurement(index[i], index[j], R, t, kappa, tau, upper))
        except ValueError as exc:
            raise G2OParseError(str(exc), lineno) from None

    initial = None
    if vertices:
        n = len(ids)
        Rs = np.empty((n, dim, dim))
        ts = np.empty((n, dim))
        for k, v in enumerate(ids):
            vals = vertices[v]
            if dim == 2:
                Rs[k], ts[k] = rotation_2d(vals[2]), vals[:2]
            else:
                Rs[k] = Rotation.from_quat(vals[3:7] / np.linalg.norm(vals[3:7])).as_matrix()
                ts[k] = vals[:3]
        initial = Poses(Rs, ts)

    n = len(ids)
    graph = PoseGraph(dim, n, tuple(edges), np.zeros(n, dtype=np.int64), initial)
    return graph.split_contiguous(num_robots) if num_robots > 1 else graph


def read_g2o(path: str | Path, num_robots: int = 1) -> PoseGraph:
    return parse_g2o(Path(path).read_text(), num_robots=num_robots)


def _fmt(x: float) -> str:
    return repr(float(x))


def vertex_lines(poses: Poses) -> list[str]:
    """g2o VERTEX records for a set of poses."""
    out = []
    for k in range(poses.n):
        R, t = poses.rotations[k], poses.translations[k]
        if poses.d == 2:
            theta = math.atan2(R[1, 0], R[0, 0])
            out.append(" ".join(["VERTEX_SE2", str(k), *map(_fmt, (*t, theta))]))
        else:
            q = Rotation.from_matrix(R).as_quat()
            out.append(" ".join(["VERTEX_SE3:QUAT", str(k), *map(_fmt, (*t, *q))]))
    return out


def _isotropic_information(e: RelativeMeasurement, d: int) -> tuple[float, ...]:
    if d == 2:
        info = np.diag([e.tau, e.tau, e.kappa])
    else:
        info = np.diag([e.tau] * 3 + [2.0 * e.kappa] * 3)
    return tuple(info[np.triu_indices(info.shape[0])])


def write_g2o(graph: PoseGraph, poses: Poses | None = None) -> str:
    """Serialize ``graph`` (and optionally ``poses`` as vertices) to g2o text."""
    d = graph.d
    poses = poses if poses is not None else graph.initial_poses
    lines = vertex_lines(poses) if poses is not None else []
    for e in graph.edges:
        info = e.information if e.information is not None else _isotropic_information(e, d)
        if d == 2:
            theta = math.atan2(e.rotation[1, 0], e.rotation[0, 0])
            vals = (*e.translation, theta, *info)
            lines.append(" ".join(["EDGE_SE2", str(e.i), str(e.j), *map(_fmt, vals)]))
        else:
            q = Rotation.from_matrix(e.rotation).as_quat()
            vals = (*e.translation, *q, *info)
            lines.append(" ".join(["EDGE_SE3:QUAT", str(e.i), str(e.j), *map(_fmt, vals)]))
    return "\n".join(lines) + "\n"


def read_poses(path: str | Path) -> Poses:
    """Read the VERTEX records of a g2o file as a pose set."""
    text = Path(path).read_text()
    vert_lines = [ln for ln in text.splitlines() if ln.startswith("VERTEX_")]
    if not vert_lines:
        raise G2OParseError(f"{path}: no VERTEX records")
    rows = []
    d = 2 if vert_lines[0].startswith("VERTEX_SE2") else 3
    for lineno, ln in enumerate(vert_lines, start=1):
        tok = ln.split()
        expected = 5 if d == 2 else 9
        if len(tok) != expected or (d == 2) != tok[0].startswith("VERTEX_SE2"):
            raise G2OParseError("malformed vertex record", lineno)
        rows.append((int(tok[1]), [float(v) for v in tok[2:]]))
    rows.sort()
    n = len(rows)
    Rs, ts = np.empty((n, d, d)), np.empty((n, d))
    for k, (_, vals) in enumerate(rows):
        if d == 2:
            Rs[k], ts[k] = rotation_2d(vals[2]), vals[:2]
        else:
            q = np.array(vals[3:7])
            Rs[k], ts[k] = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), vals[:3]
    return Poses(Rs, ts)


# ---------------------------------------------------------------------------
# Simulation


def _snake(side: int, dim: int) -> np.ndarray:
    layer = []
    for y in range(side):
        xs = range(side) if y % 2 == 0 else range(side - 1, -1, -1)
        layer.extend((x, y) for x in xs)
    if dim == 2:
        return np.array(layer, dtype=float)
    path = []
    for z in range(side):
        order = layer if z % 2 == 0 else layer[::-1]
        path.extend((x, y, z) for x, y in order)
    return np.array(path, dtype=float)


def _heading_rotations(positions: np.ndarray) -> np.ndarray:
    n, d = positions.shape
    steps = np.diff(positions, axis=0)
    if n > 1:
        steps = np.vstack([steps, steps[-1:]])
    else:
        steps = np.zeros((1, d))
        steps[0, 0] = 1.0
    Rs = np.empty((n, d, d))
    for k, s in enumerate(steps):
        if d == 2:
            Rs[k] = rotation_2d(math.atan2(s[1], s[0]))
        elif abs(s[2]) > 0.5:
            Rs[k] = Rotation.from_euler("y", -90.0 if s[2] > 0 else 90.0, degrees=True).as_matrix()
        else:
            Rs[k] = Rotation.from_euler("z", math.atan2(s[1], s[0])).as_matrix()
    return Rs


def _noisy_measurement(Ri, ti, Rj, tj, sigma_R, sigma_t, rng, d):
    R_true = Ri.T @ Rj
    t_true = Ri.T @ (tj - ti)
    if d == 2:
        R_eps = rotation_2d(rng.normal(0.0, sigma_R)) if sigma_R > 0 else np.eye(2)
    else:
        R_eps = (Rotation.from_rotvec(rng.normal(0.0, sigma_R, 3)).as_matrix()
                 if sigma_R > 0 else np.eye(3))
    t_eps = rng.normal(0.0, sigma_t, d) if sigma_t > 0 else np.zeros(d)
    R = project_to_rotation(R_true @ R_eps)
    return R, t_true + t_eps


def _connecting_pairs(n: int, pairs, candidates) -> list[tuple[int, int]]:
    """Unused candidate closures (in order) that join otherwise separate components."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        parent[find(i)] = find(j)
    used = set(pairs)
    extra = []
    for i, j in candidates:
        if (i, j) not in used and find(i) != find(j):
            parent[find(i)] = find(j)
            extra.append((i, j))
    return extra


def simulate_grid(params: SimulationParams) -> tuple[PoseGraph, Poses]:
    """Simulate a multi-robot lawn-mower dataset; returns ``(graph, ground_truth)``.

    Loop closures are sampled among pose pairs within ``loop_closure_radius``.
    If sampling leaves robots disconnected, the first unused candidate pairs
    that join the components are added so the graph is always connected.
    """
    p = params
    d = p.dimension
    rng = rng_from_seed(p.seed)
    side = max(1, math.ceil(round(p.poses_per_robot ** (1.0 / d), 9)))
    path = _snake(side, d)[: p.poses_per_robot]
    cols = math.ceil(math.sqrt(p.num_robots))

    positions, owner = [], []
    for b in range(p.num_robots):
        offset = np.zeros(d)
        offset[0] = (b % cols) * side
        offset[1] = (b // cols) * side
        positions.append((path + offset) * p.spacing)
        owner.extend([b] * len(path))
    rotations = np.concatenate([_heading_rotations(P) for P in positions])
    positions = np.concatenate(positions)
    owner = np.array(owner)
    n = len(owner)
    truth = Poses(rotations, positions)

    sigma_R = math.radians(p.sigma_R_deg)
    kappa, tau = rotation_precision(sigma_R), translation_precision(p.sigma_t)

    pairs = []
    for k in range(n - 1):
        if owner[k] == owner[k + 1]:
            pairs.append((k, k + 1))
    odom = set(pairs)
    p_inter = p.inter_robot_probability
    if p_inter is None:
        p_inter = p.loop_closure_probability
    tree = cKDTree(positions)
    candidates = sorted(tree.query_pairs(p.loop_closure_radius * p.spacing * (1 + 1e-9)))
    for i, j in candidates:
        if (i, j) in odom:
            continue
        prob = p.loop_closure_probability if owner[i] == owner[j] else p_inter
        if rng.random() < prob:
            pairs.append((i, j))
    pairs += _connecting_pairs(n, pairs, candidates)

    edges = []
    for i, j in pairs:
        R, t = _noisy_measurement(rotations[i], positions[i], rotations[j], positions[j],
                                  sigma_R, p.sigma_t, rng, d)
        edges.append(RelativeMeasurement(i, j, R, t, kappa, tau))
    graph = PoseGraph(d, n, tuple(edges), owner)
    return graph, truth


# ---------------------------------------------------------------------------
# Partitioning


@dataclass(frozen=True)
class BlockPartition:
    num_robots: int
    poses_of: tuple[np.ndarray, ...]
    owner: np.ndarray
    is_public: np.ndarray
    dependency_edges: frozenset[tuple[int, int]]
    colors: tuple[int, ...]

    @property
    def public_poses(self) -> set[tuple[int, int]]:
        return {(int(self.owner[k]), int(k)) for k in np.flatnonzero(self.is_public)}

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[set[int]] = [set() for _ in range(self.num_robots)]
        for a, b in self.dependency_edges:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return tuple(tuple(sorted(s)) for s in nbrs)

    @property
    def max_degree(self) -> int:
        return max((len(s) for s in self.neighbors), default=0)

    @property
    def num_colors(self) -> int:
        return max(self.colors) + 1 if self.colors else 0

    @cached_property
    def color_groups(self) -> tuple[tuple[int, ...], ...]:
        groups: list[list[int]] = [[] for _ in range(self.num_colors)]
        for robot, c in enumerate(self.colors):
            groups[c].append(robot)
        return tuple(tuple(g) for g in groups)

    def is_proper(self) -> bool:
        return all(self.colors[a] != self.colors[b] for a, b in self.dependency_edges)


def greedy_coloring(num_vertices: int, edges: Iterable[tuple[int, int]]) -> tuple[int, ...]:
    """Greedy coloring, visiting vertices by descending degree (ties by id)."""
    nbrs: list[set[int]] = [set() for _ in range(num_vertices)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    order = sorted(range(num_vertices), key=lambda v: (-len(nbrs[v]), v))
    colors = [-1] * num_vertices
    for v in order:
        used = {colors[u] for u in nbrs[v]}
        c = 0
        while c in used:
            c += 1
        colors[v] = c
    return tuple(colors)


def partition(graph: PoseGraph) -> BlockPartition:
    owner = graph.ownership
    N = graph.num_robots
    robots_present = set(np.unique(owner).tolist())
    if robots_present != set(range(N)):
        raise GraphValidationError("robot ids must be dense 0..N-1")
    poses_of = tuple(np.flatnonzero(owner == b) for b in range(N))
    oi, oj = owner[graph.tails], owner[graph.heads]
    inter = oi != oj
    is_public = np.zeros(graph.n, dtype=bool)
    is_public[graph.tails[inter]] = True
    is_public[graph.heads[inter]] = True
    dep = frozenset((int(min(a, b)), int(max(a, b))) for a, b in zip(oi[inter], oj[inter]))
    colors = greedy_coloring(N, dep)
    return BlockPartition(N, poses_of, owner.copy(), is_public, dep, colors)


# ---------------------------------------------------------------------------
# Connection Laplacian


def _laplacian_blocks(d, R, t, kappa, tau):
    """Per-edge (d+1)x(d+1) blocks (Q_ii, Q_jj, Q_ij) of the connection Laplacian."""
    m = len(kappa)
    D = d + 1
    Qii = np.zeros((m, D, D))
    Qjj = np.zeros((m, D, D))
    Qij = np.zeros((m, D, D))
    eye = np.eye(d)
    Qii[:, :d, :d] = kappa[:, None, None] * eye + tau[:, None, None] * t[:, :, None] * t[:, None, :]
    Qii[:, :d, d] = tau[:, None] * t
    Qii[:, d, :d] = tau[:, None] * t
    Qii[:, d, d] = tau
    Qjj[:, :d, :d] = kappa[:, None, None] * eye
    Qjj[:, d, d] = tau
    Qij[:, :d, :d] = -kappa[:, None, None] * R
    Qij[:, :d, d] = -tau[:, None] * t
    Qij[:, d, d] = -tau
    return Qii, Qjj, Qij


def build_connection_laplacian(graph: PoseGraph) -> sp.csr_matrix:
    """Sparse symmetric Q with <Q, X^T X> equal to the PGO cost of X."""
    return laplacian_from_arrays(graph.d, graph.n, graph.tails, graph.heads, graph.rotations,
                                 graph.translations, graph.kappas, graph.taus)


def laplacian_from_arrays(d, n, I, J, R, t, kappa, tau) -> sp.csr_matrix:
    """Connection Laplacian from per-edge arrays; zero ``tau`` keeps only rotation terms."""
    D = d + 1
    Qii, Qjj, Qij = _laplacian_blocks(d, R, t, np.asarray(kappa, float), np.asarray(tau, float))
    off = np.arange(D)
    rr, cc = np.meshgrid(off, off, indexing="ij")

    def coo(blocks, bi, bj):
        rows = (bi[:, None, None] * D + rr[None]).ravel()
        cols = (bj[:, None, None] * D + cc[None]).ravel()
        return rows, cols, blocks.ravel()

    parts = [coo(Qii, I, I), coo(Qjj, J, J), coo(Qij, I, J), coo(Qij.transpose(0, 2, 1), J, I)]
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(D * n, D * n))
    Q.sum_duplicates()
    # duplicate summation order can differ between (a, b) and (b, a); average to restore exact symmetry
    Q = ((Q + Q.T) * 0.5).tocsr()
    Q.eliminate_zeros()
    return Q


def null_vector(n: int, d: int) -> np.ndarray:
    """``1_n (x) [0_d; 1]``: global-translation direction in the kernel of Q."""
    v = np.zeros((n, d + 1))
    v[:, d] = 1.0
    return v.ravel()


def pose_columns(poses: np.ndarray, d: int) -> np.ndarray:
    """Column indices of the given poses in the column-blocked layout."""
    poses = np.asarray(poses, dtype=np.int64)
    return (poses[:, None] * (d + 1) + np.arange(d + 1)[None, :]).ravel()


def edge_cost(X: np.ndarray, d: int, I, J, R, t, kappa, tau) -> float:
    """Sum over edges of kappa*||Y_j - Y_i R_ij||^2 + tau*||p_j - p_i - Y_i t_ij||^2.

    Evaluated from per-edge residuals, which keeps full relative precision even
    when the quadratic form <Q, X^T X> would cancel large terms.
    """
    r = X.shape[0]
    B = X.reshape(r, -1, d + 1)
    Yi = B[:, I, :d].transpose(1, 0, 2)
    Yj = B[:, J, :d].transpose(1, 0, 2)
    rot = Yj - Yi @ R
    tr = (B[:, J, d] - B[:, I, d]).T - np.einsum("mrd,md->mr", Yi, t)
    return float(kappa @ np.einsum("mrd,mrd->m", rot, rot) + tau @ np.einsum("mr,mr->m", tr, tr))


def edge_residual_cost(graph: PoseGraph, X: np.ndarray) -> float:
    """Expanded PGO cost of a lifted (or ground-truth, r = d) state ``X``."""
    return edge_cost(X, graph.d, graph.tails, graph.heads, graph.rotations,
                     graph.translations, graph.kappas, graph.taus)
