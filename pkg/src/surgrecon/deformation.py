"""Embedded deformation graph: skinning, warping and the non-rigid solve.

Node ``j`` carries a rotation ``R_j`` and translation ``t_j`` acting about
its own position: ``T_j(x) = R_j (x - v_j) + v_j + t_j``. A point is warped
by the normalised Gaussian blend of its four nearest nodes.

The solve minimises

    E = sum_k (m_k . warp(x_k) + c_k)^2 + lambda * sum_j sum_{i in N_j} |T_j v_j - T_i v_j|^2

where ``m_k = R_X^T n_k`` folds the camera transform into the observed
normal. Node updates are ``R <- exp(omega) R`` and ``t <- t + delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg
from scipy.spatial import cKDTree

from .geometry import InvalidInputError, RigidPose, so3_exp
from .io import write_ply
from .registration import CorrespondenceSet

SKIN_K = 4
NEIGHBOR_K = 6
# kNN edges longer than this multiple of the spacing are dropped
NEIGHBOR_CUTOFF = 3.0
MIN_WEIGHT = 1e-6
LAMBDA_REG = 10.0
OUTER_ITERATIONS = 4
STEP_TOL = 1e-6
CG_TOL = 1e-8
CG_MAXITER = 200
MAX_HALVINGS = 8


@dataclass(eq=False)
class NodeGraph:
    positions: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    radius: np.ndarray
    neighbors: list[np.ndarray]
    spacing: float
    k_neighbors: int = NEIGHBOR_K
    lambda_reg: float = LAMBDA_REG
    _tree: cKDTree | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def copy(self) -> "NodeGraph":
        return NodeGraph(self.positions.copy(), self.rotations.copy(), self.translations.copy(),
                         self.radius.copy(), [n.copy() for n in self.neighbors], self.spacing,
                         self.k_neighbors, self.lambda_reg, self._tree)

    def edges(self) -> np.ndarray:
        """Directed (j, i) pairs with ``i in N_j``."""
        if not self.neighbors:
            return np.zeros((0, 2), dtype=np.int64)
        js = np.concatenate([np.full(len(n), j) for j, n in enumerate(self.neighbors)])
        is_ = np.concatenate(self.neighbors) if len(js) else np.zeros(0)
        return np.stack([js, is_], axis=1).astype(np.int64)

    def node_transform(self, j: int) -> RigidPose:
        """Node transform as a world-frame rigid pose (pivot folded in)."""
        r = self.rotations[j]
        return RigidPose(r, self.positions[j] + self.translations[j] - r @ self.positions[j])

    def write_ply(self, path: str | Path) -> None:
        p = self.positions
        cols = {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2],
                "translation": np.linalg.norm(self.translations, axis=1)}
        write_ply(path, cols, {k: ("float", "%.9g") for k in cols})


def farthest_point_sample(points: np.ndarray, spacing: float, seeds: np.ndarray | None = None) -> np.ndarray:
    """Indices of a farthest-point subset whose points are >= ``spacing`` apart.

    Starts at index 0 (deterministic). With ``seeds`` (existing node
    positions) only points at least ``spacing`` away from them are chosen.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if seeds is not None and len(seeds):
        dist, _ = cKDTree(seeds).query(points)
        dist = dist.astype(np.float64)
        chosen = []
    else:
        dist = np.full(n, np.inf)
        chosen = [0]
        dist = np.minimum(dist, np.linalg.norm(points - points[0], axis=1))
    while True:
        j = int(np.argmax(dist))
        if dist[j] < spacing:
            break
        chosen.append(j)
        dist = np.minimum(dist, np.linalg.norm(points - points[j], axis=1))
    return np.asarray(chosen, dtype=np.int64)


def _neighbors(positions: np.ndarray, k: int, cutoff: float) -> list[np.ndarray]:
    m = len(positions)
    if m < 2:
        return [np.zeros(0, dtype=np.int64) for _ in range(m)]
    kk = min(k + 1, m)
    dist, idx = cKDTree(positions).query(positions, k=kk)
    sets = [set() for _ in range(m)]
    for j in range(m):
        for d, i in zip(dist[j, 1:], idx[j, 1:]):
            if i != j and d <= cutoff:
                sets[j].add(int(i))
                sets[int(i)].add(j)
    return [np.array(sorted(s), dtype=np.int64) for s in sets]


def build_graph(positions: np.ndarray, spacing: float, k_neighbors: int = NEIGHBOR_K,
                lambda_reg: float = LAMBDA_REG) -> NodeGraph:
    """Farthest-point nodes at ``spacing`` with symmetrised kNN edges."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        raise InvalidInputError("cannot build a node graph from an empty surfel set")
    if spacing <= 0:
        raise InvalidInputError("node spacing must be positive")
    idx = farthest_point_sample(positions, spacing)
    v = positions[idx].copy()
    m = len(v)
    return NodeGraph(
        positions=v,
        rotations=np.repeat(np.eye(3)[None], m, axis=0),
        translations=np.zeros((m, 3)),
        radius=np.full(m, float(spacing)),
        neighbors=_neighbors(v, k_neighbors, NEIGHBOR_CUTOFF * spacing),
        spacing=float(spacing),
        k_neighbors=k_neighbors,
        lambda_reg=lambda_reg,
    )


def skinning_weight(x: np.ndarray, v_j: np.ndarray, r_j: float):
    """Raw Gaussian weight ``exp(-|v_j - x|^2 / (2 r_j^2))``."""
    d2 = np.sum((np.asarray(v_j, dtype=np.float64) - np.asarray(x, dtype=np.float64)) ** 2, axis=-1)
    w = np.exp(-d2 / (2.0 * np.asarray(r_j, dtype=np.float64) ** 2))
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True, eq=False)
class Skinning:
    """Support nodes (n, k), normalised weights (n, k) and a support flag (n,)."""

    nodes: np.ndarray
    weights: np.ndarray
    supported: np.ndarray


def skin(g: NodeGraph, x: np.ndarray) -> Skinning:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    k = min(SKIN_K, len(g))
    _, idx = g.tree.query(x, k=k)
    idx = np.asarray(idx).reshape(len(x), k)
    raw = skinning_weight(x[:, None, :], g.positions[idx], g.radius[idx])
    raw = np.asarray(raw).reshape(len(x), k)
    supported = np.any(raw >= MIN_WEIGHT, axis=1)
    total = raw.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(supported[:, None], raw / total, 0.0)
    return Skinning(idx, w, supported)


def _node_apply(g: NodeGraph, nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``T_j(x)`` for each support node: (n, k, 3)."""
    v = g.positions[nodes]
    y = np.einsum("nkab,nkb->nka", g.rotations[nodes], x[:, None, :] - v)
    return y + v + g.translations[nodes]


def warp_points(g: NodeGraph, x: np.ndarray, sk: Skinning | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Warped points and the support flag; unsupported points are returned unchanged."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        return x.copy(), np.zeros(0, dtype=bool)
    sk = sk or skin(g, x)
    out = np.einsum("nk,nka->na", sk.weights, _node_apply(g, sk.nodes, x))
    out = np.where(sk.supported[:, None], out, x)
    return out, sk.supported


def warp_normals(g: NodeGraph, x: np.ndarray, n: np.ndarray, sk: Skinning | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        return n.copy()
    sk = sk or skin(g, x)
    rn = np.einsum("nk,nkab,nb->na", sk.weights, g.rotations[sk.nodes], n)
    rn = np.where(sk.supported[:, None], rn, n)
    return rn / np.linalg.norm(rn, axis=1, keepdims=True)


def inverse_warp(g: NodeGraph, y: np.ndarray, iterations: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Canonical points that warp onto ``y`` (fixed-point iteration)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    x = y.copy()
    supported = np.ones(len(y), dtype=bool)
    for _ in range(iterations):
        wx, supported = warp_points(g, x)
        x = x + (y - wx)
    return x, supported


def motion_spread(g: NodeGraph, x: np.ndarray, sk: Skinning | None = None) -> np.ndarray:
    """Largest disagreement between the support nodes' predictions of ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        return np.zeros(0)
    sk = sk or skin(g, x)
    pred = _node_apply(g, sk.nodes, x)
    diff = pred[:, :, None, :] - pred[:, None, :, :]
    return np.sqrt(np.max(np.sum(diff ** 2, axis=-1), axis=(1, 2)))


def arap_residuals(g: NodeGraph) -> np.ndarray:
    """(E, 3) ``T_j v_j - T_i v_j`` per directed edge."""
    e = g.edges()
    if len(e) == 0:
        return np.zeros((0, 3))
    j, i = e[:, 0], e[:, 1]
    vj, vi = g.positions[j], g.positions[i]
    tj_vj = vj + g.translations[j]
    ti_vj = np.einsum("nab,nb->na", g.rotations[i], vj - vi) + vi + g.translations[i]
    return tj_vj - ti_vj


def arap_energy(g: NodeGraph) -> float:
    r = arap_residuals(g)
    return float(np.sum(r * r))


def arap_jacobian(g: NodeGraph) -> sparse.csr_matrix:
    """Sparse (3E, 6M) Jacobian of :func:`arap_residuals` (columns: omega_j, delta_j)."""
    e = g.edges()
    m = len(g)
    if len(e) == 0:
        return sparse.csr_matrix((0, 6 * m))
    j, i = e[:, 0], e[:, 1]
    y = np.einsum("nab,nb->na", g.rotations[i], g.positions[j] - g.positions[i])
    n_e = len(e)
    rows3 = 3 * np.arange(n_e)[:, None] + np.arange(3)[None, :]
    rows, cols, vals = [], [], []
    # d/d delta_j = I, d/d delta_i = -I
    rows += [rows3.ravel(), rows3.ravel()]
    cols += [(6 * j[:, None] + 3 + np.arange(3)).ravel(), (6 * i[:, None] + 3 + np.arange(3)).ravel()]
    vals += [np.ones(3 * n_e), -np.ones(3 * n_e)]
    # d/d omega_i = [y]x
    sk = np.zeros((n_e, 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -y[:, 2], y[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = y[:, 2], -y[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -y[:, 1], y[:, 0]
    rows.append(np.repeat(rows3, 3, axis=1).ravel())
    cols.append(np.tile(6 * i[:, None] + np.arange(3)[None, :], (1, 3)).ravel())
    vals.append(sk.reshape(n_e, 9).ravel())
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * n_e, 6 * m))


@dataclass(frozen=True, eq=False)
class DataTerm:
    """Point-to-plane pairs in the form ``r_k = m_k . warp(x_k) + c_k``."""

    points: np.ndarray   # canonical reference positions x_k
    m: np.ndarray        # R_X^T n_k
    c: np.ndarray        # n_k . (t_X - o_k)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_correspondences(cls, canonical: np.ndarray, P: CorrespondenceSet,
                             pose: RigidPose, max_terms: int | None = None) -> "DataTerm":
        """``canonical`` are the canonical positions of ``P.ref_index``; ``pose`` is camera to world.

        ``max_terms`` keeps an even subsample; it also scales the data term
        against ``lambda_reg``, so the pipeline uses every pair.
        """
        x = pose.inverse()
        idx = np.arange(len(P))
        if max_terms is not None and len(idx) > max_terms:
            idx = idx[np.linspace(0, len(idx) - 1, max_terms).round().astype(np.int64)]
        n = P.obs_normals[idx]
        m = n @ x.rotation
        c = np.einsum("ij,ij->i", n, x.translation[None, :] - P.obs_positions[idx])
        return cls(np.asarray(canonical, dtype=np.float64)[idx], m, c)


def data_residuals(g: NodeGraph, data: DataTerm, sk: Skinning | None = None) -> np.ndarray:
    w, _ = warp_points(g, data.points, sk)
    return np.einsum("ij,ij->i", data.m, w) + data.c


def data_jacobian(g: NodeGraph, data: DataTerm, sk: Skinning) -> sparse.csr_matrix:
    n, k = sk.nodes.shape
    y = np.einsum("nkab,nkb->nka", g.rotations[sk.nodes], data.points[:, None, :] - g.positions[sk.nodes])
    w = sk.weights[..., None]
    d_omega = w * np.cross(y, data.m[:, None, :])
    d_delta = w * np.broadcast_to(data.m[:, None, :], y.shape)
    block = np.concatenate([d_omega, d_delta], axis=-1)             # (n, k, 6)
    rows = np.repeat(np.arange(n), k * 6)
    cols = (6 * sk.nodes[..., None] + np.arange(6)).ravel()
    return sparse.csr_matrix((block.ravel(), (rows, cols)), shape=(n, 6 * len(g)))


def total_energy(g: NodeGraph, data: DataTerm, sk: Skinning | None = None) -> float:
    r = data_residuals(g, data, sk)
    return float(r @ r) + g.lambda_reg * arap_energy(g)


def apply_update(g: NodeGraph, step: np.ndarray) -> NodeGraph:
    out = g.copy()
    s = step.reshape(-1, 6)
    out.rotations = np.stack([so3_exp(w) @ r for w, r in zip(s[:, :3], g.rotations)])
    out.translations = g.translations + s[:, 3:]
    return out


@dataclass(frozen=True, eq=False)
class DeformationResult:
    graph: NodeGraph
    noop: bool
    energies: tuple[float, ...]
    iterations: int


def solve_deformation(g: NodeGraph, data: DataTerm, lambda_reg: float | None = None,
                      outer_iterations: int = OUTER_ITERATIONS) -> DeformationResult:
    """Gauss-Newton over all node twists; sparse normal equations by CG."""
    if lambda_reg is not None:
        g = g.copy()
        g.lambda_reg = lambda_reg
    if len(g) == 0:
        return DeformationResult(g, True, (), 0)
    sk = skin(g, data.points) if len(data) else None
    keep = sk.supported if sk is not None else np.zeros(0, dtype=bool)
    if not np.any(keep):
        return DeformationResult(g, True, (), 0)
    if not np.all(keep):
        data = DataTerm(data.points[keep], data.m[keep], data.c[keep])
        sk = Skinning(sk.nodes[keep], sk.weights[keep], sk.supported[keep])
    energy = total_energy(g, data, sk)
    energies = [energy]
    it = 0
    lam = g.lambda_reg
    for it in range(1, outer_iterations + 1):
        r_d = data_residuals(g, data, sk)
        r_a = arap_residuals(g).ravel()
        j_d = data_jacobian(g, data, sk)
        j_a = arap_jacobian(g)
        h = (j_d.T @ j_d + lam * (j_a.T @ j_a)).tocsr()
        rhs = -(j_d.T @ r_d + lam * (j_a.T @ r_a))
        if not np.any(rhs):
            break
        # tiny diagonal damping keeps nodes without data or edges well posed
        diag = h.diagonal()
        mu = 1e-9 * max(float(diag.max()), 1e-30)
        h = h + sparse.diags(np.full(h.shape[0], mu))
        step, _ = cg(h, rhs, rtol=CG_TOL, atol=0.0, maxiter=CG_MAXITER)
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = apply_update(g, step)
            e_new = total_energy(cand, data, sk)
            if e_new <= energy:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break
        g, energy = cand, e_new
        energies.append(energy)
        if np.linalg.norm(step) < STEP_TOL:
            break
    return DeformationResult(g, False, tuple(energies), it)


def insert_nodes(g: NodeGraph, points: np.ndarray) -> tuple[NodeGraph, int]:
    """Add nodes where ``points`` are farther than the spacing from every node.

    New nodes inherit the blended motion of the existing graph at their
    position so the warp stays continuous. Edges are recomputed.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return g, 0
    idx = farthest_point_sample(points, g.spacing, seeds=g.positions)
    if len(idx) == 0:
        return g, 0
    v = points[idx]
    sk = skin(g, v)
    moved, _ = warp_points(g, v, sk)
    nearest = sk.nodes[:, 0]
    out = g.copy()
    out.positions = np.concatenate([g.positions, v])
    out.rotations = np.concatenate([g.rotations, g.rotations[nearest]])
    out.translations = np.concatenate([g.translations, moved - v])
    out.radius = np.concatenate([g.radius, np.full(len(v), g.spacing)])
    out.neighbors = _neighbors(out.positions, g.k_neighbors, NEIGHBOR_CUTOFF * g.spacing)
    out._tree = None
    return out, len(idx)


def node_distance_ok(g: NodeGraph, eps: float = 0.05) -> bool:
    if len(g) < 2:
        return True
    d, _ = g.tree.query(g.positions, k=2)
    return bool(np.all(d[:, 1] >= g.spacing * (1 - eps)))


def rotation_spread_deg(g: NodeGraph) -> float:
    """Largest relative rotation between neighbouring nodes, in degrees."""
    worst = 0.0
    for j, i in g.edges():
        rel = g.rotations[j].T @ g.rotations[i]
        worst = max(worst, math.degrees(math.acos(min(1.0, max(-1.0, (np.trace(rel) - 1) / 2)))))
    return worst
