"""Canonical model update: confidence-weighted fusion, admission and pruning."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .deformation import NodeGraph, motion_spread
from .geometry import InvalidInputError
from .surfels import Surfel, SurfelMap


class FusionRejected(ValueError):
    """Pair with antiparallel normals; signals an association error."""


@dataclass(frozen=True)
class FusionConfig:
    conf_admit_threshold: float = 2.0
    neighborhood_radius: float = 0.005
    motion_consistency_threshold: float = 0.002
    max_age: int = 30

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if not v > 0:
                raise InvalidInputError(f"fusion parameter {k} must be > 0, got {v}")


def _merged_radius(r_a, c_a, r_b, c_b):
    # only surfels that carry weight constrain the footprint; symmetric in (a, b)
    return np.where(c_a > 0, np.where(c_b > 0, np.minimum(r_a, r_b), r_a), r_b)


def fuse_pair(ref: Surfel, obs: Surfel, t_now: int) -> Surfel:
    """Confidence-weighted merge of a corresponded pair (both in the canonical frame)."""
    if float(np.dot(ref.normal, obs.normal)) < 0:
        raise FusionRejected("antiparallel normals")
    c = ref.confidence + obs.confidence
    if c == 0:
        return Surfel(ref.position, ref.normal, 0.0, t_now, ref.radius, ref.color)
    pos = (ref.confidence * ref.position + obs.confidence * obs.position) / c
    n = ref.confidence * ref.normal + obs.confidence * obs.normal
    n = n / np.linalg.norm(n)
    col = (ref.confidence * ref.color + obs.confidence * obs.color) / c
    radius = float(_merged_radius(ref.radius, ref.confidence, obs.radius, obs.confidence))
    return Surfel(pos, n, c, t_now, radius, col)


def fuse_into(ref: SurfelMap, ref_idx: np.ndarray, obs: SurfelMap, obs_idx: np.ndarray,
              t_now: int) -> np.ndarray:
    """Vectorised :func:`fuse_pair` in place; ``obs`` must be canonical.

    Returns a boolean array over the pairs: True where fused, False where
    rejected for antiparallel normals. ``ref_idx`` entries must be unique.
    """
    ref_idx = np.asarray(ref_idx, dtype=np.int64)
    obs_idx = np.asarray(obs_idx, dtype=np.int64)
    if len(np.unique(ref_idx)) != len(ref_idx):
        raise InvalidInputError("reference surfels may be fused at most once per frame")
    nr, no = ref.normals[ref_idx], obs.normals[obs_idx]
    ok = np.einsum("ij,ij->i", nr, no) >= 0
    ri, oi = ref_idx[ok], obs_idx[ok]
    cr, co = ref.confidence[ri], obs.confidence[oi]
    c = cr + co
    live = c > 0
    safe = np.where(live, c, 1.0)[:, None]
    wr, wo = cr[:, None], co[:, None]
    pos = np.where(live[:, None], (wr * ref.positions[ri] + wo * obs.positions[oi]) / safe, ref.positions[ri])
    n = wr * ref.normals[ri] + wo * obs.normals[oi]
    n = np.where(live[:, None], n, ref.normals[ri])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    col = np.where(live[:, None], (wr * ref.colors[ri] + wo * obs.colors[oi]) / safe, ref.colors[ri])
    ref.positions[ri] = pos
    ref.normals[ri] = n
    ref.colors[ri] = col
    ref.radius[ri] = _merged_radius(ref.radius[ri], cr, obs.radius[oi], co)
    ref.confidence[ri] = c
    ref.last_seen[ri] = t_now
    return ok


@dataclass(frozen=True)
class AdmissionResult:
    admitted: np.ndarray          # indices into the candidate map
    duplicates: int
    rejected_confidence: int
    rejected_motion: int


def admit_new(ref: SurfelMap, candidates: SurfelMap, g: NodeGraph | None, cfg: FusionConfig,
              t_now: int, skip_duplicates: bool = True) -> AdmissionResult:
    """Append admissible candidates (canonical frame) to ``ref`` in place.

    A candidate passes when the confidence of reference surfels within the
    neighbourhood radius sums to the threshold, or when no reference surfel
    lies within twice that radius (frontier), and its support nodes agree on
    its motion. Candidates sitting inside an existing surfel footprint are
    skipped as duplicates when ``skip_duplicates`` is set.
    """
    n = len(candidates)
    if n == 0:
        return AdmissionResult(np.zeros(0, dtype=np.int64), 0, 0, 0)
    pos = candidates.positions
    dup = np.zeros(n, dtype=bool)
    if len(ref):
        tree = cKDTree(ref.positions)
        r = cfg.neighborhood_radius
        near_d, near_i = tree.query(pos, distance_upper_bound=2 * r)
        frontier = ~np.isfinite(near_d)
        ctree = cKDTree(pos)
        pairs = ctree.sparse_distance_matrix(tree, r, output_type="coo_matrix")
        conf_sum = np.bincount(pairs.row, weights=ref.confidence[pairs.col], minlength=n)
        dense = conf_sum >= cfg.conf_admit_threshold
        gate_conf = dense | frontier
        if skip_duplicates:
            hit = np.isfinite(near_d)
            dup[hit] = near_d[hit] < ref.radius[near_i[hit]]
    else:
        gate_conf = np.ones(n, dtype=bool)
    if g is not None and len(g):
        gate_motion = motion_spread(g, pos) < cfg.motion_consistency_threshold
    else:
        gate_motion = np.ones(n, dtype=bool)
    ok = gate_conf & gate_motion & ~dup
    if dup.any():
        ref.last_seen[near_i[dup]] = t_now
    idx = np.nonzero(ok)[0]
    if len(idx):
        add = candidates.subset(ok)
        add.last_seen[:] = t_now
        ref.extend(add)
    return AdmissionResult(
        idx, int(np.sum(dup & gate_conf & gate_motion)),
        int(np.sum(~gate_conf)), int(np.sum(gate_conf & ~gate_motion)),
    )


def prune_stale(ref: SurfelMap, t_now: int, cfg: FusionConfig) -> int:
    """Remove surfels unseen for more than ``max_age`` frames with low confidence."""
    stale = (t_now - ref.last_seen > cfg.max_age) & (ref.confidence < cfg.conf_admit_threshold)
    return ref.remove(stale)


@dataclass(frozen=True)
class FusionStats:
    frame: int
    fused: int
    admitted: int
    pruned: int
    map_size: int

    def to_dict(self) -> dict:
        return asdict(self)
