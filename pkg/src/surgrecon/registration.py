"""Projective data association and point-to-plane camera tracking.

The solver works on ``X = T_cam^-1`` (world to camera). A twist ``xi =
(omega, v)`` updates it as ``X <- exp(xi) X``, so the residual of one pair is
``r = n_obs . (exp(xi) X q - o)`` with ``q`` the reference surfel in world
coordinates and ``(o, n_obs)`` the observed surfel in the camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, InvalidInputError, RigidPose, se3_exp
from .surfels import SurfelMap

THETA_D = 0.01
THETA_N_DEG = 30.0
MAX_ITERATIONS = 10
STEP_TOL = 1e-7
MAX_HALVINGS = 8
DAMPING = 1e-6
RCOND_DAMP = 1e-10


class DegenerateRegistrationError(RuntimeError):
    """Too few or geometrically degenerate correspondences to fix a pose."""


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Accepted (reference, observation) pairs with cached geometry.

    Reference data are in world coordinates, observation data in the camera
    frame of the current image.
    """

    ref_index: np.ndarray
    obs_index: np.ndarray
    ref_positions: np.ndarray
    ref_normals: np.ndarray
    obs_positions: np.ndarray
    obs_normals: np.ndarray
    depth_residual: np.ndarray

    def __len__(self) -> int:
        return len(self.ref_index)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return cls(zi, zi, z3, z3, z3, z3, np.zeros(0))

    @classmethod
    def from_arrays(cls, ref_pos, ref_n, obs_pos, obs_n) -> "CorrespondenceSet":
        """Pairs given directly (index i matches i)."""
        ref_pos = np.asarray(ref_pos, dtype=np.float64).reshape(-1, 3)
        n = len(ref_pos)
        idx = np.arange(n)
        obs_pos = np.asarray(obs_pos, dtype=np.float64).reshape(-1, 3)
        return cls(idx, idx.copy(), ref_pos, np.asarray(ref_n, dtype=np.float64).reshape(-1, 3),
                   obs_pos, np.asarray(obs_n, dtype=np.float64).reshape(-1, 3),
                   np.zeros(n))


def obs_pixel_owner(obs: SurfelMap, K: CameraIntrinsics, stride: int = 1) -> np.ndarray:
    """Image of observation indices (-1 = none); each surfel owns its stride block."""
    owner = np.full(K.shape, -1, dtype=np.int64)
    if len(obs) == 0:
        return owner
    v, u = np.divmod(obs.origin_pixel, K.width)
    for dv in range(stride):
        for du in range(stride):
            vv, uu = v + dv, u + du
            ok = (vv < K.height) & (uu < K.width)
            owner[vv[ok], uu[ok]] = np.nonzero(ok)[0]
    return owner


def find_correspondences(ref: SurfelMap, obs: SurfelMap, pose_prev: RigidPose, K: CameraIntrinsics,
                         theta_d: float = THETA_D, theta_n: float = THETA_N_DEG,
                         stride: int = 1) -> CorrespondenceSet:
    """Project ``ref`` into the current view at ``pose_prev`` and pair by pixel.

    ``obs`` must be in the camera frame with ``origin_pixel`` set. When
    several reference surfels land on one observation, the smallest depth
    difference wins.
    """
    if len(ref) == 0 or len(obs) == 0:
        return CorrespondenceSet.empty()
    to_cam = pose_prev.inverse()
    p = to_cam.apply(ref.positions)
    n_ref = to_cam.rotate(ref.normals)
    z = p[:, 2]
    front = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.rint(K.fx * p[:, 0] / z + K.cx)
        v = np.rint(K.fy * p[:, 1] / z + K.cy)
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    ri = np.nonzero(inside)[0]
    owner = obs_pixel_owner(obs, K, stride)
    oi = owner[v[ri].astype(np.int64), u[ri].astype(np.int64)]
    has = oi >= 0
    ri, oi = ri[has], oi[has]
    dz = p[ri, 2] - obs.positions[oi, 2]
    cos_n = np.einsum("ij,ij->i", n_ref[ri], obs.normals[oi])
    ok = (np.abs(dz) < theta_d) & (cos_n > math.cos(math.radians(theta_n)))
    ri, oi, dz = ri[ok], oi[ok], dz[ok]
    # one pair per observation: smallest |dz|, then smallest ref index
    order = np.lexsort((ri, np.abs(dz), oi))
    ri, oi, dz = ri[order], oi[order], dz[order]
    first = np.ones(len(oi), dtype=bool)
    first[1:] = oi[1:] != oi[:-1]
    ri, oi, dz = ri[first], oi[first], dz[first]
    return CorrespondenceSet(
        ref_index=ri, obs_index=oi,
        ref_positions=ref.positions[ri], ref_normals=ref.normals[ri],
        obs_positions=obs.positions[oi], obs_normals=obs.normals[oi],
        depth_residual=dz,
    )


def residuals(x: RigidPose, P: CorrespondenceSet) -> np.ndarray:
    """Point-to-plane residuals ``n_obs . (X q - o)``."""
    p = x.apply(P.ref_positions)
    return np.einsum("ij,ij->i", P.obs_normals, p - P.obs_positions)


def jacobian(x: RigidPose, P: CorrespondenceSet) -> np.ndarray:
    """(n, 6) derivative of :func:`residuals` w.r.t. a left twist on ``X``."""
    p = x.apply(P.ref_positions)
    n = P.obs_normals
    return np.concatenate([np.cross(p, n), n], axis=1)


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Observed depth for the scalar-depth residual variant."""

    depth: np.ndarray
    K: CameraIntrinsics

    def sample(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear depth and its gradient w.r.t. camera-frame points."""
        K = self.K
        z = pts[:, 2]
        u = K.fx * pts[:, 0] / z + K.cx
        v = K.fy * pts[:, 1] / z + K.cy
        h, w = self.depth.shape
        u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
        v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
        a, b = u - u0, v - v0
        d = self.depth
        d00, d01 = d[v0, u0], d[v0, u0 + 1]
        d10, d11 = d[v0 + 1, u0], d[v0 + 1, u0 + 1]
        val = (1 - a) * (1 - b) * d00 + a * (1 - b) * d01 + (1 - a) * b * d10 + a * b * d11
        du = (1 - b) * (d01 - d00) + b * (d11 - d10)
        dv = (1 - a) * (d10 - d00) + a * (d11 - d01)
        # chain rule through the projection
        zi = 1.0 / z
        grad = np.stack([
            du * K.fx * zi,
            dv * K.fy * zi,
            -(du * K.fx * pts[:, 0] + dv * K.fy * pts[:, 1]) * zi * zi,
        ], axis=1)
        return val, grad


def depth_residuals(x: RigidPose, P: CorrespondenceSet, img: DepthImage) -> np.ndarray:
    p = x.apply(P.ref_positions)
    val, _ = img.sample(p)
    return p[:, 2] - val


def depth_jacobian(x: RigidPose, P: CorrespondenceSet, img: DepthImage) -> np.ndarray:
    p = x.apply(P.ref_positions)
    _, grad = img.sample(p)
    g = np.array([0.0, 0.0, 1.0]) - grad
    return np.concatenate([np.cross(p, g), g], axis=1)


def _solve_normal(jac: np.ndarray, r: np.ndarray) -> np.ndarray:
    if np.linalg.matrix_rank(jac) < 6:
        raise DegenerateRegistrationError("correspondences do not constrain all six degrees of freedom")
    h = jac.T @ jac
    g = jac.T @ r
    ev = np.linalg.eigvalsh(h)
    if ev[0] <= 0 or ev[0] / ev[-1] < RCOND_DAMP:
        h = h + DAMPING * np.eye(6)
    return -np.linalg.solve(h, g)


def solve_camera_pose(P: CorrespondenceSet, pose_init: RigidPose, mode: str = "point_to_plane",
                      depth_image: DepthImage | None = None,
                      max_iterations: int = MAX_ITERATIONS) -> RigidPose:
    """Gauss-Newton for the camera pose (camera to world) minimising the pair energy.

    ``mode="depth"`` uses the scalar difference between the reference depth
    and the observed depth image at the reference projection.
    """
    if len(P) < 6:
        raise DegenerateRegistrationError(f"need >= 6 correspondences, got {len(P)}")
    if mode == "point_to_plane":
        def res(x):
            return residuals(x, P)

        def jac(x):
            return jacobian(x, P)
    elif mode == "depth":
        if depth_image is None:
            raise InvalidInputError("depth mode needs the observed depth image")

        def res(x):
            return depth_residuals(x, P, depth_image)

        def jac(x):
            return depth_jacobian(x, P, depth_image)
    else:
        raise InvalidInputError(f"unknown registration mode {mode!r}")

    x = pose_init.inverse()
    r = res(x)
    energy = float(r @ r)
    for _ in range(max_iterations):
        step = _solve_normal(jac(x), r)
        if not np.all(np.isfinite(step)):
            raise DegenerateRegistrationError("non-finite Gauss-Newton step")
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = se3_exp(step) @ x
            r_new = res(cand)
            e_new = float(r_new @ r_new)
            if e_new <= energy:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            break
        x, r, energy = cand, r_new, e_new
        if np.linalg.norm(step) < STEP_TOL:
            break
    return x.inverse()


def energy(pose: RigidPose, P: CorrespondenceSet) -> float:
    r = residuals(pose.inverse(), P)
    return float(r @ r)


@dataclass(frozen=True)
class TrackingParams:
    theta_d: float = THETA_D
    theta_n: float = THETA_N_DEG
    icp_rounds: int = 3
    mode: str = "point_to_plane"


def track(ref: SurfelMap, obs: SurfelMap, pose_prev: RigidPose, K: CameraIntrinsics,
          params: TrackingParams = TrackingParams(), stride: int = 1,
          depth_image: DepthImage | None = None) -> tuple[RigidPose, CorrespondenceSet]:
    """Alternate association and pose solves; raises on degeneracy."""
    pose = pose_prev
    P = CorrespondenceSet.empty()
    for _ in range(params.icp_rounds):
        P = find_correspondences(ref, obs, pose, K, params.theta_d, params.theta_n, stride)
        pose = solve_camera_pose(P, pose, params.mode, depth_image)
    P = find_correspondences(ref, obs, pose, K, params.theta_d, params.theta_n, stride)
    return pose, P


def write_trajectory(path: str | Path, poses: list[RigidPose]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("frame,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n")
        for i, pose in enumerate(poses):
            vals = list(pose.rotation.ravel()) + list(pose.translation)
            fh.write(f"{i}," + ",".join(f"{v:.12g}" for v in vals) + "\n")


def read_trajectory(path: str | Path) -> list[RigidPose]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [RigidPose(r[1:10].reshape(3, 3), r[10:13]) for r in rows]
