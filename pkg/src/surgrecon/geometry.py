"""Pinhole camera model, rigid poses and disparity/depth conversion.

Conventions: right-handed camera frame with +z pointing into the scene,
pixel origin at the top-left corner, ``u`` along columns and ``v`` along rows.
A :class:`RigidPose` used as a camera pose maps camera coordinates to world
coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INVALID_DEPTH = float("nan")

_ORTHO_TOL = 1e-9
_REORTHO_CHAIN = 100


class InvalidInputError(ValueError):
    """Raised when an operation receives values outside its domain."""


class BehindCameraError(InvalidInputError):
    """Raised when projecting a point with non-positive depth."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise InvalidInputError("fx, fy and baseline must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "baseline": self.baseline, "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(d["fx"]), fy=float(d["fy"]),
                cx=float(d["cx"]), cy=float(d["cy"]),
                baseline=float(d["baseline"]),
                width=int(d["width"]), height=int(d["height"]),
            )
        except KeyError as exc:
            raise InvalidInputError(f"calibration is missing key {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "CameraIntrinsics":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix so that ``skew(a) @ b == cross(a, b)``."""
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def _polar_orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class RigidPose:
    """SE(3) element stored as rotation matrix plus translation."""

    rotation: np.ndarray
    translation: np.ndarray
    chain: int = field(default=0, compare=False, repr=False)

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose has non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise InvalidInputError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        r = self.rotation @ other.rotation
        t = self.rotation @ other.translation + self.translation
        chain = self.chain + other.chain + 1
        if chain > _REORTHO_CHAIN:
            r = _polar_orthonormalize(r)
            chain = 0
        return RigidPose(r, t, chain)

    __matmul__ = compose

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation, self.chain)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def rotate(self, n: np.ndarray) -> np.ndarray:
        """Rotate direction vectors of shape (..., 3)."""
        return np.asarray(n, dtype=np.float64) @ self.rotation.T

    def allclose(self, other: "RigidPose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def __repr__(self) -> str:
        return (
            f"RigidPose(rotation={self.rotation.tolist()}, "
            f"translation={self.translation.tolist()})"
        )


def pose_compose(a: RigidPose, b: RigidPose) -> RigidPose:
    return a.compose(b)


def pose_apply(a: RigidPose, x: np.ndarray) -> np.ndarray:
    return a.apply(x)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor fallback near zero."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    k = skew(w)
    if theta2 < 1e-12:
        # second-order series, exact to machine precision in this range
        return np.eye(3) + k + 0.5 * (k @ k)
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    # atan2 stays well conditioned at both ends where acos of the trace does not
    theta = math.atan2(0.5 * float(np.linalg.norm(v)), 0.5 * (float(np.trace(r)) - 1.0))
    if theta < 1e-7:
        return 0.5 * v
    if math.pi - theta < 1e-3:
        # near pi the antisymmetric part vanishes; read the axis from aa^T
        aat = (0.5 * (r + r.T) - math.cos(theta) * np.eye(3)) / (1.0 - math.cos(theta))
        i = int(np.argmax(np.diag(aat)))
        axis = aat[:, i] / math.sqrt(aat[i, i])
        if axis @ v < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * v


def se3_exp(twist: np.ndarray) -> RigidPose:
    """Exponential map of a twist ordered ``(wx, wy, wz, vx, vy, vz)``."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(twist)):
        raise InvalidInputError("twist must be finite")
    w, v = twist[:3], twist[3:]
    if not np.any(w):
        return RigidPose(np.eye(3), v.copy())
    theta2 = float(w @ w)
    k = skew(w)
    kk = k @ k
    if theta2 < 1e-12:
        r = np.eye(3) + k + 0.5 * kk
        jac = np.eye(3) + 0.5 * k + kk / 6.0
    else:
        theta = math.sqrt(theta2)
        s, c = math.sin(theta), math.cos(theta)
        r = np.eye(3) + (s / theta) * k + ((1.0 - c) / theta2) * kk
        jac = np.eye(3) + ((1.0 - c) / theta2) * k + ((theta - s) / (theta2 * theta)) * kk
    return RigidPose(r, jac @ v)


def se3_log(pose: RigidPose) -> np.ndarray:
    w = so3_log(pose.rotation)
    theta2 = float(w @ w)
    k = skew(w)
    if theta2 < 1e-12:
        jac_inv = np.eye(3) - 0.5 * k + (k @ k) / 12.0
    else:
        theta = math.sqrt(theta2)
        coef = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta2
        jac_inv = np.eye(3) - 0.5 * k + coef * (k @ k)
    return np.concatenate([w, jac_inv @ pose.translation])


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle of ``r`` in radians."""
    return float(np.linalg.norm(so3_log(r)))


def backproject(p, depth, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) ``p = (u, v)`` at metric ``depth`` into the camera frame."""
    p = np.asarray(p, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise InvalidInputError("depth must be finite and positive")
    x = (p[..., 0] - K.cx) * depth / K.fx
    y = (p[..., 1] - K.cy) * depth / K.fy
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


def project(x, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) onto the image plane."""
    x = np.asarray(x, dtype=np.float64)
    z = x[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point is on or behind the camera plane")
    return np.stack([K.fx * x[..., 0] / z + K.cx, K.fy * x[..., 1] / z + K.cy], axis=-1)


def disparity_to_depth(disp, K: CameraIntrinsics, min_disparity: float = 0.0):
    """``fx * baseline / disp``; disparities at or below ``min_disparity`` map to NaN."""
    d = np.asarray(disp, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.isfinite(d) & (d > min_disparity), K.fx * K.baseline / d, INVALID_DEPTH)
    return float(z) if z.ndim == 0 else z


def depth_to_disparity(depth, K: CameraIntrinsics):
    z = np.asarray(depth, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(np.isfinite(z) & (z > 0), K.fx * K.baseline / z, np.nan)
    return float(d) if d.ndim == 0 else d


def pixel_grid(K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate grids of shape (H, W)."""
    v, u = np.mgrid[0:K.height, 0:K.width]
    return u.astype(np.float64), v.astype(np.float64)


def backproject_depth(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Backproject a full depth image; invalid (NaN) depths stay NaN."""
    u, v = pixel_grid(K)
    return np.stack([(u - K.cx) * depth / K.fx, (v - K.cy) * depth / K.fy, depth], axis=-1)
