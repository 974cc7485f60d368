"""Surfel containers and per-frame surfel construction from masked depth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, InvalidInputError, RigidPose, backproject_depth, pixel_grid
from .io import write_ply
from .stereo import DepthMap

CONFIDENCE_SIGMA = 0.6
# obliquity factor 1/|n.ray| is capped so grazing surfels stay bounded
MAX_OBLIQUITY = 4.0
# relative depth jump inside the 3x3 neighbourhood treated as a discontinuity
DISCONTINUITY_RATIO = 0.03


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    confidence: float
    last_seen: int
    radius: float
    color: np.ndarray

    def __post_init__(self) -> None:
        if abs(float(np.linalg.norm(self.normal)) - 1.0) > 1e-6:
            raise InvalidInputError("surfel normal must be unit length")
        if self.confidence < 0 or self.radius <= 0:
            raise InvalidInputError("surfel needs confidence >= 0 and radius > 0")


_FIELDS = ("positions", "normals", "confidence", "last_seen", "radius", "colors",
           "ids", "origin_frame", "origin_pixel")


@dataclass(eq=False)
class SurfelMap:
    """Struct-of-arrays surfel set.

    ``ids`` are unique within a map; ``origin_frame``/``origin_pixel`` record
    where each surfel was first observed (flat pixel index ``v * W + u``).
    """

    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))
    last_seen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    origin_frame: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    origin_pixel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    reference_frame: int = 0
    current_frame: int = 0
    next_id: int = 0

    def __post_init__(self) -> None:
        n = len(self.positions)
        for name in _FIELDS:
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"surfel field {name} has inconsistent length")
        if self.next_id == 0 and n:
            self.next_id = int(self.ids.max()) + 1

    def __len__(self) -> int:
        return len(self.positions)

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i].copy(), self.normals[i].copy(), float(self.confidence[i]),
                      int(self.last_seen[i]), float(self.radius[i]), self.colors[i].copy())

    def copy(self) -> "SurfelMap":
        return SurfelMap(**{k: getattr(self, k).copy() for k in _FIELDS},
                         reference_frame=self.reference_frame,
                         current_frame=self.current_frame, next_id=self.next_id)

    def subset(self, keep: np.ndarray) -> "SurfelMap":
        out = SurfelMap(**{k: getattr(self, k)[keep] for k in _FIELDS},
                        reference_frame=self.reference_frame,
                        current_frame=self.current_frame, next_id=self.next_id)
        return out

    def remove(self, drop: np.ndarray) -> int:
        """Delete surfels where ``drop`` is True, in place; returns the count."""
        drop = np.asarray(drop, dtype=bool)
        n = int(drop.sum())
        if n:
            keep = ~drop
            for k in _FIELDS:
                setattr(self, k, getattr(self, k)[keep])
        return n

    def extend(self, other: "SurfelMap", select: np.ndarray | None = None) -> int:
        """Append surfels of ``other`` (optionally a subset) with fresh ids."""
        src = other if select is None else other.subset(select)
        n = len(src)
        if n == 0:
            return 0
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.next_id += n
        for k in _FIELDS:
            add = new_ids if k == "ids" else getattr(src, k)
            setattr(self, k, np.concatenate([getattr(self, k), add]))
        return n

    def write_ply(self, path: str | Path) -> None:
        cols = {
            "x": self.positions[:, 0], "y": self.positions[:, 1], "z": self.positions[:, 2],
            "nx": self.normals[:, 0], "ny": self.normals[:, 1], "nz": self.normals[:, 2],
            "red": np.clip(np.rint(self.colors[:, 0]), 0, 255).astype(int),
            "green": np.clip(np.rint(self.colors[:, 1]), 0, 255).astype(int),
            "blue": np.clip(np.rint(self.colors[:, 2]), 0, 255).astype(int),
            "confidence": self.confidence, "radius": self.radius,
            "last_seen": self.last_seen.astype(int),
        }
        f, i, u = ("float", "%.9g"), ("int", "%d"), ("uchar", "%d")
        fmts = {k: f for k in ("x", "y", "z", "nx", "ny", "nz", "confidence", "radius")}
        fmts.update(red=u, green=u, blue=u, last_seen=i)
        write_ply(path, cols, fmts)


def initial_confidence(u, v, K: CameraIntrinsics):
    """``exp(-rho^2 / (2 sigma^2))`` of the normalised radial distance ``rho``."""
    rho2 = ((np.asarray(u, dtype=np.float64) - K.cx) / K.fx) ** 2 + \
           ((np.asarray(v, dtype=np.float64) - K.cy) / K.fy) ** 2
    c = np.exp(-rho2 / (2.0 * CONFIDENCE_SIGMA ** 2))
    return float(c) if np.ndim(c) == 0 else c


def smooth_depth(z: np.ndarray, valid: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian normalised convolution of valid depth.

    The first ring of valid pixels next to invalid ones is left out of the
    support (stereo outliers concentrate there) but still receives a value,
    as do invalid pixels touching a valid one. Everything else is NaN.
    """
    support = ndimage.binary_erosion(valid)
    num = ndimage.gaussian_filter(np.where(support, z, 0.0), sigma, mode="nearest")
    den = ndimage.gaussian_filter(support.astype(np.float64), sigma, mode="nearest")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 1e-3, num / den, np.where(valid, z, np.nan))
    return np.where(ndimage.binary_dilation(valid, np.ones((3, 3), dtype=bool)), out, np.nan)


def compute_normals(d: DepthMap, K: CameraIntrinsics, smoothing: float = 0.0,
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame unit normals (H, W, 3) and a validity mask.

    Without smoothing a pixel needs its full 3x3 neighbourhood valid and
    free of depth jumps larger than ``DISCONTINUITY_RATIO`` of its own
    depth. With ``smoothing`` > 0 (sigma in pixels) the tangents come from
    :func:`smooth_depth`, which bridges isolated stereo dropouts, so a pixel
    only needs one valid neighbour along each axis and no jump to any valid
    neighbour. One-pixel central differences on raw stereo depth are
    dominated by noise, hence the option.
    """
    z = d.depth
    h, w = z.shape
    ok = np.zeros((h, w), dtype=bool)
    normals = np.full((h, w, 3), np.nan)
    if h < 3 or w < 3:
        return normals, ok
    finite = np.isfinite(z) & d.valid
    zc = z[1:-1, 1:-1]
    inner = finite[1:-1, 1:-1].copy()
    with np.errstate(invalid="ignore"):
        for dv in (0, 1, 2):
            for du in (0, 1, 2):
                zn = z[dv:dv + h - 2, du:du + w - 2]
                fn = finite[dv:dv + h - 2, du:du + w - 2]
                jump = np.abs(zn - zc) > DISCONTINUITY_RATIO * zc
                inner &= (fn & ~jump) if smoothing <= 0 else ~(fn & jump)
    if smoothing > 0:
        inner &= finite[1:-1, :-2] | finite[1:-1, 2:]
        inner &= finite[:-2, 1:-1] | finite[2:, 1:-1]
        zt = smooth_depth(z, finite, smoothing)
    else:
        zt = z
    pts = backproject_depth(zt, K)
    tx = pts[1:-1, 2:] - pts[1:-1, :-2]
    ty = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(tx, ty)
    norm = np.linalg.norm(n, axis=-1)
    with np.errstate(invalid="ignore"):
        inner &= norm > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm[..., None]
        # orient toward the camera: n . ray < 0
        flip = np.einsum("...c,...c->...", n, pts[1:-1, 1:-1]) > 0
    n[flip] *= -1.0
    normals[1:-1, 1:-1] = np.where(inner[..., None], n, np.nan)
    ok[1:-1, 1:-1] = inner
    return normals, ok


def surfel_radius(depth, normal_cam, ray_cam, K: CameraIntrinsics, stride: int = 1):
    """Pixel footprint ``z / fx * sqrt(2) / |n . ray|`` with the obliquity capped."""
    ray = ray_cam / np.linalg.norm(ray_cam, axis=-1, keepdims=True)
    cos = np.abs(np.einsum("...c,...c->...", normal_cam, ray))
    obliq = np.minimum(1.0 / np.maximum(cos, 1e-12), MAX_OBLIQUITY)
    return depth / K.fx * math.sqrt(2.0) * obliq * stride


def build_observation(d_m: DepthMap, color: np.ndarray, K: CameraIntrinsics, pose: RigidPose,
                      t: int, stride: int = 1, normal_smoothing: float = 0.0) -> SurfelMap:
    """One surfel per valid pixel (on the stride grid) with a valid normal."""
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    if d_m.shape != K.shape:
        raise InvalidInputError(f"depth {d_m.shape} does not match calibration {K.shape}")
    normals, ok = compute_normals(d_m, K, normal_smoothing)
    grid = np.zeros_like(ok)
    grid[::stride, ::stride] = True
    sel = ok & grid
    vs, us = np.nonzero(sel)
    z = d_m.depth[vs, us]
    pts_cam = np.stack([(us - K.cx) * z / K.fx, (vs - K.cy) * z / K.fy, z], axis=-1)
    n_cam = normals[vs, us]
    radius = surfel_radius(z, n_cam, pts_cam, K, stride)
    conf = initial_confidence(us, vs, K)
    colors = np.asarray(color, dtype=np.float64)
    if colors.ndim == 2:
        colors = np.repeat(colors[..., None], 3, axis=-1)
    n = len(z)
    return SurfelMap(
        positions=pose.apply(pts_cam),
        normals=pose.rotate(n_cam),
        confidence=np.atleast_1d(conf).astype(np.float64),
        last_seen=np.full(n, t, dtype=np.int64),
        radius=radius,
        colors=colors[vs, us].reshape(n, 3),
        ids=np.arange(n, dtype=np.int64),
        origin_frame=np.full(n, t, dtype=np.int64),
        origin_pixel=(vs * K.width + us).astype(np.int64),
        reference_frame=0,
        current_frame=t,
        next_id=n,
    )


def pixel_rays(K: CameraIntrinsics) -> np.ndarray:
    u, v = pixel_grid(K)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
