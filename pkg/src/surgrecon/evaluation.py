"""Reprojection rendering of the canonical model and masked SSIM/PSNR."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .deformation import NodeGraph, warp_normals, warp_points
from .geometry import CameraIntrinsics, InvalidInputError, RigidPose
from .stereo import to_gray
from .surfels import SurfelMap

SSIM_SIGMA = 1.5
# radius int(3.5 * 1.5 + 0.5) = 5, i.e. an 11x11 window
SSIM_TRUNCATE = 3.5
MAX_SPLAT_RADIUS = 4
# half a pixel diagonal: every splat reaches at least its nearest pixel centre
MIN_SPLAT_RADIUS = math.sqrt(0.5)
# splats within this many surfel radii behind the front-most one are blended
DEPTH_BLEND = 2.0


class UndefinedMetricError(ValueError):
    """No pixel is left to compare after masking."""


def render_reprojection(S: SurfelMap, g: NodeGraph | None, pose: RigidPose, K: CameraIntrinsics,
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffered disk splats of the warped model seen from ``pose``.

    Returns ``(image (H, W, 3) float, coverage (H, W) bool, depth (H, W))``.
    Back-facing surfels are culled; splat radius is the projected surfel
    radius, clipped to ``[MIN_SPLAT_RADIUS, MAX_SPLAT_RADIUS]`` pixels. Splats on the front-most
    surface of a pixel are blended with Gaussian weights on their distance
    to the pixel centre; depth is the front-most splat depth (inf if none).
    """
    h, w = K.shape
    img = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    if len(S) == 0:
        return img, np.zeros((h, w), dtype=bool), depth
    if g is not None and len(g):
        pos, _ = warp_points(g, S.positions)
        nrm = warp_normals(g, S.positions, S.normals)
    else:
        pos, nrm = S.positions, S.normals
    to_cam = pose.inverse()
    p = to_cam.apply(pos)
    n = to_cam.rotate(nrm)
    z = p[:, 2]
    front = (z > 1e-6) & (np.einsum("ij,ij->i", n, p) < 0)
    p, z = p[front], z[front]
    col = S.colors[front]
    rad = S.radius[front]
    if len(z) == 0:
        return img, np.zeros((h, w), dtype=bool), depth
    u = K.fx * p[:, 0] / z + K.cx
    v = K.fy * p[:, 1] / z + K.cy
    r_px = np.clip(K.fx * rad / z, MIN_SPLAT_RADIUS, MAX_SPLAT_RADIUS)
    cu, cv = np.rint(u).astype(np.int64), np.rint(v).astype(np.int64)
    reach = np.ceil(r_px).astype(np.int64)
    flat_idx, flat_z, flat_src, flat_d2 = [], [], [], []
    for rr in np.unique(reach):
        sel = np.nonzero(reach == rr)[0]
        oy, ox = np.mgrid[-rr:rr + 1, -rr:rr + 1]
        ox, oy = ox.ravel(), oy.ravel()
        pu = cu[sel, None] + ox[None, :]
        pv = cv[sel, None] + oy[None, :]
        d2 = (pu - u[sel, None]) ** 2 + (pv - v[sel, None]) ** 2
        ok = (d2 <= r_px[sel, None] ** 2) & (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
        rows, cols = np.nonzero(ok)
        flat_idx.append(pv[rows, cols] * w + pu[rows, cols])
        flat_z.append(z[sel][rows])
        flat_src.append(sel[rows])
        flat_d2.append(d2[rows, cols])
    pix = np.concatenate(flat_idx)
    zz = np.concatenate(flat_z)
    src = np.concatenate(flat_src)
    d2 = np.concatenate(flat_d2)
    order = np.lexsort((src, zz, pix))
    pix, zz, src, d2 = pix[order], zz[order], src[order], d2[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    group = np.cumsum(first) - 1
    # blend the splats lying on the front-most surface; farther layers are hidden
    front_z = zz[first][group]
    depth.reshape(-1)[pix[first]] = zz[first]
    tol = DEPTH_BLEND * rad[src[first]][group]
    keep = zz <= front_z + tol
    pix, src, d2 = pix[keep], src[keep], d2[keep]
    wgt = np.exp(-2.0 * d2 / r_px[src] ** 2)
    n_pix = h * w
    wsum = np.bincount(pix, weights=wgt, minlength=n_pix)
    covered = wsum > 0
    flat_img = img.reshape(-1, 3)
    for c in range(3):
        acc = np.bincount(pix, weights=wgt * col[src, c], minlength=n_pix)
        flat_img[covered, c] = acc[covered] / wsum[covered]
    return img, covered.reshape(h, w), depth


def _luma(x: np.ndarray) -> np.ndarray:
    return to_gray(np.asarray(x, dtype=np.float64))


def _included(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if a.shape != b.shape:
        raise InvalidInputError(f"image sizes differ: {a.shape} vs {b.shape}")
    inc = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if inc.shape != a.shape:
        raise InvalidInputError("mask size does not match the images")
    if not inc.any():
        raise UndefinedMetricError("no pixel left after masking")
    return inc


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None, L: float = 255.0) -> float:
    """Mean SSIM over included pixels (``mask`` True = include).

    Local statistics use a Gaussian window normalised over included pixels
    only, so excluded pixels never influence the result.
    """
    a, b = _luma(a), _luma(b)
    inc = _included(a, b, mask)
    m = inc.astype(np.float64)
    a = np.where(inc, a, 0.0)
    b = np.where(inc, b, 0.0)

    def filt(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="constant")

    wsum = filt(m)
    safe = np.where(wsum > 0, wsum, 1.0)
    mu_a = filt(a) / safe
    mu_b = filt(b) / safe
    s_a = filt(a * a) / safe - mu_a * mu_a
    s_b = filt(b * b) / safe - mu_b * mu_b
    s_ab = filt(a * b) / safe - mu_a * mu_b
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_a + s_b + c2)
    return float(np.mean((num / den)[inc]))


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None, L: float = 255.0) -> float:
    """``10 log10(L^2 / MSE)`` over included pixels; ``inf`` when MSE is zero."""
    a, b = _luma(a), _luma(b)
    inc = _included(a, b, mask)
    mse = float(np.mean((a[inc] - b[inc]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(L * L / mse)


@dataclass(frozen=True)
class FrameMetrics:
    frame: int
    ssim: float | None
    psnr: float | None
    valid_pixels: int
    coverage: float

    @property
    def defined(self) -> bool:
        return self.ssim is not None


def evaluate_frame(frame: int, observed: np.ndarray, rendered: np.ndarray, coverage: np.ndarray,
                   tool_mask: np.ndarray | None) -> FrameMetrics:
    inc = coverage.copy()
    if tool_mask is not None:
        inc &= ~tool_mask
    try:
        s = ssim(observed, rendered, inc)
        p = psnr(observed, rendered, inc)
    except UndefinedMetricError:
        return FrameMetrics(frame, None, None, 0, float(coverage.mean()))
    return FrameMetrics(frame, s, p, int(inc.sum()), float(coverage.mean()))


def json_float(x: float | None):
    if x is None or math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass(frozen=True)
class MetricsReport:
    per_frame: tuple[FrameMetrics, ...]
    ssim_a: float
    psnr_a: float
    excluded_frames: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        frames = [
            {"frame": f.frame, "ssim": json_float(f.ssim), "psnr": json_float(f.psnr),
             "valid_pixels": f.valid_pixels, "coverage": f.coverage}
            for f in self.per_frame
        ]
        out = {"per_frame": frames, "ssim_a": json_float(self.ssim_a),
               "psnr_a": json_float(self.psnr_a), "excluded_frames": self.excluded_frames}
        out.update(self.extra)
        return out

    def write_json(self, path: str | Path) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def aggregate(per_frame: list[FrameMetrics]) -> MetricsReport:
    """Arithmetic means over defined frames; undefined frames are counted."""
    defined = [f for f in per_frame if f.defined]
    if not defined:
        raise UndefinedMetricError("no frame has a defined metric")
    s = sum(f.ssim for f in defined) / len(defined)
    p = sum(f.psnr for f in defined) / len(defined)
    return MetricsReport(tuple(per_frame), s, p, len(per_frame) - len(defined))
