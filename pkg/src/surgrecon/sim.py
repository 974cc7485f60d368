"""Deterministic synthetic deformable scene with stereo ground truth.

The tissue is a textured height field ``z(x, y, t)`` in the world frame (the
left camera frame of frame 0). A static relief gives the surface enough
shape for point-to-plane registration; on top of it a travelling-free
standing wave ``A sin(2 pi x / wavelength) sin(2 pi f t)`` provides the
non-rigid motion. A green textured box plays the surgical tool. Both views
are ray cast, so depth, masks and visibility are exact per pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import CameraIntrinsics, RigidPose, se3_exp

TOOL_RGB_RANGE = ((25, 55), (150, 240), (40, 70))


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Occluder:
    """Box with half extents ``half_size`` (box frame), yawed about world z."""

    half_size: tuple[float, float, float] = (0.006, 0.05, 0.004)
    keyframes: tuple[tuple[int, tuple[float, float, float]], ...] = ((0, (0.0, 0.0, 0.065)),)
    yaw: float = 0.0

    def center(self, frame: int) -> np.ndarray:
        return _interp_keyframes(self.keyframes, frame)


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    K: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(
        fx=500.0, fy=500.0, cx=319.5, cy=255.5, baseline=0.005, width=640, height=512))
    frames: int = 30
    fps: float = 30.0
    z0: float = 0.1
    extent: float = 0.15
    relief_amplitude: float = 0.003
    relief_wavelength: float = 0.03
    amplitude: float = 0.0
    frequency: float = 0.5
    wavelength: float = 0.04
    texture_seed: int = 1
    texture_cell: float = 0.0012
    # (frame, twist) keyframes of the left camera pose, linearly interpolated in twist space
    camera_keyframes: tuple[tuple[int, tuple[float, ...]], ...] = ((0, (0.0,) * 6),)
    occluder: Occluder | None = None
    smoke_opacity: float = 0.0

    def __post_init__(self) -> None:
        if self.amplitude < 0:
            raise SceneConfigError("deformation amplitude must be >= 0")
        if not 0.0 <= self.smoke_opacity <= 1.0:
            raise SceneConfigError("smoke opacity must lie in [0, 1]")
        if self.frames < 1:
            raise SceneConfigError("frame count must be >= 1")


@dataclass(frozen=True, eq=False)
class GroundTruthFrame:
    index: int
    time: float
    left: np.ndarray            # (H, W, 3) uint8
    right: np.ndarray
    depth: np.ndarray           # left-camera z of the first hit, NaN on miss
    tool_mask: np.ndarray       # left pixels where the tool wins the z-buffer
    tissue_depth: np.ndarray    # left-camera z of the tissue ignoring the tool
    visible_both: np.ndarray    # first hit of the left pixel also visible in the right view
    tissue_stereo: np.ndarray   # tissue (ignoring the tool) lies inside the right view
    pose: RigidPose             # left camera to world
    surface_points: np.ndarray  # (H, W, 3) world tissue points, NaN on miss
    disparity: np.ndarray       # fx * baseline / depth

    @property
    def single_view(self) -> np.ndarray:
        """Left pixels whose surface point the right camera cannot see."""
        return np.isfinite(self.depth) & ~self.visible_both


def _interp_keyframes(keys, frame: float) -> np.ndarray:
    frames = np.array([k[0] for k in keys], dtype=np.float64)
    values = np.array([k[1] for k in keys], dtype=np.float64)
    if len(keys) == 1 or frame <= frames[0]:
        return values[0].copy()
    if frame >= frames[-1]:
        return values[-1].copy()
    i = int(np.searchsorted(frames, frame, side="right")) - 1
    a = (frame - frames[i]) / (frames[i + 1] - frames[i])
    return (1.0 - a) * values[i] + a * values[i + 1]


class _ValueNoise:
    """Seeded lattice noise sampled with bilinear interpolation."""

    def __init__(self, rng: np.random.Generator, cell: float, extent: float, octaves=(1.0, 2.0, 4.0),
                 weights=(0.45, 0.35, 0.2)):
        self.layers = []
        for scale, weight in zip(octaves, weights):
            c = cell * scale
            n = int(math.ceil(2 * extent / c)) + 2
            self.layers.append((c, weight, rng.random((n, n))))
        self.extent = extent

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(np.shape(x))
        for c, weight, grid in self.layers:
            gx = (x + self.extent) / c
            gy = (y + self.extent) / c
            n = grid.shape[0]
            gx = np.clip(gx, 0, n - 1.000001)
            gy = np.clip(gy, 0, n - 1.000001)
            ix, iy = np.floor(gx).astype(int), np.floor(gy).astype(int)
            fx, fy = gx - ix, gy - iy
            v = (grid[iy, ix] * (1 - fx) * (1 - fy) + grid[iy, ix + 1] * fx * (1 - fy)
                 + grid[iy + 1, ix] * (1 - fx) * fy + grid[iy + 1, ix + 1] * fx * fy)
            out += weight * v
        return out


class Simulator:
    """Renders :class:`GroundTruthFrame` objects for a :class:`SceneConfig`."""

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.K = cfg.K
        rng = np.random.default_rng(cfg.texture_seed)
        self._tissue_tex = _ValueNoise(rng, cfg.texture_cell, cfg.extent)
        self._tool_tex = _ValueNoise(rng, cfg.texture_cell, 0.2)
        srng = np.random.default_rng(cfg.seed)
        self._relief_phase = srng.uniform(0, 2 * math.pi, size=2)
        self._smoke = _ValueNoise(srng, 24.0, 2000.0, octaves=(1.0, 2.0), weights=(0.6, 0.4))
        self._smoke_velocity = srng.uniform(-1.5, 1.5, size=2)
        for i in sorted({0, cfg.frames - 1, cfg.frames // 2}):
            self._check_camera(i)

    def __len__(self) -> int:
        return self.cfg.frames

    def __iter__(self) -> Iterator[GroundTruthFrame]:
        for i in range(self.cfg.frames):
            yield self.frame(i)

    # -- scene description -------------------------------------------------

    def time(self, i: int) -> float:
        return i / self.cfg.fps

    def camera_pose(self, i: int) -> RigidPose:
        return se3_exp(_interp_keyframes(self.cfg.camera_keyframes, i))

    def right_pose(self, i: int) -> RigidPose:
        offset = RigidPose(np.eye(3), np.array([self.K.baseline, 0.0, 0.0]))
        return self.camera_pose(i).compose(offset)

    def deformation_scale(self, i: int) -> float:
        c = self.cfg
        return c.amplitude * math.sin(2 * math.pi * c.frequency * self.time(i))

    def height(self, x, y, i: int):
        """Surface height and its x/y slopes at frame ``i``."""
        c = self.cfg
        k_r = 2 * math.pi / c.relief_wavelength
        p0, p1 = self._relief_phase
        sx, cx = np.sin(k_r * x + p0), np.cos(k_r * x + p0)
        sy, cy = np.sin(0.8 * k_r * y + p1), np.cos(0.8 * k_r * y + p1)
        k_d = 2 * math.pi / c.wavelength
        a = self.deformation_scale(i)
        h = c.z0 + c.relief_amplitude * sx * cy + a * np.sin(k_d * x)
        hx = c.relief_amplitude * k_r * cx * cy + a * k_d * np.cos(k_d * x)
        hy = -c.relief_amplitude * 0.8 * k_r * sx * sy
        return h, hx, hy

    def surface_distance(self, points: np.ndarray, i: int) -> np.ndarray:
        """First-order distance of world points to the tissue surface at frame ``i``."""
        h, hx, hy = self.height(points[..., 0], points[..., 1], i)
        return np.abs(points[..., 2] - h) / np.sqrt(1.0 + hx ** 2 + hy ** 2)

    def occluder_box(self, i: int):
        occ = self.cfg.occluder
        if occ is None:
            return None
        c, s = math.cos(occ.yaw), math.sin(occ.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return occ.center(i), rot, np.asarray(occ.half_size, dtype=np.float64)

    def box_corners(self, i: int) -> np.ndarray:
        center, rot, hs = self.occluder_box(i)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return center + (signs * hs) @ rot.T

    def _check_camera(self, i: int) -> None:
        pose = self.camera_pose(i)
        s, _ = self._cast_surface(pose.translation[None], pose.rotation[:, 2][None], i)
        if not np.isfinite(s[0]) or s[0] <= 0:
            raise SceneConfigError(f"camera at frame {i} does not look at the surface")

    # -- ray casting -------------------------------------------------------

    def _rays(self, pose: RigidPose):
        K = self.K
        v, u = np.mgrid[0:K.height, 0:K.width]
        d_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(u.shape)], axis=-1)
        d = d_cam @ pose.rotation.T
        o = np.broadcast_to(pose.translation, d.shape)
        return o, d

    def _cast_surface(self, o: np.ndarray, d: np.ndarray, i: int):
        """Ray parameter ``s`` of the tissue hit (``o + s d``) or NaN."""
        c = self.cfg
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (c.z0 - o[..., 2]) / d[..., 2]
            for _ in range(30):
                x = o[..., 0] + s * d[..., 0]
                y = o[..., 1] + s * d[..., 1]
                h, hx, hy = self.height(x, y, i)
                f = o[..., 2] + s * d[..., 2] - h
                df = d[..., 2] - hx * d[..., 0] - hy * d[..., 1]
                step = f / df
                s = s - step
                if np.nanmax(np.abs(step)) < 1e-13:
                    break
            x = o[..., 0] + s * d[..., 0]
            y = o[..., 1] + s * d[..., 1]
            inside = (np.abs(x) <= c.extent) & (np.abs(y) <= c.extent) & (s > 0)
        s = np.where(inside, s, np.nan)
        return s, np.stack([x, y], axis=-1)

    def _cast_box(self, o: np.ndarray, d: np.ndarray, i: int):
        box = self.occluder_box(i)
        if box is None:
            return np.full(o.shape[:-1], np.nan), None
        center, rot, hs = box
        ob = (o - center) @ rot
        db = d @ rot
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-hs - ob) / db
            t2 = (hs - ob) / db
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmin > 0)
        s = np.where(hit, tmin, np.nan)
        local = ob + np.where(hit, tmin, 0.0)[..., None] * db
        return s, local

    def _shade(self, i: int, s_surf, xy, s_box, local_box):
        tool = np.isfinite(s_box) & ~(s_box > s_surf)
        img = np.zeros(s_surf.shape + (3,))
        tissue = np.isfinite(s_surf) & ~tool
        tex = self._tissue_tex(xy[..., 0], xy[..., 1])
        img[..., 0] = 90 + 150 * tex
        img[..., 1] = 30 + 70 * tex
        img[..., 2] = 35 + 60 * tex
        img[~tissue] = 0.0
        if local_box is not None and np.any(tool):
            lb = local_box[tool]
            st = self._tool_tex(lb[:, 0] + 0.5 * lb[:, 2], lb[:, 1] + 0.5 * lb[:, 2])
            (r0, r1), (g0, g1), (b0, b1) = TOOL_RGB_RANGE
            img[tool] = np.stack([r0 + (r1 - r0) * st, g0 + (g1 - g0) * st, b0 + (b1 - b0) * st], axis=-1)
        depth = np.where(tool, s_box, s_surf)
        return img, depth, tool

    def _composite_smoke(self, img: np.ndarray, i: int) -> np.ndarray:
        a = self.cfg.smoke_opacity
        if a <= 0:
            return img
        K = self.K
        v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
        du, dv = self._smoke_velocity * i
        n = self._smoke(u + du - K.width / 2, v + dv - K.height / 2)
        w = (a * n)[..., None]
        return img * (1.0 - w) + 230.0 * w

    def _render(self, pose: RigidPose, i: int):
        o, d = self._rays(pose)
        s_surf, xy = self._cast_surface(o, d, i)
        s_box, local = self._cast_box(o, d, i)
        img, depth, tool = self._shade(i, s_surf, xy, s_box, local)
        img = self._composite_smoke(img, i)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8), depth, tool, s_surf, o, d

    def frame(self, i: int) -> GroundTruthFrame:
        if not 0 <= i < self.cfg.frames:
            raise IndexError(i)
        K = self.K
        pose_l = self.camera_pose(i)
        pose_r = self.right_pose(i)
        left, depth, tool, s_surf, o, d = self._render(pose_l, i)
        right, _, _, _, _, _ = self._render(pose_r, i)

        points = o + depth[..., None] * d
        tissue_points = o + s_surf[..., None] * d
        visible = self._visible_from(pose_r, points, i, occluder=True)
        tissue_stereo = self._visible_from(pose_r, tissue_points, i, occluder=False)

        return GroundTruthFrame(
            index=i, time=self.time(i), left=left, right=right, depth=depth,
            tool_mask=tool, tissue_depth=s_surf, visible_both=visible,
            tissue_stereo=tissue_stereo, pose=pose_l, surface_points=tissue_points,
            disparity=K.fx * K.baseline / depth,
        )

    def _visible_from(self, pose: RigidPose, points: np.ndarray, i: int, occluder: bool) -> np.ndarray:
        """Whether world points fall inside the view of ``pose``.

        With ``occluder`` set, points hidden behind the tool count as unseen.
        """
        K = self.K
        finite = np.all(np.isfinite(points), axis=-1)
        cam = pose.inverse().apply(np.where(finite[..., None], points, 0.0))
        z = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * cam[..., 0] / z + K.cx
            v = K.fy * cam[..., 1] / z + K.cy
        # inside the footprint of some pixel of the other view
        ok = finite & (z > 0) & (u >= -0.5) & (u < K.width - 0.5) & (v >= -0.5) & (v < K.height - 0.5)
        if occluder and self.cfg.occluder is not None:
            o = np.broadcast_to(pose.translation, points.shape)
            seg = np.where(finite[..., None], points - o, 1.0)
            s_box, _ = self._cast_box(o, seg, i)
            blocked = np.isfinite(s_box) & (s_box < 1.0 - 1e-6)
            ok &= ~blocked
        return ok


def generate(cfg: SceneConfig) -> list[GroundTruthFrame]:
    """All frames of a scene, in index order."""
    return list(Simulator(cfg))


PRESET_K = CameraIntrinsics(fx=250.0, fy=250.0, cx=159.5, cy=127.5, baseline=0.005, width=320, height=256)


def _arc_twist(degrees: float, pivot_z: float) -> tuple[float, ...]:
    # rotation about the world y axis through (0, 0, pivot_z)
    w = np.array([0.0, math.radians(degrees), 0.0])
    v = -np.cross(w, np.array([0.0, 0.0, pivot_z]))
    return tuple(np.concatenate([w, v]).tolist())


def _sweep(frames: int) -> Occluder:
    return Occluder(
        half_size=(0.006, 0.05, 0.004),
        keyframes=((0, (-0.042, 0.0, 0.065)), (frames - 1, (0.058, 0.0, 0.065))),
    )


def scenario_presets() -> dict[str, SceneConfig]:
    """Named scenes used by the CLI and the acceptance suite.

    All are 320x256 except ``plane``, a static fronto-parallel plane at the
    full default 640x512 calibration.
    """
    base = SceneConfig(K=PRESET_K)
    presets = {
        "plane": SceneConfig(frames=10, relief_amplitude=0.0),
        "static": replace(base, frames=30),
        "deform_only": replace(base, frames=60, amplitude=0.005, frequency=0.25),
        "tool_sweep": replace(base, frames=60, occluder=_sweep(60)),
        "camera_arc": replace(
            base, frames=120,
            camera_keyframes=((0, (0.0,) * 6), (119, _arc_twist(10.0, base.z0))),
        ),
        "full_dynamic": replace(
            base, frames=120, amplitude=0.003, frequency=0.25, occluder=_sweep(120),
            camera_keyframes=((0, (0.0,) * 6), (119, _arc_twist(10.0, base.z0))),
        ),
        "smoky": replace(
            base, frames=60, amplitude=0.003, frequency=0.25, occluder=_sweep(60),
            smoke_opacity=0.35,
        ),
    }
    presets["bump"] = presets["deform_only"]
    return presets


def preset(name: str, **overrides) -> SceneConfig:
    presets = scenario_presets()
    if name not in presets:
        raise SceneConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    cfg = presets[name]
    if "frames" in overrides and cfg.occluder is not None and overrides["frames"] != cfg.frames:
        overrides.setdefault("occluder", _sweep(overrides["frames"]))
    return replace(cfg, **overrides)


def write_sequence(cfg: SceneConfig, out_dir: str | Path) -> int:
    """Write a scene in the ingestion layout; ground truth goes to ``gt/``.

    Layout: ``calibration.json``, ``left_%06d.ppm``, ``right_%06d.ppm``,
    ``mask_%06d.pgm`` (ground-truth tool mask), ``gt/depth_%06d.pfm`` and
    ``gt/trajectory.csv``. Returns the number of frames written.
    """
    from .io import write_pfm, write_pgm, write_ppm
    from .registration import write_trajectory

    out = Path(out_dir)
    gt = out / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    sim = Simulator(cfg)
    sim.K.to_json(out / "calibration.json")
    poses = []
    for f in sim:
        write_ppm(out / f"left_{f.index:06d}.ppm", f.left)
        write_ppm(out / f"right_{f.index:06d}.ppm", f.right)
        write_pgm(out / f"mask_{f.index:06d}.pgm", f.tool_mask.astype(np.uint8) * 255)
        write_pfm(gt / f"depth_{f.index:06d}.pfm", np.where(np.isfinite(f.depth), f.depth, 0.0))
        poses.append(f.pose)
    write_trajectory(gt / "trajectory.csv", poses)
    return len(poses)
