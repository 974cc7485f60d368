"""Per-frame reconstruction loop, ingestion, persistence and benchmarking."""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .deformation import (DataTerm, NodeGraph, build_graph, insert_nodes, inverse_warp, skin,
                          solve_deformation, warp_normals, warp_points)
from .evaluation import FrameMetrics, MetricsReport, aggregate, evaluate_frame, render_reprojection
from .fusion import FusionConfig, FusionStats, admit_new, fuse_into, prune_stale
from .geometry import CameraIntrinsics, InvalidInputError, RigidPose
from .io import IngestionError, read_pfm, read_ppm
from .registration import DegenerateRegistrationError, TrackingParams, find_correspondences, track, write_trajectory
from .segmentation import ToolMask, apply_mask, default_radii, make_provider, morph_refine, segment
from .stereo import AttentionConfig, DepthMap, StereoParams, estimate_depth, lightweight_config
from .surfels import SurfelMap, build_observation

log = logging.getLogger(__name__)

STAGES = ("depth", "mask", "registration", "deformation", "fusion")
PROFILES = ("efficient", "high-quality")
# base attention stack; the efficient profile derives from it
BASE_C_ATTN = 16
BASE_N_ATTN = 4


class ConfigError(ValueError):
    pass


class EmptyInputError(IngestionError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "efficient"
    input_dir: str | None = None
    output_dir: str | None = None
    depth_dir: str | None = None
    mask_provider: str = "chroma"
    mask_dir: str | None = None
    eval_mask_provider: str = "chroma"
    evaluate: bool = False
    seed: int = 0
    stride: int | None = None
    max_disp: int | None = None
    z_min: float = 0.01
    z_max: float = 1.0
    close_radius: int | None = None
    dilate_radius: int | None = None
    theta_d: float = 0.01
    theta_n: float = 30.0
    icp_rounds: int = 3
    registration_mode: str = "point_to_plane"
    deformation: bool = True
    node_spacing: float = 0.006
    lambda_reg: float = 10.0
    conf_admit_threshold: float = 2.0
    neighborhood_radius: float = 0.005
    motion_consistency_threshold: float = 0.002
    max_age: int = 30
    skip_duplicates: bool = True
    # Gaussian sigma (px) on depth before normal estimation; None scales 4 px per 320 px of width
    normal_smoothing: float | None = None

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if self.mask_provider not in ("none", "file", "chroma"):
            raise ConfigError(f"unknown mask provider {self.mask_provider!r}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.normal_smoothing is not None and self.normal_smoothing < 0:
            raise ConfigError("normal_smoothing must be >= 0")
        if self.registration_mode not in ("point_to_plane", "depth"):
            raise ConfigError(f"unknown registration mode {self.registration_mode!r}")
        try:
            self.fusion_config()
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def effective_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        return 2 if self.profile == "efficient" else 1

    def effective_normal_smoothing(self, width: int) -> float:
        if self.normal_smoothing is not None:
            return self.normal_smoothing
        return 4.0 * width / 320.0

    def attention_config(self) -> AttentionConfig:
        base = AttentionConfig.create(BASE_C_ATTN, BASE_N_ATTN, seed=self.seed)
        return lightweight_config(base) if self.profile == "efficient" else base

    def stereo_params(self) -> StereoParams:
        return StereoParams(max_disp=self.max_disp, z_min=self.z_min, z_max=self.z_max)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.conf_admit_threshold, self.neighborhood_radius,
                            self.motion_consistency_threshold, self.max_age)

    def tracking_params(self) -> TrackingParams:
        return TrackingParams(self.theta_d, self.theta_n, self.icp_rounds, self.registration_mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from None


@dataclass(frozen=True, eq=False)
class FrameBundle:
    index: int
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.left.shape != self.right.shape:
            raise InvalidInputError(f"frame {self.index}: left/right sizes differ")


_FRAME_RE = re.compile(r"^left_(\d{6})\.ppm$")


@dataclass(frozen=True)
class Sequence:
    directory: Path
    K: CameraIntrinsics
    indices: tuple[int, ...]
    depth_dir: Path | None = None

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[FrameBundle]:
        for i in self.indices:
            yield self.load(i)

    def load(self, i: int) -> FrameBundle:
        left = read_ppm(self.directory / f"left_{i:06d}.ppm")
        right = read_ppm(self.directory / f"right_{i:06d}.ppm")
        for name, img in (("left", left), ("right", right)):
            if img.shape[:2] != self.K.shape:
                raise IngestionError(
                    f"{name}_{i:06d}.ppm is {img.shape[1]}x{img.shape[0]}, calibration says "
                    f"{self.K.width}x{self.K.height}")
        depth = None
        if self.depth_dir is not None:
            path = self.depth_dir / f"depth_{i:06d}.pfm"
            if not path.exists():
                raise IngestionError(f"frame {i}: external depth {path} is missing")
            depth = read_pfm(path)
            if depth.shape != self.K.shape:
                raise IngestionError(f"{path} does not match the calibration size")
        return FrameBundle(i, left, right, depth)


def ingest(directory: str | Path, depth_dir: str | Path | None = None) -> Sequence:
    """Index a frame directory; frames must be numbered 0..N-1 without gaps."""
    d = Path(directory)
    if not d.is_dir():
        raise IngestionError(f"input directory {d} does not exist")
    indices = sorted(int(m.group(1)) for p in d.iterdir() if (m := _FRAME_RE.match(p.name)))
    if not indices:
        raise EmptyInputError(f"no left_%06d.ppm frames in {d}")
    calib = d / "calibration.json"
    if not calib.exists():
        raise IngestionError(f"{calib} is missing")
    try:
        K = CameraIntrinsics.from_json(calib)
    except (ValueError, OSError) as exc:
        raise IngestionError(f"{calib}: {exc}") from None
    expected = set(range(indices[-1] + 1))
    missing = sorted(expected - set(indices))
    if missing:
        raise IngestionError(f"missing frame indices: {missing}")
    for i in indices:
        if not (d / f"right_{i:06d}.ppm").exists():
            raise IngestionError(f"right_{i:06d}.ppm is missing")
    return Sequence(d, K, tuple(indices), Path(depth_dir) if depth_dir else None)


@dataclass
class FrameRecord:
    index: int
    pose: RigidPose
    timings: dict[str, float]
    stats: FusionStats
    degenerate: bool
    metrics: FrameMetrics | None = None
    # flat pixel indices of observations fused into / admitted to the model
    fused_pixels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    admitted_pixels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


class Reconstructor:
    """Online reconstruction state; feed frames in order with :meth:`step`."""

    def __init__(self, K: CameraIntrinsics, cfg: PipelineConfig = PipelineConfig()):
        self.K = K
        self.cfg = cfg
        self.attention = cfg.attention_config()
        self.stereo_params = cfg.stereo_params()
        self.fusion_cfg = cfg.fusion_config()
        self.tracking = cfg.tracking_params()
        mask_dir = cfg.mask_dir or cfg.input_dir
        self.provider = make_provider(cfg.mask_provider, mask_dir)
        self.eval_provider = make_provider(cfg.eval_mask_provider, mask_dir)
        r_close, r_dilate = default_radii(K.width)
        self.close_radius = r_close if cfg.close_radius is None else cfg.close_radius
        self.dilate_radius = r_dilate if cfg.dilate_radius is None else cfg.dilate_radius
        self.model = SurfelMap()
        self.graph: NodeGraph | None = None
        self.pose = RigidPose.identity()
        self.records: list[FrameRecord] = []
        self._count = 0
        self._pool = ThreadPoolExecutor(max_workers=2)

    def close(self) -> None:
        self._pool.shutdown()

    def __enter__(self) -> "Reconstructor":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- stages --------------------------------------------------------------

    def _depth(self, b: FrameBundle) -> tuple[DepthMap, float]:
        t0 = time.perf_counter()
        if b.depth is not None:
            d = DepthMap.from_depth(b.depth, b.index, self.cfg.z_min, self.cfg.z_max)
        else:
            d = estimate_depth(b.left, b.right, self.K, self.attention, self.stereo_params, b.index)
        return d, time.perf_counter() - t0

    def _mask(self, b: FrameBundle):
        t0 = time.perf_counter()
        if b.mask is not None:
            m = ToolMask(b.mask, b.index)
        else:
            m = segment(b.left, self.provider, b.index)
        m = morph_refine(m, self.close_radius, self.dilate_radius)
        return m, time.perf_counter() - t0

    def live_model(self) -> SurfelMap:
        """The canonical model warped into the current world frame."""
        if self.graph is None or len(self.model) == 0:
            return self.model
        live = self.model.copy()
        sk = skin(self.graph, self.model.positions)
        live.positions, _ = warp_points(self.graph, self.model.positions, sk)
        live.normals = warp_normals(self.graph, self.model.positions, self.model.normals, sk)
        return live

    def _to_canonical(self, obs_world: SurfelMap) -> SurfelMap:
        if self.graph is None or len(obs_world) == 0:
            return obs_world
        out = obs_world.copy()
        x, _ = inverse_warp(self.graph, obs_world.positions)
        sk = skin(self.graph, x)
        rt = np.swapaxes(self.graph.rotations[sk.nodes], -1, -2)
        n = np.einsum("nk,nkab,nb->na", sk.weights, rt, obs_world.normals)
        n = np.where(sk.supported[:, None], n, obs_world.normals)
        out.positions = x
        out.normals = n / np.linalg.norm(n, axis=1, keepdims=True)
        return out

    # -- main step -----------------------------------------------------------

    def step(self, b: FrameBundle) -> FrameRecord:
        K, cfg = self.K, self.cfg
        if b.left.shape[:2] != K.shape:
            raise InvalidInputError(f"frame {b.index} does not match the calibration size")
        t = self._count
        timings = {}
        f_depth = self._pool.submit(self._depth, b)
        f_mask = self._pool.submit(self._mask, b)
        depth, timings["depth"] = f_depth.result()
        mask, timings["mask"] = f_mask.result()
        d_m = apply_mask(depth, mask)
        stride = cfg.effective_stride
        obs = build_observation(d_m, b.left, K, RigidPose.identity(), t, stride,
                                cfg.effective_normal_smoothing(K.width))

        degenerate = False
        t0 = time.perf_counter()
        if len(self.model) == 0:
            pose = RigidPose.identity() if t == 0 else self.pose
            P = None
        else:
            live = self.live_model()
            try:
                pose, P = track(live, obs, self.pose, K, self.tracking, stride)
            except DegenerateRegistrationError as exc:
                log.warning("frame %d: registration degenerate (%s); keeping previous pose", b.index, exc)
                pose, P, degenerate = self.pose, None, True
        timings["registration"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if cfg.deformation and self.graph is not None and P is not None and len(P):
            data = DataTerm.from_correspondences(self.model.positions[P.ref_index], P, pose)
            res = solve_deformation(self.graph, data)
            self.graph = res.graph
        timings["deformation"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        obs_world = obs.copy()
        obs_world.positions = pose.apply(obs.positions)
        obs_world.normals = pose.rotate(obs.normals)
        fused_px = np.zeros(0, dtype=np.int64)
        matched = np.zeros(len(obs), dtype=bool)
        if len(self.model) and not degenerate:
            live = self.live_model()
            P2 = find_correspondences(live, obs, pose, K, cfg.theta_d, cfg.theta_n, stride)
            obs_can = self._to_canonical(obs_world)
            ok = fuse_into(self.model, P2.ref_index, obs_can, P2.obs_index, t)
            matched[P2.obs_index] = True
            fused_px = obs.origin_pixel[P2.obs_index[ok]]
        else:
            obs_can = self._to_canonical(obs_world)
        if degenerate:
            cand = obs_can.subset(np.zeros(len(obs), dtype=bool))
        else:
            cand = obs_can.subset(~matched)
        adm = admit_new(self.model, cand, self.graph, self.fusion_cfg, t, cfg.skip_duplicates)
        admitted_px = cand.origin_pixel[adm.admitted]
        pruned = prune_stale(self.model, t, self.fusion_cfg)
        if len(adm.admitted) and cfg.deformation:
            new_pts = cand.positions[adm.admitted]
            if self.graph is None:
                self.graph = build_graph(new_pts, cfg.node_spacing, lambda_reg=cfg.lambda_reg)
            else:
                self.graph, _ = insert_nodes(self.graph, new_pts)
        timings["fusion"] = time.perf_counter() - t0

        stats = FusionStats(b.index, len(fused_px), len(admitted_px), pruned, len(self.model))
        rec = FrameRecord(b.index, pose, timings, stats, degenerate,
                          fused_pixels=fused_px, admitted_pixels=admitted_px)
        if cfg.evaluate:
            t0 = time.perf_counter()
            rec.metrics = self.evaluate(b, pose)
            timings["evaluation"] = time.perf_counter() - t0
        self.pose = pose
        self.records.append(rec)
        self._count += 1
        return rec

    def evaluate(self, b: FrameBundle, pose: RigidPose) -> FrameMetrics:
        img, cov, _ = render_reprojection(self.model, self.graph, pose, self.K)
        tool = morph_refine(segment(b.left, self.eval_provider, b.index),
                            self.close_radius, self.dilate_radius).mask
        return evaluate_frame(b.index, b.left, img, cov, tool)

    # -- results -------------------------------------------------------------

    @property
    def trajectory(self) -> list[RigidPose]:
        return [r.pose for r in self.records]

    def report(self) -> MetricsReport | None:
        frames = [r.metrics for r in self.records if r.metrics is not None]
        extra = {
            "fusion": [r.stats.to_dict() for r in self.records],
            "degenerate_frames": [r.index for r in self.records if r.degenerate],
            "profile": self.cfg.profile,
        }
        if not frames:
            return MetricsReport((), float("nan"), float("nan"), 0, extra)
        try:
            rep = aggregate(frames)
        except ValueError:
            return MetricsReport(tuple(frames), float("nan"), float("nan"), len(frames), extra)
        return replace(rep, extra=extra)

    def timing_profile(self) -> list[dict]:
        return [{"frame": r.index, **r.timings} for r in self.records]


@dataclass(frozen=True, eq=False)
class PipelineResult:
    model: SurfelMap
    graph: NodeGraph | None
    trajectory: list[RigidPose]
    report: MetricsReport
    timings: list[dict]
    records: list[FrameRecord]


def reconstruct(frames: Iterable[FrameBundle], K: CameraIntrinsics, cfg: PipelineConfig) -> PipelineResult:
    with Reconstructor(K, cfg) as rec:
        for b in frames:
            rec.step(b)
        return PipelineResult(rec.model, rec.graph, rec.trajectory, rec.report(),
                              rec.timing_profile(), rec.records)


def write_outputs(result: PipelineResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.model.write_ply(out / "model.ply")
    write_trajectory(out / "trajectory.csv", result.trajectory)
    result.report.write_json(out / "metrics.json")
    with open(out / "timings.json", "w") as fh:
        json.dump(result.timings, fh, indent=1)


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    if cfg.input_dir is None:
        raise ConfigError("input_dir is required")
    seq = ingest(cfg.input_dir, cfg.depth_dir)
    result = reconstruct(seq, seq.K, cfg)
    if cfg.output_dir is not None:
        write_outputs(result, cfg.output_dir)
    return result


def _stage_summary(values: list[float]) -> dict:
    a = np.asarray(values)
    return {"median": float(np.median(a)), "p95": float(np.percentile(a, 95)), "count": int(len(a))}


def bench(cfg: PipelineConfig, preset_name: str, frames: int = 50, warmup: int = 5) -> dict:
    """Median/p95 per-stage latency over ``frames`` frames after ``warmup``."""
    from .sim import Simulator, preset

    scene = preset(preset_name)
    need = frames + warmup
    if scene.frames < need:
        scene = preset(preset_name, frames=need)
    sim = Simulator(scene)
    with Reconstructor(sim.K, cfg) as rec:
        for i in range(need):
            f = sim.frame(i)
            rec.step(FrameBundle(i, f.left, f.right))
        rows = rec.records[warmup:need]
    stages = {s: _stage_summary([r.timings[s] for r in rows]) for s in STAGES}
    return {"preset": preset_name, "profile": cfg.profile, "frames": len(rows),
            "warmup": warmup, "stages": stages}
