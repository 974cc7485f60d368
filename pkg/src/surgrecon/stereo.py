"""Stereo depth by dense epipolar attention matching.

Each image row of the left and right views is treated as a sequence of
descriptors. A stack of attention layers (alternating self and cross
attention, starting with self) refines the descriptors, and the similarity
of the final cross attention is normalised into a per-pixel matching
likelihood over the admissible disparities ``0..max_disp``.

Learned features are replaced by a fixed 11-channel descriptor and the
projection weights are built from a seeded generator, so the whole stage is
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, InvalidInputError, disparity_to_depth

FEATURE_CHANNELS = 11
# offsets (du, dv) of the zero-mean samples inside the 7x7 patch; a wider
# ring fattens foreground edges enough to hide occluded background
_RING = ((-2, -2), (0, -2), (2, -2), (-2, 0), (2, 0), (-2, 2), (0, 2), (2, 2))
_RING_WEIGHT = 0.5
DEFAULT_SHARPNESS = 8000.0
_SELF_GAIN = 16.0
_RESIDUAL_STEP = 0.25
# descriptor + constant + squared-norm slot used by the structured weights
_EMBED_CHANNELS = FEATURE_CHANNELS + 2
_EDGE_COLS = slice(3, 8)


class Status(IntEnum):
    VALID = 0
    OCCLUDED = 1
    LOW_CONFIDENCE = 2
    INVALID = 3


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel metric depth with a status flag; non-valid pixels hold NaN."""

    depth: np.ndarray
    status: np.ndarray
    timestamp: int = 0
    disparity: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.depth.shape != self.status.shape:
            raise InvalidInputError("depth and status shapes differ")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.status == Status.VALID

    @classmethod
    def from_depth(cls, depth: np.ndarray, timestamp: int = 0,
                   z_min: float = 0.0, z_max: float = math.inf) -> "DepthMap":
        """Wrap a raw depth image; non-finite or out-of-range values become INVALID."""
        depth = np.asarray(depth, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            ok = np.isfinite(depth) & (depth > z_min) & (depth < z_max)
        status = np.where(ok, Status.VALID, Status.INVALID).astype(np.uint8)
        return cls(np.where(ok, depth, np.nan), status, timestamp)


def to_gray(img: np.ndarray) -> np.ndarray:
    """BT.601 luma for colour images; grey images pass through as float64."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    return img


def extract_features(img: np.ndarray) -> np.ndarray:
    """Fixed per-pixel descriptor of shape (H, W, 11).

    Channels: intensity, horizontal and vertical central-difference
    gradients, and eight samples on the radius-2 ring minus the 7x7 patch
    mean (weighted by 0.5). All channels are scaled by 1/255.
    """
    gray = to_gray(img)
    if gray.size == 0:
        raise InvalidInputError("empty image")
    h, w = gray.shape
    pad = np.pad(gray, 3, mode="reflect") if min(h, w) > 3 else np.pad(gray, 3, mode="edge")
    feats = np.empty((h, w, FEATURE_CHANNELS))
    feats[..., 0] = gray
    feats[..., 1] = (pad[3:3 + h, 4:4 + w] - pad[3:3 + h, 2:2 + w]) * 0.5
    feats[..., 2] = (pad[4:4 + h, 3:3 + w] - pad[2:2 + h, 3:3 + w]) * 0.5
    mean = ndimage.uniform_filter(pad, size=7, mode="nearest")[3:3 + h, 3:3 + w]
    for c, (du, dv) in enumerate(_RING):
        feats[..., 3 + c] = pad[3 + dv:3 + dv + h, 3 + du:3 + du + w] - mean
    feats[..., :3] *= 1.0 / 255.0
    feats[..., 3:] *= _RING_WEIGHT / 255.0
    return feats


@dataclass(frozen=True, eq=False)
class AttentionConfig:
    """Embedding size, layer count and per-layer projections (N, C, C)."""

    c_attn: int
    n_attn: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    seed: int = 0
    sharpness: float = 0.0

    def __post_init__(self) -> None:
        if self.c_attn < 1 or self.n_attn < 1:
            raise InvalidInputError("c_attn and n_attn must be >= 1")
        for name in ("w_q", "w_k", "w_v"):
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim == 2:
                m = np.broadcast_to(m, (self.n_attn, *m.shape)).copy()
            if m.shape != (self.n_attn, self.c_attn, self.c_attn):
                raise InvalidInputError(f"{name} must have shape (N, C, C), got {m.shape}")
            if not np.all(np.isfinite(m)):
                raise InvalidInputError(f"{name} has non-finite entries")
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def temperature(self) -> float:
        return math.sqrt(self.c_attn)

    @classmethod
    def create(cls, c_attn: int, n_attn: int, seed: int = 0,
               sharpness: float = DEFAULT_SHARPNESS) -> "AttentionConfig":
        """Seeded projection weights.

        With ``c_attn >= 13`` the weights are structured so that the scaled
        logit ``alpha / sqrt(c_attn)`` between two embedded descriptors is
        ``-sharpness * |f_src - f_tgt|^2 / 2`` (16x that for self layers other
        than the last), up to a small seeded perturbation. Smaller embeddings
        get plain Gaussian weights.
        """
        if c_attn < 1 or n_attn < 1:
            raise InvalidInputError("c_attn and n_attn must be >= 1")
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((3, n_attn, c_attn, c_attn))
        if c_attn < _EMBED_CHANNELS:
            scale = 1.0 / math.sqrt(c_attn)
            return cls(c_attn, n_attn, noise[0] * scale, noise[1] * scale,
                       noise[2] * scale, seed, sharpness)
        # self layers are sharper so they act as a light refinement; the last
        # layer also scores the final cross similarity and keeps the base gain
        gains = np.array([
            math.sqrt(sharpness * math.sqrt(c_attn)
                      * (_SELF_GAIN if layer % 2 == 0 and layer < n_attn - 1 else 1.0))
            for layer in range(n_attn)
        ])[:, None, None]
        eye = np.eye(c_attn)
        swap = eye.copy()
        swap[[FEATURE_CHANNELS, FEATURE_CHANNELS + 1]] = swap[[FEATURE_CHANNELS + 1, FEATURE_CHANNELS]]
        eps = 1e-6
        w_q = gains * (swap + eps * noise[0])
        w_k = gains * (eye + eps * noise[1])
        w_v = eye + eps * noise[2]
        return cls(c_attn, n_attn, w_q, w_k, w_v, seed, sharpness)


def embed(feats: np.ndarray, c_attn: int) -> np.ndarray:
    """Pad descriptors to ``c_attn`` channels as ``[f, 1, -|f|^2/2, 0...]``."""
    if c_attn < _EMBED_CHANNELS:
        raise InvalidInputError(f"c_attn must be >= {_EMBED_CHANNELS} to embed descriptors")
    out = np.zeros(feats.shape[:-1] + (c_attn,), dtype=feats.dtype)
    out[..., :FEATURE_CHANNELS] = feats
    out[..., FEATURE_CHANNELS] = 1.0
    out[..., FEATURE_CHANNELS + 1] = -0.5 * np.einsum("...c,...c->...", feats, feats)
    return out


# exp(-60) ~ 1e-26: flooring keeps float32 weights out of the denormal range,
# which otherwise stalls the FPU by an order of magnitude
_EXP_FLOOR = -60.0


def _softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; entries where ``mask`` is False get exactly 0."""
    z = _unnormalized(logits, mask)
    z /= np.sum(z, axis=-1, keepdims=True)
    return z


def _unnormalized(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    # works in place on ``logits``; masked entries must already be very negative
    z = logits
    z -= np.max(z, axis=-1, keepdims=True)
    np.maximum(z, _EXP_FLOOR, out=z)
    np.exp(z, out=z)
    if mask is not None:
        z *= mask
    return z


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray,
            bias: np.ndarray | None, mask: np.ndarray | None) -> np.ndarray:
    """softmax(q k^T + bias) v with ``q`` already divided by the temperature."""
    logits = q @ np.swapaxes(k, -1, -2)
    if bias is not None:
        logits += bias
    z = _unnormalized(logits, mask)
    # a trailing ones column yields the softmax normaliser from the same matmul
    ones = np.ones(v.shape[:-1] + (1,), dtype=v.dtype)
    out = z @ np.concatenate([v, ones], axis=-1)
    return out[..., :-1] / out[..., -1:]


def _mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    return np.where(mask, 0.0, -1e30).astype(dtype)


def attention_update(src: np.ndarray, tgt: np.ndarray, cfg: AttentionConfig,
                     layer: int = 0, mask: np.ndarray | None = None,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """One attention application between ``src`` (..., n, C) and ``tgt`` (..., m, C).

    Returns ``(p_out, alpha)`` where ``alpha = src W_q^T W_k tgt^T`` and
    ``p_out = softmax(alpha / sqrt(C)) (tgt W_v^T)``, softmax over targets.
    ``mask`` (broadcastable to alpha, True = allowed) removes candidates.
    """
    src = np.asarray(src)
    tgt = np.asarray(tgt)
    c = cfg.c_attn
    if src.shape[-1] != c or tgt.shape[-1] != c:
        raise InvalidInputError(
            f"descriptor dimension must equal c_attn={c}: got {src.shape[-1]} and {tgt.shape[-1]}"
        )
    if not 0 <= layer < cfg.n_attn:
        raise InvalidInputError(f"layer {layer} outside 0..{cfg.n_attn - 1}")
    dtype = np.result_type(src.dtype, tgt.dtype, np.float32)
    q = src @ cfg.w_q[layer].astype(dtype, copy=False).T
    k = tgt @ cfg.w_k[layer].astype(dtype, copy=False).T
    v = tgt @ cfg.w_v[layer].astype(dtype, copy=False).T
    alpha = q @ np.swapaxes(k, -1, -2)
    logits = alpha / dtype.type(cfg.temperature)
    if mask is not None:
        mask = np.broadcast_to(mask, logits.shape)
        if not np.all(mask.any(axis=-1)):
            raise InvalidInputError("mask removes every candidate of some query")
        logits = np.where(mask, logits, -np.inf)
    weights = _softmax(logits, mask)
    return weights @ v, alpha


def _band_masks(w: int, max_disp: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(w)[:, None]
    j = np.arange(w)[None, :]
    d = i - j
    left_to_right = (d >= 0) & (d <= max_disp)     # query left i, key right j
    return left_to_right, left_to_right.T          # query right j, key left i


def _projections(x: np.ndarray, cfg: AttentionConfig, layer: int):
    dt = x.dtype
    e = embed(x, cfg.c_attn)
    q = e @ (cfg.w_q[layer] / cfg.temperature).astype(dt).T
    k = e @ cfg.w_k[layer].astype(dt).T
    v = e @ cfg.w_v[layer].astype(dt).T
    return q, k, v


def _refine_descriptors(fl: np.ndarray, fr: np.ndarray, cfg: AttentionConfig,
                        max_disp: int) -> tuple[np.ndarray, np.ndarray]:
    """Run the N attention layers on a block of rows (h, W, 11)."""
    m_lr, m_rl = _band_masks(fl.shape[1], max_disp)
    b_lr, b_rl = _mask_bias(m_lr, fl.dtype), _mask_bias(m_rl, fl.dtype)
    for layer in range(cfg.n_attn):
        ql, kl, vl = _projections(fl, cfg, layer)
        qr, kr, vr = _projections(fr, cfg, layer)
        if layer % 2 == 0:
            out_l = _attend(ql, kl, vl, None, None)
            out_r = _attend(qr, kr, vr, None, None)
        else:
            out_l = _attend(ql, kr, vr, b_lr, m_lr)
            out_r = _attend(qr, kl, vl, b_rl, m_rl)
        fl = fl + _RESIDUAL_STEP * (out_l[..., :FEATURE_CHANNELS] - fl)
        fr = fr + _RESIDUAL_STEP * (out_r[..., :FEATURE_CHANNELS] - fr)
    return fl, fr


def _disparity_band(q: np.ndarray, k: np.ndarray, max_disp: int, sign: int) -> np.ndarray:
    """``out[r, u, d] = q[r, u] . k[r, u - sign * d]``; zero where out of range.

    One dense product against a zero-padded key row; the band is then a
    strided view with row stride ``n + 1``.
    """
    h, w, c = q.shape
    pad = np.zeros((h, max_disp, c), dtype=k.dtype)
    kp = np.concatenate([pad, k] if sign > 0 else [k, pad], axis=1)
    n = w + max_disp
    dense = np.ascontiguousarray(q @ np.swapaxes(kp, 1, 2))   # (h, w, n)
    item = dense.itemsize
    base = dense[:, :, max_disp:] if sign > 0 else dense
    view = np.lib.stride_tricks.as_strided(
        base, shape=(h, w, max_disp + 1),
        strides=(w * n * item, (n + 1) * item, -sign * item), writeable=False,
    )
    return np.array(view)


def _likelihoods(fl: np.ndarray, fr: np.ndarray, cfg: AttentionConfig, max_disp: int):
    """Final cross similarity as disparity-indexed scores and likelihoods.

    Returns ``(score_l, lik_l, score_r, lik_r)`` each of shape (h, W, D+1);
    ``score`` is the log-likelihood up to a per-pixel constant and is -inf
    for infeasible candidates.
    """
    w = fl.shape[1]
    layer = cfg.n_attn - 1
    ql, kl, _ = _projections(fl, cfg, layer)
    qr, kr, _ = _projections(fr, cfg, layer)
    d = np.arange(max_disp + 1)
    u = np.arange(w)[:, None]
    # left pixel u against right pixel u - d; right pixel u against left u + d
    ok_l = u - d >= 0
    ok_r = u + d < w
    score_l = _disparity_band(ql, kr, max_disp, +1)
    score_r = _disparity_band(qr, kl, max_disp, -1)
    score_l[:, ~ok_l] = -np.inf
    score_r[:, ~ok_r] = -np.inf
    return score_l, _softmax(score_l.copy(), ok_l), score_r, _softmax(score_r.copy(), ok_r)


def _default_max_disp(width: int) -> int:
    return max(1, width // 4)


def match_row(left_row_feats: np.ndarray, right_row_feats: np.ndarray,
              cfg: AttentionConfig, max_disp: int | None = None,
              dtype=np.float64) -> np.ndarray:
    """Disparity likelihood for each left pixel of one row, shape (W, D+1).

    Entry ``[u, d]`` is the probability that left pixel ``u`` matches right
    pixel ``u - d``; infeasible candidates (``u - d < 0``) have probability 0.
    """
    fl = np.asarray(left_row_feats, dtype=dtype)
    fr = np.asarray(right_row_feats, dtype=dtype)
    if fl.shape != fr.shape or fl.ndim != 2:
        raise InvalidInputError("rows must have equal shape (W, C)")
    w = fl.shape[0]
    max_disp = min(_default_max_disp(w) if max_disp is None else max_disp, w - 1)
    fl, fr = _refine_descriptors(fl[None], fr[None], cfg, max_disp)
    _, lik, _, _ = _likelihoods(fl, fr, cfg, max_disp)
    return lik[0]


def likelihood_entropy(lik: np.ndarray) -> np.ndarray:
    p = lik.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def _wta_subpixel(score: np.ndarray) -> np.ndarray:
    """Winner-take-all with a 3-point parabola on the log-likelihood.

    ``np.argmax`` returns the first maximum, so ties go to the smaller
    disparity.
    """
    best = np.argmax(score, axis=-1)
    disp = best.astype(np.float64)
    n = score.shape[-1]
    inner = (best > 0) & (best < n - 1)
    b = np.clip(best, 1, n - 2)[..., None]
    s = np.take_along_axis(score, np.concatenate([b - 1, b, b + 1], axis=-1), axis=-1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        denom = s[..., 0] - 2.0 * s[..., 1] + s[..., 2]
        offset = 0.5 * (s[..., 0] - s[..., 2]) / denom
    ok = inner & np.isfinite(offset) & (denom < 0)
    disp[ok] += np.clip(offset[ok], -0.5, 0.5)
    return disp


@dataclass(frozen=True)
class StereoParams:
    max_disp: int | None = None
    z_min: float = 0.01
    z_max: float = 1.0
    entropy_ratio: float = 0.8
    lr_tolerance: float = 1.0
    chunk_rows: int = 8
    precision: str = "float32"


@dataclass
class _RowResult:
    disp_l: np.ndarray
    disp_r: np.ndarray
    entropy: np.ndarray
    n_cand: np.ndarray = field(repr=False)


def _match_rows(fl: np.ndarray, fr: np.ndarray, cfg: AttentionConfig, max_disp: int) -> _RowResult:
    fl, fr = _refine_descriptors(fl, fr, cfg, max_disp)
    score_l, lik_l, score_r, _ = _likelihoods(fl, fr, cfg, max_disp)
    w = fl.shape[1]
    return _RowResult(
        disp_l=_wta_subpixel(score_l),
        disp_r=_wta_subpixel(score_r),
        entropy=likelihood_entropy(lik_l),
        n_cand=np.minimum(np.arange(w), max_disp) + 1,
    )


def estimate_depth(left: np.ndarray, right: np.ndarray, K: CameraIntrinsics,
                   cfg: AttentionConfig, params: StereoParams = StereoParams(),
                   timestamp: int = 0) -> DepthMap:
    """Depth for the left view from a rectified stereo pair.

    Pixels failing the left-right consistency check are OCCLUDED, pixels
    whose matching likelihood is too flat are LOW_CONFIDENCE, and pixels with
    non-positive disparity or depth outside ``(z_min, z_max)`` are INVALID.
    """
    gl, gr = to_gray(left), to_gray(right)
    if gl.shape != gr.shape or gl.shape != K.shape:
        raise InvalidInputError(
            f"stereo pair {gl.shape}/{gr.shape} does not match calibration {K.shape}"
        )
    h, w = gl.shape
    max_disp = min(params.max_disp or _default_max_disp(w), w - 1)
    dtype = np.dtype(params.precision)
    feat_l = extract_features(gl).astype(dtype)
    feat_r = extract_features(gr).astype(dtype)

    disp_l = np.empty((h, w))
    disp_r = np.empty((h, w))
    entropy = np.empty((h, w))
    step = max(1, params.chunk_rows)
    for r0 in range(0, h, step):
        res = _match_rows(feat_l[r0:r0 + step], feat_r[r0:r0 + step], cfg, max_disp)
        disp_l[r0:r0 + step] = res.disp_l
        disp_r[r0:r0 + step] = res.disp_r
        entropy[r0:r0 + step] = res.entropy
    n_cand = np.minimum(np.arange(w), max_disp) + 1

    status = np.full((h, w), Status.VALID, dtype=np.uint8)
    with np.errstate(divide="ignore"):
        flat = entropy > params.entropy_ratio * np.log(n_cand)[None, :]
    status[flat & (n_cand[None, :] > 1)] = Status.LOW_CONFIDENCE

    u = np.arange(w)[None, :]
    target = np.clip(np.rint(u - disp_l).astype(int), 0, w - 1)
    back = np.take_along_axis(disp_r, target, axis=1)
    inconsistent = np.abs(disp_l - back) > params.lr_tolerance
    # left of where right column 0 lands there is no candidate at all; the
    # in-band winner there is spurious and can pass the LR check. Columns
    # inside the 7x7 descriptor support of the border are unreliable, so
    # the landing point is read a few columns in.
    edge = np.median(disp_r[:, _EDGE_COLS], axis=1, keepdims=True) if w > _EDGE_COLS.stop else 0.0
    off_edge = u + params.lr_tolerance < edge
    status[inconsistent | off_edge] = Status.OCCLUDED

    min_disp = K.fx * K.baseline / params.z_max
    depth = disparity_to_depth(disp_l, K, min_disparity=0.0)
    with np.errstate(invalid="ignore"):
        out_of_range = ~np.isfinite(depth) | (depth <= params.z_min) | (depth >= params.z_max) | (disp_l <= min_disp)
    status[out_of_range & (status != Status.OCCLUDED)] = Status.INVALID
    depth = np.where(status == Status.VALID, depth, np.nan)
    return DepthMap(depth, status, timestamp, disparity=disp_l)


def cost_model(height: int, width: int, cfg: AttentionConfig) -> tuple[int, int]:
    """(parameter count, FLOPs) of the attention stack at unit constants."""
    if height < 1 or width < 1:
        raise InvalidInputError("image size must be >= 1")
    params = 3 * cfg.c_attn ** 2 * cfg.n_attn
    flops = height * width ** 2 * cfg.n_attn
    return params, flops


def lightweight_config(base: AttentionConfig, seed: int | None = None) -> AttentionConfig:
    """Quarter the number of attentions and double the embedding size.

    ``(2C)^2 * (N/4) == C^2 * N`` keeps the parameter count unchanged.
    """
    if base.n_attn % 4:
        raise InvalidInputError(f"n_attn={base.n_attn} is not divisible by 4")
    return AttentionConfig.create(
        2 * base.c_attn, base.n_attn // 4,
        seed=base.seed + 1 if seed is None else seed,
        sharpness=base.sharpness or DEFAULT_SHARPNESS,
    )


def block_match_oracle(left: np.ndarray, right: np.ndarray, max_disp: int,
                       window: int = 9) -> np.ndarray:
    """Zero-mean NCC block matching, winner-take-all (integer disparities)."""
    gl, gr = to_gray(left), to_gray(right)
    if gl.shape != gr.shape:
        raise InvalidInputError("images must have the same size")
    h, w = gl.shape

    def box(x):
        return ndimage.uniform_filter(x, size=window, mode="reflect")

    mu_l = box(gl)
    var_l = box(gl * gl) - mu_l ** 2
    best = np.full((h, w), -np.inf)
    disp = np.zeros((h, w), dtype=np.int64)
    for d in range(max_disp + 1):
        shifted = np.empty_like(gr)
        shifted[:, d:] = gr[:, :w - d]
        shifted[:, :d] = gr[:, :1]
        mu_r = box(shifted)
        var_r = box(shifted * shifted) - mu_r ** 2
        cov = box(gl * shifted) - mu_l * mu_r
        with np.errstate(invalid="ignore", divide="ignore"):
            zncc = cov / np.sqrt(np.maximum(var_l * var_r, 1e-12))
        zncc[:, :d] = -np.inf
        better = zncc > best
        best[better] = zncc[better]
        disp[better] = d
    return disp
