"""Tool masks: pluggable providers, morphological refinement, depth masking."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .geometry import InvalidInputError
from .io import IngestionError, read_pgm
from .stereo import DepthMap, Status

MASK_PATTERN = "mask_{:06d}.pgm"
# chroma key: tool pixels are strongly green, tissue is red dominant
CHROMA_MARGIN = 40

_REF_WIDTH = 640
DEFAULT_CLOSE_RADIUS = 3
DEFAULT_DILATE_RADIUS = 2


@dataclass(frozen=True, eq=False)
class ToolMask:
    mask: np.ndarray
    timestamp: int = 0

    def __post_init__(self) -> None:
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise InvalidInputError("tool mask must be two-dimensional")
        object.__setattr__(self, "mask", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @property
    def count(self) -> int:
        return int(self.mask.sum())


class MaskProvider(Protocol):
    name: str

    def __call__(self, frame: np.ndarray, timestamp: int) -> np.ndarray: ...


class NoMask:
    name = "none"

    def __call__(self, frame: np.ndarray, timestamp: int) -> np.ndarray:
        return np.zeros(frame.shape[:2], dtype=bool)


class ChromaMask:
    """Thresholds green dominance, matching the simulator's tool colour."""

    name = "chroma"

    def __init__(self, margin: int = CHROMA_MARGIN):
        self.margin = margin

    def __call__(self, frame: np.ndarray, timestamp: int) -> np.ndarray:
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise InvalidInputError("chroma provider needs a colour frame")
        f = frame.astype(np.int16)
        return f[..., 1] - np.maximum(f[..., 0], f[..., 2]) > self.margin


class FileMask:
    """Reads ``mask_%06d.pgm`` (255 = tool) from a directory."""

    name = "file"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def __call__(self, frame: np.ndarray, timestamp: int) -> np.ndarray:
        path = self.directory / MASK_PATTERN.format(timestamp)
        if not path.exists():
            raise IngestionError(f"frame {timestamp}: mask file {path} is missing")
        m = read_pgm(path)
        if m.shape != frame.shape[:2]:
            raise IngestionError(f"frame {timestamp}: mask {path} has size {m.shape}, frame {frame.shape[:2]}")
        return m > 127


def make_provider(name: str, directory: str | Path | None = None) -> MaskProvider:
    if name == "none":
        return NoMask()
    if name == "chroma":
        return ChromaMask()
    if name == "file":
        if directory is None:
            raise InvalidInputError("file mask provider needs a directory")
        return FileMask(directory)
    raise InvalidInputError(f"unknown mask provider {name!r}")


def segment(frame: np.ndarray, provider: MaskProvider, timestamp: int = 0) -> ToolMask:
    frame = np.asarray(frame)
    m = provider(frame, timestamp)
    if m.shape != frame.shape[:2]:
        raise InvalidInputError(f"provider returned {m.shape} for a {frame.shape[:2]} frame")
    return ToolMask(m, timestamp)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def default_radii(width: int) -> tuple[int, int]:
    """Close/dilate radii scaled linearly from (3, 2) at 640 px width."""
    s = width / _REF_WIDTH
    return max(0, round(DEFAULT_CLOSE_RADIUS * s)), max(0, round(DEFAULT_DILATE_RADIUS * s))


def morph_refine(m: ToolMask, close_radius: int, dilate_radius: int) -> ToolMask:
    """Closing with a disk, then dilation with a disk.

    Closing runs on an edge-replicated copy so tool regions touching the
    image border are not eroded by the implicit outside.
    """
    if close_radius < 0 or dilate_radius < 0:
        raise InvalidInputError("radii must be >= 0")
    out = m.mask
    if close_radius > 0:
        r = int(close_radius)
        padded = np.pad(out, r, mode="edge")
        closed = ndimage.binary_closing(padded, structure=disk(r), border_value=0)
        out = closed[r:-r, r:-r] | out
    if dilate_radius > 0:
        out = ndimage.binary_dilation(out, structure=disk(int(dilate_radius)))
    return ToolMask(out, m.timestamp)


def apply_mask(d: DepthMap, m: ToolMask) -> DepthMap:
    if d.shape != m.shape:
        raise InvalidInputError(f"depth {d.shape} and mask {m.shape} differ in size")
    if not m.mask.any():
        return d
    status = d.status.copy()
    status[m.mask] = Status.INVALID
    depth = d.depth.copy()
    depth[m.mask] = np.nan
    return DepthMap(depth, status, d.timestamp, d.disparity)
