"""Binary image formats (PPM P6, PGM P5, PFM) and ASCII PLY export."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class IngestionError(IOError):
    """A file is missing, unreadable or inconsistent with the calibration."""


_HEADER_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc.strerror}") from None
    pos = 0
    tokens = []
    for _ in range(4):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise IngestionError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise IngestionError(f"{path}: expected {magic.decode()} file, got {tokens[0][:2]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise IngestionError(f"{path}: malformed header") from None
    if maxval != 255:
        raise IngestionError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    n = w * h * channels
    if len(data) - pos < n:
        raise IngestionError(f"{path}: raster is truncated")
    img = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return img.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def _as_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = _as_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = _as_uint8(img)
    if img.ndim != 2:
        raise ValueError("PGM needs an (H, W) image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Single-channel PFM (``Pf``); rows are stored bottom-up."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.readline().strip()
            dims = fh.readline().split()
            scale = float(fh.readline().strip())
            raster = fh.read()
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from None
    if magic != b"Pf" or len(dims) != 2:
        raise IngestionError(f"{path}: not a single-channel PFM file")
    w, h = int(dims[0]), int(dims[1])
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    if len(raster) < w * h * 4:
        raise IngestionError(f"{path}: raster is truncated")
    img = np.frombuffer(raster, dtype=dtype, count=w * h).reshape(h, w)
    return np.flipud(img).astype(np.float64)


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    """Little-endian single-channel PFM with scale -1.0."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("PFM writer needs an (H, W) array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def write_ply(path: str | Path, columns: dict[str, np.ndarray], formats: dict[str, str]) -> None:
    """ASCII PLY vertex list; ``formats`` maps each column to ``(ply type, printf spec)``."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if names else 0
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    specs = []
    for name in names:
        ply_type, spec = formats[name]
        lines.append(f"property {ply_type} {name}")
        specs.append(spec)
    lines.append("end_header")
    row_fmt = " ".join(specs)
    cols = [np.asarray(columns[k]).tolist() for k in names]
    body = [row_fmt % row for row in zip(*cols)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines + body) + "\n")


def read_ply(path: str | Path) -> dict[str, np.ndarray]:
    """Read an ASCII PLY vertex list written by :func:`write_ply`."""
    with open(path) as fh:
        header = []
        for line in fh:
            line = line.strip()
            header.append(line)
            if line == "end_header":
                break
        names = [h.split()[2] for h in header if h.startswith("property")]
        counts = [int(h.split()[2]) for h in header if h.startswith("element vertex")]
        rows = np.loadtxt(fh, ndmin=2) if counts and counts[0] else np.zeros((0, len(names)))
    return {name: rows[:, i] for i, name in enumerate(names)}
