"""Dense 2D field primitives.

A grid is a 2D ``numpy`` array indexed ``[y, x]`` (height first, row-major).
Stacks of grids are 3D arrays ``[c, y, x]``. Functions here never mutate
their inputs.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatchError,
    ParameterError,
    StorageError,
    TensorFormatError,
    TruncatedTensorError,
)

MAGIC = b"AEHM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class Peak:
    x: int
    y: int
    score: float


def as_grid(values, name: str = "grid") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ParameterError(f"{name} must be at least 1x1, got shape {arr.shape}")
    return arr


def as_stack(grids, name: str = "grids") -> np.ndarray:
    """Coerce a sequence of equally sized grids into a ``(c, h, w)`` array."""
    if isinstance(grids, np.ndarray):
        arr = np.asarray(grids, dtype=np.float64)
    else:
        grids = list(grids)
        shapes = {np.shape(g) for g in grids}
        if len(shapes) > 1:
            raise DimensionMismatchError(f"{name} have differing shapes: {sorted(shapes)}")
        arr = np.asarray(grids, dtype=np.float64)
        if not grids:
            arr = arr.reshape(0, 1, 1)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ParameterError(f"{name} must be a stack of 2D grids, got shape {arr.shape}")
    return arr


def render_gaussian(grid, center: tuple[float, float], sigma_px: float) -> np.ndarray:
    """Max-compose an unnormalized Gaussian bump centred at ``(x, y)`` into ``grid``."""
    if not sigma_px > 0:
        raise ParameterError(f"sigma_px must be positive, got {sigma_px}")
    base = as_grid(grid)
    h, w = base.shape
    cx, cy = float(center[0]), float(center[1])
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma_px**2))
    return np.maximum(base, bump)


def _check_window(window: int) -> int:
    if int(window) != window or window < 3 or window % 2 == 0:
        raise ParameterError(f"NMS window must be an odd integer >= 3, got {window}")
    return int(window)


def local_maxima(stack: np.ndarray, window: int) -> np.ndarray:
    """Boolean mask of strict local maxima over the last two axes.

    A pixel survives when no neighbour in the window is larger and no
    equal-valued neighbour precedes it in (y, x) order.
    """
    window = _check_window(window)
    r = window // 2
    arr = np.asarray(stack, dtype=np.float64)
    h, w = arr.shape[-2:]
    pad = [(0, 0)] * (arr.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(arr, pad, constant_values=-np.inf)
    keep = np.ones(arr.shape, dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[..., r + dy : r + dy + h, r + dx : r + dx + w]
            if (dy, dx) < (0, 0):
                keep &= arr > nb
            else:
                keep &= arr >= nb
    return keep


def peaks_from_mask(grid: np.ndarray, keep: np.ndarray, threshold: float) -> list[Peak]:
    ys, xs = np.nonzero(keep & (grid >= threshold))
    scores = grid[ys, xs]
    # descending score, then (y, x) for determinism
    order = np.lexsort((xs, ys, -scores))
    return [Peak(int(xs[i]), int(ys[i]), float(scores[i])) for i in order]


def nms_peaks(grid, window: int, threshold: float) -> list[Peak]:
    """Local maxima at or above ``threshold``, sorted by descending score."""
    arr = as_grid(grid)
    return peaks_from_mask(arr, local_maxima(arr, window), threshold)


def _axis_weights(old: int, new: int):
    if new == 1 or old == 1:
        pos = np.zeros(new)
    else:
        pos = np.arange(new) * ((old - 1) / (new - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, old - 1)
    hi = np.minimum(lo + 1, old - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(grid, new_w: int, new_h: int) -> np.ndarray:
    """Corner-aligned bilinear resize. Works on a grid or on a ``(..., h, w)`` stack."""
    if new_w < 1 or new_h < 1:
        raise ParameterError(f"target size must be >= 1x1, got {new_w}x{new_h}")
    arr = np.asarray(grid, dtype=np.float64)
    h, w = arr.shape[-2:]
    if (h, w) == (new_h, new_w):
        return arr.copy()
    y0, y1, fy = _axis_weights(h, new_h)
    x0, x1, fx = _axis_weights(w, new_w)
    fy = fy[:, None]
    top = arr[..., y0, :]
    bottom = arr[..., y1, :]
    rows = top * (1.0 - fy) + bottom * fy
    return rows[..., x0] * (1.0 - fx) + rows[..., x1] * fx


def write_tensor(path, grids) -> None:
    """Write grids of one shape to an AEHM v1 file (values stored as float32)."""
    if isinstance(grids, np.ndarray) and grids.ndim == 2:
        grids = grids[None]
    if len(grids) == 0:
        raise ParameterError("cannot write an empty grid list")
    stack = as_stack(grids)
    c, h, w = stack.shape
    with np.errstate(over="ignore"):
        single = np.ascontiguousarray(stack, dtype="<f4")
    if np.any(np.isinf(single) & np.isfinite(stack)):
        raise ParameterError("grid values exceed the float32 range of the tensor format")
    payload = single.tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, c, h, w))
            fh.write(payload)
    except OSError as exc:
        raise StorageError(f"cannot write tensor file {os.fspath(path)!r}: {exc}") from exc


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise TensorFormatError("bad magic bytes")
        raise TruncatedTensorError(f"header needs {_HEADER.size} bytes, file has {len(data)}")
    magic, version, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported AEHM version {version}")
    if h < 1 or w < 1:
        raise TensorFormatError(f"invalid grid size {w}x{h}")
    expected = 4 * c * h * w
    body = data[_HEADER.size :]
    if len(body) < expected:
        raise TruncatedTensorError(
            f"header declares {c} grids of {w}x{h} ({expected} bytes), payload has {len(body)}"
        )
    if len(body) > expected:
        raise TensorFormatError(f"{len(body) - expected} trailing bytes after payload")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(c, h, w)


def read_tensor(path) -> np.ndarray:
    """Read an AEHM v1 file into a ``(c, h, w)`` float32 array."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read tensor file {os.fspath(path)!r}: {exc}") from exc
    return decode_tensor(data)

