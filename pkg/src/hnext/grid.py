"""Complex-valued 2-D grids and the geometric primitives built on them.

All functions work on arrays whose last two axes are (height, width); any
leading axes are treated as a batch.  Rotation is counter-clockwise in a
y-up frame, so ``rotate_resample(g, pi / 2)`` equals ``np.rot90(g, axes=(-2, -1))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "ComplexGrid",
    "GridGeometry",
    "rotate_resample",
    "make_circular_mask",
    "apply_mask",
    "upscale_bilinear",
    "upscale_matrix",
]


@dataclass(frozen=True)
class ComplexGrid:
    """An immutable ``height x width`` grid of finite complex values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128)
        if v.ndim != 2:
            raise ShapeError(f"ComplexGrid needs a 2-D array, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError("ComplexGrid must be at least 1x1")
        if not np.all(np.isfinite(v)):
            raise ParameterError("ComplexGrid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry.of(self.height, self.width)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class GridGeometry:
    center_row: float
    center_col: float
    mask_radius: float

    @classmethod
    def of(cls, height: int, width: int) -> GridGeometry:
        return cls((height - 1) / 2, (width - 1) / 2, min(height, width) / 2)


def _snapped_cos_sin(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # exact values at multiples of pi/2 keep quarter turns a pure permutation
    quarter = np.round(theta / (np.pi / 2))
    exact = np.abs(theta - quarter * (np.pi / 2)) < 1e-12
    k = np.mod(quarter, 4).astype(int)
    c = np.where(exact, np.array([1.0, 0.0, -1.0, 0.0])[k], np.cos(theta))
    s = np.where(exact, np.array([0.0, 1.0, 0.0, -1.0])[k], np.sin(theta))
    return c, s


def _bilinear_sample(g: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Sample ``g`` at fractional (row, col) positions, zero outside the frame.

    ``src_r``/``src_c`` have shape ``(T, H, W)`` with ``T`` either 1 or the
    flattened batch size of ``g``.
    """
    H, W = g.shape[-2:]
    lead = g.shape[:-2]
    flat = g.reshape(-1, H * W)
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out = np.zeros((flat.shape[0], H * W), dtype=np.result_type(g.dtype, np.float64))
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            inside = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            idx = (np.clip(rr, 0, H - 1) * W + np.clip(cc, 0, W - 1)).reshape(len(src_r), -1)
            weight = (wr * wc * inside).reshape(len(src_r), -1)
            if idx.shape[0] == 1:
                vals = flat[:, idx[0]]
            else:
                vals = np.take_along_axis(flat, idx, axis=1)
            out += weight * vals
    return out.reshape(lead + (H, W))


def rotate_resample(grid, theta) -> np.ndarray:
    """Rotate grids by ``theta`` radians about their geometric center.

    Each output pixel is the bilinear interpolation of the input at the
    inverse-rotated coordinate; samples outside the frame are zero.
    ``theta`` may be a scalar or an array matching the leading (batch) axes.
    """
    g = np.asarray(grid)
    if g.ndim < 2:
        raise ShapeError(f"expected (..., H, W), got shape {g.shape}")
    H, W = g.shape[-2:]
    lead = g.shape[:-2]
    th = np.asarray(theta, dtype=np.float64)
    if th.ndim:
        th = np.broadcast_to(th, lead).reshape(-1)
    else:
        th = th.reshape(1)
    cos, sin = _snapped_cos_sin(th)
    geo = GridGeometry.of(H, W)
    x = (np.arange(W) - geo.center_col)[None, None, :]
    y = (geo.center_row - np.arange(H))[None, :, None]
    cos = cos[:, None, None]
    sin = sin[:, None, None]
    xs = cos * x + sin * y
    ys = -sin * x + cos * y
    return _bilinear_sample(g, geo.center_row - ys, geo.center_col + xs)


def make_circular_mask(height: int, width: int) -> np.ndarray:
    """Binary disk of radius ``min(height, width) / 2`` about the grid center."""
    if height < 1 or width < 1:
        raise ParameterError("mask dimensions must be >= 1")
    return _circular_mask(int(height), int(width)).copy()


@lru_cache(maxsize=64)
def _circular_mask(height: int, width: int) -> np.ndarray:
    geo = GridGeometry.of(height, width)
    dy = np.arange(height)[:, None] - geo.center_row
    dx = np.arange(width)[None, :] - geo.center_col
    mask = (dy**2 + dx**2 <= geo.mask_radius**2).astype(np.float64)
    mask.setflags(write=False)
    return mask


def apply_mask(grid, mask) -> np.ndarray:
    g = np.asarray(grid)
    m = np.asarray(mask)
    if g.shape[-2:] != m.shape:
        raise ShapeError(f"mask shape {m.shape} does not match grid {g.shape[-2:]}")
    return g * m


def upscale_matrix(n: int, factor: int) -> np.ndarray:
    """Interpolation matrix of shape ``(factor * n, n)`` for 1-D bilinear up-scaling.

    Output sample ``o`` reads the input at ``(o + 0.5) / factor - 0.5`` clamped to
    the frame.  The matrix is symmetrized under reversal of both axes so that
    flips and quarter turns commute with up-scaling bit for bit.
    """
    if factor < 1:
        raise ParameterError(f"upscale factor must be >= 1, got {factor}")
    return _upscale_matrix(int(n), int(factor)).copy()


@lru_cache(maxsize=64)
def _upscale_matrix(n: int, factor: int) -> np.ndarray:
    out = np.arange(n * factor)
    src = np.clip((out + 0.5) / factor - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(int)
    frac = src - i0
    A = np.zeros((n * factor, n))
    np.add.at(A, (out, i0), 1.0 - frac)
    np.add.at(A, (out, np.minimum(i0 + 1, n - 1)), frac)
    A = (A + A[::-1, ::-1]) / 2
    A.setflags(write=False)
    return A


def upscale_bilinear(grid, factor: int) -> np.ndarray:
    """Bilinear up-scaling by an integer factor; ``factor=1`` is the identity."""
    g = np.asarray(grid)
    if factor < 1:
        raise ParameterError(f"upscale factor must be >= 1, got {factor}")
    if factor == 1:
        return g.copy()
    H, W = g.shape[-2:]
    Ah = _upscale_matrix(H, factor)
    Aw = _upscale_matrix(W, factor)
    return np.einsum("ih,...hw,jw->...ij", Ah, g, Aw)
