"""Roto-translation invariant pooling heads over real feature maps ``(B, D, H, W)``."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import DegenerateInputError, ParameterError, ShapeError

__all__ = [
    "gap_pool",
    "ZernikeBasis",
    "zernike_basis",
    "zernike_radial",
    "zernike_pool",
    "CentroidFallbackWarning",
    "MsaPoolConfig",
    "msa_pool",
    "distance_buckets",
]


def _support(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.sum() <= 0:
        raise DegenerateInputError("mask has empty support")
    return m


def gap_pool(channels, mask) -> Tensor:
    """Mean of each channel over the mask support; returns ``(B, D)``."""
    x = as_tensor(channels)
    m = _support(mask)
    if x.shape[-2:] != m.shape:
        raise ShapeError(f"mask {m.shape} does not match channels {x.shape[-2:]}")
    w = (m / m.sum()).astype(x.dtype)
    return (x * w).sum(axis=(-2, -1))


# -- Zernike moments -----------------------------------------------------------


def zernike_radial(n: int, l: int, rho: np.ndarray) -> np.ndarray:
    """Zernike radial polynomial ``R_{n,l}``; zero when ``n - |l|`` is odd."""
    l = abs(l)
    if l > n or (n - l) % 2:
        return np.zeros_like(rho, dtype=np.float64)
    out = np.zeros_like(rho, dtype=np.float64)
    for s in range((n - l) // 2 + 1):
        c = ((-1) ** s * math.factorial(n - s)
             / (math.factorial(s) * math.factorial((n + l) // 2 - s) * math.factorial((n - l) // 2 - s)))
        out += c * rho ** (n - 2 * s)
    return out


@dataclass(frozen=True)
class ZernikeBasis:
    """Zernike polynomials sampled over the disk inscribed in a square grid.

    ``pairs`` lists every ``(n, l)`` with ``|l| <= n <= max_degree`` and
    ``n - |l|`` even; ``basis[i]`` samples ``V_{n,l} = R_{n,l}(rho) exp(i l phi)``
    at pixel centers (zero outside the unit disk), made exactly orthogonal
    over the pixels among ``l >= 0`` and conjugated for ``l < 0``.
    ``projection`` holds the ``l >= 0`` rows scaled so that ``projection @ f``
    approximates the orthonormal moments ``(n + 1) / pi * integral conj(V) f``.
    """

    grid_size: int
    max_degree: int
    pairs: tuple[tuple[int, int], ...]
    basis: np.ndarray  # (len(pairs), G, G) complex
    projection: np.ndarray  # (n_moments, G * G) complex
    moment_pairs: tuple[tuple[int, int], ...]


def zernike_basis(grid_size: int, max_degree: int) -> ZernikeBasis:
    if grid_size < 8:
        raise ParameterError(f"grid_size must be >= 8, got {grid_size}")
    if max_degree < 0:
        raise ParameterError(f"max_degree must be >= 0, got {max_degree}")
    return _zernike_basis(int(grid_size), int(max_degree))


@lru_cache(maxsize=16)
def _zernike_basis(G: int, N: int) -> ZernikeBasis:
    c = (G - 1) / 2
    radius = G / 2
    x = (np.arange(G)[None, :] - c) / radius
    y = (c - np.arange(G)[:, None]) / radius
    x, y = np.broadcast_arrays(x, y)
    rho = np.hypot(x, y)
    phi = np.arctan2(y, x)
    inside = rho <= 1.0
    positive = [(n, l) for n in range(N + 1) for l in range(n + 1) if (n - l) % 2 == 0]
    sampled = {
        (n, l): np.where(inside, zernike_radial(n, l, rho) * np.exp(1j * l * phi), 0).reshape(-1)
        for n, l in positive
    }
    # Gram-Schmidt in (n, l) order under the pixel inner product, keeping each
    # function's sampled norm.  Only l values equal mod 4 overlap on a square
    # grid, so quarter-turn covariance stays exact.
    ortho: dict[tuple[int, int], np.ndarray] = {}
    for key in positive:
        v = sampled[key].copy()
        for prev in ortho.values():
            v -= (np.vdot(prev, v) / np.vdot(prev, prev)) * prev
        ortho[key] = v * (np.linalg.norm(sampled[key]) / np.linalg.norm(v))
    pairs = tuple((n, l) for n in range(N + 1) for l in range(-n, n + 1) if (n - abs(l)) % 2 == 0)
    basis = np.stack([ortho[(n, l)] if l >= 0 else np.conj(ortho[(n, -l)]) for n, l in pairs])
    basis = basis.reshape(len(pairs), G, G)
    scale = np.array([(n + 1) / (np.pi * radius**2) for n, _ in positive])
    projection = np.conj(np.stack([ortho[p] for p in positive])) * scale[:, None]
    for a in (basis, projection):
        a.setflags(write=False)
    return ZernikeBasis(G, N, pairs, basis, projection, tuple(positive))


class CentroidFallbackWarning(UserWarning):
    """A channel had zero mass; its moments were taken about the grid center."""


def _shift_gather(x: Tensor, shift_r: np.ndarray, shift_c: np.ndarray) -> Tensor:
    """``out[i, q] = x[i, q + shift_i]`` with zero fill; ``x`` is ``(N, H, W)``."""
    Nc, H, W = x.shape
    rows = np.arange(H)[None, :] + shift_r[:, None]
    cols = np.arange(W)[None, :] + shift_c[:, None]
    valid = (((rows >= 0) & (rows < H))[:, :, None] & ((cols >= 0) & (cols < W))[:, None, :])
    idx = (np.arange(Nc)[:, None, None],
           np.clip(rows, 0, H - 1)[:, :, None],
           np.clip(cols, 0, W - 1)[:, None, :])
    return x[idx] * valid.astype(x.dtype)


def zernike_pool(channels, basis: ZernikeBasis) -> Tensor:
    """Magnitudes of Zernike moments about each channel's intensity centroid.

    The basis is re-centered on the centroid by bilinear interpolation, which
    is applied as four integer shifts of the summation index weighted by the
    fractional offset.  Returns ``(B, D * n_moments)`` with channels major.
    """
    x = as_tensor(channels)
    B, D, H, W = x.shape
    if (H, W) != (basis.grid_size, basis.grid_size):
        raise ShapeError(f"basis grid {basis.grid_size} does not match channels {H}x{W}")
    flat = x.reshape(B * D, H, W)
    rdt = x.dtype
    rows = np.arange(H, dtype=rdt)[:, None]
    cols = np.arange(W, dtype=rdt)[None, :]
    mass = flat.sum(axis=(1, 2))
    empty = np.abs(mass.data) <= np.finfo(rdt).tiny
    if empty.any():
        warnings.warn(f"{int(empty.sum())} channel(s) with zero mass; using the grid center",
                      CentroidFallbackWarning, stacklevel=2)
    safe_mass = mass + empty.astype(rdt)
    center_r, center_c = (H - 1) / 2, (W - 1) / 2
    # offset of the centroid from the grid center, zero for empty channels
    dr = ((flat * rows).sum(axis=(1, 2)) / safe_mass - center_r) * (~empty).astype(rdt)
    dc = ((flat * cols).sum(axis=(1, 2)) / safe_mass - center_c) * (~empty).astype(rdt)
    fr = np.floor(dr.data).astype(np.int64)
    fc = np.floor(dc.data).astype(np.int64)
    tr = dr - fr.astype(rdt)
    tc = dc - fc.astype(rdt)
    proj = basis.projection.astype(np.result_type(rdt, np.complex64))
    Z = None
    for er, wr in ((0, 1.0 - tr), (1, tr)):
        for ec, wc in ((0, 1.0 - tc), (1, tc)):
            shifted = _shift_gather(flat, fr + er, fc + ec).reshape(B * D, H * W)
            moments = ad.einsum("nq,kq->nk", shifted, proj)
            term = moments * (wr * wc).reshape(B * D, 1)
            Z = term if Z is None else Z + term
    return ad.abs_(Z).reshape(B, D * proj.shape[0])


# -- invariant multi-head self-attention ------------------------------------------


@dataclass(frozen=True)
class MsaPoolConfig:
    heads: int = 2
    model_width: int = 8
    key_width: int = 8
    buckets: int = 16

    def __post_init__(self):
        if min(self.heads, self.model_width, self.key_width, self.buckets) < 1:
            raise ParameterError("MSA sizes must all be >= 1")

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hk = self.model_width, self.heads * self.key_width
        return {"wq": (d, hk), "wk": (d, hk), "wv": (d, hk), "wo": (hk, d),
                "bias": (self.heads, self.buckets)}


def distance_buckets(mask, buckets: int) -> tuple[np.ndarray, np.ndarray]:
    """Support pixel coordinates and the bucket of every pairwise distance.

    Buckets split ``[0, diagonal]`` into ``buckets`` equal bins, where
    ``diagonal`` is the distance between opposite grid corners.
    """
    m = _support(mask)
    H, W = m.shape
    coords = np.argwhere(m > 0)
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff.astype(np.float64) ** 2).sum(-1))
    diag = math.hypot(H - 1, W - 1) or 1.0
    idx = np.minimum((dist / diag * buckets).astype(np.int64), buckets - 1)
    return coords, idx


def msa_pool(channels, mask, weights: dict, config: MsaPoolConfig) -> Tensor:
    """Self-attention over 1x1 tokens with distance-only relative bias, mean readout.

    Tokens are the ``d``-vectors at the mask-support pixels; no absolute
    position enters.  The attention logit between tokens ``i`` and ``j`` of head
    ``h`` is ``q_i . k_j / sqrt(key_width) + bias[h, bucket(|p_i - p_j|)]``.
    Returns ``(B, d)``.
    """
    x = as_tensor(channels)
    B, D, H, W = x.shape
    if D != config.model_width:
        raise ShapeError(f"expected {config.model_width} channels, got {D}")
    coords, bucket = distance_buckets(mask, config.buckets)
    w = {k: as_tensor(v) for k, v in weights.items()}
    for name, shape in config.weight_shapes().items():
        if w[name].shape != shape:
            raise ShapeError(f"msa weight {name} has shape {w[name].shape}, expected {shape}")
    T = len(coords)
    h, dk = config.heads, config.key_width
    tokens = x[:, :, coords[:, 0], coords[:, 1]].transpose(0, 2, 1)  # (B, T, D)

    def heads(t):
        return t.reshape(B, T, h, dk).transpose(0, 2, 1, 3)  # (B, h, T, dk)

    q = heads(tokens @ w["wq"])
    k = heads(tokens @ w["wk"])
    v = heads(tokens @ w["wv"])
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk)) + w["bias"][:, bucket]
    attn = ad.softmax(logits, axis=-1)
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, h * dk)
    return (mixed @ w["wo"]).mean(axis=1)
