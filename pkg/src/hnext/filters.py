"""Circular-harmonic filters ``R(r) * exp(i (m Theta + beta))`` sampled on a pixel grid.

The radial profile ``R`` is given by ``n`` ring values and linearly
interpolated between rings.  Two ring layouts are supported:

* ``FilterMode.HNET``: rings one pixel apart, radii ``0, 1, ..., n - 1``;
* ``FilterMode.HNEXT``: rings spread evenly from the center to the filter
  edge, radii ``linspace(0, (k - 1) / 2, n)``.

Polar angles are measured counter-clockwise in a y-up frame (rows grow
downwards), matching :func:`hnext.grid.rotate_resample`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError

__all__ = [
    "FilterMode",
    "HarmonicFilterSpec",
    "RingInterpolation",
    "ring_interpolation",
    "synthesize_filter",
    "harmonic_basis",
]


class FilterMode(str, enum.Enum):
    HNET = "hnet"
    HNEXT = "hnext"


@dataclass(frozen=True)
class RingInterpolation:
    ring_radii: np.ndarray  # (n,)
    weights: np.ndarray  # (k * k, n), row-major over the filter pixels


def _check_size(k: int, n: int) -> None:
    if n < 1:
        raise ParameterError(f"ring count must be >= 1, got {n}")
    if k < 3 or k % 2 == 0:
        raise ParameterError(f"filter size must be odd and >= 3, got {k}")


def _polar_grid(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Radius and unit phasor ``(x + iy) / r`` for every pixel of a k x k filter."""
    c = (k - 1) / 2
    x = np.arange(k)[None, :] - c
    y = c - np.arange(k)[:, None]
    x, y = np.broadcast_arrays(x, y)
    r = np.hypot(x, y)
    unit = np.ones((k, k), dtype=np.complex128)
    nz = r > 0
    unit[nz] = (x[nz] + 1j * y[nz]) / r[nz]
    return r, unit


def _integer_power(z: np.ndarray, m: int) -> np.ndarray:
    # repeated products keep z -> i*z an exact symmetry of the result
    base = z if m >= 0 else np.conj(z)
    out = np.ones_like(z)
    for _ in range(abs(m)):
        out = out * base
    return out


def ring_interpolation(k: int, n: int, mode: FilterMode | str) -> RingInterpolation:
    """Linear weights mapping ``n`` ring values onto the ``k x k`` filter pixels."""
    _check_size(k, n)
    return _ring_interpolation(int(k), int(n), FilterMode(mode))


@lru_cache(maxsize=128)
def _ring_interpolation(k: int, n: int, mode: FilterMode) -> RingInterpolation:
    if mode is FilterMode.HNET:
        radii = np.arange(n, dtype=np.float64)
    else:
        radii = np.linspace(0.0, (k - 1) / 2, n)
    r, _ = _polar_grid(k)
    r = r.reshape(-1)
    weights = np.empty((k * k, n))
    for j in range(n):
        onehot = np.zeros(n)
        onehot[j] = 1.0
        weights[:, j] = np.interp(r, radii, onehot, right=0.0)
    radii.setflags(write=False)
    weights.setflags(write=False)
    return RingInterpolation(radii, weights)


@dataclass(frozen=True)
class HarmonicFilterSpec:
    m1: int
    radial_weights: tuple[float, ...]
    beta: float = 0.0
    k: int = 15
    mode: FilterMode = FilterMode.HNEXT

    def __post_init__(self):
        weights = tuple(float(w) for w in np.atleast_1d(self.radial_weights))
        _check_size(self.k, len(weights))
        object.__setattr__(self, "radial_weights", weights)
        object.__setattr__(self, "beta", float(np.mod(self.beta, 2 * np.pi)))
        object.__setattr__(self, "mode", FilterMode(self.mode))
        object.__setattr__(self, "m1", int(self.m1))

    @property
    def n(self) -> int:
        return len(self.radial_weights)


def harmonic_basis(k: int, n: int, mode: FilterMode | str, m: int) -> np.ndarray:
    """Per-ring filters of rotation order ``m``; shape ``(n, k, k)``.

    A filter with ring values ``R`` and offset ``beta`` equals
    ``exp(i beta) * tensordot(R, basis, 1)``.
    """
    _check_size(k, n)
    return _harmonic_basis(int(k), int(n), FilterMode(mode), int(m)).copy()


@lru_cache(maxsize=256)
def _harmonic_basis(k: int, n: int, mode: FilterMode, m: int) -> np.ndarray:
    interp = _ring_interpolation(k, n, mode)
    r, unit = _polar_grid(k)
    phasor = _integer_power(unit, m)
    if m != 0:
        phasor[r == 0] = 0.0
    basis = interp.weights.T.reshape(n, k, k) * phasor
    basis.setflags(write=False)
    return basis


def synthesize_filter(spec: HarmonicFilterSpec) -> np.ndarray:
    basis = _harmonic_basis(spec.k, spec.n, spec.mode, spec.m1)
    radial = np.tensordot(np.asarray(spec.radial_weights), basis, axes=1)
    return radial * np.exp(1j * spec.beta)
