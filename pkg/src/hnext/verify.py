"""Equivariance and invariance measurements for backbones and full models."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig
from .errors import DataError, WiringError
from .grid import make_circular_mask, rotate_resample
from .model import ParamStore, forward
from .train import accuracy_at_angle

__all__ = [
    "EquivarianceRow",
    "EquivarianceReport",
    "InvarianceReport",
    "backbone_features",
    "phase_law_residual",
    "equivariance_report",
    "invariance_gap",
    "fixed_angle_table",
    "is_quarter_turn",
]


def is_quarter_turn(theta_deg: float) -> bool:
    return abs(theta_deg / 90.0 - round(theta_deg / 90.0)) < 1e-12


def backbone_features(config: NetworkConfig, params: ParamStore, images, dtype=np.float64):
    """Complex block outputs ``(B, M, C, h, w)``, one per backbone block (eval mode)."""
    result = forward(config, params, images, training=False, dtype=dtype)
    return [b.data.data for b in result.features], result.features[0].orders if result.features else ()


def _prepare_inputs(config: NetworkConfig, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if config.mask:
        x = x * make_circular_mask(*x.shape[-2:])
    return x


def phase_law_residual(config: NetworkConfig, params: ParamStore, images, theta: float,
                       order: int | None = None, dtype=np.float64) -> list[dict[int, tuple[float, float]]]:
    """Per block and order: ``(abs residual, relative magnitude residual)``.

    The absolute residual is ``max |F(rot x)[m] - exp(i m theta) rot(F(x)[m])|``;
    the magnitude residual is the relative L2 distance
    ``|| |F(rot x)[m]| - rot(|F(x)[m]|) || / || rot(|F(x)[m]|) ||``, which
    stays meaningful at angles where resampling blurs individual pixels.
    ``theta`` is in radians; inputs are masked first when the config uses
    the mask.
    """
    if order is not None and order not in config.orders:
        raise WiringError(f"order {order} not produced by this config (orders {config.orders})")
    x = _prepare_inputs(config, images)
    xr = np.real(rotate_resample(x, theta)) if theta % (2 * np.pi) else x
    base, orders = backbone_features(config, params, x, dtype)
    turned, _ = backbone_features(config, params, xr, dtype)
    out = []
    for f0, f1 in zip(base, turned):
        per_order = {}
        for i, m in enumerate(orders):
            if order is not None and m != order:
                continue
            a = f0[:, i].astype(np.complex128)
            b = f1[:, i].astype(np.complex128)
            expected = np.exp(1j * m * theta) * rotate_resample(a, theta)
            abs_res = float(np.max(np.abs(b - expected))) if b.size else 0.0
            mag = np.abs(rotate_resample(np.abs(a), theta))
            scale = float(np.linalg.norm(mag))
            mag_res = float(np.linalg.norm(np.abs(b) - mag)) / scale if scale > 0 else 0.0
            per_order[m] = (abs_res, mag_res)
        out.append(per_order)
    return out


@dataclass(frozen=True)
class EquivarianceRow:
    layer: int
    order: int
    theta_deg: float
    abs_residual: float
    mag_residual: float


@dataclass
class EquivarianceReport:
    rows: list[EquivarianceRow]
    fingerprint: dict = field(default_factory=dict)

    CSV_HEADER = "layer,order,theta_deg,abs_residual,mag_residual"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.CSV_HEADER + "\n")
        for r in self.rows:
            buf.write(f"{r.layer},{r.order},{r.theta_deg:g},{r.abs_residual:.6e},{r.mag_residual:.6e}\n")
        return buf.getvalue()

    def worst(self, quarter_turns: bool) -> EquivarianceRow | None:
        rows = [r for r in self.rows if is_quarter_turn(r.theta_deg) == quarter_turns]
        key = (lambda r: r.abs_residual) if quarter_turns else (lambda r: r.mag_residual)
        return max(rows, key=key, default=None)

    def failures(self, hard_tolerance: float, arbitrary_tolerance: float | None = None):
        """Rows breaking the exact quarter-turn law, or (when a tolerance is
        given) the relative magnitude bound at other angles."""
        bad = []
        for r in self.rows:
            if is_quarter_turn(r.theta_deg):
                if not r.abs_residual < hard_tolerance:
                    bad.append(r)
            elif arbitrary_tolerance is not None and not r.mag_residual < arbitrary_tolerance:
                bad.append(r)
        return bad


def equivariance_report(config: NetworkConfig, params: ParamStore, images,
                        angles_deg=(0.0, 90.0, 180.0, 270.0, 45.0), dtype=np.float64) -> EquivarianceReport:
    rows = []
    for deg in angles_deg:
        per_layer = phase_law_residual(config, params, images, np.deg2rad(deg), dtype=dtype)
        for layer, per_order in enumerate(per_layer):
            for m, (a, g) in per_order.items():
                rows.append(EquivarianceRow(layer, m, float(deg), a, g))
    fingerprint = {"upscale": config.upscale, "mask": config.mask,
                   "filter_mode": config.filter_mode.value}
    return EquivarianceReport(rows, fingerprint)


@dataclass(frozen=True)
class InvarianceReport:
    angles: tuple[float, ...]
    accuracies: tuple[float, ...]

    def __post_init__(self):
        if len(self.angles) != len(self.accuracies):
            raise DataError("one accuracy per angle required")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise DataError("accuracies must lie in [0, 1]")

    @property
    def overall_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def spread(self) -> float:
        return float(max(self.accuracies) - min(self.accuracies))

    def accuracy_at(self, angle: float) -> float:
        return self.accuracies[self.angles.index(float(angle))]

    @property
    def gap(self) -> float:
        return self.accuracy_at(0.0) - self.accuracy_at(45.0)

    def to_csv(self) -> str:
        lines = ["angle_deg,accuracy"]
        lines += [f"{a:g},{acc:.6f}" for a, acc in zip(self.angles, self.accuracies)]
        lines.append(f"OA,{self.overall_accuracy:.6f}")
        return "\n".join(lines) + "\n"


def invariance_gap(config: NetworkConfig, params: ParamStore, valid, dtype=np.float64) -> float:
    """Accuracy on upright validation images minus accuracy after a 45 degree turn."""
    if len(valid.labels) == 0:
        raise DataError("validation split is empty")
    a0 = accuracy_at_angle(config, params, valid.images, valid.labels, 0.0, dtype=dtype)
    a45 = accuracy_at_angle(config, params, valid.images, valid.labels, 45.0, dtype=dtype)
    return a0 - a45


def fixed_angle_table(config: NetworkConfig, params: ParamStore, test,
                      angles=tuple(float(a) for a in range(0, 360, 30)),
                      dtype=np.float64) -> InvarianceReport:
    """Accuracy of upright ``test`` images rotated to each angle; OA is their mean."""
    if len(test.labels) == 0:
        raise DataError("test split is empty")
    angles = tuple(float(a) for a in angles)
    accs = tuple(accuracy_at_angle(config, params, test.images, test.labels, a, dtype=dtype)
                 for a in angles)
    return InvarianceReport(angles, accs)
