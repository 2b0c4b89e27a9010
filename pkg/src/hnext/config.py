"""Declarative configuration: network layout, training, data, verification.

Configuration documents are YAML mappings parsed strictly: every key must
name a known field, and every field has a default.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, ParameterError
from .filters import FilterMode

__all__ = [
    "ReadoutMode",
    "PoolingHead",
    "LayerConfig",
    "NetworkConfig",
    "TrainConfig",
    "DataConfig",
    "VerifyConfig",
    "PathsConfig",
    "RunConfig",
    "load_run_config",
    "from_dict",
    "to_dict",
    "reference_mnist_config",
    "hnet_baseline_config",
    "desk_config",
    "broken_config",
]


class ReadoutMode(str, enum.Enum):
    M0 = "m0"
    SUM = "sum"
    WIDE = "wide"


class PoolingHead(str, enum.Enum):
    GAP = "gap"
    ZERNIKE = "zernike"
    MSA = "msa"


@dataclass(frozen=True)
class LayerConfig:
    """One backbone block: H-Conv, batch norm and H-ReLU, optionally mean pooling."""

    channels: int
    pool: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 28
    num_classes: int = 10
    upscale: int = 2
    max_order: int = 2
    layers: tuple[LayerConfig, ...] = (
        LayerConfig(4),
        LayerConfig(4, pool=True),
        LayerConfig(4),
        LayerConfig(4, pool=True),
    )
    filter_size: int = 15
    rings: int = 3
    filter_mode: FilterMode = FilterMode.HNEXT
    mask: bool = True
    readout: ReadoutMode = ReadoutMode.WIDE
    # SUM readout only: |sum_m F_m| instead of sum_m |F_m| (not rotation invariant)
    sum_complex: bool = False
    pooling: PoolingHead = PoolingHead.GAP
    pool_size: int = 2
    zernike_degree: int = 8
    msa_heads: int = 2
    msa_key_width: int = 8
    msa_buckets: int = 16
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # H-ReLU sees the signed batch-normalized magnitude instead of its absolute value
    signed_activation: bool = True
    # phasor z / sqrt(|z|^2 + phase_eps^2) in the nonlinearity; 0 means exact z / |z|
    phase_eps: float = 1e-2

    def __post_init__(self):
        object.__setattr__(self, "filter_mode", FilterMode(self.filter_mode))
        object.__setattr__(self, "readout", ReadoutMode(self.readout))
        object.__setattr__(self, "pooling", PoolingHead(self.pooling))
        object.__setattr__(self, "layers", tuple(
            lc if isinstance(lc, LayerConfig) else LayerConfig(**lc) for lc in self.layers))
        if self.upscale < 1:
            raise ParameterError("upscale must be >= 1")
        if self.max_order < 0:
            raise ParameterError("max_order must be >= 0")
        if self.bn_eps <= 0:
            raise ParameterError("bn_eps must be positive")
        if self.phase_eps < 0:
            raise ParameterError("phase_eps must be >= 0")
        if self.rings < 1 or self.filter_size < 3 or self.filter_size % 2 == 0:
            raise ParameterError("filter_size must be odd >= 3 and rings >= 1")
        size = self.grid_size
        for i, lc in enumerate(self.layers):
            if lc.channels < 1:
                raise ParameterError(f"layer {i}: channels must be >= 1")
            if size < self.filter_size:
                raise ParameterError(
                    f"layer {i}: {size}px grid is smaller than the {self.filter_size}px filter")
            if lc.pool:
                if size % self.pool_size:
                    raise ParameterError(f"layer {i}: {size}px grid not divisible by pool size")
                size //= self.pool_size
        if self.pooling is PoolingHead.ZERNIKE and size < 8:
            raise ParameterError(f"Zernike pooling needs a feature grid of at least 8px, got {size}")

    @property
    def grid_size(self) -> int:
        """Side length after up-scaling."""
        return self.input_size * self.upscale

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(range(self.max_order + 1))

    def layer_sizes(self) -> list[int]:
        """Spatial side length at the output of each block."""
        sizes, size = [], self.grid_size
        for lc in self.layers:
            if lc.pool:
                size //= self.pool_size
            sizes.append(size)
        return sizes

    @property
    def feature_size(self) -> int:
        return self.layer_sizes()[-1] if self.layers else self.grid_size

    @property
    def readout_channels(self) -> int:
        if not self.layers:
            return 1
        c = self.layers[-1].channels
        return c * len(self.orders) if self.readout is ReadoutMode.WIDE else c

    @property
    def zernike_moment_count(self) -> int:
        n = self.zernike_degree
        return sum(1 for d in range(n + 1) for l in range(d + 1) if (d - l) % 2 == 0)

    @property
    def pooled_features(self) -> int:
        d = self.readout_channels
        if self.pooling is PoolingHead.ZERNIKE:
            return d * self.zernike_moment_count
        return d


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    # "constant", or "cosine": decay from lr to 0 over all batches of the run
    schedule: str = "constant"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    dtype: str = "float32"
    max_train: int | None = None
    eval_angles: tuple[float, ...] = (0.0, 45.0)


@dataclass(frozen=True)
class DataConfig:
    variant: str = "mnist-rot-test"
    seed: int = 0
    swap_rot_mnist_sizes: bool = False
    # reduced split sizes for desk runs; None keeps the variant's standard count
    train_size: int | None = None
    valid_size: int | None = None
    test_size: int | None = None

    def __post_init__(self):
        for name in ("train_size", "valid_size", "test_size"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ParameterError(f"{name} must be >= 0")

    def overrides(self) -> dict[str, int]:
        sizes = {"train": self.train_size, "valid": self.valid_size, "test": self.test_size}
        return {k: v for k, v in sizes.items() if v is not None}


@dataclass(frozen=True)
class VerifyConfig:
    angles: tuple[float, ...] = (0.0, 90.0, 180.0, 270.0, 45.0)
    hard_tolerance: float = 1e-8
    # relative magnitude residual allowed at angles outside the 90-degree family;
    # None reports those rows without gating on them
    arbitrary_tolerance: float | None = None
    num_inputs: int = 8
    seed: int = 0
    table_angles: tuple[float, ...] = tuple(float(a) for a in range(0, 360, 30))


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str | None = None
    dataset_dir: str | None = None
    checkpoint: str | None = None
    out: str = "runs/default"

    def resolved_data_dir(self) -> Path:
        if self.data_dir:
            return Path(self.data_dir)
        return Path(os.environ.get("HNEXT_DATA_DIR", "data"))


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if origin is tuple:
        (inner, *_rest) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_convert(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{where}: {value!r} is not one of {[m.value for m in tp]}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def from_dict(cls, data, where: str | None = None):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    where = where or cls.__name__
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ParameterError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(obj):
    """Plain-data (JSON/YAML friendly) view of a config dataclass."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    return obj


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(RunConfig, data or {}, where=str(path))


# -- presets ---------------------------------------------------------------


def reference_mnist_config() -> NetworkConfig:
    """UP+MASK layout sized to the ~28k parameter MNIST budget."""
    return NetworkConfig(
        upscale=2,
        max_order=2,
        layers=(
            LayerConfig(8),
            LayerConfig(14, pool=True),
            LayerConfig(18),
            LayerConfig(22, pool=True),
        ),
        filter_size=15,
        rings=3,
        filter_mode=FilterMode.HNEXT,
        mask=True,
        readout=ReadoutMode.WIDE,
        pooling=PoolingHead.GAP,
    )


def hnet_baseline_config(**overrides) -> NetworkConfig:
    """Small ring-per-pixel filters, no up-scaling, square channels."""
    base = dict(upscale=1, filter_size=5, rings=3, filter_mode=FilterMode.HNET, mask=False)
    base.update(overrides)
    return dataclasses.replace(NetworkConfig(), **base)


def desk_config(up: bool = True, mask: bool = True, **overrides) -> NetworkConfig:
    """Compact layouts used for the CPU-scale ablation (UP, UP+MASK)."""
    if not up:
        return hnet_baseline_config(mask=mask, **overrides)
    base = dict(upscale=2, filter_size=15, rings=3, filter_mode=FilterMode.HNEXT, mask=mask)
    base.update(overrides)
    return dataclasses.replace(NetworkConfig(), **base)


def broken_config() -> NetworkConfig:
    """Deliberately non-invariant layout: 3x3 ring-per-pixel filters, no mask, no up-scale."""
    return hnet_baseline_config(filter_size=3, rings=2)
