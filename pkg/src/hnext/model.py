"""Network assembly: parameter storage, initialization, forward pass, parameter count."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .backbone import (
    BatchNormState,
    ConvLayerSpec,
    StreamBundle,
    h_batchnorm,
    h_bn_relu,
    h_conv,
    h_meanpool,
    h_relu,
    magnitude_readout,
    mask_tensor,
    upscale_tensor,
)
from .config import NetworkConfig, PoolingHead
from .errors import ShapeError
from .grid import _circular_mask
from .pooling import MsaPoolConfig, gap_pool, msa_pool, zernike_basis, zernike_pool

__all__ = [
    "ParamStore",
    "conv_specs",
    "msa_config",
    "init_params",
    "forward",
    "predict",
    "count_parameters",
    "ForwardResult",
]


class ParamStore:
    """Named real parameter arrays, their gradients, and non-trainable buffers.

    Shapes are fixed once a name is added; assigning an array of another shape
    raises :class:`ShapeError`.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value, buffer: bool = False) -> None:
        target = self.buffers if buffer else self.params
        if name in target:
            raise KeyError(f"{name} already defined")
        arr = np.array(value, dtype=np.float64)
        target[name] = arr
        if not buffer:
            self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name] if name in self.params else self.buffers[name]

    def __setitem__(self, name: str, value) -> None:
        target = self.params if name in self.params else self.buffers
        if name not in target:
            raise KeyError(f"unknown parameter {name}")
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != target[name].shape:
            raise ShapeError(f"{name}: shape {arr.shape} != {target[name].shape}")
        target[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def zero_grad(self) -> None:
        for name, arr in self.params.items():
            self.grads[name] = np.zeros_like(arr)

    def leaves(self, dtype=np.float64) -> dict[str, Tensor]:
        return {n: Tensor(a.astype(dtype), requires_grad=True, name=n) for n, a in self.params.items()}

    def collect(self, leaves: dict[str, Tensor]) -> None:
        """Copy gradients accumulated on ``leaves`` into ``grads``."""
        for name, leaf in leaves.items():
            g = leaf.grad
            self.grads[name] = np.zeros_like(self.params[name]) if g is None else g.astype(np.float64)

    def copy(self) -> ParamStore:
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out


def conv_specs(config: NetworkConfig) -> list[ConvLayerSpec]:
    specs = []
    orders_in, c_in = (0,), 1
    for lc in config.layers:
        specs.append(ConvLayerSpec(orders_in, config.orders, c_in, lc.channels,
                                   k=config.filter_size, rings=config.rings,
                                   mode=config.filter_mode, mask_after=config.mask))
        orders_in, c_in = config.orders, lc.channels
    return specs


def msa_config(config: NetworkConfig) -> MsaPoolConfig:
    return MsaPoolConfig(heads=config.msa_heads, model_width=config.readout_channels,
                         key_width=config.msa_key_width, buckets=config.msa_buckets)


def _shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, spec in enumerate(conv_specs(config)):
        M, C = len(spec.orders_out), spec.out_channels
        shapes[f"block{i}.radial"] = spec.radial_shape
        shapes[f"block{i}.beta"] = spec.beta_shape
        shapes[f"block{i}.bn_gamma"] = (M, C)
        shapes[f"block{i}.bn_delta"] = (M, C)
        shapes[f"block{i}.relu_bias"] = (M, C)
    if config.pooling is PoolingHead.MSA:
        for name, shape in msa_config(config).weight_shapes().items():
            shapes[f"msa.{name}"] = shape
    shapes["classifier.weight"] = (config.pooled_features, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def count_parameters(config: NetworkConfig) -> int:
    """Trainable scalars: ring weights and phase offsets of every filter,
    activation biases, batch-norm scales/shifts, pooling head and classifier."""
    return int(sum(np.prod(s) for s in _shapes(config).values()))


def init_params(config: NetworkConfig, seed: int = 0) -> ParamStore:
    """Seeded initialization.

    Ring weights ~ N(0, 1/fan_in) with fan_in = input orders x channels x rings,
    phase offsets ~ U[0, 2 pi), batch-norm scale 1 and shift 0, activation bias
    0, classifier ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i, spec in enumerate(conv_specs(config)):
        Mi, Mo, Ci, Co, n = spec.radial_shape
        fan_in = Mi * Ci * n
        store.add(f"block{i}.radial", rng.normal(0.0, np.sqrt(1.0 / fan_in), spec.radial_shape))
        store.add(f"block{i}.beta", rng.uniform(0.0, 2 * np.pi, spec.beta_shape))
        store.add(f"block{i}.bn_gamma", np.ones((Mo, Co)))
        store.add(f"block{i}.bn_delta", np.zeros((Mo, Co)))
        store.add(f"block{i}.relu_bias", np.zeros((Mo, Co)))
        store.add(f"block{i}.bn_mean", np.zeros((Mo, Co)), buffer=True)
        store.add(f"block{i}.bn_var", np.ones((Mo, Co)), buffer=True)
    if config.pooling is PoolingHead.MSA:
        mc = msa_config(config)
        for name, shape in mc.weight_shapes().items():
            if name == "bias":
                store.add("msa.bias", np.zeros(shape))
            else:
                store.add(f"msa.{name}", rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape))
    F = config.pooled_features
    bound = 1.0 / np.sqrt(F)
    store.add("classifier.weight", rng.uniform(-bound, bound, (F, config.num_classes)))
    store.add("classifier.bias", rng.uniform(-bound, bound, (config.num_classes,)))
    return store


@dataclass
class ForwardResult:
    logits: Tensor
    features: list[StreamBundle] = field(default_factory=list)
    readout: Tensor | None = None
    pooled: Tensor | None = None


def forward(config: NetworkConfig, params: ParamStore, images, training: bool = False,
            leaves: dict[str, Tensor] | None = None, dtype=np.float64) -> ForwardResult:
    """Logits for a batch of ``(B, H, W)`` images.

    Order of operations: up-scale, mask, then per block H-Conv, batch norm,
    H-ReLU (fused when ``signed_activation`` is set) and optional mean
    pooling, then the magnitude readout, the pooling head and the linear
    classifier.  The mask (when enabled) is re-applied after
    every operation that can leave the disk.  In training mode batch-norm
    running statistics in ``params.buffers`` are updated.
    """
    images = np.asarray(images)
    if images.ndim != 3 or images.shape[1:] != (config.input_size, config.input_size):
        raise ShapeError(f"expected (B, {config.input_size}, {config.input_size}) images, "
                         f"got {images.shape}")
    rdt = np.dtype(dtype)

    def p(name):
        if leaves is not None and name in leaves:
            return leaves[name]
        return Tensor(params[name].astype(rdt))

    x = Tensor(images.astype(rdt))
    x = mask_tensor(upscale_tensor(x, config.upscale), config.mask)
    bundle = StreamBundle.from_images(x)
    features = []
    for i, (spec, lc) in enumerate(zip(conv_specs(config), config.layers)):
        bundle = h_conv(bundle, spec, p(f"block{i}.radial"), p(f"block{i}.beta"))
        state = BatchNormState(params[f"block{i}.bn_mean"], params[f"block{i}.bn_var"],
                               config.bn_momentum)
        norm_args = (p(f"block{i}.bn_gamma"), p(f"block{i}.bn_delta"))
        if config.signed_activation:
            bundle = h_bn_relu(bundle, *norm_args, p(f"block{i}.relu_bias"), state,
                               eps=config.bn_eps, training=training, mask=config.mask,
                               phase_eps=config.phase_eps)
        else:
            bundle = h_batchnorm(bundle, *norm_args, state, eps=config.bn_eps,
                                 training=training, mask=config.mask, phase_eps=config.phase_eps)
            bundle = h_relu(bundle, p(f"block{i}.relu_bias"), config.phase_eps)
        if training:
            params.buffers[f"block{i}.bn_mean"] = state.running_mean
            params.buffers[f"block{i}.bn_var"] = state.running_var
        bundle = bundle.replace(mask_tensor(bundle.data, config.mask))
        if lc.pool:
            bundle = h_meanpool(bundle, config.pool_size)
            bundle = bundle.replace(mask_tensor(bundle.data, config.mask))
        features.append(bundle)
    readout = magnitude_readout(bundle, config.readout, config.sum_complex)
    size = readout.shape[-1]
    support = _circular_mask(size, size) if config.mask else np.ones((size, size))
    if config.pooling is PoolingHead.GAP:
        pooled = gap_pool(readout, support)
    elif config.pooling is PoolingHead.ZERNIKE:
        pooled = zernike_pool(readout, zernike_basis(size, config.zernike_degree))
    else:
        weights = {name: p(f"msa.{name}") for name in msa_config(config).weight_shapes()}
        pooled = msa_pool(readout, support, weights, msa_config(config))
    logits = pooled @ p("classifier.weight") + p("classifier.bias")
    return ForwardResult(logits, features, readout, pooled)


def predict(config: NetworkConfig, params: ParamStore, images, batch_size: int = 128,
            dtype=np.float64) -> np.ndarray:
    """Evaluation-mode logits, computed in chunks; returns a numpy array."""
    images = np.asarray(images)
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        out.append(forward(config, params, chunk, training=False, dtype=dtype).logits.data)
    if not out:
        return np.zeros((0, config.num_classes))
    return np.concatenate(out).astype(np.float64)
