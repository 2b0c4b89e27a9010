"""Rotation-equivariant backbone layers acting on streams of complex feature maps.

A :class:`StreamBundle` stores features as one array of shape
``(batch, n_orders, channels, H, W)``; index ``i`` along axis 1 carries the
stream of rotation order ``orders[i]``.  Under an input rotation by ``theta``
the stream of order ``m`` picks up the phase ``exp(i m theta)`` on top of the
spatial rotation.  Every layer here keeps that law intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ParameterError, ShapeError, WiringError
from .filters import FilterMode, HarmonicFilterSpec, _harmonic_basis
from .grid import _circular_mask, _upscale_matrix

__all__ = [
    "StreamBundle",
    "ConvLayerSpec",
    "BatchNormState",
    "h_conv",
    "h_relu",
    "h_batchnorm",
    "h_bn_relu",
    "h_meanpool",
    "magnitude_readout",
    "mask_tensor",
    "upscale_tensor",
]


@dataclass(frozen=True)
class StreamBundle:
    data: Tensor  # (B, n_orders, C, H, W), complex
    orders: tuple[int, ...]

    def __post_init__(self):
        orders = tuple(int(m) for m in self.orders)
        if not orders or 0 not in orders or orders != tuple(range(orders[0], orders[-1] + 1)):
            raise WiringError(f"orders must be a sorted integer interval containing 0, got {orders}")
        data = as_tensor(self.data)
        if data.ndim != 5 or data.shape[1] != len(orders):
            raise ShapeError(f"bundle data must be (B, {len(orders)}, C, H, W), got {data.shape}")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_images(cls, images) -> StreamBundle:
        """Wrap real or complex ``(B, H, W)`` images as a single order-0 channel."""
        x = as_tensor(images)
        if not x.is_complex:
            x = x * (1.0 + 0j)
        B, H, W = x.shape
        return cls(x.reshape(B, 1, 1, H, W), (0,))

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[-2:]

    def stream(self, m: int) -> Tensor:
        if m not in self.orders:
            raise WiringError(f"order {m} not in bundle orders {self.orders}")
        return self.data[:, self.orders.index(m)]

    def replace(self, data) -> StreamBundle:
        return StreamBundle(data, self.orders)


# -- masking and up-scaling as graph ops ------------------------------------


def mask_tensor(x, enabled: bool = True) -> Tensor:
    """Multiply the trailing (H, W) axes by the circular mask."""
    x = as_tensor(x)
    if not enabled:
        return x
    H, W = x.shape[-2:]
    m = _circular_mask(H, W).astype(x.data.real.dtype)
    return x * m


def upscale_tensor(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ParameterError(f"upscale factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    dt = x.data.real.dtype
    Ah = _upscale_matrix(H, factor).astype(dt)
    Aw = _upscale_matrix(W, factor).astype(dt)
    lead = x.shape[:-2]
    flat = x.reshape(-1, H, W)
    out = ad.einsum("ih,nhw,jw->nij", Ah, flat, Aw)
    return out.reshape(*lead, H * factor, W * factor)


# -- harmonic convolution ----------------------------------------------------


@dataclass(frozen=True)
class ConvLayerSpec:
    """Wiring of one H-Conv layer.

    Weights are stored separately: ``radial`` has shape
    ``(n_in_orders, n_out_orders, in_channels, out_channels, rings)`` and
    ``beta`` the same shape without the ring axis.  The filter connecting input
    order ``m_in`` to output order ``m_out`` has rotation order ``m_out - m_in``.
    """

    orders_in: tuple[int, ...]
    orders_out: tuple[int, ...]
    in_channels: int
    out_channels: int
    k: int = 15
    rings: int = 3
    mode: FilterMode = FilterMode.HNEXT
    mask_after: bool = False

    @property
    def radial_shape(self) -> tuple[int, ...]:
        return (len(self.orders_in), len(self.orders_out), self.in_channels,
                self.out_channels, self.rings)

    @property
    def beta_shape(self) -> tuple[int, ...]:
        return self.radial_shape[:-1]

    def filter_order(self, m_in: int, m_out: int) -> int:
        return m_out - m_in

    def filter_spec(self, radial, beta, m_in: int, m_out: int, c_in: int, c_out: int):
        i, o = self.orders_in.index(m_in), self.orders_out.index(m_out)
        return HarmonicFilterSpec(
            m1=m_out - m_in,
            radial_weights=tuple(np.asarray(radial)[i, o, c_in, c_out]),
            beta=float(np.asarray(beta)[i, o, c_in, c_out]),
            k=self.k,
            mode=self.mode,
        )


@lru_cache(maxsize=64)
def _basis_spectra(orders_in, orders_out, k, n, mode, fft_shape, dtype) -> np.ndarray:
    """FFT of the flipped per-ring basis filters, ``(Mi, Mo, n, Lh, Lw)``."""
    Lh, Lw = fft_shape
    out = np.empty((len(orders_in), len(orders_out), n, Lh, Lw), dtype=np.complex128)
    for i, mi in enumerate(orders_in):
        for o, mo in enumerate(orders_out):
            basis = _harmonic_basis(k, n, mode, mo - mi)[:, ::-1, ::-1]
            out[i, o] = sfft.fft2(basis, s=fft_shape)
    out = out.astype(dtype)
    out.setflags(write=False)
    return out


def h_conv(bundle: StreamBundle, spec: ConvLayerSpec, radial, beta) -> StreamBundle:
    """Cross-correlate every input stream with circular-harmonic filters.

    Output channel ``(m_out, c)`` sums the responses of all input channels
    ``(m_in, c')`` to the filter of order ``m_out - m_in``.  Zero "same" padding
    keeps the spatial size.  Implemented as a single FFT-domain primitive.
    """
    if tuple(bundle.orders) != tuple(spec.orders_in):
        raise WiringError(f"bundle orders {bundle.orders} != layer input orders {spec.orders_in}")
    if bundle.channels != spec.in_channels:
        raise WiringError(f"bundle has {bundle.channels} channels, layer expects {spec.in_channels}")
    H, W = bundle.spatial
    k = spec.k
    if H < k or W < k:
        raise ShapeError(f"{k}x{k} filter larger than {H}x{W} grid")
    radial = as_tensor(radial)
    beta = as_tensor(beta)
    if radial.shape != spec.radial_shape or beta.shape != spec.beta_shape:
        raise ShapeError(f"weights {radial.shape}/{beta.shape} do not match layer "
                         f"{spec.radial_shape}/{spec.beta_shape}")

    x = bundle.data
    cdt = np.result_type(x.dtype, np.complex64)
    rdt = np.finfo(cdt).dtype
    B = x.shape[0]
    Mi, Mo = len(spec.orders_in), len(spec.orders_out)
    Ci, Co, n = spec.in_channels, spec.out_channels, spec.rings
    K, N = Mi * Ci, Mo * Co
    r = (k - 1) // 2
    # circular wrap-around only has to clear the r cropped rows/columns
    Lh, Lw = sfft.next_fast_len(H + r), sfft.next_fast_len(W + r)
    F = Lh * Lw
    S = _basis_spectra(spec.orders_in, spec.orders_out, k, n, FilterMode(spec.mode), (Lh, Lw), cdt)

    R = radial.data.astype(rdt, copy=False)
    phase = np.exp(1j * beta.data.astype(rdt, copy=False)).astype(cdt)
    # filter spectra per frequency bin: (F, K, N) with K = (mi, ci), N = (mo, co)
    radial_spec = np.einsum("abcdj,abjf->facbd", R.astype(cdt), S.reshape(Mi, Mo, n, F), optimize=True)
    Wf = (radial_spec * phase.transpose(0, 2, 1, 3)[None]).reshape(F, K, N)

    # spatial axes lead so every per-frequency product is a contiguous matmul
    xin = x.data.astype(cdt, copy=False).reshape(B, K, H, W).transpose(2, 3, 0, 1)
    Xt = sfft.fft2(np.ascontiguousarray(xin), s=(Lh, Lw), axes=(0, 1)).reshape(F, B, K)
    Yt = np.matmul(Xt, Wf).reshape(Lh, Lw, B, N)
    Y = sfft.ifft2(Yt, axes=(0, 1), overwrite_x=True)
    out = np.ascontiguousarray(Y[r:r + H, r:r + W].transpose(2, 3, 0, 1)).reshape(B, Mo, Co, H, W)

    def vjp(g):
        gfull = np.zeros((Lh, Lw, B, N), dtype=cdt)
        gfull[r:r + H, r:r + W] = g.reshape(B, N, H, W).transpose(2, 3, 0, 1)
        Gt = sfft.fft2(gfull, axes=(0, 1), overwrite_x=True).reshape(F, B, N)
        gx = gr = gb = None
        if x.requires_grad:
            GX = np.matmul(Gt, np.conj(Wf).transpose(0, 2, 1)).reshape(Lh, Lw, B, K)
            gxf = sfft.ifft2(GX, axes=(0, 1), overwrite_x=True)
            gx = np.ascontiguousarray(gxf[:H, :W].transpose(2, 3, 0, 1)).reshape(x.shape)
        if radial.requires_grad or beta.requires_grad:
            GW = np.matmul(np.conj(Xt).transpose(0, 2, 1), Gt) / F  # (F, K, N)
            GW = GW.reshape(F, Mi, Ci, Mo, Co)
            if radial.requires_grad:
                # d Wf / d R_j = exp(i beta) S_j
                t = np.einsum("facbd,abjf->abcdj", GW, np.conj(S.reshape(Mi, Mo, n, F)), optimize=True)
                gr = np.real(t * np.conj(phase)[..., None])
            if beta.requires_grad:
                gb = np.imag(np.einsum("facbd,facbd->abcd", np.conj(Wf.reshape(F, Mi, Ci, Mo, Co)),
                                       GW, optimize=True))
        return gx, gr, gb

    data = ad.primitive(out, (x, radial, beta), vjp)
    data = mask_tensor(data, spec.mask_after)
    return StreamBundle(data, spec.orders_out)


# -- magnitude-only layers ----------------------------------------------------


def _polar(bundle: StreamBundle, phase_eps: float = 0.0) -> tuple[Tensor, Tensor]:
    z = bundle.data
    return ad.abs_(z), ad.unit_phase(z, phase_eps)


def h_relu(bundle: StreamBundle, bias, phase_eps: float = 0.0) -> StreamBundle:
    """``ReLU(|z| + b) * exp(i arg z)`` with one bias per (order, channel).

    ``phase_eps > 0`` replaces the phasor by ``z / sqrt(|z|^2 + phase_eps^2)``
    (see ``autodiff.unit_phase``).
    """
    bias = as_tensor(bias)
    M, C = len(bundle.orders), bundle.channels
    if bias.shape != (M, C):
        raise ShapeError(f"bias shape {bias.shape} != ({M}, {C})")
    mag, phase = _polar(bundle, phase_eps)
    b = bias.reshape(1, M, C, 1, 1)
    return bundle.replace(ad.relu(mag + b) * phase)


@dataclass
class BatchNormState:
    """Running magnitude statistics, shape ``(n_orders, channels)`` each."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, n_orders: int, channels: int, momentum: float = 0.1) -> BatchNormState:
        return cls(np.zeros((n_orders, channels)), np.ones((n_orders, channels)), momentum)


def _normalized_magnitude(mag: Tensor, gamma: Tensor, delta: Tensor, state, eps, training, mask):
    B, M, C, H, W = mag.shape
    rdt = mag.dtype
    if training:
        weight = _circular_mask(H, W).astype(rdt) if mask else np.ones((H, W), dtype=rdt)
        count = B * float(weight.sum())
        mean = (mag * weight).sum(axis=(0, 3, 4), keepdims=True) * (1.0 / count)
        centered = mag - mean
        var = (centered * centered * weight).sum(axis=(0, 3, 4), keepdims=True) * (1.0 / count)
        if state is not None:
            mom = state.momentum
            unbiased = var.data.reshape(M, C) * (count / max(count - 1.0, 1.0))
            state.running_mean = (1 - mom) * state.running_mean + mom * mean.data.reshape(M, C)
            state.running_var = (1 - mom) * state.running_var + mom * unbiased
        normed = centered / ad.sqrt(var + eps)
    else:
        mean = state.running_mean.astype(rdt).reshape(1, M, C, 1, 1)
        inv = (1.0 / np.sqrt(state.running_var + eps)).astype(rdt).reshape(1, M, C, 1, 1)
        normed = (mag - mean) * inv
    return normed * gamma.reshape(1, M, C, 1, 1) + delta.reshape(1, M, C, 1, 1)


def _check_bn_args(bundle, gamma, delta, state, eps, training, phase_eps=0.0):
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if phase_eps < 0:
        raise ParameterError(f"phase_eps must be >= 0, got {phase_eps}")
    gamma, delta = as_tensor(gamma), as_tensor(delta)
    M, C = len(bundle.orders), bundle.channels
    if gamma.shape != (M, C) or delta.shape != (M, C):
        raise ShapeError(f"gamma/delta must have shape ({M}, {C})")
    if not training and state is None:
        raise ParameterError("evaluation mode needs running statistics")
    return gamma, delta


def h_batchnorm(bundle: StreamBundle, gamma, delta, state: BatchNormState | None = None,
                eps: float = 1e-5, training: bool = True, mask: bool = False,
                phase_eps: float = 0.0) -> StreamBundle:
    """Batch normalization of magnitudes; phases pass through untouched.

    Statistics are taken over batch and space (only inside the circular mask
    when ``mask`` is set).  In training mode ``state`` is updated in place; in
    evaluation mode its running statistics are used.  A negative normalized
    magnitude is kept as a negative real factor on the unit phasor.
    """
    gamma, delta = _check_bn_args(bundle, gamma, delta, state, eps, training, phase_eps)
    mag, phase = _polar(bundle, phase_eps)
    out = _normalized_magnitude(mag, gamma, delta, state, eps, training, mask)
    return bundle.replace(out * phase)


def h_bn_relu(bundle: StreamBundle, gamma, delta, bias, state: BatchNormState | None = None,
              eps: float = 1e-5, training: bool = True, mask: bool = False,
              phase_eps: float = 0.0) -> StreamBundle:
    """Batch norm followed by H-ReLU, acting on the signed normalized magnitude.

    Equal to ``h_relu(h_batchnorm(...))`` except that a negative normalized
    magnitude ``s`` enters the activation as ``ReLU(s + b)`` rather than
    ``ReLU(|s| + b)``, so the activation can actually switch units off.
    Implemented as one primitive with a hand-derived gradient.
    """
    gamma, delta = _check_bn_args(bundle, gamma, delta, state, eps, training, phase_eps)
    bias = as_tensor(bias)
    M, C = len(bundle.orders), bundle.channels
    if bias.shape != (M, C):
        raise ShapeError(f"bias shape {bias.shape} != ({M}, {C})")
    z = bundle.data
    zd = z.data
    B, _, _, H, W = zd.shape
    rdt = np.finfo(zd.dtype).dtype if np.iscomplexobj(zd) else zd.dtype
    r = np.abs(zd)
    zero = r == 0
    safe_r = np.where(zero, 1, r).astype(rdt, copy=False)
    if phase_eps > 0:
        q = np.sqrt(r * r + rdt.type(phase_eps) ** 2)
        u = zd / q
    else:
        q = safe_r
        u = zd / q
        u[zero] = 1
    g_ = gamma.data.astype(rdt).reshape(1, M, C, 1, 1)
    shift = (delta.data + bias.data).astype(rdt).reshape(1, M, C, 1, 1)
    axes = (0, 3, 4)
    if training:
        w = _circular_mask(H, W).astype(rdt) if mask else np.ones((H, W), dtype=rdt)
        count = B * float(w.sum())
        mean = (r * w).sum(axis=axes, keepdims=True) / count
        c = r - mean
        var = (c * c * w).sum(axis=axes, keepdims=True) / count
        inv = 1.0 / np.sqrt(var + eps)
        if state is not None:
            mom = state.momentum
            unbiased = var.reshape(M, C).astype(np.float64) * (count / max(count - 1.0, 1.0))
            state.running_mean = (1 - mom) * state.running_mean + mom * mean.reshape(M, C)
            state.running_var = (1 - mom) * state.running_var + mom * unbiased
    else:
        mean = state.running_mean.astype(rdt).reshape(1, M, C, 1, 1)
        c = r - mean
        inv = (1.0 / np.sqrt(state.running_var + eps)).astype(rdt).reshape(1, M, C, 1, 1)
    n = c * inv
    s = n * g_ + shift
    a = np.maximum(s, 0)
    out = a * u

    def vjp(g):
        p = np.conj(u) * g
        gs = np.where(s > 0, p.real, 0).astype(rdt, copy=False)
        g_gamma = (gs * n).sum(axis=axes).reshape(M, C)
        g_shift = gs.sum(axis=axes).reshape(M, C)
        gn = gs * g_
        if training:
            gc = gn * inv - (gn * c).sum(axis=axes, keepdims=True) * inv**3 * (w * c) / count
            gr = gc - gc.sum(axis=axes, keepdims=True) * w / count
        else:
            gr = gn * inv
        # d|z| acts along z/|z|; the phasor factor contributes a/q (g - Re(conj(u) g) u)
        gz = (zd / safe_r) * gr.astype(zd.dtype, copy=False) + (a / q) * (g - p.real * u)
        gz = gz.astype(zd.dtype, copy=False)
        if phase_eps <= 0:
            gz[zero] = 0
        return gz, g_gamma, g_shift, g_shift

    data = ad.primitive(out, (z, gamma, delta, bias), vjp)
    return bundle.replace(data)


def h_meanpool(bundle: StreamBundle, window: int = 2, stride: int | None = None) -> StreamBundle:
    """Complex average over ``window x window`` patches taken every ``stride`` pixels."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ParameterError("window and stride must be >= 1")
    H, W = bundle.spatial
    if H % stride or W % stride:
        raise ShapeError(f"{H}x{W} grid not divisible by stride {stride}")
    Ho, Wo = H // stride, W // stride
    if (Ho - 1) * stride + window > H or (Wo - 1) * stride + window > W:
        raise ShapeError(f"window {window} overruns the {H}x{W} grid at stride {stride}")
    x = bundle.data
    if window == stride:
        B, M, C = x.shape[:3]
        pooled = x.reshape(B, M, C, Ho, stride, Wo, stride).mean(axis=(4, 6))
        return bundle.replace(pooled)
    total = None
    for a in range(window):
        for b in range(window):
            part = x[..., a:a + (Ho - 1) * stride + 1:stride, b:b + (Wo - 1) * stride + 1:stride]
            total = part if total is None else total + part
    return bundle.replace(total * (1.0 / window**2))


def magnitude_readout(bundle: StreamBundle, mode, sum_complex: bool = False) -> Tensor:
    """Drop phases: real feature maps of shape ``(B, D, H, W)``.

    ``m0``: magnitudes of the order-0 stream.  ``sum``: per channel index, the
    sum over orders of the magnitudes (or, with ``sum_complex``, the magnitude of
    the complex sum, which is not rotation invariant).  ``wide``: every
    ``|F_m|`` concatenated, order-major.
    """
    from .config import ReadoutMode

    mode = ReadoutMode(mode)
    z = bundle.data
    B, M, C, H, W = z.shape
    if mode is ReadoutMode.M0:
        return ad.abs_(bundle.stream(0))
    if mode is ReadoutMode.SUM:
        if sum_complex:
            return ad.abs_(z.sum(axis=1))
        return ad.abs_(z).sum(axis=1)
    return ad.abs_(z).reshape(B, M * C, H, W)
