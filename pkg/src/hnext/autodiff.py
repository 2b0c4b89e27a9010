"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Gradients are taken of a real scalar loss.  For a complex tensor ``z`` the
stored gradient is ``dL/dRe(z) + 1j * dL/dIm(z)``; with that convention a
complex-linear map ``y = A z`` back-propagates as ``A^H g`` and a real input
simply keeps the real part of what flows into it.

Operations record a vector-Jacobian product (VJP) closure; ``backward`` walks
the graph once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad_value",
    "abs_",
    "unit_phase",
    "relu",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "cross_entropy",
    "einsum",
    "concatenate",
    "stack",
    "primitive",
    "numerical_gradient",
    "gradient_check",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An array node in the computation graph."""

    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    # -- graph ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate ``.grad`` on every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.shape)
                if not parent.is_complex and np.iscomplexobj(pg):
                    pg = pg.real
                pg = pg.astype(parent.dtype, copy=False)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        other = _operand(other, self)
        return primitive(self.data + other.data, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = _operand(other, self)
        return primitive(self.data - other.data, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return _operand(other, self) - self

    def __neg__(self):
        return primitive(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _operand(other, self)
        a, b = self.data, other.data
        return primitive(a * b, (self, other), lambda g: (g * np.conj(b), g * np.conj(a)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _operand(other, self)
        a, b = self.data, other.data
        out = a / b

        def vjp(g):
            gb = g / np.conj(b)
            return gb, -gb * np.conj(out)

        return primitive(out, (self, other), vjp)

    def __rtruediv__(self, other):
        return _operand(other, self) / self

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return primitive(x**p, (self,), lambda g: (g * np.conj(p * x ** (p - 1)),))

    def __matmul__(self, other):
        other = _operand(other, self)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def vjp(g):
            return g @ np.conj(np.swapaxes(b, -1, -2)), np.conj(np.swapaxes(a, -1, -2)) @ g

        return primitive(a @ b, (self, other), vjp)

    def __rmatmul__(self, other):
        return _operand(other, self) @ self

    def __getitem__(self, index):
        x = self.data
        out = x[index]

        def vjp(g):
            full = np.zeros(x.shape, dtype=np.result_type(x.dtype, g.dtype))
            np.add.at(full, index, g)
            return (full,)

        return primitive(out, (self,), vjp)

    # -- reductions and reshapes ------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape),)

        return primitive(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        x = self.data
        return primitive(x.reshape(*shape), (self,), lambda g: (g.reshape(x.shape),))

    def transpose(self, *axes):
        axes = axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        inverse = np.argsort(axes)
        return primitive(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int):
        return primitive(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def real(self):
        return primitive(self.data.real, (self,), lambda g: (g.astype(self.dtype),))

    @property
    def imag(self):
        return primitive(self.data.imag, (self,), lambda g: (1j * g,))

    def conj(self):
        return primitive(np.conj(self.data), (self,), lambda g: (np.conj(g),))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _operand(other, like: Tensor) -> Tensor:
    """Wrap a binary-op operand; scalars adopt ``like``'s precision."""
    if isinstance(other, Tensor):
        return other
    if isinstance(other, np.generic) and other.ndim == 0:
        other = other.item()
    if isinstance(other, (int, float, complex)):
        return Tensor(np.asarray(other, dtype=np.result_type(like.dtype, other)))
    return Tensor(other)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def primitive(out, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out`` as a graph node whose parents' gradients come from ``vjp``.

    ``vjp`` maps the output gradient to one gradient (or ``None``) per parent.
    """
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    return t


# -- elementwise functions -------------------------------------------------


def abs_(x: Tensor) -> Tensor:
    """Magnitude.  The derivative at exactly zero is taken to be zero."""
    x = as_tensor(x)
    z = x.data
    a = np.abs(z)
    if np.iscomplexobj(z):
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(a > 0, z / np.where(a > 0, a, 1), 0)
    else:
        u = np.sign(z)
    return primitive(a, (x,), lambda g: (g * u,))


def unit_phase(x: Tensor, eps: float = 0.0) -> Tensor:
    """``z / |z|`` with the convention ``1`` at ``z == 0`` (zero derivative there).

    With ``eps > 0`` this is ``z / sqrt(|z|^2 + eps^2)`` instead: smooth, equal to
    the unit phasor for ``|z| >> eps`` and going to 0 with ``z``, so rounding
    noise in near-zero regions cannot pass on an arbitrary phase.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x = as_tensor(x)
    z = x.data
    cdt = z.dtype if np.iscomplexobj(z) else np.complex128
    a = np.abs(z)
    if eps > 0:
        q = np.sqrt(a * a + eps * eps)
        u = (z / q).astype(cdt, copy=False)

        def vjp(g):
            return ((g - np.real(np.conj(u) * g) * u) / q,)

        return primitive(u, (x,), vjp)
    nz = a > 0
    safe = np.where(nz, a, 1)
    u = np.where(nz, z / safe, 1).astype(cdt)

    def vjp(g):
        return (np.where(nz, 1j * u * np.imag(np.conj(u) * g) / safe, 0),)

    return primitive(u, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return primitive(np.where(pos, x.data, 0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return primitive(out, (x,), lambda g: (g * np.conj(out),))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return primitive(np.log(d), (x,), lambda g: (g / np.conj(d),))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return primitive(out, (x,), lambda g: (g / (2 * np.conj(out)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return primitive(s, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    B, K = z.shape
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.mean(lse - shifted[np.arange(B), labels])

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return primitive(np.asarray(loss, dtype=z.dtype), (logits,), vjp)


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit subscripts without ellipses."""
    tensors = [as_tensor(o) for o in operands]
    if "->" not in subscripts or "." in subscripts:
        raise ValueError("einsum needs explicit '->' output and no ellipsis")
    inputs, output = subscripts.replace(" ", "").split("->")
    specs = inputs.split(",")
    if len(specs) != len(tensors):
        raise ValueError("subscript count does not match operand count")
    for s in specs:
        if len(set(s)) != len(s):
            raise ValueError("repeated indices within one operand are not supported")
    arrays = [t.data for t in tensors]
    out = np.einsum(subscripts, *arrays, optimize=True)

    def vjp(g):
        grads = []
        for i, spec in enumerate(specs):
            if not tensors[i].requires_grad:
                grads.append(None)
                continue
            others = [(s, np.conj(a)) for j, (s, a) in enumerate(zip(specs, arrays)) if j != i]
            available = set(output).union(*[set(s) for s, _ in others])
            kept = "".join(c for c in spec if c in available)
            expr = ",".join([output] + [s for s, _ in others]) + "->" + kept
            gi = np.einsum(expr, g, *[a for _, a in others], optimize=True)
            if kept != spec:
                shape = [tensors[i].shape[k] if c in kept else 1 for k, c in enumerate(spec)]
                gi = np.broadcast_to(gi.reshape(shape), tensors[i].shape)
            grads.append(gi)
        return tuple(grads)

    return primitive(out, tensors, vjp)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return primitive(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return primitive(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- finite differences ----------------------------------------------------


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5,
                       indices=None) -> np.ndarray:
    """Central finite differences of a real scalar function.

    ``indices`` optionally restricts the evaluation to a subset of flat
    positions; the other entries of the result are NaN.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def gradient_check(f: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                   eps: float = 1e-5, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> list[float]:
    """Relative error between reverse-mode and central-difference gradients.

    ``f`` maps leaf tensors to a real scalar tensor.  Complex inputs are
    perturbed along their real and imaginary parts separately.  Returns one
    error per input, ``||analytic - numeric|| / max(||numeric||, tiny)`` over the
    checked entries.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [np.array(x) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    f(leaves).backward()
    errors = []
    for i, x in enumerate(inputs):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        parts = [("re", analytic.real)] + ([("im", analytic.imag)] if np.iscomplexobj(x) else [])
        num_all, ana_all = [], []
        for part, ana in parts:
            idx = None
            if max_entries is not None and x.size > max_entries:
                idx = rng.choice(x.size, size=max_entries, replace=False)

            def scalar(v, part=part):
                if part == "im":
                    value = inputs[i].real + 1j * v
                elif np.iscomplexobj(x):
                    value = v + 1j * inputs[i].imag
                else:
                    value = v
                args = [Tensor(a) for a in inputs]
                args[i] = Tensor(value)
                return float(f(args).data)

            base = x.imag if part == "im" else x.real
            num = numerical_gradient(scalar, base, eps=eps, indices=idx)
            sel = ~np.isnan(num)
            num_all.append(num[sel])
            ana_all.append(np.asarray(ana)[sel])
        num_v = np.concatenate(num_all)
        ana_v = np.concatenate(ana_all)
        scale = max(np.linalg.norm(num_v), np.linalg.norm(ana_v), 1e-300)
        errors.append(float(np.linalg.norm(ana_v - num_v) / scale))
    return errors
