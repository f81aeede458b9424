"""Complex-valued dense tensors with reverse-mode automatic differentiation.

Gradients follow the conjugate-Wirtinger convention: for a real scalar loss L
and a complex tensor entry z, the stored gradient is dL/d(conj(z)), so the
steepest-descent update is z <- z - eta * grad.  Equivalently, with
z = x + i*y the stored gradient equals (dL/dx + i*dL/dy) / 2, which is the
quantity checked by the finite-difference tests.

Every op records a closure that accumulates gradients into its inputs; the
graph is a DAG walked once in reverse topological order by ``backward``.
Evaluation is eager, dense and single-threaded per tape.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, SingularMatrixError

_LN2 = float(np.log(2.0))


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.complex128)


class DiffTensor:
    """A node in the autodiff graph: complex value + adjoint accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, name=None):
        self.value = _asarray(value)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


def constant(x) -> DiffTensor:
    return DiffTensor(x, requires_grad=False)


class Tape:
    """Named registry of leaf parameters optimized together.

    Forward passes are ordinary eager evaluation; replaying a forward function
    on identical inputs reproduces identical values bit for bit because all
    ops evaluate in a fixed order with no threading.
    """

    def __init__(self):
        self.parameters: dict[str, DiffTensor] = {}

    def parameter(self, name: str, value) -> DiffTensor:
        if name in self.parameters:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = DiffTensor(value, requires_grad=True, name=name)
        self.parameters[name] = p
        return p

    def zero_grad(self):
        for p in self.parameters.values():
            p.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self.parameters.items()
        }


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from e


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = DiffTensor(a.value + b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = DiffTensor(a.value - b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = DiffTensor(a.value * b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * np.conj(b.value), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * np.conj(a.value), b.shape))

    out._backward = backward
    return out


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b)
    out = DiffTensor(a.value / b.value, parents=(a, b))

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * np.conj(1.0 / b.value), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * np.conj(-a.value / b.value**2), b.shape))

    out._backward = backward
    return out


def scale(t, alpha) -> DiffTensor:
    """Multiply by a non-learnable constant (scalar or array)."""
    t = as_tensor(t)
    alpha = np.asarray(alpha, dtype=np.complex128)
    out = DiffTensor(t.value * alpha, parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(_unbroadcast(g * np.conj(alpha), t.shape))

    out._backward = backward
    return out


def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul requires tensors with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions mismatch: {a.shape} @ {b.shape}")
    out = DiffTensor(a.value @ b.value, parents=(a, b))

    def backward(g):
        # dA = g @ B^H, dB = A^H @ g  (conjugate-Wirtinger)
        if a.requires_grad:
            ga = g @ np.conj(np.swapaxes(b.value, -1, -2))
            a.accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.conj(np.swapaxes(a.value, -1, -2)) @ g
            b.accumulate(_unbroadcast(gb, b.shape))

    out._backward = backward
    return out


def conj(t) -> DiffTensor:
    t = as_tensor(t)
    out = DiffTensor(np.conj(t.value), parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(np.conj(g))

    out._backward = backward
    return out


def abs2(t) -> DiffTensor:
    """|z|^2 = z * conj(z); output is real-valued."""
    t = as_tensor(t)
    out = DiffTensor(np.abs(t.value) ** 2, parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(2.0 * np.real(g) * t.value)

    out._backward = backward
    return out


def real(t) -> DiffTensor:
    t = as_tensor(t)
    out = DiffTensor(np.real(t.value), parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(np.real(g).astype(np.complex128))

    out._backward = backward
    return out


def log2_1p(t) -> DiffTensor:
    """log2(1 + x) for real-valued x > -1."""
    t = as_tensor(t)
    x = t.value
    if np.any(np.abs(x.imag) > 1e-9 * (1.0 + np.abs(x.real))):
        raise DomainError("log2_1p requires a real-valued input")
    xr = x.real
    if np.any(xr <= -1.0):
        raise DomainError("log2_1p requires x > -1")
    out = DiffTensor(np.log1p(xr) / _LN2, parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(g / ((1.0 + xr) * _LN2))

    out._backward = backward
    return out


def relu(t) -> DiffTensor:
    """max(x, 0) on real-valued tensors (used by the neural generator)."""
    t = as_tensor(t)
    mask = t.value.real > 0.0
    out = DiffTensor(np.where(mask, t.value.real, 0.0), parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(np.real(g) * mask)

    out._backward = backward
    return out


def reshape(t, shape) -> DiffTensor:
    t = as_tensor(t)
    old = t.shape
    try:
        v = t.value.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    out = DiffTensor(v, parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(g.reshape(old))

    out._backward = backward
    return out


def swapaxes(t, ax1, ax2) -> DiffTensor:
    t = as_tensor(t)
    out = DiffTensor(np.swapaxes(t.value, ax1, ax2), parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(np.swapaxes(g, ax1, ax2))

    out._backward = backward
    return out


def hermitian_transpose(t) -> DiffTensor:
    return conj(swapaxes(t, -1, -2))


def sum_axis(t, axis, keepdims=False) -> DiffTensor:
    t = as_tensor(t)
    out = DiffTensor(t.value.sum(axis=axis, keepdims=keepdims), parents=(t,))

    def backward(g):
        if t.requires_grad:
            if not keepdims:
                g = np.expand_dims(g, axis)
            t.accumulate(np.broadcast_to(g, t.shape).copy())

    out._backward = backward
    return out


def mean_axis(t, axis, keepdims=False) -> DiffTensor:
    t = as_tensor(t)
    n = t.shape[axis] if isinstance(axis, int) else int(np.prod([t.shape[a] for a in axis]))
    return scale(sum_axis(t, axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    out = DiffTensor(np.concatenate([t.value for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate(piece)

    out._backward = backward
    return out


def take(t, indices, axis=0) -> DiffTensor:
    """Gather along one axis with constant integer indices."""
    t = as_tensor(t)
    indices = np.asarray(indices, dtype=np.intp)
    out = DiffTensor(np.take(t.value, indices, axis=axis), parents=(t,))

    def backward(g):
        if t.requires_grad:
            acc = np.zeros_like(t.value)
            moved = np.moveaxis(acc, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, axis, 0))
            t.accumulate(acc)

    out._backward = backward
    return out


def select_cells(t, cell_index) -> DiffTensor:
    """out[u, ...] = t[cell_index[u], u, ...]; gathers one leading slab per user."""
    t = as_tensor(t)
    idx = np.asarray(cell_index, dtype=np.intp)
    users = np.arange(idx.shape[0])
    out = DiffTensor(t.value[idx, users], parents=(t,))

    def backward(g):
        if t.requires_grad:
            acc = np.zeros_like(t.value)
            np.add.at(acc, (idx, users), g)
            t.accumulate(acc)

    out._backward = backward
    return out


def unit_modulus(t, magnitude: float = 1.0) -> DiffTensor:
    """w = magnitude * z / |z|, with the exact Wirtinger backward.

    dw/dz = c/(2|z|), dw/dconj(z) = -c z^2 / (2|z|^3).  Entries with |z|
    below 1e-12 pass their gradient through unchanged (the forward maps
    them to ``magnitude`` at phase zero).
    """
    t = as_tensor(t)
    z = t.value
    mod = np.abs(z)
    small = mod < 1e-12
    safe = np.where(small, 1.0, mod)
    out = DiffTensor(np.where(small, magnitude, magnitude * z / safe), parents=(t,))

    def backward(g):
        if t.requires_grad:
            gz = (g * (magnitude / (2.0 * safe))
                  - np.conj(g) * magnitude * z * z / (2.0 * safe ** 3))
            t.accumulate(np.where(small, g, gz))

    out._backward = backward
    return out


def stop_gradient(t) -> DiffTensor:
    """Pass the value through; contribute zero adjoint to the input."""
    t = as_tensor(t)
    return DiffTensor(t.value.copy(), requires_grad=False)


def straight_through(t, projected_value) -> DiffTensor:
    """Forward emits ``projected_value``; backward is the identity (STE)."""
    t = as_tensor(t)
    projected_value = _asarray(projected_value)
    if projected_value.shape != t.shape:
        raise ShapeError("straight_through projection must preserve shape")
    out = DiffTensor(projected_value, parents=(t,))

    def backward(g):
        if t.requires_grad:
            t.accumulate(g)

    out._backward = backward
    return out


def cholesky_inverse(m_value: np.ndarray) -> np.ndarray:
    """Inverse of a (stack of) Hermitian PD matrices via Cholesky."""
    try:
        low = np.linalg.cholesky(m_value)
    except np.linalg.LinAlgError as e:
        raise SingularMatrixError("matrix is not Hermitian positive definite") from e
    linv = np.linalg.inv(low)
    return np.conj(np.swapaxes(linv, -1, -2)) @ linv


def hermitian_inverse(m) -> DiffTensor:
    """Inverse of a Hermitian positive definite matrix (or stack thereof)."""
    m = as_tensor(m)
    if m.value.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError("hermitian_inverse requires square matrices")
    y = cholesky_inverse(m.value)
    out = DiffTensor(y, parents=(m,))

    def backward(g):
        if m.requires_grad:
            yh = np.conj(np.swapaxes(y, -1, -2))
            m.accumulate(-yh @ g @ yh)

    out._backward = backward
    return out


# ------------------------------ convolution ------------------------------

def _im2col(x, kh, kw, stride, pad):
    # x: (B, C, H, W) -> windows (B, C, kh, kw, Ho, Wo)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    return windows, ho, wo


def _conv2d_value(x, w, stride, pad):
    kh, kw = w.shape[-2:]
    windows, ho, wo = _im2col(x, kh, kw, stride, pad)
    # (B, C, kh, kw, Ho, Wo) x (Cout, C, kh, kw) -> (B, Cout, Ho, Wo)
    return np.einsum("bcklhw,ockl->bohw", windows, w, optimize=True)


def _conv2d_dx(g, w, x_shape, stride, pad):
    # scatter each output gradient back through its window
    b, c, h, w_in = x_shape
    kh, kw = w.shape[-2:]
    acc = np.zeros((b, c, h + 2 * pad, w_in + 2 * pad), dtype=np.complex128)
    ho, wo = g.shape[-2:]
    contrib = np.einsum("bohw,ockl->bcklhw", g, np.conj(w), optimize=True)
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += contrib[:, :, i, j]
    if pad:
        acc = acc[:, :, pad:-pad, pad:-pad]
    return acc


def _conv2d_dw(g, x, kh, kw, stride, pad):
    windows, _, _ = _im2col(x, kh, kw, stride, pad)
    return np.einsum("bohw,bcklhw->ockl", g, np.conj(windows), optimize=True)


def conv2d(x, w, stride=1, pad=1) -> DiffTensor:
    """2-D convolution, NCHW layout, weight (Cout, Cin, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError("conv2d expects x (B,C,H,W) and w (Cout,Cin,kh,kw)")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: {x.shape} vs {w.shape}")
    out = DiffTensor(_conv2d_value(x.value, w.value, stride, pad), parents=(x, w))
    kh, kw = w.shape[-2:]

    def backward(g):
        if x.requires_grad:
            x.accumulate(_conv2d_dx(g, w.value, x.shape, stride, pad))
        if w.requires_grad:
            w.accumulate(_conv2d_dw(g, x.value, kh, kw, stride, pad))

    out._backward = backward
    return out


def conv2d_transpose(x, w, stride=1, pad=1) -> DiffTensor:
    """Transposed convolution (gradient of conv2d wrt its input).

    Weight layout (Cin, Cout, kh, kw); output spatial size
    (n - 1) * stride - 2 * pad + k.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError("conv2d_transpose expects 4-D tensors")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"channel mismatch: {x.shape} vs {w.shape}")
    b = x.shape[0]
    kh, kw = w.shape[-2:]
    ho = (x.shape[2] - 1) * stride - 2 * pad + kh
    wo = (x.shape[3] - 1) * stride - 2 * pad + kw
    # forward of transpose == backward-dx of conv; _conv2d_dx conjugates its
    # weights, so pre-conjugate to get a plain linear scatter.
    out_v = _conv2d_dx(x.value, np.conj(w.value), (b, w.shape[1], ho, wo), stride, pad)
    out = DiffTensor(out_v, parents=(x, w))

    def backward(g):
        if x.requires_grad:
            x.accumulate(_conv2d_value(g, np.conj(w.value), stride, pad))
        if w.requires_grad:
            w.accumulate(np.conj(_conv2d_dw(x.value, g, kh, kw, stride, pad)))

    out._backward = backward
    return out


def crop2d(t, h, w) -> DiffTensor:
    """Crop the trailing two axes to (h, w)."""
    t = as_tensor(t)
    if t.shape[-2] < h or t.shape[-1] < w:
        raise ShapeError(f"cannot crop {t.shape} to ({h}, {w})")
    out = DiffTensor(t.value[..., :h, :w].copy(), parents=(t,))

    def backward(g):
        if t.requires_grad:
            acc = np.zeros_like(t.value)
            acc[..., :h, :w] = g
            t.accumulate(acc)

    out._backward = backward
    return out


# ------------------------------- backward --------------------------------

def _toposort(root: DiffTensor):
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffTensor) -> None:
    """Backpropagate from a real scalar loss; populates .grad on leaves."""
    if loss.value.size != 1:
        raise ShapeError("loss must be a scalar")
    lv = complex(loss.value.reshape(()))
    if abs(lv.imag) > 1e-12 * max(1.0, abs(lv)):
        raise DomainError(f"loss has a material imaginary part: {lv!r}")
    # Seed 1/2: for real scalar L the conjugate-Wirtinger adjoint dL/dconj(L)
    # is 1/2, which makes leaf gradients equal (dL/dx + i dL/dy) / 2.
    loss.accumulate(np.full(loss.shape, 0.5, dtype=np.complex128))
    for node in reversed(_toposort(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node._parents:
            node.grad = None if node is not loss else node.grad
