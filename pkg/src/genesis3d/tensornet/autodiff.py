"""Dense tensors with reverse-mode automatic differentiation on numpy.

Every operation returns a new :class:`Tensor` holding the forward result,
its parents, and a backward rule mapping the output gradient to parent
gradients.  ``backward(loss)`` walks the tape in reverse topological order
and accumulates gradients additively.

Tensors are float32 in normal use and float64 in gradient-check mode; ops
preserve the dtype of their inputs.  Five-rank activations follow the
(batch, channel, x, y, z) layout, matching the volume index order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = [True]

_PATTERN_TRACE: list[list[np.ndarray]] = []


@contextlib.contextmanager
def no_grad():
    """Disable tape building, e.g. for validation passes."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def trace_patterns(out: list):
    """Record relu sign masks and pooling argmax choices during forwards.

    The gradient checker compares these between probe points to confirm a
    finite-difference step stayed inside one piecewise-linear region; a
    difference means the numeric quotient spans a kink and is meaningless.
    """
    _PATTERN_TRACE.append(out)
    try:
        yield out
    finally:
        _PATTERN_TRACE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # elementwise arithmetic (same shape or python scalar)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_constant(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))


def _as_constant(value, like: Tensor) -> Tensor:
    return Tensor(np.full_like(like.data, float(value)))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every contributing tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def _coerce(a: Tensor, b) -> tuple[Tensor, Tensor]:
    if not isinstance(b, Tensor):
        b = _as_constant(b, like=a)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    return a, b


def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _PATTERN_TRACE:
        _PATTERN_TRACE[-1].append(mask)
    return _make(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # clipping only trims the saturated tails, where the true gradient is ~0
    z = np.clip(x.data, -60.0, 60.0)
    s = 1.0 / (1.0 + np.exp(-z))
    s = s.astype(x.data.dtype)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tsum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, float(g)),))


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, float(g) / n),)
    )


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pool: (N, C, X, Y, Z) -> (N, C)."""
    if x.data.ndim != 5:
        raise ValueError(f"spatial_mean expects rank 5, got rank {x.data.ndim}")
    n_spatial = int(np.prod(x.data.shape[2:]))

    def back(g):
        expanded = np.broadcast_to(
            (g / n_spatial)[:, :, None, None, None], x.data.shape
        )
        return (np.ascontiguousarray(expanded),)

    return _make(x.data.mean(axis=(2, 3, 4)), (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if len(parts) < 2:
        raise ValueError("concat needs at least two tensors")
    base = parts[0].data.shape
    for p in parts[1:]:
        if p.data.ndim != len(base) or p.data.shape[0] != base[0] or p.data.shape[2:] != base[2:]:
            raise ValueError("concat inputs must agree on all dims except channels")
    widths = [p.data.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, back)


# ---------------------------------------------------------------------------
# linear layers


def dense(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Fully connected: (N, F) @ (F, M) + (M,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ValueError(f"dense shapes incompatible: {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data
    parents = [x, w]
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ValueError("bias shape must be (fan_out,)")
        out = out + b.data
        parents.append(b)

    def back(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, back)


# ---------------------------------------------------------------------------
# 3D convolution and friends


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected an int or 3 ints, got {v!r}")
    return t


def conv3d(x: Tensor, w: Tensor, b: Tensor | None, stride=1, padding=0) -> Tensor:
    """Direct 3D cross-correlation with zero padding.

    Output spatial extent per axis is floor((in + 2*pad - k)/stride) + 1.
    Implemented as a vectorized accumulation over kernel offsets.
    """
    st = _triple(stride)
    pd = _triple(padding)
    if any(s < 1 for s in st) or any(p < 0 for p in pd):
        raise ValueError(f"bad stride {st} or padding {pd}")
    n, cin, dx, dy, dz = x.data.shape
    cout, cin_w, kx, ky, kz = w.data.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels but kernel expects {cin_w}")
    out_sp = tuple(
        (d + 2 * p - k) // s + 1 for d, p, k, s in zip((dx, dy, dz), pd, (kx, ky, kz), st)
    )
    if any(o < 1 for o in out_sp):
        raise ValueError(f"kernel {(kx, ky, kz)} larger than padded input {(dx, dy, dz)}")
    ox, oy, oz = out_sp
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd[0], pd[0]), (pd[1], pd[1]), (pd[2], pd[2])))
    out = np.zeros((n, cout, ox, oy, oz), dtype=x.data.dtype)
    for a in range(kx):
        for bb in range(ky):
            for c in range(kz):
                patch = xp[
                    :,
                    :,
                    a : a + st[0] * ox : st[0],
                    bb : bb + st[1] * oy : st[1],
                    c : c + st[2] * oz : st[2],
                ]
                out += np.einsum("ncxyz,oc->noxyz", patch, w.data[:, :, a, bb, c], optimize=True)
    parents = [x, w]
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError("conv bias shape must be (out_channels,)")
        out += b.data.reshape(1, cout, 1, 1, 1)
        parents.append(b)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for a in range(kx):
            for bb in range(ky):
                for c in range(kz):
                    sl = (
                        slice(None),
                        slice(None),
                        slice(a, a + st[0] * ox, st[0]),
                        slice(bb, bb + st[1] * oy, st[1]),
                        slice(c, c + st[2] * oz, st[2]),
                    )
                    patch = xp[sl]
                    gw[:, :, a, bb, c] = np.einsum("noxyz,ncxyz->oc", g, patch, optimize=True)
                    gxp[sl] += np.einsum("noxyz,oc->ncxyz", g, w.data[:, :, a, bb, c], optimize=True)
        gx = gxp[
            :, :, pd[0] : pd[0] + dx, pd[1] : pd[1] + dy, pd[2] : pd[2] + dz
        ]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _make(out, parents, back)


def conv3d_transpose(x: Tensor, w: Tensor, b: Tensor | None, factor=2) -> Tensor:
    """Transposed convolution restricted to kernel == stride (non-overlapping).

    Weight layout is (in_channels, out_channels, kx, ky, kz); output spatial
    extent is the input extent times the factor on each axis.
    """
    ft = _triple(factor)
    n, cin, dx, dy, dz = x.data.shape
    cin_w, cout, kx, ky, kz = w.data.shape
    if cin != cin_w:
        raise ValueError(f"input has {cin} channels but kernel expects {cin_w}")
    if (kx, ky, kz) != ft:
        raise ValueError(f"kernel {(kx, ky, kz)} must equal the stride factor {ft}")
    out = np.zeros((n, cout, dx * kx, dy * ky, dz * kz), dtype=x.data.dtype)
    for a in range(kx):
        for bb in range(ky):
            for c in range(kz):
                out[:, :, a :: kx, bb :: ky, c :: kz] = np.einsum(
                    "ncxyz,co->noxyz", x.data, w.data[:, :, a, bb, c], optimize=True
                )
    parents = [x, w]
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError("bias shape must be (out_channels,)")
        out += b.data.reshape(1, cout, 1, 1, 1)
        parents.append(b)

    def back(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for a in range(kx):
            for bb in range(ky):
                for c in range(kz):
                    gs = g[:, :, a :: kx, bb :: ky, c :: kz]
                    gx += np.einsum("noxyz,co->ncxyz", gs, w.data[:, :, a, bb, c], optimize=True)
                    gw[:, :, a, bb, c] = np.einsum("ncxyz,noxyz->co", x.data, gs, optimize=True)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)

    return _make(out, parents, back)


def maxpool3d(x: Tensor, factor=2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    ft = _triple(factor)
    n, c, dx, dy, dz = x.data.shape
    if dx % ft[0] or dy % ft[1] or dz % ft[2]:
        raise ValueError(f"spatial dims {(dx, dy, dz)} not divisible by pool factor {ft}")
    ox, oy, oz = dx // ft[0], dy // ft[1], dz // ft[2]
    windows = (
        x.data.reshape(n, c, ox, ft[0], oy, ft[1], oz, ft[2])
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, ox, oy, oz, ft[0] * ft[1] * ft[2])
    )
    idx = windows.argmax(axis=-1)
    if _PATTERN_TRACE:
        _PATTERN_TRACE[-1].append(idx)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, c, ox, oy, oz, ft[0], ft[1], ft[2])
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x.data.shape)
        )
        return (gx,)

    return _make(out, (x,), back)


def upsample3d(x: Tensor, factor=2) -> Tensor:
    """Nearest-neighbor upsampling by integer factors."""
    ft = _triple(factor)
    n, c, dx, dy, dz = x.data.shape
    out = x.data.repeat(ft[0], axis=2).repeat(ft[1], axis=3).repeat(ft[2], axis=4)

    def back(g):
        gx = g.reshape(n, c, dx, ft[0], dy, ft[1], dz, ft[2]).sum(axis=(3, 5, 7))
        return (gx,)

    return _make(out, (x,), back)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (batch, spatial) positions.

    TRAIN mode normalizes with biased batch statistics and folds them into
    the running buffers as running = (1 - momentum) * running + momentum *
    batch.  EVAL mode uses the running buffers as constants.  A TRAIN batch
    of size < 2 is an error.
    """
    if x.data.ndim != 5:
        raise ValueError(f"batchnorm expects rank 5, got rank {x.data.ndim}")
    n, c = x.data.shape[:2]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("gamma and beta must have shape (channels,)")
    bc = (1, c, 1, 1, 1)
    if training:
        if n < 2:
            raise ValueError("batchnorm in TRAIN mode needs a batch of size >= 2")
        axes = (0, 2, 3, 4)
        m = x.data.mean(axis=axes)
        v = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(v + eps)
        xhat = (x.data - m.reshape(bc)) * inv_std.reshape(bc)
        out = gamma.data.reshape(bc) * xhat + beta.data.reshape(bc)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * m
        running_var[:] = (1.0 - momentum) * running_var + momentum * v
        count = x.data.size // c

        def back(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gx = (
                gamma.data.reshape(bc)
                * inv_std.reshape(bc)
                / count
                * (count * g - gbeta.reshape(bc) - xhat * ggamma.reshape(bc))
            )
            return (gx.astype(x.data.dtype), ggamma, gbeta)

        return _make(out.astype(x.data.dtype), (x, gamma, beta), back)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(bc)) * inv_std.reshape(bc)
    out = gamma.data.reshape(bc) * xhat + beta.data.reshape(bc)

    def back_eval(g):
        gx = g * (gamma.data * inv_std).reshape(bc)
        return (gx.astype(x.data.dtype), (g * xhat).sum(axis=(0, 2, 3, 4)), g.sum(axis=(0, 2, 3, 4)))

    return _make(out.astype(x.data.dtype), (x, gamma, beta), back_eval)
