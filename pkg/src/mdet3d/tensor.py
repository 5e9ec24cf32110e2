"""Dense fp64 tensors with reverse-mode automatic differentiation.

Ops are deliberately few: the elementwise/matmul/conv primitives needed by
the BEV encoder, the normalization layers, the coupling module and the
detection heads. Broadcasting is restricted to bias-style channel vectors
and python scalars so every backward rule stays auditable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, StateError

Array = np.ndarray


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    return arr


class Tensor:
    """A dense fp64 array participating in a reverse-mode gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _make(data: Array, parents: Sequence[Tensor], bwd: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss.

    Every leaf reachable from `loss` with requires_grad receives dLoss/dLeaf
    in its `.grad`. A second backward through the same graph raises.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("backward was already run on this graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backward is None:
            continue
        if node._consumed:
            raise StateError("backward was already run on this graph")
        node._consumed = True
        if node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g: Array) -> None:
        a.accumulate_grad(g if a.shape == out.shape else g.sum())
        b.accumulate_grad(g if b.shape == out.shape else g.sum())

    t = _make(out, (a, b), bwd)
    return t


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(g: Array) -> None:
        ga = g * b.data
        gb = g * a.data
        a.accumulate_grad(ga if a.shape == out.shape else ga.sum())
        b.accumulate_grad(gb if b.shape == out.shape else gb.sum())

    return _make(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * mask)

    return _make(x.data * mask, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * s * (1.0 - s))

    return _make(s, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * e)

    return _make(e, (x,), bwd)


def log(x: Tensor) -> Tensor:
    def bwd(g: Array) -> None:
        x.accumulate_grad(g / x.data)

    return _make(np.log(x.data), (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * sign)

    return _make(np.abs(x.data), (x,), bwd)


def pow_const(x: Tensor, p: float) -> Tensor:
    out = x.data ** p

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * p * x.data ** (p - 1.0))

    return _make(out, (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    def bwd(g: Array) -> None:
        x.accumulate_grad(np.full_like(x.data, g))

    return _make(np.asarray(x.data.sum()), (x,), bwd)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g: Array) -> None:
        x.accumulate_grad(np.full_like(x.data, g / n))

    return _make(np.asarray(x.data.mean()), (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bwd(g: Array) -> None:
        x.accumulate_grad(g.reshape(old))

    return _make(x.data.reshape(shape), (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects rank-2 tensors")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def bwd(g: Array) -> None:
        a.accumulate_grad(g @ b.data.T)
        b.accumulate_grad(a.data.T @ g)

    return _make(out, (a, b), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector over the last axis (the one sanctioned broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add shapes incompatible: {x.shape} + {b.shape}")
    out = x.data + b.data

    def bwd(g: Array) -> None:
        x.accumulate_grad(g)
        b.accumulate_grad(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops (channel axis is -3: [C,H,W] or [N,C,H,W])
# ---------------------------------------------------------------------------

def _spatial(x: Tensor) -> None:
    if x.ndim not in (3, 4):
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded stride-1 cross-correlation preserving H and W."""
    from .errors import ConfigError

    _spatial(x)
    co, ci, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != ci:
        raise DimensionError(f"conv2d channels: input {xd.shape[1]} vs kernel {ci}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", win, kernel.data, optimize=True)
    out += bias.data[None, :, None, None]

    def bwd(g: Array) -> None:
        gd = g[None] if squeeze else g
        dk = np.einsum("nchwij,nohw->ocij", win, gd, optimize=True)
        gp = np.pad(gd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
        kf = kernel.data[:, :, ::-1, ::-1]
        dx = np.einsum("nohwij,ocij->nchw", gwin, kf, optimize=True)
        x.accumulate_grad(dx[0] if squeeze else dx)
        kernel.accumulate_grad(dk)
        bias.accumulate_grad(gd.sum(axis=(0, 2, 3)))

    return _make(out[0] if squeeze else out, (x, kernel, bias), bwd)


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the channel axis, per spatial location."""
    _spatial(x)
    z = x.data - x.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-3, keepdims=True)

    def bwd(g: Array) -> None:
        dot = (g * s).sum(axis=-3, keepdims=True)
        x.accumulate_grad(s * (g - dot))

    return _make(s, (x,), bwd)


def channel_max(x: Tensor) -> Tensor:
    """Max over channels; gradient routes to the first argmax channel."""
    _spatial(x)
    idx = np.argmax(x.data, axis=-3)
    out = np.take_along_axis(x.data, idx[..., None, :, :], axis=-3)

    def bwd(g: Array) -> None:
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx[..., None, :, :], g, axis=-3)
        x.accumulate_grad(dx)

    return _make(out, (x,), bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_channels needs at least one input")
    for p in parts:
        _spatial(p)
        if p.shape[-2:] != parts[0].shape[-2:] or p.ndim != parts[0].ndim:
            raise DimensionError("concat_channels spatial shapes differ")
    sizes = [p.shape[-3] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-3)
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[-3] = slice(lo, hi)
            p.accumulate_grad(g[tuple(sl)])

    return _make(out, tuple(parts), bwd)


def slice_channel(x: Tensor, i: int) -> Tensor:
    """Select channel i, keeping a singleton channel axis."""
    _spatial(x)
    sl = [slice(None)] * x.ndim
    sl[-3] = slice(i, i + 1)
    sl = tuple(sl)

    def bwd(g: Array) -> None:
        dx = np.zeros_like(x.data)
        dx[sl] = g
        x.accumulate_grad(dx)

    return _make(x.data[sl], (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing H, W axes: [...,C,H,W] -> [...,C]."""
    _spatial(x)
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-1, -2))

    def bwd(g: Array) -> None:
        x.accumulate_grad(np.broadcast_to(g[..., None, None], x.shape) / (h * w))

    return _make(out, (x,), bwd)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift: x * gamma[c] + beta[c]."""
    _spatial(x)
    c = x.shape[-3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("channel_affine parameter shapes must be [C]")
    ex = (...,) + (None, None)
    out = x.data * gamma.data[ex] + beta.data[ex]
    red = tuple(i for i in range(x.ndim) if i != x.ndim - 3)

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * gamma.data[ex])
        gamma.accumulate_grad((g * x.data).sum(axis=red))
        beta.accumulate_grad(g.sum(axis=red))

    return _make(out, (x, gamma, beta), bwd)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale each channel map by a per-channel gate ([C] or [N,C])."""
    _spatial(x)
    if s.shape != x.shape[:-2]:
        raise DimensionError(f"channel_scale gate shape {s.shape} != {x.shape[:-2]}")
    out = x.data * s.data[..., None, None]

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * s.data[..., None, None])
        s.accumulate_grad((g * x.data).sum(axis=(-1, -2)))

    return _make(out, (x, s), bwd)


def spatial_scale(x: Tensor, m: Tensor) -> Tensor:
    """Scale all channels by a one-channel spatial map ([...,1,H,W])."""
    _spatial(x)
    _spatial(m)
    if m.shape[-3] != 1 or m.shape[-2:] != x.shape[-2:] or m.ndim != x.ndim:
        raise DimensionError(f"spatial_scale map shape {m.shape} vs {x.shape}")
    out = x.data * m.data

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * m.data)
        m.accumulate_grad((g * x.data).sum(axis=-3, keepdims=True))

    return _make(out, (x, m), bwd)


def normalize_channels(x: Tensor, eps: float) -> tuple[Tensor, Array, Array]:
    """Normalize to zero mean / unit variance per channel over batch+spatial.

    Returns (x_hat, batch_mean, biased_batch_var); the statistics are plain
    arrays for the caller's running-estimate bookkeeping.
    """
    _spatial(x)
    red = tuple(i for i in range(x.ndim) if i != x.ndim - 3)
    n = int(np.prod([x.shape[i] for i in red]))
    if n < 2:
        raise ContractError("normalization needs >= 2 samples per channel")
    mean = x.data.mean(axis=red)
    var = x.data.var(axis=red)
    ex = (...,) + (None, None) if x.ndim == 3 else (None, slice(None), None, None)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[ex]) * inv[ex]

    def bwd(g: Array) -> None:
        gsum = g.sum(axis=red)
        gdot = (g * xhat).sum(axis=red)
        dx = inv[ex] * (g - (gsum[ex] + xhat * gdot[ex]) / n)
        x.accumulate_grad(dx)

    return _make(xhat, (x,), bwd), mean, var


def affine_channels(x: Tensor, scale: Array, shift: Array) -> Tensor:
    """Constant per-channel affine (eval-mode normalization, no stat grads)."""
    _spatial(x)
    ex = (...,) + (None, None) if x.ndim == 3 else (None, slice(None), None, None)
    out = x.data * scale[ex] + shift[ex]

    def bwd(g: Array) -> None:
        x.accumulate_grad(g * scale[ex])

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# pillar-specific ops
# ---------------------------------------------------------------------------

def masked_max(x: Tensor, valid: Array) -> Tensor:
    """Max over axis 1 of [P,M,C] restricted to valid[P,M] entries."""
    if x.ndim != 3 or valid.shape != x.shape[:2]:
        raise DimensionError("masked_max expects x=[P,M,C], valid=[P,M]")
    neg = np.where(valid[:, :, None], x.data, -np.inf)
    idx = np.argmax(neg, axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]
    any_valid = valid.any(axis=1)
    out = np.where(any_valid[:, None], out, 0.0)

    def bwd(g: Array) -> None:
        dx = np.zeros_like(x.data)
        gm = np.where(any_valid[:, None], g, 0.0)
        np.put_along_axis(dx, idx[:, None, :], gm[:, None, :], axis=1)
        x.accumulate_grad(dx)

    return _make(out, (x,), bwd)


def scatter_to_grid(feat: Tensor, rows: Array, cols: Array, hw: tuple[int, int]) -> Tensor:
    """Scatter per-pillar features [P,C] into a zero-initialized [C,H,W] map."""
    if feat.ndim != 2 or rows.shape != cols.shape or rows.shape != (feat.shape[0],):
        raise DimensionError("scatter_to_grid expects feat=[P,C] with P indices")
    h, w = hw
    c = feat.shape[1]
    out = np.zeros((c, h, w))
    np.add.at(out, (slice(None), rows, cols), feat.data.T)

    def bwd(g: Array) -> None:
        feat.accumulate_grad(g[:, rows, cols].T)

    return _make(out, (feat,), bwd)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not parts:
        raise DimensionError("stack needs at least one input")
    for p in parts:
        if p.shape != parts[0].shape:
            raise DimensionError("stack shapes differ")
    out = np.stack([p.data for p in parts])

    def bwd(g: Array) -> None:
        for i, p in enumerate(parts):
            p.accumulate_grad(g[i])

    return _make(out, tuple(parts), bwd)


def gather_rows(x: Tensor, idx: Array) -> Tensor:
    """Select rows along the leading axis (distinct indices)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g: Array) -> None:
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x.accumulate_grad(dx)

    return _make(x.data[idx], (x,), bwd)


def merge_rows(parts: Sequence[tuple[Tensor, Array]], total: int) -> Tensor:
    """Inverse of gather_rows: place row groups back at their batch indices."""
    if not parts:
        raise DimensionError("merge_rows needs at least one part")
    tail = parts[0][0].shape[1:]
    out = np.zeros((total,) + tail)
    for part, idx in parts:
        if part.shape[1:] != tail:
            raise DimensionError("merge_rows parts have mismatched shapes")
        out[np.asarray(idx, dtype=np.int64)] = part.data

    def bwd(g: Array) -> None:
        for part, idx in parts:
            part.accumulate_grad(g[np.asarray(idx, dtype=np.int64)])

    return _make(out, tuple(p for p, _ in parts), bwd)


def unstack(x: Tensor, i: int) -> Tensor:
    """Select slice i along the leading axis, keeping the graph connected."""
    def bwd(g: Array) -> None:
        dx = np.zeros_like(x.data)
        dx[i] = g
        x.accumulate_grad(dx)

    return _make(x.data[i], (x,), bwd)
