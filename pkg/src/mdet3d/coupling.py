"""Coupling-and-recoupling of per-dataset BEV feature maps.

Couple fuses the N per-dataset maps into one dataset-agnostic shared map
using a spatial foreground mask (channel max) and a per-location dataset
attention (1x1 conv + N-way softmax). Recouple restores a dataset-specific
map via a per-dataset squeeze-excitation gate plus residual. Both
single-dataset inference modes (feature copy, feature mask) route through
the exact training code path so copy-mode stays bitwise consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, RegistryError


@dataclass
class SEBlock:
    w1: T.Tensor  # [C, C//r]
    b1: T.Tensor  # [C//r]
    w2: T.Tensor  # [C//r, C]
    b2: T.Tensor  # [C]


@dataclass
class CRParams:
    n_datasets: int
    channels: int
    mask_conv_k: T.Tensor  # [N, N*C, 1, 1]
    mask_conv_b: T.Tensor  # [N]
    se_blocks: list[SEBlock]
    attention_enabled: bool = True
    se_enabled: bool = True

    @staticmethod
    def create(
        n_datasets: int,
        channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
        attention_enabled: bool = True,
        se_enabled: bool = True,
    ) -> "CRParams":
        if channels % reduction != 0:
            raise ConfigError(f"SE reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction

        def init(shape, fan_in):
            return T.Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        # start the excitation gate nearly closed so each branch initially
        # passes its residual through; the shared-map contribution grows in
        # as training opens the gate
        blocks = [
            SEBlock(
                w1=init((channels, hidden), channels),
                b1=T.zeros(hidden, requires_grad=True),
                w2=init((hidden, channels), hidden),
                b2=T.Tensor(np.full(channels, -3.0), requires_grad=True),
            )
            for _ in range(n_datasets)
        ]
        return CRParams(
            n_datasets=n_datasets,
            channels=channels,
            # zero attention weights make the initial mask exactly uniform;
            # gradients through the conv inputs move it off uniform
            mask_conv_k=T.zeros((n_datasets, n_datasets * channels, 1, 1), requires_grad=True),
            mask_conv_b=T.zeros(n_datasets, requires_grad=True),
            se_blocks=blocks,
            attention_enabled=attention_enabled,
            se_enabled=se_enabled,
        )

    def named(self, prefix: str = "cr") -> dict[str, T.Tensor]:
        out = {}
        if self.attention_enabled:
            out[f"{prefix}.mask_conv_k"] = self.mask_conv_k
            out[f"{prefix}.mask_conv_b"] = self.mask_conv_b
        if self.se_enabled:
            for i, blk in enumerate(self.se_blocks):
                out[f"{prefix}.se{i}.w1"] = blk.w1
                out[f"{prefix}.se{i}.b1"] = blk.b1
                out[f"{prefix}.se{i}.w2"] = blk.w2
                out[f"{prefix}.se{i}.b2"] = blk.b2
        return out


def attention_mask(f_cat: T.Tensor, p: CRParams) -> T.Tensor:
    """Per-location dataset attention: 1x1 conv then N-way softmax."""
    return T.softmax_channel(T.conv2d(f_cat, p.mask_conv_k, p.mask_conv_b))


def couple(f: list[T.Tensor], p: CRParams) -> T.Tensor:
    """Fuse N per-dataset maps into the dataset-agnostic shared map."""
    if len(f) != p.n_datasets:
        raise RegistryError(f"couple expects {p.n_datasets} maps, got {len(f)}")
    for m in f:
        if m.shape != f[0].shape:
            raise DimensionError("couple inputs must share C,H,W")
    if f[0].shape[-3] != p.channels:
        raise DimensionError(
            f"couple channel count {f[0].shape[-3]} != configured {p.channels}"
        )
    f_cat = T.concat_channels(f)
    if p.attention_enabled:
        m_shared = T.channel_max(f_cat)
        attn = attention_mask(f_cat, p)
        shared = None
        for i, f_i in enumerate(f):
            weight = T.mul(T.slice_channel(attn, i), m_shared)
            term = T.spatial_scale(f_i, weight)
            shared = term if shared is None else T.add(shared, term)
    else:
        shared = None
        for f_i in f:
            term = T.mul(f_i, 1.0 / p.n_datasets)
            shared = term if shared is None else T.add(shared, term)
    return shared


def se_gate(shared: T.Tensor, blk: SEBlock) -> T.Tensor:
    """Per-channel sigmoid gate from globally pooled shared features."""
    pooled = T.global_avg_pool(shared)  # [...,C]
    lead = pooled.shape[:-1]
    flat = T.reshape(pooled, (-1, shared.shape[-3]))
    hidden = T.relu(T.bias_add(T.matmul(flat, blk.w1), blk.b1))
    gate = T.sigmoid(T.bias_add(T.matmul(hidden, blk.w2), blk.b2))
    return T.reshape(gate, lead + (shared.shape[-3],))


def recouple(shared: T.Tensor, f_i: T.Tensor, i: int, p: CRParams) -> T.Tensor:
    """Restore a dataset-specific map: SE-gated shared features + residual."""
    if not (0 <= i < p.n_datasets):
        raise RegistryError(f"dataset index {i} out of range for {p.n_datasets} heads")
    if p.se_enabled:
        gate = se_gate(shared, p.se_blocks[i])
        return T.add(T.channel_scale(shared, gate), f_i)
    return T.add(shared, f_i)


def couple_recouple(f: list[T.Tensor], p: CRParams) -> list[T.Tensor]:
    """The full training-path module: one recoupled map per dataset."""
    shared = couple(f, p)
    return [recouple(shared, f_i, i, p) for i, f_i in enumerate(f)]


def infer_copy(f: T.Tensor, i: int, p: CRParams) -> T.Tensor:
    """Single-dataset inference by copying the map to every branch."""
    return couple_recouple([f] * p.n_datasets, p)[i]


def infer_mask(f: T.Tensor, i: int, p: CRParams) -> T.Tensor:
    """Single-dataset inference by zeroing the other branches."""
    branches = [f if j == i else T.zeros(f.shape) for j in range(p.n_datasets)]
    return couple_recouple(branches, p)[i]
