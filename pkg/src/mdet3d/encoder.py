"""Point cloud -> BEV feature map.

Pillarization collapses points into vertical columns on a regular x/y grid;
each pillar is encoded by a shared point MLP with symmetric max pooling and
scattered back to its cell, giving the C x H x W interface everything
downstream consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .geometry import PointCloud, Range3D

POINT_FEATURES = 6  # x, y, z, intensity, dx-to-cell-center, dy-to-cell-center


@dataclass
class PillarGrid:
    range: Range3D
    cell_size: float
    grid_h: int
    grid_w: int
    max_points: int
    # non-empty pillars only
    rows: np.ndarray  # [P] cell row (y index)
    cols: np.ndarray  # [P] cell col (x index)
    features: np.ndarray  # [P, max_points, POINT_FEATURES], zero padded
    valid: np.ndarray  # [P, max_points] bool


def grid_shape(r: Range3D, cell_size: float) -> tuple[int, int]:
    h = math.ceil((r.y_max - r.y_min) / cell_size)
    w = math.ceil((r.x_max - r.x_min) / cell_size)
    return h, w


def pillarize(pc: PointCloud, r: Range3D, cell_size: float, max_points: int) -> PillarGrid:
    """Bucket points into pillars; keeps the first max_points per cell."""
    grid_h, grid_w = grid_shape(r, cell_size)
    xyz = pc.xyz
    if len(xyz):
        inside = (
            (xyz[:, 0] >= r.x_min) & (xyz[:, 0] < r.x_max)
            & (xyz[:, 1] >= r.y_min) & (xyz[:, 1] < r.y_max)
            & (xyz[:, 2] >= r.z_min) & (xyz[:, 2] < r.z_max)
        )
        if not inside.all():
            raise ContractError("pillarize requires the cloud cropped to range")
    cols = np.floor((xyz[:, 0] - r.x_min) / cell_size).astype(np.int64)
    rows = np.floor((xyz[:, 1] - r.y_min) / cell_size).astype(np.int64)
    cols = np.minimum(cols, grid_w - 1)
    rows = np.minimum(rows, grid_h - 1)

    cell_key = rows * grid_w + cols
    order = np.argsort(cell_key, kind="stable")  # stable: keeps input order per cell
    keys_sorted = cell_key[order]
    uniq, starts, counts = np.unique(keys_sorted, return_index=True, return_counts=True)

    p = len(uniq)
    feats = np.zeros((p, max_points, POINT_FEATURES))
    valid = np.zeros((p, max_points), dtype=bool)
    urows = (uniq // grid_w).astype(np.int64)
    ucols = (uniq % grid_w).astype(np.int64)
    cx = r.x_min + (ucols + 0.5) * cell_size
    cy = r.y_min + (urows + 0.5) * cell_size
    for i in range(p):
        take = order[starts[i] : starts[i] + min(counts[i], max_points)]
        k = len(take)
        feats[i, :k, 0:3] = xyz[take]
        feats[i, :k, 3] = pc.intensity[take]
        feats[i, :k, 4] = xyz[take, 0] - cx[i]
        feats[i, :k, 5] = xyz[take, 1] - cy[i]
        valid[i, :k] = True
    return PillarGrid(r, cell_size, grid_h, grid_w, max_points, urows, ucols, feats, valid)


@dataclass
class EncoderParams:
    """Shared (dataset-agnostic) encoder weights."""

    pillar_w: T.Tensor  # [POINT_FEATURES, C]
    pillar_b: T.Tensor  # [C]
    conv1_k: T.Tensor  # [C, C, 3, 3]
    conv1_b: T.Tensor  # [C]
    conv2_k: T.Tensor  # [C, C, 3, 3]
    conv2_b: T.Tensor  # [C]

    @staticmethod
    def create(channels: int, rng: np.random.Generator) -> "EncoderParams":
        def he(shape, fan_in):
            return T.Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        return EncoderParams(
            pillar_w=he((POINT_FEATURES, channels), POINT_FEATURES),
            pillar_b=T.zeros(channels, requires_grad=True),
            conv1_k=he((channels, channels, 3, 3), channels * 9),
            conv1_b=T.zeros(channels, requires_grad=True),
            conv2_k=he((channels, channels, 3, 3), channels * 9),
            conv2_b=T.zeros(channels, requires_grad=True),
        )

    def named(self, prefix: str = "encoder") -> dict[str, T.Tensor]:
        return {
            f"{prefix}.pillar_w": self.pillar_w,
            f"{prefix}.pillar_b": self.pillar_b,
            f"{prefix}.conv1_k": self.conv1_k,
            f"{prefix}.conv1_b": self.conv1_b,
            f"{prefix}.conv2_k": self.conv2_k,
            f"{prefix}.conv2_b": self.conv2_b,
        }


def encode_pillar_features(grid: PillarGrid, params: EncoderParams) -> T.Tensor:
    """Per-point MLP + max pool per pillar, scattered to a [C,H,W] map."""
    channels = params.pillar_w.shape[1]
    if grid.rows.size == 0:
        return T.zeros((channels, grid.grid_h, grid.grid_w))
    p, m, _ = grid.features.shape
    flat = T.Tensor(grid.features.reshape(p * m, POINT_FEATURES))
    hidden = T.relu(T.bias_add(T.matmul(flat, params.pillar_w), params.pillar_b))
    pooled = T.masked_max(T.reshape(hidden, (p, m, channels)), grid.valid)
    return T.scatter_to_grid(pooled, grid.rows, grid.cols, (grid.grid_h, grid.grid_w))


def encode_pillars(grids: list[PillarGrid], params: EncoderParams, normalize=None) -> T.Tensor:
    """Full encoder: pillar features, then a two-stage shared 2D backbone.

    `grids` holds one pillar grid per frame of one dataset; the result is a
    batched [N,C,H,W] map. `normalize(x, layer)` hooks in the per-layer
    statistics alignment; by default no normalization is applied.
    """
    if normalize is None:
        normalize = lambda x, layer: x  # noqa: E731
    maps = T.stack([encode_pillar_features(g, params) for g in grids])
    x = normalize(maps, "pillar")
    x = T.relu(normalize(T.conv2d(x, params.conv1_k, params.conv1_b), "conv1"))
    x = T.relu(normalize(T.conv2d(x, params.conv2_k, params.conv2_b), "conv2"))
    return x
