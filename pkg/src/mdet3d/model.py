"""The composed multi-dataset detector.

Pipeline per batch: harmonize (range crop, origin shift) -> pillarize ->
shared encoder with per-layer statistics alignment -> optional
coupling/recoupling across datasets -> dataset-specific heads. The model
owns its preprocessing configuration so a checkpoint reproduces evaluation
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coupling, tensor as T
from .datasets import DatasetSpec, Frame
from .encoder import EncoderParams, encode_pillar_features, grid_shape, pillarize
from .errors import ConfigError, RegistryError
from .geometry import Box3D, PointCloud, Range3D, crop_to_range, shift_origin
from .heads import BEVGeometry, HeadParams, build_targets, head_forward, head_loss
from .norm import POOLED_ID, DatasetNormState, dsnorm_forward

NORM_LAYERS = ("pillar", "conv1", "conv2")


@dataclass
class ModelConfig:
    channels: int = 16
    n_classes: int = 3
    grid_size: int = 32
    max_points_per_pillar: int = 8
    se_reduction: int = 4
    norm_eps: float = 1e-5
    norm_momentum: float = 0.01
    reg_weight: float = 2.0
    score_thresh: float = 0.3
    nms_iou: float = 0.1
    # harmonization + module toggles (the ablation axes)
    range_align: bool = True
    origin_align: bool = True
    stat_align: bool = True
    cr_enabled: bool = True
    attention_enabled: bool = True
    se_enabled: bool = True
    common_range: Range3D = field(
        default_factory=lambda: Range3D(-12.8, 12.8, -12.8, 12.8, -3.0, 1.0)
    )
    inference_mode: str = "copy"  # "copy" | "mask"


def _square_cell(r: Range3D, grid: int) -> float:
    cx = (r.x_max - r.x_min) / grid
    cy = (r.y_max - r.y_min) / grid
    if abs(cx - cy) > 1e-9:
        raise ConfigError(f"range {r} is not square for a {grid}x{grid} grid")
    return cx


class Model:
    """All trainable state plus the dataset registry."""

    def __init__(self, specs: list[DatasetSpec], cfg: ModelConfig, seed: int = 0):
        if not specs:
            raise ConfigError("at least one dataset spec is required")
        self.cfg = cfg
        self.specs = list(specs)
        self.n_datasets = len(specs)
        rng = np.random.default_rng(seed)
        self.encoder = EncoderParams.create(cfg.channels, rng)
        self.norms = {
            layer: DatasetNormState(cfg.channels, eps=cfg.norm_eps, momentum=cfg.norm_momentum)
            for layer in NORM_LAYERS
        }
        for state in self.norms.values():
            state.register_dataset(POOLED_ID)
            for d in range(self.n_datasets):
                state.register_dataset(d)
        self.cr = (
            coupling.CRParams.create(
                self.n_datasets,
                cfg.channels,
                rng,
                reduction=cfg.se_reduction,
                attention_enabled=cfg.attention_enabled,
                se_enabled=cfg.se_enabled,
            )
            if cfg.cr_enabled
            else None
        )
        self.heads = {
            d: HeadParams.create(cfg.channels, cfg.n_classes, rng)
            for d in range(self.n_datasets)
        }
        self.training = True

    # ------------------------------------------------------------------
    def set_training(self, training: bool) -> None:
        self.training = training
        for state in self.norms.values():
            state.training = training

    def parameters(self) -> dict[str, T.Tensor]:
        params = dict(self.encoder.named())
        for layer, state in self.norms.items():
            params[f"norm.{layer}.gamma"] = state.gamma
            params[f"norm.{layer}.beta"] = state.beta
        if self.cr is not None:
            params.update(self.cr.named())
        for d, head in self.heads.items():
            params.update(head.named(f"head{d}"))
        return params

    # ------------------------------------------------------------------
    def geometry_for(self, dataset_id: int) -> BEVGeometry:
        """Effective BEV geometry after harmonization for one dataset."""
        spec = self.specs[dataset_id]
        base = self.cfg.common_range if self.cfg.range_align else spec.range
        dz = spec.dz_shift if self.cfg.origin_align else 0.0
        r = Range3D(base.x_min, base.x_max, base.y_min, base.y_max, base.z_min + dz, base.z_max + dz)
        cell = _square_cell(r, self.cfg.grid_size)
        h, w = grid_shape(r, cell)
        return BEVGeometry(r, cell, h, w)

    def harmonize(self, frame: Frame) -> tuple[PointCloud, list[Box3D]]:
        """Range crop then origin shift, per the model's alignment toggles."""
        spec = self.specs[frame.dataset_id]
        pc, boxes = frame.pc, frame.gt_boxes
        if self.cfg.range_align:
            pc, boxes = crop_to_range(pc, boxes, self.cfg.common_range)
        else:
            pc, boxes = crop_to_range(pc, boxes, spec.range)
        if self.cfg.origin_align and spec.dz_shift != 0.0:
            pc, boxes = shift_origin(pc, boxes, spec.dz_shift)
        return pc, boxes

    def _normalize(self, x: T.Tensor, layer: str, dataset_ids: np.ndarray) -> T.Tensor:
        state = self.norms[layer]
        if not self.cfg.stat_align:
            return dsnorm_forward(x, POOLED_ID, state)
        parts = []
        for d in np.unique(dataset_ids):
            idx = np.nonzero(dataset_ids == d)[0]
            parts.append((dsnorm_forward(T.gather_rows(x, idx), int(d), state), idx))
        if len(parts) == 1:
            return parts[0][0] if len(parts[0][1]) == x.shape[0] else T.merge_rows(parts, x.shape[0])
        return T.merge_rows(parts, x.shape[0])

    def encode_batch(self, frames: list[Frame]) -> tuple[T.Tensor, np.ndarray]:
        """Harmonize, pillarize and run the shared backbone on a mixed batch."""
        for f in frames:
            if not (0 <= f.dataset_id < self.n_datasets):
                raise RegistryError(f"frame routed to unregistered dataset {f.dataset_id}")
        maps = []
        ids = np.array([f.dataset_id for f in frames], dtype=np.int64)
        for f in frames:
            pc, _ = self.harmonize(f)
            geom = self.geometry_for(f.dataset_id)
            grid = pillarize(pc, geom.range, geom.cell_size, self.cfg.max_points_per_pillar)
            maps.append(encode_pillar_features(grid, self.encoder))
        x = T.stack(maps)
        x = self._normalize(x, "pillar", ids)
        x = T.relu(self._normalize(T.conv2d(x, self.encoder.conv1_k, self.encoder.conv1_b), "conv1", ids))
        x = T.relu(self._normalize(T.conv2d(x, self.encoder.conv2_k, self.encoder.conv2_b), "conv2", ids))
        return x, ids

    def _apply_cr(self, bev: T.Tensor, ids: np.ndarray) -> T.Tensor:
        """Couple/recouple across datasets; mixed batches pair up row-wise."""
        if self.cr is None:
            return bev
        present = np.unique(ids)
        if len(present) == 1:
            d = int(present[0])
            if self.cfg.inference_mode == "mask" and not self.training:
                return coupling.infer_mask(bev, d, self.cr)
            return coupling.infer_copy(bev, d, self.cr)
        counts = {int(d): int((ids == d).sum()) for d in present}
        if len(set(counts.values())) != 1 or len(present) != self.n_datasets:
            raise ConfigError(
                "coupling requires every dataset present with equal group sizes; "
                f"got {counts}"
            )
        idxs = {int(d): np.nonzero(ids == d)[0] for d in present}
        branches = [T.gather_rows(bev, idxs[d]) for d in range(self.n_datasets)]
        recoupled = coupling.couple_recouple(branches, self.cr)
        return T.merge_rows(
            [(recoupled[d], idxs[d]) for d in range(self.n_datasets)], bev.shape[0]
        )

    # ------------------------------------------------------------------
    def total_loss(self, frames: list[Frame]) -> tuple[T.Tensor, dict[int, float]]:
        """Eq.-style summed per-dataset head loss over one mixed batch."""
        bev, ids = self.encode_batch(frames)
        bev = self._apply_cr(bev, ids)
        per_dataset: dict[int, float] = {}
        total: T.Tensor | None = None
        for d in sorted(set(int(i) for i in ids)):
            idx = np.nonzero(ids == d)[0]
            feats = T.gather_rows(bev, idx)
            geom = self.geometry_for(d)
            targets = [
                build_targets(self.harmonize(frames[i])[1], geom, self.cfg.n_classes)
                for i in idx
            ]
            heat, reg = head_forward(feats, self.heads[d])
            loss_d = head_loss(heat, reg, targets, reg_weight=self.cfg.reg_weight)
            per_dataset[d] = loss_d.item()
            total = loss_d if total is None else T.add(total, loss_d)
        assert total is not None
        return total, per_dataset

    def predict(self, frame: Frame, head_id: int | None = None) -> list[Box3D]:
        """Detect boxes on one frame (eval mode), optionally via a donor head."""
        was_training = self.training
        self.set_training(False)
        try:
            bev, ids = self.encode_batch([frame])
            bev = self._apply_cr(bev, ids)
            d = frame.dataset_id if head_id is None else head_id
            if d not in self.heads:
                raise RegistryError(f"no detection head registered for dataset {d}")
            heat, reg = head_forward(T.gather_rows(bev, np.array([0])), self.heads[d])
            from .heads import decode

            return decode(
                heat.data[0],
                reg.data[0],
                self.geometry_for(frame.dataset_id),
                score_thresh=self.cfg.score_thresh,
                nms_iou=self.cfg.nms_iou,
            )
        finally:
            self.set_training(was_training)
