"""Dataset-specific anchor-free detection heads over BEV features.

Each dataset gets its own 1x1 class-heatmap and box-regression convolutions.
Training uses a penalty-reduced focal loss on Gaussian center heatmaps plus
L1 regression at positive cells; decoding runs peak picking and greedy
rotated NMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import RegistryError
from .geometry import Box3D, Range3D, normalize_yaw, rotated_iou_bev

REG_CHANNELS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw
LOG_EPS = 1e-12


@dataclass
class BEVGeometry:
    range: Range3D
    cell_size: float
    grid_h: int
    grid_w: int

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        col = min(int((x - self.range.x_min) / self.cell_size), self.grid_w - 1)
        row = min(int((y - self.range.y_min) / self.cell_size), self.grid_h - 1)
        return row, col

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.range.x_min + (col + 0.5) * self.cell_size,
            self.range.y_min + (row + 0.5) * self.cell_size,
        )


@dataclass
class HeadParams:
    """One dataset-specific head: heatmap and regression 1x1 convolutions."""

    heat_k: T.Tensor  # [K, C, 1, 1]
    heat_b: T.Tensor  # [K]
    reg_k: T.Tensor  # [8, C, 1, 1]
    reg_b: T.Tensor  # [8]

    @staticmethod
    def create(channels: int, n_classes: int, rng: np.random.Generator) -> "HeadParams":
        def init(shape, fan_in):
            return T.Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

        # bias the heatmap towards background so early training is stable
        heat_b = T.Tensor(np.full(n_classes, -2.19), requires_grad=True)
        return HeadParams(
            heat_k=init((n_classes, channels, 1, 1), channels),
            heat_b=heat_b,
            reg_k=init((REG_CHANNELS, channels, 1, 1), channels),
            reg_b=T.zeros(REG_CHANNELS, requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, T.Tensor]:
        return {
            f"{prefix}.heat_k": self.heat_k,
            f"{prefix}.heat_b": self.heat_b,
            f"{prefix}.reg_k": self.reg_k,
            f"{prefix}.reg_b": self.reg_b,
        }


@dataclass
class TargetMap:
    heatmap: np.ndarray  # [K, H, W] in [0, 1]
    regression: np.ndarray  # [8, H, W]
    positive: np.ndarray  # [K, H, W] bool, one peak cell per gt box


def gaussian_sigma(box: Box3D, cell_size: float) -> float:
    """Heatmap spread: one sixth of the box footprint in cells, floored."""
    return max(max(box.l, box.w) / cell_size / 6.0, 0.7)


def build_targets(gt: list[Box3D], geom: BEVGeometry, n_classes: int) -> TargetMap:
    """Gaussian center heatmap (peak exactly 1) plus per-peak regression."""
    heat = np.zeros((n_classes, geom.grid_h, geom.grid_w))
    reg = np.zeros((REG_CHANNELS, geom.grid_h, geom.grid_w))
    pos = np.zeros((n_classes, geom.grid_h, geom.grid_w), dtype=bool)
    for b in gt:
        row, col = geom.cell_of(b.cx, b.cy)
        sigma = gaussian_sigma(b, geom.cell_size)
        radius = int(math.ceil(3.0 * sigma))
        r0, r1 = max(row - radius, 0), min(row + radius + 1, geom.grid_h)
        c0, c1 = max(col - radius, 0), min(col + radius + 1, geom.grid_w)
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        g = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * sigma * sigma))
        heat[b.class_id, r0:r1, c0:c1] = np.maximum(heat[b.class_id, r0:r1, c0:c1], g)
        heat[b.class_id, row, col] = 1.0
        pos[b.class_id, row, col] = True
        cx, cy = geom.cell_center(row, col)
        reg[:, row, col] = [
            b.cx - cx,
            b.cy - cy,
            b.cz,
            math.log(b.l),
            math.log(b.w),
            math.log(b.h),
            math.sin(b.yaw),
            math.cos(b.yaw),
        ]
    return TargetMap(heat, reg, pos)


def head_forward(features: T.Tensor, head: HeadParams) -> tuple[T.Tensor, T.Tensor]:
    """Raw (pre-sigmoid) heatmap logits and regression maps."""
    return (
        T.conv2d(features, head.heat_k, head.heat_b),
        T.conv2d(features, head.reg_k, head.reg_b),
    )


def head_loss(
    heat_logits: T.Tensor,
    reg_pred: T.Tensor,
    targets: list[TargetMap] | TargetMap,
    reg_weight: float = 2.0,
) -> T.Tensor:
    """Penalty-reduced focal loss + positive-cell L1, normalized by positives."""
    if isinstance(targets, TargetMap):
        targets = [targets]
    heat_t = np.stack([t.heatmap for t in targets])
    reg_t = np.stack([t.regression for t in targets])
    pos = np.stack([t.positive for t in targets])
    if heat_logits.ndim == 3:
        heat_t, reg_t, pos = heat_t[0], reg_t[0], pos[0]
    n_pos = max(int(pos.sum()), 1)

    p = T.sigmoid(heat_logits)
    pos_f = pos.astype(np.float64)
    neg_f = 1.0 - pos_f
    log_p = T.log(T.add(p, LOG_EPS))
    log_q = T.log(T.add(T.mul(p, -1.0), 1.0 + LOG_EPS))
    one_minus_p = T.add(T.mul(p, -1.0), 1.0)
    pos_term = T.mul(T.mul(T.pow_const(one_minus_p, 2.0), log_p), T.Tensor(pos_f))
    neg_weight = (1.0 - heat_t) ** 4 * neg_f
    neg_term = T.mul(T.mul(T.pow_const(p, 2.0), log_q), T.Tensor(neg_weight))
    cls_loss = T.mul(T.add(T.tsum(pos_term), T.tsum(neg_term)), -1.0 / n_pos)

    # broadcast the per-class positive mask down to cell granularity
    pos_cells = pos.any(axis=-3, keepdims=True).astype(np.float64)
    reg_mask = np.broadcast_to(pos_cells, reg_t.shape).copy()
    diff = T.absolute(T.mul(T.add(reg_pred, -T.Tensor(reg_t)), T.Tensor(reg_mask)))
    reg_loss = T.mul(T.tsum(diff), reg_weight / n_pos)
    return T.add(cls_loss, reg_loss)


def decode(
    heat_logits: np.ndarray,
    reg_pred: np.ndarray,
    geom: BEVGeometry,
    score_thresh: float = 0.3,
    nms_iou: float = 0.1,
    max_detections: int = 64,
) -> list[Box3D]:
    """Peak-pick the sigmoided heatmap and decode boxes with rotated NMS.

    Candidates are 3x3 local maxima above threshold; ties in score break
    deterministically by (cell index, class). NMS is greedy per class.
    """
    scores = 1.0 / (1.0 + np.exp(-heat_logits))
    k, h, w = scores.shape
    pad = np.pad(scores, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    local_max = scores >= win.max(axis=(-1, -2)) - 1e-15
    cand = np.argwhere(local_max & (scores >= score_thresh))

    entries = []
    for cls, row, col in cand:
        score = scores[cls, row, col]
        entries.append((-score, row * geom.grid_w + col, cls, row, col))
    entries.sort()

    boxes: list[Box3D] = []
    for neg_score, _, cls, row, col in entries[: max_detections * 4]:
        dx, dy, z, ll, lw, lh, sy, cy_ = reg_pred[:, row, col]
        ccx, ccy = geom.cell_center(row, col)
        box = Box3D(
            cx=ccx + dx,
            cy=ccy + dy,
            cz=z,
            l=float(np.exp(np.clip(ll, -4, 4))),
            w=float(np.exp(np.clip(lw, -4, 4))),
            h=float(np.exp(np.clip(lh, -4, 4))),
            yaw=normalize_yaw(math.atan2(sy, cy_)),
            class_id=int(cls),
            score=float(-neg_score),
        )
        if any(
            kept.class_id == box.class_id and rotated_iou_bev(kept, box) > nms_iou
            for kept in boxes
        ):
            continue
        boxes.append(box)
        if len(boxes) >= max_detections:
            break
    return boxes


def route_to_head(heads: dict[int, HeadParams], dataset_id: int) -> HeadParams:
    if dataset_id not in heads:
        raise RegistryError(f"no detection head registered for dataset {dataset_id}")
    return heads[dataset_id]


def detections_to_text(records: list[tuple[str, str, Box3D]]) -> str:
    """One record per line: frame_id dataset class score cx cy cz l w h yaw."""
    lines = []
    for frame_id, dataset, b in records:
        lines.append(
            f"{frame_id} {dataset} {b.class_id} {b.score:.6f} "
            f"{b.cx:.6f} {b.cy:.6f} {b.cz:.6f} {b.l:.6f} {b.w:.6f} {b.h:.6f} {b.yaw:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")
