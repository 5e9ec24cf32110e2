"""Average precision over 40 recall positions, BEV and 3D."""

from __future__ import annotations

import logging

from .errors import ConfigError
from .geometry import Box3D, iou_3d, rotated_iou_bev

log = logging.getLogger(__name__)

RECALL_POSITIONS = 40


def evaluate_ap(
    detections: dict[str, list[Box3D]],
    ground_truth: dict[str, list[Box3D]],
    class_id: int,
    iou_thresh: float,
    metric: str = "3D",
) -> float:
    """AP (x100) for one class at one IoU threshold.

    Detections are matched greedily in global score order, one-to-one per
    frame against the highest-IoU unmatched ground truth. AP averages the
    best precision at recall >= r over r in {1/40, ..., 40/40}.
    """
    if metric == "BEV":
        iou = rotated_iou_bev
    elif metric == "3D":
        iou = iou_3d
    else:
        raise ConfigError(f"unknown AP metric {metric!r}")

    gts = {fid: [b for b in boxes if b.class_id == class_id] for fid, boxes in ground_truth.items()}
    n_gt = sum(len(v) for v in gts.values())

    dets = [
        (b.score, fid, b)
        for fid, boxes in detections.items()
        for b in boxes
        if b.class_id == class_id
    ]
    dets.sort(key=lambda t: -t[0])

    if n_gt == 0:
        if not dets:
            log.warning("AP undefined (no gt, no detections); reporting 0")
        return 0.0

    matched: dict[str, set[int]] = {fid: set() for fid in gts}
    tp_flags = []
    for _, fid, box in dets:
        candidates = gts.get(fid, [])
        best, best_i = iou_thresh, -1
        for i, gt in enumerate(candidates):
            if i in matched.get(fid, set()):
                continue
            v = iou(box, gt)
            if v >= best:
                best, best_i = v, i
        if best_i >= 0:
            matched.setdefault(fid, set()).add(best_i)
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    tp = 0
    recalls, precisions = [], []
    for k, flag in enumerate(tp_flags, start=1):
        tp += int(flag)
        recalls.append(tp / n_gt)
        precisions.append(tp / k)

    total = 0.0
    for i in range(1, RECALL_POSITIONS + 1):
        r = i / RECALL_POSITIONS
        best_p = max((p for rec, p in zip(recalls, precisions) if rec >= r), default=0.0)
        total += best_p
    return 100.0 * total / RECALL_POSITIONS
