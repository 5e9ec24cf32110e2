import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdet3d.errors import ConfigError
from mdet3d.evalap import RECALL_POSITIONS, evaluate_ap
from mdet3d.geometry import Box3D, iou_3d


def box(cx, cy, score=1.0, class_id=0, l=4.0, w=2.0):
    return Box3D(cx, cy, -0.5, l, w, 1.6, 0.0, class_id, score)


def oracle_ap(detections, ground_truth, class_id, iou_thresh):
    """Independent recomputation: explicit per-rank PR points, then the
    40-position interpolated mean, written as plain loops."""
    gts = {f: [b for b in v if b.class_id == class_id] for f, v in ground_truth.items()}
    n_gt = sum(len(v) for v in gts.values())
    dets = sorted(
        ((b.score, f, b) for f, v in detections.items() for b in v if b.class_id == class_id),
        key=lambda t: -t[0],
    )
    if n_gt == 0:
        return 0.0
    used = {f: [False] * len(v) for f, v in gts.items()}
    flags = []
    for _, f, d in dets:
        best_v, best_i = iou_thresh, -1
        for i, g in enumerate(gts.get(f, [])):
            if used.get(f, [])[i]:
                continue
            v = iou_3d(d, g)
            if v >= best_v:
                best_v, best_i = v, i
        if best_i >= 0:
            used[f][best_i] = True
            flags.append(1)
        else:
            flags.append(0)
    pr = []
    tp = 0
    for k, fl in enumerate(flags, 1):
        tp += fl
        pr.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(1, RECALL_POSITIONS + 1):
        r = i / RECALL_POSITIONS
        cand = [p for rec, p in pr if rec >= r]
        total += max(cand) if cand else 0.0
    return 100.0 * total / RECALL_POSITIONS


class TestExactCases:
    def test_single_true_positive_is_100(self):
        gt = {"0": [box(0, 0)]}
        det = {"0": [box(0, 0, score=0.9)]}
        assert evaluate_ap(det, gt, 0, 0.5) == 100.0

    def test_no_detections_is_zero(self):
        assert evaluate_ap({"0": []}, {"0": [box(0, 0)]}, 0, 0.5) == 0.0

    def test_no_gt_no_det_is_zero_with_warning(self, caplog):
        with caplog.at_level("WARNING"):
            assert evaluate_ap({"0": []}, {"0": []}, 0, 0.5) == 0.0
        assert any("undefined" in r.message for r in caplog.records)

    def test_false_positive_above_tp_halves_early_precision(self):
        gt = {"0": [box(0, 0)]}
        det = {"0": [box(50, 50, score=0.9), box(0, 0, score=0.8)]}
        # recall 1 reached at rank 2 with precision 1/2 at every position
        assert evaluate_ap(det, gt, 0, 0.5) == pytest.approx(50.0)

    def test_one_to_one_matching(self):
        # two detections on one gt: second must be a false positive
        gt = {"0": [box(0, 0)]}
        det = {"0": [box(0, 0, score=0.9), box(0.1, 0, score=0.8)]}
        ap_two = evaluate_ap(det, gt, 0, 0.5)
        assert ap_two == 100.0  # recall hit at rank 1, later FP irrelevant

    def test_class_filtering(self):
        gt = {"0": [box(0, 0, class_id=1)]}
        det = {"0": [box(0, 0, score=0.9, class_id=0)]}
        assert evaluate_ap(det, gt, 1, 0.5) == 0.0
        assert evaluate_ap(det, gt, 0, 0.5) == 0.0

    def test_bev_vs_3d_metric_selection(self):
        g = box(0, 0)
        d = Box3D(0, 0, 5.0, 4, 2, 1.6, 0.0, 0, 0.9)  # no z overlap
        assert evaluate_ap({"0": [d]}, {"0": [g]}, 0, 0.5, metric="BEV") == 100.0
        assert evaluate_ap({"0": [d]}, {"0": [g]}, 0, 0.5, metric="3D") == 0.0

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            evaluate_ap({}, {"0": [box(0, 0)]}, 0, 0.5, metric="2D")


def random_instance(rng):
    """A random eval problem: up to 20 detections over up to 3 frames."""
    frames = [str(i) for i in range(rng.integers(1, 4))]
    gt, det = {}, {}
    for f in frames:
        gt[f] = [
            box(rng.uniform(-10, 10), rng.uniform(-10, 10))
            for _ in range(rng.integers(0, 4))
        ]
        det[f] = []
    n_det = int(rng.integers(1, 21))
    for _ in range(n_det):
        f = frames[rng.integers(0, len(frames))]
        if gt[f] and rng.random() < 0.6:
            g = gt[f][rng.integers(0, len(gt[f]))]
            det[f].append(box(g.cx + rng.uniform(-1, 1), g.cy + rng.uniform(-0.5, 0.5),
                              score=float(rng.random())))
        else:
            det[f].append(box(rng.uniform(-10, 10), rng.uniform(-10, 10),
                              score=float(rng.random())))
    return det, gt


class TestOracle:
    def test_matches_exhaustive_oracle_100_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            det, gt = random_instance(rng)
            got = evaluate_ap(det, gt, 0, 0.25, metric="3D")
            want = oracle_ap(det, gt, 0, 0.25)
            assert got == pytest.approx(want, abs=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_ap_bounded(self, seed):
        rng = np.random.default_rng(seed)
        det, gt = random_instance(rng)
        ap = evaluate_ap(det, gt, 0, 0.25, metric="BEV")
        assert 0.0 <= ap <= 100.0

    def test_monotone_in_extra_false_positives_at_bottom(self):
        rng = np.random.default_rng(7)
        det, gt = random_instance(rng)
        base = evaluate_ap(det, gt, 0, 0.25, metric="BEV")
        worse = {f: list(v) for f, v in det.items()}
        f0 = next(iter(worse))
        worse[f0] = worse[f0] + [box(99, 99, score=1e-6)]
        # a zero-score FP appended after everything can only lower or keep AP
        assert evaluate_ap(worse, gt, 0, 0.25, metric="BEV") <= base + 1e-12
