import math
import struct

import numpy as np
import pytest

from mdet3d.datasets import (
    COMMON_CLASSES,
    DatasetSpec,
    Frame,
    SizeDistribution,
    SyntheticDomainConfig,
    TaxonomyMapper,
    assemble_kitti_frame,
    frame_from_bytes,
    frame_to_bytes,
    generate_synthetic_frame,
    kitti_record_to_lidar,
    map_taxonomy,
    read_kitti_calib,
    read_kitti_label,
    read_kitti_velodyne,
    size_histograms,
    write_kitti_velodyne,
)
from mdet3d.errors import FormatError
from mdet3d.geometry import Box3D, PointCloud, Range3D

RANGE = Range3D(-12.8, 12.8, -12.8, 12.8, -3.0, 1.5)

IDENTITY_CALIB = (
    "Tr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n"
    "R0_rect: 1 0 0 0 1 0 0 0 1\n"
)

LABEL_LINE = "Car 0.0 0 -1.5 100 100 200 200 1.5 1.8 4.2 2.0 1.0 10.0 -1.2"


class TestVelodyne:
    def test_single_point(self):
        raw = struct.pack("<4f", 1.0, 2.0, 3.0, 0.5)
        pc = read_kitti_velodyne(raw)
        assert pc.n == 1
        np.testing.assert_allclose(pc.xyz[0], [1.0, 2.0, 3.0])
        assert pc.intensity[0] == 0.5

    def test_empty(self):
        assert read_kitti_velodyne(b"").n == 0

    def test_bad_length(self):
        with pytest.raises(FormatError):
            read_kitti_velodyne(b"\x00" * 15)

    def test_non_finite_rejected(self):
        raw = struct.pack("<4f", float("nan"), 0, 0, 0)
        with pytest.raises(FormatError):
            read_kitti_velodyne(raw)

    def test_parse_serialize_roundtrip(self):
        rng = np.random.default_rng(0)
        raw = rng.uniform(-50, 50, size=(64, 4)).astype("<f4").tobytes()
        assert write_kitti_velodyne(read_kitti_velodyne(raw)) == raw


class TestLabels:
    def test_fixture_line(self):
        recs = read_kitti_label(LABEL_LINE + "\n")
        assert len(recs) == 1
        assert recs[0].raw_label == "Car"
        assert recs[0].l == 4.2
        assert recs[0].rotation_y == -1.2

    def test_wrong_field_count(self):
        with pytest.raises(FormatError, match="line 2"):
            read_kitti_label(LABEL_LINE + "\nCar 1 2 3\n")

    def test_unparseable_float(self):
        bad = LABEL_LINE.replace("4.2", "abc")
        with pytest.raises(FormatError):
            read_kitti_label(bad)

    def test_dontcare_excluded_from_frame(self):
        label = LABEL_LINE + "\nDontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n"
        spec = DatasetSpec("kitti", RANGE, taxonomy={"Car": 0})
        frame = assemble_kitti_frame(0, "000000", b"", label, IDENTITY_CALIB, spec)
        assert len(frame.gt_boxes) == 1


class TestCalib:
    def test_identity(self):
        t = read_kitti_calib(IDENTITY_CALIB)
        np.testing.assert_allclose(t.matrix, np.eye(4), atol=1e-12)

    def test_pure_translation_inverted(self):
        calib = (
            "Tr_velo_to_cam: 1 0 0 2 0 1 0 -3 0 0 1 0.5\n"
            "R0_rect: 1 0 0 0 1 0 0 0 1\n"
        )
        t = read_kitti_calib(calib)
        np.testing.assert_allclose(t.apply(np.array([2.0, -3.0, 0.5])), [0.0, 0.0, 0.0], atol=1e-12)

    def test_missing_key(self):
        with pytest.raises(FormatError):
            read_kitti_calib("R0_rect: 1 0 0 0 1 0 0 0 1\n")

    def test_random_rigid_roundtrip(self):
        rng = np.random.default_rng(1)
        angles = rng.uniform(-1, 1, 3)

        def rot(axis, a):
            c, s = math.cos(a), math.sin(a)
            m = np.eye(3)
            i, j = [(1, 2), (0, 2), (0, 1)][axis]
            m[i, i] = c
            m[j, j] = c
            m[i, j] = -s if axis != 1 else s
            m[j, i] = s if axis != 1 else -s
            return m

        r = rot(0, angles[0]) @ rot(1, angles[1]) @ rot(2, angles[2])
        tvec = rng.uniform(-5, 5, 3)
        tr_line = " ".join(f"{v:.12f}" for row in np.column_stack([r, tvec]) for v in row)
        calib = f"Tr_velo_to_cam: {tr_line}\nR0_rect: 1 0 0 0 1 0 0 0 1\n"
        cam_to_lidar = read_kitti_calib(calib)
        pts = rng.uniform(-10, 10, size=(5, 3))
        cam_pts = pts @ r.T + tvec
        np.testing.assert_allclose(cam_to_lidar.apply(cam_pts), pts, atol=1e-10)

    def test_label_to_lidar_with_identity_calib(self):
        rec = read_kitti_label(LABEL_LINE)[0]
        box = kitti_record_to_lidar(rec, read_kitti_calib(IDENTITY_CALIB))
        # bottom center lifted by h/2
        assert box.cz == pytest.approx(10.0 + 1.5 / 2)
        assert box.l == 4.2 and box.w == 1.8 and box.h == 1.5


class TestTaxonomy:
    def test_vehicle_collapse(self):
        spec = DatasetSpec("nusc", RANGE, taxonomy={"Car": 0, "Van": 0, "Truck": 0})
        assert map_taxonomy("Van", spec) == COMMON_CLASSES.index("Car")

    def test_car_maps_to_car(self):
        spec = DatasetSpec("kitti", RANGE, taxonomy={"Car": 0})
        assert map_taxonomy("Car", spec) == 0

    def test_unknown_dropped_and_counted(self):
        spec = DatasetSpec("kitti", RANGE, taxonomy={"Car": 0})
        mapper = TaxonomyMapper(spec)
        assert mapper.map("Trailer") is None
        assert mapper.dropped == 1

    def test_mapping_never_escapes_class_list(self):
        spec = DatasetSpec("x", RANGE, taxonomy={"Car": 0, "Pedestrian": 1, "Cyclist": 2})
        mapper = TaxonomyMapper(spec)
        for raw in ("Car", "Pedestrian", "Cyclist", "Unknown"):
            cid = mapper.map(raw)
            assert cid is None or 0 <= cid < len(spec.classes)


def make_cfg(**kw):
    defaults = dict(rng_seed=7, range=RANGE, points_per_frame=512)
    defaults.update(kw)
    return SyntheticDomainConfig(**defaults)


class TestSyntheticGeneration:
    def test_deterministic(self):
        cfg = make_cfg()
        a = generate_synthetic_frame(cfg, 3)
        b = generate_synthetic_frame(cfg, 3)
        np.testing.assert_array_equal(a.pc.xyz, b.pc.xyz)
        np.testing.assert_array_equal(a.pc.intensity, b.pc.intensity)
        assert a.gt_boxes == b.gt_boxes

    def test_car_lengths_in_truncation_window(self):
        cfg = make_cfg(sizes={0: SizeDistribution(4.5, 1.9, 1.6, sigma_l=1.5)})
        lengths = [
            b.l for s in range(30) for b in generate_synthetic_frame(cfg, s).gt_boxes
        ]
        assert all(2.0 <= l <= 7.0 for l in lengths)

    def test_fixed_object_count(self):
        cfg = make_cfg(object_count=(4, 4))
        assert len(generate_synthetic_frame(cfg, 0).gt_boxes) == 4

    def test_falloff_thins_far_objects(self):
        big = Range3D(-60.0, 60.0, -60.0, 60.0, -3.0, 1.5)
        cfg = make_cfg(range=big, object_count=(8, 8), falloff_range=10.0)
        near_counts, far_counts = [], []
        for seed in range(10):
            frame = generate_synthetic_frame(cfg, seed)
            n_ground = int(cfg.points_per_frame * cfg.beam_density)
            obj_xyz = frame.pc.xyz[n_ground:]
            for box in frame.gt_boxes:
                d = np.hypot(obj_xyz[:, 0] - box.cx, obj_xyz[:, 1] - box.cy)
                cnt = int((d < max(box.l, box.w)).sum())
                r = np.hypot(box.cx, box.cy)
                (near_counts if r < 15.0 else far_counts).append(cnt)
        if near_counts and far_counts:
            assert np.mean(near_counts) > 3 * np.mean(far_counts)
        # every box still gets at least one return
        assert min(near_counts + far_counts) >= 1

    def test_boxes_inside_range_with_surface_points(self):
        cfg = make_cfg()
        for seed in range(5):
            frame = generate_synthetic_frame(cfg, seed)
            for box in frame.gt_boxes:
                assert cfg.range.contains(box.cx, box.cy, box.cz)
                d = np.hypot(frame.pc.xyz[:, 0] - box.cx, frame.pc.xyz[:, 1] - box.cy)
                assert (d < max(box.l, box.w)).any()


class TestSizeHistograms:
    def test_single_box_lands_in_its_bin(self):
        frame = Frame(0, PointCloud.empty(), [Box3D(0, 0, 0, 4.5, 1.8, 1.5, 0.0)], "f0")
        bins = np.arange(0.0, 8.0, 0.5)
        hists = size_histograms([frame], bins)
        l_hist = hists[0]["l"]
        assert l_hist[np.digitize(4.5, bins) - 1] == 1
        assert l_hist.sum() == 1

    def test_empty_frames(self):
        assert size_histograms([], np.arange(0, 5, 0.5)) == {}

    def test_mean_gap_shows_up_as_mode_gap(self):
        bins = np.arange(0.0, 8.0, 0.25)
        cfg_a = make_cfg(sizes={0: SizeDistribution(4.0, 1.8, 1.5, sigma_l=0.1)})
        cfg_b = make_cfg(rng_seed=8, sizes={0: SizeDistribution(5.5, 2.0, 1.8, sigma_l=0.1)})
        frames_a = [generate_synthetic_frame(cfg_a, s) for s in range(20)]
        frames_b = [generate_synthetic_frame(cfg_b, s) for s in range(20)]
        mode_a = bins[np.argmax(size_histograms(frames_a, bins)[0]["l"])]
        mode_b = bins[np.argmax(size_histograms(frames_b, bins)[0]["l"])]
        assert abs((mode_b - mode_a) - 1.5) <= 0.25

    def test_counts_equal_boxes(self):
        cfg = make_cfg()
        frames = [generate_synthetic_frame(cfg, s) for s in range(4)]
        n_boxes = sum(len(f.gt_boxes) for f in frames)
        hists = size_histograms(frames, np.arange(0.0, 10.0, 0.5))
        assert sum(h["l"].sum() for h in hists.values()) == n_boxes


class TestFrameContainer:
    def test_roundtrip(self):
        cfg = make_cfg()
        frame = generate_synthetic_frame(cfg, 1)
        frame.dataset_id = 2
        back = frame_from_bytes(frame_to_bytes(frame))
        assert back.dataset_id == 2
        assert back.frame_id == frame.frame_id
        np.testing.assert_allclose(back.pc.xyz, frame.pc.xyz, atol=1e-6)
        assert len(back.gt_boxes) == len(frame.gt_boxes)
        assert back.gt_boxes[0].yaw == pytest.approx(frame.gt_boxes[0].yaw)

    def test_truncated(self):
        raw = frame_to_bytes(Frame(0, PointCloud.empty(), [], "x"))
        with pytest.raises(FormatError):
            frame_from_bytes(raw[:10])
