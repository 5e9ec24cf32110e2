"""Dataset ingestion, taxonomy mapping and synthetic multi-domain frames.

Real input is KITTI-format only (velodyne binary, 15-field labels, calib
text). Waymo/nuScenes-style domain gaps (range, sensor height, beam count,
object size statistics) are emulated by the synthetic generator.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .geometry import Box3D, PointCloud, Range3D, normalize_yaw

COMMON_CLASSES = ("Car", "Pedestrian", "Cyclist")


@dataclass
class SizeDistribution:
    """Truncated normal over (l, w, h), independent per dimension."""

    mean_l: float
    mean_w: float
    mean_h: float
    sigma_l: float = 0.2
    sigma_w: float = 0.1
    sigma_h: float = 0.1
    l_window: tuple[float, float] = (2.0, 7.0)
    w_window: tuple[float, float] = (1.0, 3.0)
    h_window: tuple[float, float] = (0.5, 3.0)

    def __post_init__(self):
        if min(self.sigma_l, self.sigma_w, self.sigma_h) < 0:
            raise ConfigError("size sigmas must be >= 0")


@dataclass
class SyntheticDomainConfig:
    rng_seed: int
    range: Range3D
    points_per_frame: int = 2048
    sensor_height: float = 1.6
    beam_density: float = 1.0
    object_count: tuple[int, int] = (3, 6)  # inclusive bounds
    sizes: dict[int, SizeDistribution] = field(default_factory=dict)
    intensity_mean: float = 0.5
    ground_noise: float = 0.03
    max_placement_tries: int = 200
    # distance beyond which object returns thin out quadratically
    # (like a real scanner); 0 disables the falloff
    falloff_range: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.beam_density <= 1.0):
            raise ConfigError("beam_density must be in (0, 1]")
        if self.falloff_range < 0.0:
            raise ConfigError("falloff_range must be >= 0")
        if not self.sizes:
            self.sizes = {0: SizeDistribution(4.5, 1.9, 1.6)}


@dataclass
class DatasetSpec:
    name: str
    range: Range3D
    dz_shift: float = 0.0
    taxonomy: dict[str, int] = field(default_factory=dict)
    classes: tuple[str, ...] = COMMON_CLASSES
    fov_only: bool = False
    synthetic: SyntheticDomainConfig | None = None

    def __post_init__(self):
        for raw, cid in self.taxonomy.items():
            if not (0 <= cid < len(self.classes)):
                raise ConfigError(f"taxonomy maps {raw!r} outside class list")


@dataclass
class Frame:
    dataset_id: int
    pc: PointCloud
    gt_boxes: list[Box3D]
    frame_id: str


# ---------------------------------------------------------------------------
# KITTI-format readers
# ---------------------------------------------------------------------------

def read_kitti_velodyne(raw: bytes) -> PointCloud:
    """Parse little-endian float32 (x, y, z, intensity) quadruples."""
    if len(raw) % 16 != 0:
        raise FormatError(f"velodyne byte length {len(raw)} not a multiple of 16")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 4)
    bad = ~np.isfinite(arr).all(axis=1)
    if bad.any():
        raise FormatError(f"non-finite point at record {int(np.argmax(bad))}")
    return PointCloud(arr[:, :3], arr[:, 3])


def write_kitti_velodyne(pc: PointCloud) -> bytes:
    """Inverse of read_kitti_velodyne (byte-identical round trip)."""
    arr = np.column_stack([pc.xyz, pc.intensity]).astype("<f4")
    return arr.tobytes()


@dataclass(frozen=True)
class KittiLabelRecord:
    raw_label: str
    # camera-convention geometry straight from the label file
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    rotation_y: float


def read_kitti_label(text: str) -> list[KittiLabelRecord]:
    """Parse 15-field KITTI label lines (camera convention, DontCare kept)."""
    records = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 15:
            raise FormatError(f"label line {ln}: expected 15 fields, got {len(fields)}")
        try:
            vals = [float(v) for v in fields[1:]]
        except ValueError as e:
            raise FormatError(f"label line {ln}: {e}") from e
        h, w, l = vals[7], vals[8], vals[9]
        x, y, z = vals[10], vals[11], vals[12]
        records.append(KittiLabelRecord(fields[0], h, w, l, x, y, z, vals[13]))
    return records


@dataclass(frozen=True)
class RigidTransform:
    """Homogeneous 4x4 rigid transform."""

    matrix: np.ndarray

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(xyz)
        out = pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]
        return out.reshape(np.shape(xyz))

    def inverse(self) -> "RigidTransform":
        inv = np.eye(4)
        inv[:3, :3] = self.matrix[:3, :3].T
        inv[:3, 3] = -self.matrix[:3, :3].T @ self.matrix[:3, 3]
        return RigidTransform(inv)


def read_kitti_calib(text: str) -> RigidTransform:
    """Return the rectified-camera -> LiDAR transform from a calib file."""
    rows: dict[str, np.ndarray] = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            rows[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            continue
    if "Tr_velo_to_cam" not in rows:
        raise FormatError("calib missing Tr_velo_to_cam")
    if "R0_rect" not in rows:
        raise FormatError("calib missing R0_rect")
    tr = np.eye(4)
    tr[:3, :4] = rows["Tr_velo_to_cam"].reshape(3, 4)
    r0 = np.eye(4)
    r0[:3, :3] = rows["R0_rect"].reshape(3, 3)
    velo_to_rect = RigidTransform(r0 @ tr)
    return velo_to_rect.inverse()


def kitti_record_to_lidar(rec: KittiLabelRecord, cam_to_lidar: RigidTransform) -> Box3D:
    """Convert one camera-convention record to a LiDAR-frame Box3D.

    KITTI locations are the bottom face center in the rectified camera frame
    (x right, y down, z forward); rotation_y is about the camera y axis.
    """
    bottom = cam_to_lidar.apply(np.array([rec.x, rec.y, rec.z]))
    yaw = normalize_yaw(-rec.rotation_y - math.pi / 2.0)
    return Box3D(
        cx=float(bottom[0]),
        cy=float(bottom[1]),
        cz=float(bottom[2]) + rec.h / 2.0,
        l=rec.l,
        w=rec.w,
        h=rec.h,
        yaw=yaw,
    )


class TaxonomyMapper:
    """Maps raw dataset labels onto the common class space, counting drops."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.dropped = 0

    def map(self, raw_label: str) -> int | None:
        cid = self.spec.taxonomy.get(raw_label)
        if cid is None:
            self.dropped += 1
            return None
        return cid


def map_taxonomy(raw_label: str, spec: DatasetSpec, mapper: TaxonomyMapper | None = None) -> int | None:
    """One-shot taxonomy lookup; unmapped labels return None (dropped)."""
    m = mapper if mapper is not None else TaxonomyMapper(spec)
    return m.map(raw_label)


def assemble_kitti_frame(
    dataset_id: int,
    frame_id: str,
    velo_bytes: bytes,
    label_text: str,
    calib_text: str,
    spec: DatasetSpec,
    mapper: TaxonomyMapper | None = None,
) -> Frame:
    """Read one KITTI sample into the common Frame representation."""
    pc = read_kitti_velodyne(velo_bytes)
    cam_to_lidar = read_kitti_calib(calib_text)
    mapper = mapper if mapper is not None else TaxonomyMapper(spec)
    boxes = []
    for rec in read_kitti_label(label_text):
        if rec.raw_label == "DontCare":
            continue
        cid = mapper.map(rec.raw_label)
        if cid is None:
            continue
        box = kitti_record_to_lidar(rec, cam_to_lidar)
        boxes.append(replace(box, class_id=cid))
    if spec.fov_only:
        keep = pc.xyz[:, 0] > 0.0
        pc = PointCloud(pc.xyz[keep], pc.intensity[keep])
        boxes = [b for b in boxes if b.cx > 0.0]
    return Frame(dataset_id, pc, boxes, frame_id)


# ---------------------------------------------------------------------------
# synthetic multi-domain generation
# ---------------------------------------------------------------------------

def _truncated_normal(rng: np.random.Generator, mean: float, sigma: float, window: tuple[float, float]) -> float:
    lo, hi = window
    if sigma == 0.0:
        return min(max(mean, lo), hi)
    for _ in range(100):
        v = rng.normal(mean, sigma)
        if lo <= v <= hi:
            return v
    return min(max(mean, lo), hi)


def _box_surface_points(rng: np.random.Generator, box: Box3D, count: int) -> np.ndarray:
    """Sample points on three faces (two sides plus top) of the box."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.zeros((count, 3))
    face = rng.integers(0, 3, size=count)
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    # face 0: +l side, face 1: +w side, face 2: top
    local[face == 0] = np.column_stack(
        [np.full((face == 0).sum(), box.l / 2), u[face == 0] * box.w, v[face == 0] * box.h]
    )
    local[face == 1] = np.column_stack(
        [u[face == 1] * box.l, np.full((face == 1).sum(), box.w / 2), v[face == 1] * box.h]
    )
    local[face == 2] = np.column_stack(
        [u[face == 2] * box.l, v[face == 2] * box.w, np.full((face == 2).sum(), box.h / 2)]
    )
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.array([box.cx, box.cy, box.cz])


def generate_synthetic_frame(cfg: SyntheticDomainConfig, seed: int) -> Frame:
    """Deterministically generate one labeled frame for (cfg, seed)."""
    rng = np.random.default_rng((cfg.rng_seed, seed))
    r = cfg.range
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    ground_z = -cfg.sensor_height

    boxes: list[Box3D] = []
    class_ids = sorted(cfg.sizes)
    for _ in range(n_obj):
        cid = class_ids[int(rng.integers(0, len(class_ids)))]
        dist = cfg.sizes[cid]
        placed = False
        for _ in range(cfg.max_placement_tries):
            l = _truncated_normal(rng, dist.mean_l, dist.sigma_l, dist.l_window)
            w = _truncated_normal(rng, dist.mean_w, dist.sigma_w, dist.w_window)
            h = _truncated_normal(rng, dist.mean_h, dist.sigma_h, dist.h_window)
            margin = max(l, w) / 2.0 + 0.1
            if r.x_max - r.x_min <= 2 * margin or r.y_max - r.y_min <= 2 * margin:
                continue
            cx = rng.uniform(r.x_min + margin, r.x_max - margin)
            cy = rng.uniform(r.y_min + margin, r.y_max - margin)
            yaw = rng.uniform(-math.pi, math.pi)
            cand = Box3D(cx, cy, ground_z + h / 2.0, l, w, h, yaw, class_id=cid)
            clearance = max(l, w)
            if all(math.hypot(b.cx - cx, b.cy - cy) > (clearance + max(b.l, b.w)) / 2.0 + 0.5 for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError("could not place an object after bounded retries")

    n_ground = max(int(cfg.points_per_frame * cfg.beam_density), 1)
    gx = rng.uniform(r.x_min, r.x_max, size=n_ground)
    gy = rng.uniform(r.y_min, r.y_max, size=n_ground)
    gz = ground_z + rng.normal(0.0, cfg.ground_noise, size=n_ground)
    points = [np.column_stack([gx, gy, gz])]
    for box in boxes:
        per_box = 40.0 * cfg.beam_density
        if cfg.falloff_range > 0.0:
            dist = math.hypot(box.cx, box.cy)
            per_box *= min(1.0, (cfg.falloff_range / max(dist, 1e-9)) ** 2)
        points.append(_box_surface_points(rng, box, max(int(per_box), 1)))
    xyz = np.vstack(points)
    inten = np.clip(rng.normal(cfg.intensity_mean, 0.1, size=len(xyz)), 0.0, 1.0)
    keep = (
        (xyz[:, 0] >= r.x_min) & (xyz[:, 0] < r.x_max)
        & (xyz[:, 1] >= r.y_min) & (xyz[:, 1] < r.y_max)
        & (xyz[:, 2] >= r.z_min) & (xyz[:, 2] < r.z_max)
    )
    pc = PointCloud(xyz[keep], inten[keep])
    return Frame(0, pc, boxes, f"syn{cfg.rng_seed:04d}_{seed:06d}")


# ---------------------------------------------------------------------------
# object-size statistics
# ---------------------------------------------------------------------------

def size_histograms(frames: list[Frame], bins: np.ndarray) -> dict[int, dict[str, np.ndarray]]:
    """Histogram l, w, h per class over all ground-truth boxes."""
    bins = np.asarray(bins, dtype=np.float64)
    if bins.ndim != 1 or len(bins) < 2 or not np.all(np.diff(bins) > 0):
        raise ConfigError("bins must be a monotone 1-D edge array")
    out: dict[int, dict[str, np.ndarray]] = {}
    for f in frames:
        for b in f.gt_boxes:
            hists = out.setdefault(
                b.class_id,
                {dim: np.zeros(len(bins) - 1, dtype=np.int64) for dim in ("l", "w", "h")},
            )
            for dim, val in (("l", b.l), ("w", b.w), ("h", b.h)):
                hists[dim] += np.histogram([val], bins=bins)[0]
    return out


# ---------------------------------------------------------------------------
# frame container serialization (harmonize output / detections input)
# ---------------------------------------------------------------------------

def frame_to_bytes(frame: Frame) -> bytes:
    """Pack one frame: header, points (velodyne layout), labeled boxes."""
    head = struct.pack("<4sIIQ", b"MDFR", 1, frame.dataset_id, frame.pc.n)
    fid = frame.frame_id.encode()
    head += struct.pack("<I", len(fid)) + fid
    body = write_kitti_velodyne(frame.pc)
    body += struct.pack("<I", len(frame.gt_boxes))
    for b in frame.gt_boxes:
        body += struct.pack("<7d i d", b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, b.class_id, b.score)
    return head + body


def frame_from_bytes(raw: bytes) -> Frame:
    try:
        magic, version, dataset_id, n = struct.unpack_from("<4sIIQ", raw, 0)
        if magic != b"MDFR":
            raise FormatError("bad frame magic")
        if version != 1:
            raise FormatError(f"unsupported frame version {version}")
        off = struct.calcsize("<4sIIQ")
        (fid_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        frame_id = raw[off : off + fid_len].decode()
        off += fid_len
        pc = read_kitti_velodyne(raw[off : off + 16 * n])
        off += 16 * n
        (n_boxes,) = struct.unpack_from("<I", raw, off)
        off += 4
        boxes = []
        rec = struct.Struct("<7d i d")
        for _ in range(n_boxes):
            cx, cy, cz, l, w, h, yaw, cid, score = rec.unpack_from(raw, off)
            off += rec.size
            boxes.append(Box3D(cx, cy, cz, l, w, h, yaw, class_id=cid, score=score))
    except struct.error as e:
        raise FormatError(f"truncated frame: {e}") from e
    return Frame(dataset_id, pc, boxes, frame_id)
