"""Observation construction: 2D lidar, kinematic features and normalization.

The observation is a 96-vector laid out as

    [0:3]   linear velocity in body frame
    [3:6]   linear acceleration in body frame
    [6]     angle between heading and centerline tangent
    [7:79]  72 lidar ranges
    [79]    previous steering command
    [80]    wall-collision flag
    [81]    car-collision flag
    [82:96] 14 forward-curvature samples

Lidar ranges are min-max normalized by the 20 m max range; the binary flags
pass through raw; everything else is z-scored with frozen statistics.
"""

from __future__ import annotations

import hashlib
import struct
import weakref
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .track import TrackFrame, TrackGeometry
from .vehicle import CarParams, DEFAULT_CAR, VehicleState, body_corners, wrap_angle

N_BEAMS = 72
LIDAR_MAX_RANGE = 20.0
OBS_DIM = 96

# Beam j points at -108 deg + j * (216/71) deg relative to the heading.
BEAM_OFFSETS = np.deg2rad(-108.0 + np.arange(N_BEAMS) * (216.0 / 71.0))
BEAM_OFFSETS.setflags(write=False)

VEL = slice(0, 3)
ACC = slice(3, 6)
HEADING_ERR = 6
LIDAR = slice(7, 79)
PREV_STEER = 79
WALL_FLAG = 80
CAR_FLAG = 81
CURV = slice(82, 96)

# Indices of the z-scored block: velocity, acceleration, heading error,
# previous steering and curvature lookahead. Lidar is min-max scaled and the
# flags pass through unchanged.
Z_INDICES = np.array([0, 1, 2, 3, 4, 5, 6, 79] + list(range(82, 96)))
Z_INDICES.setflags(write=False)
Z_DIM = len(Z_INDICES)

_LAYOUT_DESC = (
    f"obs{OBS_DIM}:vel3,acc3,herr1,lidar{N_BEAMS},steer1,wflag1,cflag1,curv14;"
    f"z={','.join(map(str, Z_INDICES))};lidar/{LIDAR_MAX_RANGE}"
)
LAYOUT_HASH = int.from_bytes(hashlib.sha256(_LAYOUT_DESC.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class LidarScan:
    """Ranges of the 72 beams, each in (0, 20] meters."""

    ranges: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.ranges, dtype=np.float64)
        if r.shape != (N_BEAMS,):
            raise ValueError(f"expected {N_BEAMS} ranges, got shape {r.shape}")
        if not ((r > 0) & (r <= LIDAR_MAX_RANGE)).all():
            raise ValueError("ranges must lie in (0, 20]")
        object.__setattr__(self, "ranges", r)


# -- lidar ---------------------------------------------------------------------

_wall_cache: "weakref.WeakKeyDictionary[TrackGeometry, tuple]" = weakref.WeakKeyDictionary()


def _wall_segments(track: TrackGeometry):
    cached = _wall_cache.get(track)
    if cached is None:
        left, right = track.wall_polylines()
        a = np.vstack([left[:-1], right[:-1]])
        b = np.vstack([left[1:], right[1:]])
        mid = (a + b) / 2.0
        rad = np.linalg.norm(b - a, axis=1) / 2.0
        cached = (a, b, mid, rad)
        _wall_cache[track] = cached
    return cached


def _rect_segments(others, params: CarParams):
    segs_a, segs_b = [], []
    for car in others:
        corners = body_corners(car, params)
        segs_a.append(corners)
        segs_b.append(np.roll(corners, -1, axis=0))
    if not segs_a:
        return np.empty((0, 2)), np.empty((0, 2))
    return np.vstack(segs_a), np.vstack(segs_b)


def ray_segment_distances(origin, directions, seg_a, seg_b) -> np.ndarray:
    """First-hit distance of each ray against each segment.

    directions must be unit vectors, shape (R, 2); segments are seg_a -> seg_b,
    shape (M, 2). Returns (R, M) with inf where a ray misses a segment.
    """
    e = seg_b - seg_a
    ao = seg_a - origin
    # Solve origin + t*d = a + u*e via 2D cross products.
    numer_t = ao[:, 0] * e[:, 1] - ao[:, 1] * e[:, 0]
    denom = directions[:, 0, None] * e[None, :, 1] - directions[:, 1, None] * e[None, :, 0]
    numer_u = ao[None, :, 0] * directions[:, 1, None] - ao[None, :, 1] * directions[:, 0, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = numer_t[None, :] / denom
        u = numer_u / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    return np.where(hit, t, np.inf)


def cast_lidar(
    ego: VehicleState,
    track: TrackGeometry,
    others=(),
    params: CarParams = DEFAULT_CAR,
) -> LidarScan:
    """Scan walls and other cars; nearest hit per beam, clamped to 20 m."""
    origin = ego.position
    angles = ego.heading + BEAM_OFFSETS
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])

    wall_a, wall_b, mid, rad = _wall_segments(track)
    near = np.einsum("ij,ij->i", mid - origin, mid - origin) <= (LIDAR_MAX_RANGE + rad) ** 2
    seg_a, seg_b = wall_a[near], wall_b[near]

    rect_a, rect_b = _rect_segments(
        [c for c in others if np.linalg.norm(c.position - origin) <= LIDAR_MAX_RANGE + 5.0],
        params,
    )
    if len(rect_a):
        seg_a = np.vstack([seg_a, rect_a])
        seg_b = np.vstack([seg_b, rect_b])

    if len(seg_a):
        dist = ray_segment_distances(origin, dirs, seg_a, seg_b).min(axis=1)
    else:
        dist = np.full(N_BEAMS, np.inf)
    ranges = np.clip(dist, 1e-9, LIDAR_MAX_RANGE)
    return LidarScan(ranges)


# -- scalar features -----------------------------------------------------------


def heading_error(ego: VehicleState, frame: TrackFrame) -> float:
    """Angle between the heading and the centerline tangent, in (-pi, pi]."""
    return wrap_angle(ego.heading - frame.tangent_heading)


def raw_features(
    ego: VehicleState, scan: LidarScan, frame: TrackFrame, track: TrackGeometry
) -> np.ndarray:
    """Assemble the 96 raw (un-normalized) observation features."""
    out = np.empty(OBS_DIM)
    out[VEL] = ego.body_velocity
    out[ACC] = ego.body_acceleration
    out[HEADING_ERR] = heading_error(ego, frame)
    out[LIDAR] = scan.ranges
    out[PREV_STEER] = ego.prev_steering
    out[WALL_FLAG] = ego.wall_flag
    out[CAR_FLAG] = ego.car_flag
    out[CURV] = track.curvature_lookahead(frame, ego.speed)
    return out


# -- normalization -------------------------------------------------------------


class NormStats:
    """Streaming per-feature mean/std (Welford), freezable and persistable.

    Uses the population variance. Standard deviations are floored at 1e-6.
    """

    STD_FLOOR = 1e-6
    MAGIC = b"OVTNORM1"

    def __init__(self, dim: int = Z_DIM, layout_hash: int = LAYOUT_HASH):
        self.dim = dim
        self.layout_hash = layout_hash
        self.count = 0
        self.frozen = False
        self._mean = np.zeros(dim)
        self._m2 = np.zeros(dim)
        self._std = np.ones(dim)

    def update(self, x) -> None:
        if self.frozen:
            raise ContractViolation("cannot update frozen normalization stats")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ContractViolation(f"expected feature dim {self.dim}, got {x.shape[1]}")
        for row in x:
            self.count += 1
            delta = row - self._mean
            self._mean += delta / self.count
            self._m2 += delta * (row - self._mean)

    @property
    def mean(self) -> np.ndarray:
        return self._mean.copy()

    @property
    def std(self) -> np.ndarray:
        if self.frozen:
            return self._std.copy()
        if self.count == 0:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self._m2 / self.count), self.STD_FLOOR)

    def freeze(self) -> "NormStats":
        self._std = self.std
        self.frozen = True
        return self

    def save(self, path) -> None:
        if not self.frozen:
            raise ContractViolation("refusing to persist unfrozen stats")
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<QQI", self.count, self.layout_hash, self.dim))
            f.write(self._mean.astype("<f4").tobytes())
            f.write(self._std.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != cls.MAGIC:
                raise ConfigurationError(f"{path}: not a normalization-stats file")
            count, layout_hash, dim = struct.unpack("<QQI", f.read(20))
            mean = np.frombuffer(f.read(4 * dim), dtype="<f4").astype(np.float64)
            std = np.frombuffer(f.read(4 * dim), dtype="<f4").astype(np.float64)
        stats = cls(dim=dim, layout_hash=layout_hash)
        stats.count = count
        stats._mean = mean
        stats._std = np.maximum(std, cls.STD_FLOOR)
        stats.frozen = True
        return stats


def update_stats(stats: NormStats, raw: np.ndarray) -> NormStats:
    """Fold the z-block of one raw observation into the running stats."""
    stats.update(np.asarray(raw)[Z_INDICES])
    return stats


def normalize_features(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize raw features: z-score block, lidar / 20, flags untouched.

    Accepts a single 96-vector or a batch (n, 96); features live on the
    last axis either way.
    """
    if not stats.frozen:
        raise ContractViolation("normalization requires frozen stats")
    if stats.dim != Z_DIM or stats.layout_hash != LAYOUT_HASH:
        raise ConfigurationError(
            f"stats layout hash {stats.layout_hash:#x} does not match "
            f"observation layout {LAYOUT_HASH:#x}"
        )
    out = np.array(raw, dtype=np.float64)
    out[..., Z_INDICES] = (out[..., Z_INDICES] - stats._mean) / stats._std
    out[..., LIDAR] = out[..., LIDAR] / LIDAR_MAX_RANGE
    return out


def assemble_observation(
    ego: VehicleState,
    scan: LidarScan,
    frame: TrackFrame,
    track: TrackGeometry,
    stats: NormStats,
) -> np.ndarray:
    """Raw features normalized with frozen stats; the policy-facing vector."""
    return normalize_features(raw_features(ego, scan, frame, track), stats)
