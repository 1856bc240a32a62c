"""Closed racing tracks: centerline projection, arc-length arithmetic and curvature.

The centerline is a closed piecewise-linear loop of control points. All
longitudinal coordinates ("course progress", cp) are arc lengths along that
loop in meters, wrapping at ``total_length``. Lateral offsets are signed with
positive to the left of the direction of travel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation

FloatArray = np.ndarray

BUNDLED_TRACKS = ("oval", "hairpin", "chicane")


@dataclass(frozen=True)
class TrackFrame:
    """Position expressed in track coordinates.

    arc_length is in [0, total_length); lateral_offset is signed meters,
    positive to the left of travel; tangent_heading is the centerline
    direction at the projected point, in radians.
    """

    arc_length: float
    lateral_offset: float
    tangent_heading: float


@dataclass(frozen=True, eq=False)
class TrackGeometry:
    """Immutable closed-loop track with precomputed per-segment tables.

    Parameters
    ----------
    control_points : (N, 2) array
        Ordered centerline vertices in meters. The loop closes implicitly
        from the last point back to the first; the first point is not
        repeated. N >= 4.
    half_width : float
        Distance from centerline to each wall, meters, > 0.
    """

    control_points: FloatArray
    half_width: float

    def __post_init__(self) -> None:
        pts = np.asarray(self.control_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("control_points must have shape (N, 2)")
        if pts.shape[0] < 4:
            raise ValueError("a closed track needs at least 4 control points")
        if not np.isfinite(pts).all():
            raise ValueError("control_points must be finite")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")

        segs = np.roll(pts, -1, axis=0) - pts
        seg_len = np.linalg.norm(segs, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("duplicate consecutive control points")

        cum = np.zeros(pts.shape[0] + 1, dtype=np.float64)
        np.cumsum(seg_len, out=cum[1:])
        tangents = segs / seg_len[:, None]

        # Signed curvature per vertex from the circumscribed circle of the
        # triple (prev, this, next); exact 1/R for points on a circle and
        # exactly 0 for collinear points.
        prev_pts = np.roll(pts, 1, axis=0)
        next_pts = np.roll(pts, -1, axis=0)
        ab = pts - prev_pts
        bc = next_pts - pts
        ac = next_pts - prev_pts
        cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
        denom = (
            np.linalg.norm(ab, axis=1)
            * np.linalg.norm(bc, axis=1)
            * np.linalg.norm(ac, axis=1)
        )
        curvature = np.where(denom > 0, 2.0 * cross / np.maximum(denom, 1e-300), 0.0)

        for arr in (pts, segs, seg_len, cum, tangents, curvature):
            arr.setflags(write=False)
        object.__setattr__(self, "control_points", pts)
        object.__setattr__(self, "_segments", segs)
        object.__setattr__(self, "_seg_len", seg_len)
        object.__setattr__(self, "_cum_len", cum)
        object.__setattr__(self, "_tangents", tangents)
        object.__setattr__(self, "_curvature", curvature)
        object.__setattr__(self, "total_length", float(cum[-1]))

        normals = np.column_stack([-tangents[:, 1], tangents[:, 0]])
        vertex_normals = normals + np.roll(normals, 1, axis=0)
        norm = np.linalg.norm(vertex_normals, axis=1, keepdims=True)
        vertex_normals = np.where(norm > 1e-12, vertex_normals / np.maximum(norm, 1e-300), normals)
        left = pts + self.half_width * vertex_normals
        right = pts - self.half_width * vertex_normals
        left.setflags(write=False)
        right.setflags(write=False)
        object.__setattr__(self, "left_wall", left)
        object.__setattr__(self, "right_wall", right)

    # -- arc-length arithmetic -------------------------------------------------

    def wrap(self, s: float) -> float:
        """Wrap an arc length into [0, total_length)."""
        return float(s % self.total_length)

    def _segment_of(self, s: float) -> tuple[int, float]:
        s = self.wrap(s)
        i = int(np.searchsorted(self._cum_len, s, side="right") - 1)
        i = min(i, len(self._seg_len) - 1)
        return i, s - self._cum_len[i]

    def point_at(self, s: float) -> FloatArray:
        """Centerline point at arc length s (wrapped)."""
        i, ds = self._segment_of(s)
        return self.control_points[i] + ds * self._tangents[i]

    def heading_at(self, s: float) -> float:
        """Centerline tangent heading at arc length s, radians."""
        i, _ = self._segment_of(s)
        t = self._tangents[i]
        return float(math.atan2(t[1], t[0]))

    def curvature_at(self, s: float) -> float:
        """Signed curvature at arc length s (positive = turning left).

        Linearly interpolated between the vertex curvatures bounding the
        segment that contains s.
        """
        i, ds = self._segment_of(s)
        j = (i + 1) % len(self._seg_len)
        w = ds / self._seg_len[i]
        return float((1.0 - w) * self._curvature[i] + w * self._curvature[j])

    # -- spec operations ---------------------------------------------------------

    def centerline_projection(self, position) -> TrackFrame:
        """Project a plane point onto the centerline.

        Returns the frame of the closest centerline point; ties between
        equidistant segments resolve to the lowest arc length.
        """
        p = np.asarray(position, dtype=np.float64)
        rel = p - self.control_points
        t = np.einsum("ij,ij->i", rel, self._segments) / (self._seg_len**2)
        np.clip(t, 0.0, 1.0, out=t)
        proj = self.control_points + t[:, None] * self._segments
        d2 = np.einsum("ij,ij->i", p - proj, p - proj)
        i = int(np.argmin(d2))
        arc = self.wrap(self._cum_len[i] + t[i] * self._seg_len[i])
        tan = self._tangents[i]
        dp = p - proj[i]
        # magnitude from the true distance (the cross product alone understates
        # it when the projection clamps at a vertex), side from the cross sign
        cross = tan[0] * dp[1] - tan[1] * dp[0]
        lateral = math.copysign(math.hypot(dp[0], dp[1]), cross)
        return TrackFrame(arc, lateral, float(math.atan2(tan[1], tan[0])))

    def project_many(self, points) -> tuple[FloatArray, FloatArray, FloatArray]:
        """Vectorized centerline projection of (M, 2) points.

        Returns (arc_lengths, lateral_offsets, tangent_headings), each (M,).
        """
        p = np.asarray(points, dtype=np.float64)
        rel = p[:, None, :] - self.control_points[None, :, :]
        t = np.einsum("mij,ij->mi", rel, self._segments) / (self._seg_len**2)
        np.clip(t, 0.0, 1.0, out=t)
        off = rel - t[:, :, None] * self._segments[None, :, :]
        d2 = np.einsum("mij,mij->mi", off, off)
        i = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        arcs = (self._cum_len[i] + t[rows, i] * self._seg_len[i]) % self.total_length
        tan = self._tangents[i]
        dp = off[rows, i]
        cross = tan[:, 0] * dp[:, 1] - tan[:, 1] * dp[:, 0]
        lateral = np.copysign(np.hypot(dp[:, 0], dp[:, 1]), cross)
        heading = np.arctan2(tan[:, 1], tan[:, 0])
        return arcs, lateral, heading

    def progress_delta(self, cp_prev: float, cp_curr: float) -> float:
        """Signed shortest wrap-aware difference cp_curr - cp_prev.

        Magnitude is at most total_length / 2.
        """
        length = self.total_length
        if not (0.0 <= cp_prev < length) or not (0.0 <= cp_curr < length):
            raise ContractViolation(
                f"cp values must lie in [0, {length}); got {cp_prev}, {cp_curr}"
            )
        d = (cp_curr - cp_prev) % length
        if d >= length / 2.0:
            d -= length
        return float(d)

    def curvatures_at(self, arcs) -> FloatArray:
        """Vectorized curvature_at over an array of arc lengths."""
        s = np.asarray(arcs, dtype=np.float64) % self.total_length
        i = np.searchsorted(self._cum_len, s, side="right") - 1
        np.clip(i, 0, len(self._seg_len) - 1, out=i)
        w = (s - self._cum_len[i]) / self._seg_len[i]
        j = (i + 1) % len(self._seg_len)
        return (1.0 - w) * self._curvature[i] + w * self._curvature[j]

    def curvature_lookahead(
        self, frame: TrackFrame, speed: float, horizon_times=None
    ) -> FloatArray:
        """Signed curvature sampled ahead of a frame.

        Entry j is the curvature at arc length
        ``frame.arc_length + speed * horizon_times[j]`` (wrapped). The default
        grid is LOOKAHEAD_TIMES (14 entries spanning 0.2 s to 3.0 s).
        """
        times = LOOKAHEAD_TIMES if horizon_times is None else np.asarray(horizon_times)
        return self.curvatures_at(frame.arc_length + speed * times)

    def wall_distance(self, frame: TrackFrame) -> float:
        """half_width - |lateral_offset|; negative when beyond the wall."""
        return float(self.half_width - abs(frame.lateral_offset))

    # -- wall polylines ----------------------------------------------------------

    def wall_polylines(self) -> tuple[FloatArray, FloatArray]:
        """Left and right wall polylines as closed (N+1, 2) arrays."""
        left = np.vstack([self.left_wall, self.left_wall[:1]])
        right = np.vstack([self.right_wall, self.right_wall[:1]])
        return left, right


# 14 uniformly spaced lookahead times covering 0.2 s to 3.0 s inclusive.
LOOKAHEAD_TIMES = 0.2 + np.arange(14) * (2.8 / 13.0)
LOOKAHEAD_TIMES.setflags(write=False)


# -- track definition files --------------------------------------------------


def load_track(path) -> TrackGeometry:
    """Load a track definition file.

    Format: one header line ``halfwidth <meters>``, then one ``x y`` control
    point per line. Points must form a closed loop (the first point is not
    repeated; the closing segment must be no longer than 3x the median
    spacing).
    """
    lines = [
        ln.strip()
        for ln in Path(path).read_text().splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not lines:
        raise ConfigurationError(f"{path}: empty track file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "halfwidth":
        raise ConfigurationError(f"{path}: first line must be 'halfwidth <meters>'")
    try:
        half_width = float(header[1])
        pts = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    except ValueError as exc:
        raise ConfigurationError(f"{path}: malformed number: {exc}") from None
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 4:
        raise ConfigurationError(f"{path}: need at least 4 'x y' control points")
    if np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    seg_len = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    if np.any(seg_len[:-1] <= 0):
        raise ConfigurationError(f"{path}: duplicate consecutive control points")
    closing, median = seg_len[-1], float(np.median(seg_len[:-1]))
    if closing > 3.0 * median:
        raise ConfigurationError(
            f"{path}: loop not closed (closing gap {closing:.2f} m vs median spacing {median:.2f} m)"
        )
    try:
        return TrackGeometry(pts, half_width)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def save_track(track: TrackGeometry, path) -> None:
    """Write a track in the definition-file format."""
    with open(path, "w") as f:
        f.write(f"halfwidth {track.half_width}\n")
        for x, y in track.control_points:
            f.write(f"{x:.6f} {y:.6f}\n")


def bundled_track(name: str) -> TrackGeometry:
    """Load one of the bundled tracks: oval, hairpin or chicane."""
    if name not in BUNDLED_TRACKS:
        raise ConfigurationError(
            f"unknown track {name!r}; bundled tracks: {', '.join(BUNDLED_TRACKS)}"
        )
    ref = resources.files("overtake") / "tracks" / f"{name}.track"
    with resources.as_file(ref) as path:
        return load_track(path)
