"""Independent reference implementations used to cross-check the fast paths.

Everything here is deliberately written by a different route than the
production code: explicit loops and branchy wrap arithmetic instead of
modular identities, dense sampling instead of closed-form projection,
orientation-predicate ray marching instead of parametric intersection, and
finite differences instead of reverse-mode gradients. Slow on purpose.
"""

from __future__ import annotations

import math

import numpy as np

from .sensing import BEAM_OFFSETS, LIDAR_MAX_RANGE
from .vehicle import CarParams, VehicleState

# -- wrap-aware progress ------------------------------------------------------------


def progress_delta_ref(prev: float, curr: float, length: float) -> float:
    """Signed wrap-aware difference, by stepping instead of modulo."""
    d = curr - prev
    while d >= length / 2.0:
        d -= length
    while d < -length / 2.0:
        d += length
    return d


# -- reward transliterations --------------------------------------------------------


def racing_reward_ref(cp_prev: float, cp_curr: float, velocity, wall_contact: bool,
                      wall_weight: float, length: float) -> float:
    v = np.asarray(velocity, dtype=np.float64)
    penalty = wall_weight * (1.0 if wall_contact else 0.0) * float(v @ v)
    return progress_delta_ref(cp_prev, cp_curr, length) - penalty


def overtaking_reward_ref(cp_prev: float, cp_curr: float, velocity,
                          wall_contact: bool, car_contact: bool,
                          opponents, wall_weight: float, car_weight: float,
                          relative_weight: float, detection_range: float,
                          length: float) -> float:
    """opponents: iterable of (opponent cp before, opponent cp after)."""
    v = np.asarray(velocity, dtype=np.float64)
    speed_sq = float(v @ v)
    total = racing_reward_ref(cp_prev, cp_curr, v, wall_contact, wall_weight, length)
    if car_contact:
        total -= car_weight * speed_sq
    for opp_prev, opp_curr in opponents:
        delta_prev = progress_delta_ref(cp_prev, opp_prev, length)
        delta_curr = progress_delta_ref(cp_curr, opp_curr, length)
        if abs(delta_curr) < detection_range:
            total += relative_weight * (delta_prev - delta_curr)
    return total


# -- dense projection ---------------------------------------------------------------


def projection_ref(vertices: np.ndarray, point, spacing: float = 0.001):
    """Nearest point on the closed polyline through `vertices`, by dense sampling.

    Returns (arc_length, distance). Ties resolve to the lowest arc length
    because the scan runs in arc order.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    closed = np.vstack([verts, verts[:1]])
    seg_vec = np.diff(closed, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    samples = []
    arcs = []
    base = 0.0
    for a, vec, ln in zip(closed[:-1], seg_vec, seg_len):
        n = max(int(math.ceil(ln / spacing)), 1)
        t = np.arange(n) / n
        samples.append(a + t[:, None] * vec)
        arcs.append(base + t * ln)
        base += ln
    pts = np.concatenate(samples)
    arc = np.concatenate(arcs)
    d2 = np.sum((pts - np.asarray(point, dtype=np.float64)) ** 2, axis=1)
    best = int(np.argmin(d2))
    return float(arc[best]), float(math.sqrt(d2[best]))


# -- marching lidar -----------------------------------------------------------------


def _orient(p, q, x):
    """Sign of the cross product (q-p) x (x-p); broadcasts on leading axes."""
    return np.sign((q[..., 0] - p[..., 0]) * (x[..., 1] - p[..., 1])
                   - (q[..., 1] - p[..., 1]) * (x[..., 0] - p[..., 0]))


def _crossings(p, q, a, b):
    """Proper-crossing mask between chords (..., 2) and edges (m, 2)."""
    d1 = _orient(p[..., None, :], q[..., None, :], a)
    d2 = _orient(p[..., None, :], q[..., None, :], b)
    d3 = _orient(a, b, p[..., None, :])
    d4 = _orient(a, b, q[..., None, :])
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def _car_edges(car: VehicleState, params: CarParams) -> np.ndarray:
    half_l = params.body_length / 2.0
    half_w = params.body_width / 2.0
    local = np.array([[half_l, half_w], [-half_l, half_w],
                      [-half_l, -half_w], [half_l, -half_w]])
    c, s = math.cos(car.heading), math.sin(car.heading)
    rot = np.array([[c, -s], [s, c]])
    corners = local @ rot.T + car.position
    return np.stack([corners, np.roll(corners, -1, axis=0)], axis=1)


def scan_ref(ego: VehicleState, track, others, params: CarParams,
             max_range: float = LIDAR_MAX_RANGE, coarse: float = 1.0,
             fine: float = 0.01) -> np.ndarray:
    """Ray-marched lidar distances on a 1 cm grid.

    Marches every beam in `coarse` chords, detects the first chord that
    properly crosses any wall or car edge (exact for a straight ray), then
    refines inside that chord on the `fine` grid: the reported distance is
    the first grid sample past the crossing, as a naive fine march would see.
    """
    left, right = track.wall_polylines()
    edge_list = [np.stack([poly[:-1], poly[1:]], axis=1) for poly in (left, right)]
    edge_list.extend(_car_edges(c, params) for c in others)
    edges = np.concatenate(edge_list)
    a, b = edges[:, 0], edges[:, 1]

    angles = ego.heading + BEAM_OFFSETS
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    n_chunks = int(round(max_range / coarse))
    ts = np.arange(n_chunks + 1) * coarse
    pts = ego.position + ts[None, :, None] * dirs[:, None, :]

    hit = _crossings(pts[:, :-1], pts[:, 1:], a, b)
    out = np.full(len(dirs), max_range)
    n_fine = int(round(coarse / fine))
    for beam in range(len(dirs)):
        chunk_hits = hit[beam].any(axis=1)
        if not chunk_hits.any():
            continue
        j = int(np.argmax(chunk_hits))
        sub = edges[hit[beam, j]]
        t0 = ts[j]
        t_fine = t0 + np.arange(n_fine + 1) * fine
        p_fine = ego.position + t_fine[:, None] * dirs[beam]
        sub_hit = _crossings(p_fine[:-1], p_fine[1:], sub[:, 0], sub[:, 1])
        rows = sub_hit.any(axis=1)
        if rows.any():
            k = int(np.argmax(rows))
            out[beam] = min(t0 + (k + 1) * fine, max_range)
        else:
            # crossing sits exactly on a fine grid point; take that sample
            out[beam] = min(t0 + coarse, max_range)
    return out


def random_scene(track, rng: np.random.Generator, max_cars: int = 6):
    """A randomized lidar scene: ego pose inside the corridor plus nearby cars.

    Returns (ego, others). Car count is uniform in [0, max_cars]; cars sit
    within lidar range at plausible lane offsets.
    """
    margin = 1.5
    length = track.total_length
    half_width = track.half_width

    def place(cp: float, heading_jitter: float, speed: float) -> VehicleState:
        cp = track.wrap(cp)
        h = track.heading_at(cp)
        normal = np.array([-math.sin(h), math.cos(h)])
        lat = rng.uniform(-(half_width - margin), half_width - margin)
        pos = track.point_at(cp) + lat * normal
        return VehicleState.at(pos, h + heading_jitter, speed)

    ego_cp = rng.uniform(0.0, length)
    ego = place(ego_cp, rng.uniform(-0.5, 0.5), rng.uniform(0.0, 50.0))
    others = []
    for _ in range(int(rng.integers(0, max_cars + 1))):
        offset = rng.uniform(4.0, 25.0) * rng.choice((-1.0, 1.0))
        others.append(place(ego_cp + offset, rng.uniform(-0.4, 0.4),
                            rng.uniform(0.0, 40.0)))
    return ego, others


# -- finite differences -------------------------------------------------------------


def finite_difference_grads(loss_fn, params, h: float = 1e-4) -> list:
    """Central-difference gradient of loss_fn() w.r.t. each array in params.

    loss_fn is re-evaluated after each in-place perturbation, so it must read
    the live parameter arrays.
    """
    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn()
            flat[i] = keep - h
            down = loss_fn()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads
