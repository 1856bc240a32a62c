#!/usr/bin/env python3
"""Regenerate the bundled track files under src/overtake/tracks/.

Three layouts:
  oval    - two 380 m straights joined by 115 m-radius semicircles
  hairpin - egg-shaped loop with one fast end and one tight end
  chicane - wavy loop with alternating left/right kinks

Control points are spaced roughly 5 m apart so the polyline walls stay
within a few centimeters of the ideal offset curve.
"""

import sys
from pathlib import Path

import numpy as np

HALF_WIDTH = 9.0
SPACING = 5.0


def oval() -> np.ndarray:
    half_straight = 190.0
    radius = 115.0
    pieces = []
    n_straight = int(round(2 * half_straight / SPACING))
    xs = np.linspace(-half_straight, half_straight, n_straight, endpoint=False)
    pieces.append(np.stack([xs, np.full_like(xs, -radius)], axis=1))
    n_arc = int(round(np.pi * radius / SPACING))
    t = np.linspace(-np.pi / 2, np.pi / 2, n_arc, endpoint=False)
    pieces.append(np.stack([half_straight + radius * np.cos(t),
                            radius * np.sin(t)], axis=1))
    pieces.append(np.stack([-xs, np.full_like(xs, radius)], axis=1))
    pieces.append(np.stack([-half_straight + radius * np.cos(t + np.pi),
                            radius * np.sin(t + np.pi)], axis=1))
    return np.vstack(pieces)


def _radial(radius_fn, n_hint: int = 4096) -> np.ndarray:
    """Sample a polar curve r(theta) at ~SPACING arc-length intervals."""
    theta = np.linspace(0.0, 2 * np.pi, n_hint, endpoint=False)
    r = radius_fn(theta)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    d = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(d)])
    total = arc[-1]
    n_out = int(round(total / SPACING))
    targets = np.linspace(0.0, total, n_out, endpoint=False)
    idx = np.searchsorted(arc, targets, side="right") - 1
    idx = np.clip(idx, 0, len(pts) - 1)
    frac = (targets - arc[idx]) / d[idx]
    nxt = (idx + 1) % len(pts)
    return pts[idx] + frac[:, None] * (pts[nxt] - pts[idx])


def hairpin() -> np.ndarray:
    return _radial(lambda t: 190.0 + 120.0 * np.cos(t) + 45.0 * np.cos(2 * t))


def chicane() -> np.ndarray:
    return _radial(lambda t: 250.0 + 20.0 * np.cos(3 * t) + 12.0 * np.sin(5 * t))


def min_turn_radius(pts: np.ndarray) -> float:
    a = pts
    b = np.roll(pts, -1, axis=0)
    c = np.roll(pts, -2, axis=0)
    ab = b - a
    bc = c - b
    ac = c - a
    cross = np.abs(ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0])
    denom = (np.linalg.norm(ab, axis=1) * np.linalg.norm(bc, axis=1)
             * np.linalg.norm(ac, axis=1))
    curv = 2.0 * cross / np.maximum(denom, 1e-12)
    return 1.0 / max(curv.max(), 1e-12)


def main() -> int:
    out_dir = Path(__file__).resolve().parents[1] / "src" / "overtake" / "tracks"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, builder in (("oval", oval), ("hairpin", hairpin),
                          ("chicane", chicane)):
        pts = builder()
        seg = np.linalg.norm(np.diff(np.vstack([pts, pts[:1]]), axis=0), axis=1)
        radius = min_turn_radius(pts)
        if radius < 4.0 * HALF_WIDTH:
            print(f"{name}: min radius {radius:.1f} m too tight for "
                  f"half-width {HALF_WIDTH}", file=sys.stderr)
            return 1
        path = out_dir / f"{name}.track"
        with open(path, "w") as f:
            f.write(f"halfwidth {HALF_WIDTH}\n")
            for x, y in pts:
                f.write(f"{x:.6f} {y:.6f}\n")
        print(f"{name}: {len(pts)} points, length {seg.sum():.1f} m, "
              f"min radius {radius:.1f} m -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
