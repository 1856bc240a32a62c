"""Shared track builders and fixtures."""

import numpy as np
import pytest

from overtake.track import TrackGeometry, bundled_track


def circle_track(radius=100.0, n=256, half_width=6.0, clockwise=False):
    """Closed circular track centered at the origin, counterclockwise by default."""
    th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    if clockwise:
        th = -th
    pts = radius * np.column_stack([np.cos(th), np.sin(th)])
    return TrackGeometry(pts, half_width)


def stadium_track(straight=300.0, radius=60.0, half_width=5.0, spacing=4.0):
    """Two straights joined by semicircles.

    Starts at (0, 0) heading +x along the bottom straight, so arc lengths in
    [0, straight] lie on a mathematically exact straight section with walls at
    lateral +-half_width.
    """
    n_straight = max(2, int(straight / spacing))
    n_arc = max(8, int(np.pi * radius / spacing))
    xs = np.linspace(0.0, straight, n_straight, endpoint=False)
    bottom = np.column_stack([xs, np.zeros_like(xs)])
    th = np.linspace(-np.pi / 2, np.pi / 2, n_arc, endpoint=False)
    right = np.column_stack([straight + radius * np.cos(th), radius + radius * np.sin(th)])
    top = np.column_stack([xs[::-1] + spacing, np.full_like(xs, 2 * radius)])
    th2 = np.linspace(np.pi / 2, 3 * np.pi / 2, n_arc, endpoint=False)
    left = np.column_stack([radius * np.cos(th2), radius + radius * np.sin(th2)])
    pts = np.vstack([bottom, right, top, left])
    return TrackGeometry(pts, half_width)


def rectangle_track(width=300.0, height=200.0, half_width=8.0, spacing=25.0):
    """Axis-aligned rectangle loop, perimeter = 2*(width+height).

    First edge runs from (0, 0) along +x, so small arc lengths live on an
    exactly straight, exactly zero-curvature section.
    """
    def edge(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(1, int(np.linalg.norm(b - a) / spacing))
        t = np.linspace(0.0, 1.0, n, endpoint=False)
        return a + t[:, None] * (b - a)

    pts = np.vstack([
        edge((0, 0), (width, 0)),
        edge((width, 0), (width, height)),
        edge((width, height), (0, height)),
        edge((0, height), (0, 0)),
    ])
    return TrackGeometry(pts, half_width)


def wiggly_track(rng, n=220, base=180.0, half_width=7.0):
    """Random smooth closed loop for randomized-geometry sweeps."""
    th = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    r = np.full_like(th, base)
    for k in range(2, 6):
        r += rng.uniform(2.0, 14.0) * np.cos(k * th + rng.uniform(0, 2 * np.pi))
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    return TrackGeometry(pts, half_width)


@pytest.fixture(scope="session")
def oval():
    return bundled_track("oval")


@pytest.fixture(scope="session")
def stadium():
    return stadium_track()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
