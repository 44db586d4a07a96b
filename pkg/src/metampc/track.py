"""Track centerline geometry and projection onto it."""

import csv
import logging
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import ProjectionDiverged

logger = logging.getLogger(__name__)

DEFAULT_TRACK = "default_track.csv"
MAX_PROJECTION_ITERS = 50


class Track:
    """
    A centerline through ordered waypoints, parameterized by arclength.

    The arclength of waypoint i is the cumulative chord length; x(s) and y(s)
    are cubic splines in s, periodic when the track is closed.
    """

    def __init__(self, waypoints, half_width: float, closed: bool = True):
        points = np.asarray(waypoints, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 4:
            raise ValueError("A track needs at least 4 waypoints given as (x, y) rows")
        if half_width <= 0:
            raise ValueError("half_width must be positive")
        if closed and np.allclose(points[0], points[-1]):
            points = points[:-1]

        knots = np.vstack([points, points[:1]]) if closed else points
        chords = np.linalg.norm(np.diff(knots, axis=0), axis=1)
        if np.any(chords <= 0):
            raise ValueError("Consecutive waypoints must be distinct")
        if np.max(chords) > half_width:
            raise ValueError(
                f"Waypoint spacing {np.max(chords):.3f} m exceeds the half-width {half_width} m"
            )

        self.waypoints = points
        self.half_width = float(half_width)
        self.closed = closed
        self.arclength = np.concatenate([[0.0], np.cumsum(chords)])
        self.length = float(self.arclength[-1])
        self._spline = CubicSpline(
            self.arclength, knots, axis=0, bc_type="periodic" if closed else "not-a-knot"
        )
        self._d1 = self._spline.derivative(1)
        self._d2 = self._spline.derivative(2)

    @classmethod
    def from_csv(cls, path: Path, half_width: float, closed: bool = True) -> "Track":
        """Load waypoints from a CSV file with header x,y."""
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            rows = [(float(r["x"]), float(r["y"])) for r in reader]
        return cls(rows, half_width, closed)

    @classmethod
    def default(cls, half_width: float = 0.2) -> "Track":
        """The oval-with-two-chicanes track shipped with the package."""
        with resources.as_file(resources.files("metampc") / "data" / DEFAULT_TRACK) as path:
            return cls.from_csv(path, half_width, closed=True)

    def wrap(self, s):
        """Map arclength into [0, length) on closed tracks, clip it on open ones."""
        s = np.asarray(s, dtype=float)
        return np.mod(s, self.length) if self.closed else np.clip(s, 0.0, self.length)

    def position(self, s) -> np.ndarray:
        return self._spline(self.wrap(s))

    def tangent(self, s) -> np.ndarray:
        """Unit tangent in the direction of travel."""
        d = self._d1(self.wrap(s))
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def heading(self, s):
        d = self._d1(self.wrap(s))
        return np.arctan2(d[..., 1], d[..., 0])

    def normal(self, s) -> np.ndarray:
        """Unit normal pointing to the left of the direction of travel."""
        t = self.tangent(s)
        return np.stack([-t[..., 1], t[..., 0]], axis=-1)

    def derivatives(self, s) -> tuple[np.ndarray, np.ndarray]:
        """First and second derivatives of the centerline with respect to arclength."""
        s = self.wrap(s)
        return self._d1(s), self._d2(s)

    def sample(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """count equally spaced (s, position) pairs along the centerline."""
        s = np.linspace(0.0, self.length, count, endpoint=not self.closed)
        return s, self.position(s)


def project_points(
    track: Track, points, s_hint, max_iters: int = MAX_PROJECTION_ITERS, tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray]:
    """
    Batched projection of points (B, 2) onto the centerline from arclength guesses.

    Solves (r(s) - P) . r'(s) = 0 by Newton's method, falling back to a
    gradient step where the Newton denominator is not positive.

    Returns:
        (s, e_lat) arrays; e_lat is positive to the left of the direction of travel

    Raises:
        ProjectionDiverged: If any point does not converge in max_iters iterations
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    s = np.broadcast_to(np.asarray(s_hint, dtype=float), P.shape[:1]).astype(float)
    max_step = 0.25 * track.length
    active = np.ones(s.shape, dtype=bool)

    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        si = s[idx]
        diff = track.position(si) - P[idx]
        d1, d2 = track.derivatives(si)
        g = np.sum(diff * d1, axis=1)
        h = np.sum(d1 * d1, axis=1) + np.sum(diff * d2, axis=1)
        fallback = np.sum(d1 * d1, axis=1)
        step = -g / np.where(h > 0, h, fallback)
        step = np.clip(step, -max_step, max_step)
        s[idx] = track.wrap(si + step)
        active[idx] = np.abs(step) > tol

    if np.any(active):
        raise ProjectionDiverged(
            f"Projection did not converge for {int(np.sum(active))} point(s) "
            f"in {max_iters} iterations"
        )

    offset = P - track.position(s)
    e_lat = np.sum(offset * track.normal(s), axis=1)
    return s, e_lat


def track_project(
    track: Track, point, s_hint: float, max_iters: int = MAX_PROJECTION_ITERS
) -> tuple[float, float]:
    """Arclength and signed lateral error of one point, warm-started at s_hint."""
    s, e_lat = project_points(track, np.asarray(point, dtype=float)[None, :], [s_hint], max_iters)
    return float(s[0]), float(e_lat[0])
