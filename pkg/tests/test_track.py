import math

import numpy as np
import pytest

from metampc.errors import ProjectionDiverged
from metampc.track import Track, project_points, track_project


@pytest.fixture
def circle():
    angles = np.linspace(0.0, 2 * math.pi, 120, endpoint=False)
    return Track(np.column_stack([np.cos(angles), np.sin(angles)]), half_width=0.2)


def test_circle_length(circle):
    assert circle.length == pytest.approx(2 * math.pi, rel=1e-3)


def test_wrap(circle):
    assert float(circle.wrap(circle.length + 0.5)) == pytest.approx(0.5)
    assert float(circle.wrap(-0.5)) == pytest.approx(circle.length - 0.5)


def test_tangent_and_normal_are_unit(circle):
    s = np.linspace(0, circle.length, 17)
    t, n = circle.tangent(s), circle.normal(s)
    np.testing.assert_allclose(np.linalg.norm(t, axis=1), 1.0)
    np.testing.assert_allclose(np.sum(t * n, axis=1), 0.0, atol=1e-12)
    # counterclockwise circle: the left normal points to the center
    np.testing.assert_allclose(n, -circle.position(s), atol=1e-3)


def test_projection_on_centerline(circle):
    s0 = 1.3
    s, e_lat = track_project(circle, circle.position(s0), s_hint=1.1)
    assert s == pytest.approx(s0, abs=1e-6)
    assert abs(e_lat) <= 1e-6


def test_projection_of_offset_point(circle):
    s0 = np.array([0.4, 2.0, 5.5])
    points = circle.position(s0) + 0.1 * circle.normal(s0)
    s, e_lat = project_points(circle, points, s0 + 0.05)
    np.testing.assert_allclose(e_lat, 0.1, atol=1e-4)
    np.testing.assert_allclose(s, s0, atol=1e-4)


def test_projection_budget(circle):
    with pytest.raises(ProjectionDiverged):
        project_points(circle, [[0.5, 0.5]], [3.0], max_iters=0)


def test_default_track():
    track = Track.default()
    assert track.closed
    assert track.half_width == 0.2
    assert 8.0 < track.length < 14.0
    s, e_lat = track_project(track, track.position(3.0), 2.9)
    assert s == pytest.approx(3.0, abs=1e-6)
    assert abs(e_lat) <= 1e-6


def test_track_from_csv(tmp_path):
    angles = np.linspace(0.0, 2 * math.pi, 80, endpoint=False)
    rows = "\n".join(f"{math.cos(a)},{math.sin(a)}" for a in angles)
    path = tmp_path / "track.csv"
    path.write_text("x,y\n" + rows + "\n")
    track = Track.from_csv(path, half_width=0.3)
    assert track.length == pytest.approx(2 * math.pi, rel=1e-2)


def test_track_validation():
    with pytest.raises(ValueError):
        Track([[0, 0], [1, 0], [1, 1]], half_width=0.2)
    with pytest.raises(ValueError):
        Track([[0, 0], [1, 0], [1, 1], [0, 1]], half_width=0.2)


def test_projection_matches_dense_scan():
    track = Track.default()
    s_grid, grid = track.sample(10_000)
    spacing = track.length / 10_000
    rng = np.random.default_rng(3)
    s0 = rng.uniform(0.0, track.length, 12)
    offsets = rng.uniform(-0.1, 0.1, 12)
    points = track.position(s0) + offsets[:, None] * track.normal(s0)
    s, e_lat = project_points(track, points, s0 + 0.05)
    for k, point in enumerate(points):
        distances = np.linalg.norm(grid - point, axis=1)
        nearest = s_grid[np.argmin(distances)]
        gap = (s[k] - nearest + track.length / 2) % track.length - track.length / 2
        assert abs(gap) <= spacing
        assert abs(e_lat[k]) <= distances.min() + 1e-9
        assert abs(e_lat[k]) == pytest.approx(distances.min(), abs=spacing)
