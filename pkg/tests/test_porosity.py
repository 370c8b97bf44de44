import math

import numpy as np
import pytest

from cifslab.errors import DomainError, RefinementError
from cifslab.ifs import four_corners, generate, segment2, sierpinski
from cifslab.measure import DirectionPlane, HalfOpenCube, SphereShell, growth_constant, natural_measure
from cifslab.porosity import (build_covering, find_directed_hole, find_grid_hole, grid_points, hyperplane_directions,
                              max_resolved_k, porosity_profile, profile_radii, select_grid_m, strip_envelope,
                              strip_series)


@pytest.fixture(scope="module")
def fc8():
    a = generate(four_corners(), 8)
    return a, natural_measure(a)


@pytest.fixture(scope="module")
def fc6():
    a = generate(four_corners(), 6)
    return a, natural_measure(a)


def brute_clearance(mu, centers):
    """Distance from each center to the nearest atom, without the spatial index."""
    return np.array([np.sqrt(np.min(np.sum((mu.points - c) ** 2, axis=1))) for c in centers])


def brute_hole_radius(mu, x, r, V, samples=10001):
    """Best on-line hole radius (after the 2h guard) over a fine grid of centers in B(x, r)."""
    d = V.plane_basis[0]
    t = np.linspace(-r, r, samples)
    centers = x + t[:, None] * d
    rad = np.minimum(brute_clearance(mu, centers), r - np.abs(t)) - 2 * mu.resolution
    return float(rad.max())


# directed holes

def test_corner_hole_horizontal(fc8):
    a, mu = fc8
    x = np.zeros(2)
    cert = find_directed_hole(mu, a, x, 0.5, DirectionPlane.line(0.0, x))
    assert cert.found and cert.c_value >= 1 / 8
    assert cert.center[1] == 0.0
    assert cert.hole_radius >= brute_hole_radius(mu, x, 0.5, DirectionPlane.line(0.0, x)) - 1e-3


def test_certificate_invariants_full_scan(fc6):
    a, mu = fc6
    rng = np.random.default_rng(0)
    for _ in range(12):
        x = mu.points[rng.integers(len(mu))]
        r = float(rng.choice([0.5, 0.25, 0.1, 0.05]))
        V = DirectionPlane.line(float(rng.uniform(0, math.pi)), x)
        cert = find_directed_hole(mu, a, x, r, V)
        if not cert.found:
            continue
        y = np.asarray(cert.center)
        assert np.linalg.norm(y - x) + cert.hole_radius <= r
        assert V.distance(y[None, :])[0] <= 1e-12
        assert np.all(np.linalg.norm(mu.points - y, axis=1) > cert.hole_radius)
        assert cert.clearance_margin >= 0


def test_search_close_to_brute_force(fc6):
    a, mu = fc6
    for x, theta, r in (((0.0, 0.0), 0.0, 0.5), ((0.25, 0.0), math.pi / 2, 0.25), ((0.8, 0.8), 0.7, 0.3)):
        x = np.asarray(x)
        V = DirectionPlane.line(theta, x)
        cert = find_directed_hole(mu, a, x, r, V)
        assert cert.hole_radius >= brute_hole_radius(mu, x, r, V) - 2e-3 * r


def test_segment_own_direction_no_hole():
    a = generate(segment2(), 12)
    mu = natural_measure(a)
    x = np.array([0.5, 0.0])
    cert = find_directed_hole(mu, a, x, 0.25, DirectionPlane.line(0.0, x))
    assert cert.status == "no-hole" and not cert.found
    assert brute_hole_radius(mu, x, 0.25, DirectionPlane.line(0.0, x)) < 4 * mu.resolution


def test_empty_region_hole(fc6):
    a, mu = fc6
    x = np.array([10.0, 10.0])
    cert = find_directed_hole(mu, a, x, 1.0, DirectionPlane.line(0.3, x))
    assert cert.found and math.isclose(cert.c_value, 1 - 1e-12, rel_tol=0, abs_tol=1e-15)
    assert np.allclose(cert.center, x)


def test_radius_precondition(fc6):
    a, mu = fc6
    with pytest.raises(DomainError):
        find_directed_hole(mu, a, mu.points[0], 8 * mu.resolution, DirectionPlane.line(0.0))


def test_hole_search_deterministic(fc6):
    a, mu = fc6
    x = mu.points[77]
    V = DirectionPlane.line(1.1, x)
    c1, c2 = find_directed_hole(mu, a, x, 0.2, V), find_directed_hole(mu, a, x, 0.2, V)
    assert np.array_equal(c1.center, c2.center) and c1.hole_radius == c2.hole_radius


def test_hole_in_three_dimensions():
    from cifslab.ifs import cantor_dust_unrect3d
    a = generate(cantor_dust_unrect3d(), 4)
    mu = natural_measure(a)
    x = mu.points[0]
    V = DirectionPlane.coordinate(3, x)
    cert = find_directed_hole(mu, a, x, 0.5, V)
    assert cert.found
    assert np.all(np.linalg.norm(mu.points - np.asarray(cert.center), axis=1) > cert.hole_radius)


# profiles

def test_profile_radii_range(fc8):
    _, mu = fc8
    radii = profile_radii(mu, 5)
    assert radii.max() <= mu.diameter_bound / 2 and radii.min() >= 64 * mu.resolution
    assert len(radii) == 5


def test_horizontal_profile_positive():
    a = generate(four_corners(), 8)
    mu = natural_measure(a)
    p = porosity_profile(mu, a, DirectionPlane.line(0.0), 16, 3, seed=1)
    assert p.c_estimate >= 0.05
    assert all(s.status == "hole" for s in p.samples)


def test_profile_thread_invariance(fc6):
    a, mu = fc6
    V = DirectionPlane.line(0.4)
    p1 = porosity_profile(mu, a, V, 8, 2, seed=2, threads=1)
    p4 = porosity_profile(mu, a, V, 8, 2, seed=2, threads=4)
    assert p1.samples == p4.samples and p1.c_estimate == p4.c_estimate


def test_scale_consistency(fc8):
    a, mu = fc8
    rng = np.random.default_rng(5)
    V = DirectionPlane.line(0.0)
    for j in rng.choice(len(mu), 6, replace=False):
        x = mu.points[j]
        c1 = find_directed_hole(mu, a, x, 0.25, V.through(x)).c_value
        c2 = find_directed_hole(mu, a, x, 0.0625, V.through(x)).c_value
        assert 0.5 <= c1 / c2 <= 2.0


def test_sierpinski_edge_point_no_hole():
    a = generate(sierpinski(), 9)
    mu = natural_measure(a)
    x = np.array([0.5, 0.0])
    cert = find_directed_hole(mu, a, x, 0.125, DirectionPlane.line(0.0, x))
    assert cert.status == "no-hole"


def test_hyperplane_directions():
    dirs = hyperplane_directions(2, 4)
    assert [round(float(np.arctan2(*V.plane_basis[0][::-1])) % math.pi, 12) for V in dirs] == \
        [round(j * math.pi / 4, 12) for j in range(4)]
    three = hyperplane_directions(3, 8)
    assert len(three) == 8 and all(V.plane_dim == 2 for V in three)
    assert hyperplane_directions(4, 5, seed=3)[4].normal_basis.tolist() == \
        hyperplane_directions(4, 5, seed=3)[4].normal_basis.tolist()


# grids

def test_grid_points_formula():
    g = grid_points([0.0, 0.0], 1.0, 1, 2)
    assert sorted(map(tuple, g.points.tolist())) == [(0.0, -0.25), (0.0, 0.25)]
    assert grid_points([0.0, 0.0], 1.0, 1, 1).points.tolist() == [[0.0, 0.0]]
    assert grid_points([0.0, 0.0, 0.0], 1.0, 3, 2).points.shape == (4, 3)


def test_grid_points_general_formula():
    x, r, q = np.array([0.3, -0.2, 0.7]), 0.8, 3
    pts = grid_points(x, r, 2, q).points
    assert pts.shape == (9, 3) and np.all(pts[:, 1] == x[1])
    allowed = (x[0] - r / 2) + r / (2 * q) * (2 * np.arange(1, q + 1) - 1)
    assert np.all(np.isin(pts[:, 0], allowed))


def test_grid_hole_unit_cube(fc8):
    _, mu = fc8
    hole = find_grid_hole(mu, HalfOpenCube([0.5, 0.5], 1.0), 2, 4)
    assert hole.found
    assert tuple(hole.center) in ((0.375, 0.5), (0.625, 0.5))


def test_grid_hole_disjoint_cube(fc8):
    _, mu = fc8
    hole = find_grid_hole(mu, HalfOpenCube([5.0, 5.0], 1.0), 1, 4)
    assert hole.found and np.all(hole.clearances == 0.25)


def test_segment_grid_no_hole():
    mu = natural_measure(generate(segment2(), 10))
    hole = find_grid_hole(mu, HalfOpenCube([0.5, 0.0], 0.5), 2, 4)
    assert not hole.found


def test_grid_hole_rejects_odd_m(fc8):
    _, mu = fc8
    with pytest.raises(DomainError):
        find_grid_hole(mu, HalfOpenCube([0.5, 0.5], 1.0), 2, 5)


def test_grid_hole_monotone_in_m(fc8):
    _, mu = fc8
    rng = np.random.default_rng(7)
    for j in rng.choice(len(mu), 20, replace=False):
        cube = HalfOpenCube(mu.points[j], 0.25)
        if find_grid_hole(mu, cube, 2, 4).found:
            assert find_grid_hole(mu, cube, 2, 8).found


def test_select_grid_m(fc8):
    _, mu = fc8
    rng = np.random.default_rng(0)
    cubes = [HalfOpenCube(mu.points[j], 0.25) for j in rng.choice(len(mu), 40, replace=False)]
    sel = select_grid_m(mu, cubes, 1)
    assert sel.reached and sel.M == 4 and sel.success_rates[4] >= 0.99
    seg = natural_measure(generate(segment2(), 12))
    sel = select_grid_m(seg, [HalfOpenCube(seg.points[j], 0.25) for j in range(0, 4096, 512)], 2)
    assert not sel.reached


# coverings

def test_covering_counts(fc8):
    a, mu = fc8
    for M in (4, 8):
        for k in range(5):
            fam = build_covering(mu, a, [0.7, 0.2], 1.0, 2, M, k)
            assert fam.count == (M - 1) ** k == fam.expected_count
            assert fam.coverage_ok and not fam.failures


def test_covering_level_zero(fc8):
    a, mu = fc8
    fam = build_covering(mu, a, [0.5, 0.5], 1.0, 2, 4, 0)
    assert fam.count == 1 and np.allclose(fam.centers, [[0.5, 0.5]])


def test_covering_centre_example(fc8):
    a, mu = fc8
    fam = build_covering(mu, a, [0.5, 0.5], 1.0, 2, 4, 2)
    assert fam.count == 9 and math.isclose(fam.side, 1 / 16) and fam.coverage_ok


def test_covering_brute_coverage(fc8):
    a, mu = fc8
    x, r, M, k = np.array([0.7, 0.2]), 1.0, 4, 3
    fam = build_covering(mu, a, x, r, 2, M, k)
    assert fam.strip_atoms > 0
    pad = 2 * mu.resolution
    strip = [p for p in mu.points
             if np.all(p >= x - r / 2) and np.all(p < x + r / 2) and abs(p[1] - x[1]) < r * M**-k / 2]
    for p in strip:
        assert any(np.all(np.abs(p - c) <= fam.side / 2 + pad) for c in fam.centers)


def test_covering_resolution_error(fc6):
    a, mu = fc6
    with pytest.raises(RefinementError) as err:
        build_covering(mu, a, [0.7, 0.2], 1.0, 2, 8, 5)
    assert err.value.required_depth > 6


def test_covering_records_failures():
    a = generate(segment2(), 10)
    mu = natural_measure(a)
    fam = build_covering(mu, a, [0.5, 0.0], 0.5, 2, 4, 1)
    assert fam.failures and fam.count == 4


# strip series

def test_strip_series_terms():
    mu = natural_measure(generate(four_corners(), 9))
    ser = strip_series(mu, DirectionPlane.line(0.0), 0.25, 8)
    expected = [k * 2.0 ** -(k + 1) for k in range(9)]
    assert np.allclose(ser.terms, expected, atol=1e-15)
    assert np.allclose(ser.partial_sums, np.cumsum(expected), atol=1e-14)
    assert ser.total < 2


def test_strip_series_far_surface():
    mu = natural_measure(generate(four_corners(), 6))
    ser = strip_series(mu, SphereShell([10.0, 10.0], 2.0), 0.25, 5)
    assert ser.total == 0.0


def test_strip_series_resolution_flags():
    mu = natural_measure(generate(four_corners(), 4))
    k_res = max_resolved_k(mu, 0.25)
    ser = strip_series(mu, DirectionPlane.line(0.0), 0.25, k_res + 2)
    assert not any(ser.resolution_limited[:k_res + 1]) and all(ser.resolution_limited[k_res + 1:])


def test_strip_envelope_dominates():
    mu = natural_measure(generate(four_corners(), 9))
    C_hat = growth_constant(mu, 1.0).C_hat
    rows = strip_envelope(mu, [0.5, 0.0], 2, 4, 6, C_hat)
    assert all(row.slack >= 1 for row in rows)
    assert rows[0].measured == 0.5
