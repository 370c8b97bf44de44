import itertools
import math
import warnings

import numpy as np
import pytest

from cifslab.errors import CapacityError, DomainError, InvariantError, RefinementError
from cifslab.ifs import (SimilitudeMap, SystemSpec, bdp_cifs1_constants, cantor_dust_unrect3d, check_osc,
                         compose, four_corners, generate, load_system, map_box, segment2, sierpinski,
                         similarity_dimension, stopping_family)


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def overlapping_pair():
    maps = (SimilitudeMap(0.5, np.eye(2), np.zeros(2)), SimilitudeMap(0.5, np.eye(2), np.array([0.25, 0.0])))
    return SystemSpec(maps, np.zeros(2), np.ones(2))


# compose

def test_empty_word_is_identity():
    m = compose(four_corners(), ())
    assert m.ratio == 1.0
    assert np.array_equal(m.orthogonal, np.eye(2))
    assert np.array_equal(m.translation, np.zeros(2))


def test_single_letter_returns_map():
    m = compose(four_corners(), (2,))
    assert m.ratio == 0.25
    assert np.allclose(m.translation, [0.75, 0.0], atol=0, rtol=0)


def test_two_letter_composition():
    m = compose(four_corners(), (1, 2))
    assert m.ratio == 1 / 16
    assert np.allclose(m.translation, [3 / 16, 0.0], atol=1e-15)
    x = np.array([[0.3, 0.9]])
    assert np.allclose(m(x), x / 16 + [3 / 16, 0.0], atol=1e-15)


def test_compose_matches_pointwise_application():
    spec = sierpinski()
    rng = np.random.default_rng(1)
    pts = rng.random((5, 2))
    for _ in range(20):
        w = tuple(rng.integers(1, 4, size=rng.integers(1, 7)))
        expected = pts.copy()
        for a in reversed(w):
            expected = spec.maps[a - 1](expected)
        assert np.allclose(compose(spec, w)(pts), expected, atol=1e-14)


def test_letter_out_of_range_names_position():
    with pytest.raises(IndexError, match="position 2"):
        compose(four_corners(), (1, 5))


def test_ratio_multiplicativity():
    spec = four_corners()
    rng = np.random.default_rng(2)
    for _ in range(50):
        w = tuple(rng.integers(1, 5, size=rng.integers(0, 9)))
        v = tuple(rng.integers(1, 5, size=rng.integers(0, 9)))
        r = compose(spec, w + v).ratio
        assert math.isclose(r, compose(spec, w).ratio * compose(spec, v).ratio, rel_tol=1e-12)


def test_rotated_composition_ratio():
    maps = (SimilitudeMap(0.4, _rot(0.3), np.array([0.3, 0.3])), SimilitudeMap(0.3, np.eye(2), np.zeros(2)))
    spec = SystemSpec(maps, np.zeros(2), np.ones(2))
    assert math.isclose(compose(spec, (1, 1, 2)).ratio, 0.4 * 0.4 * 0.3, rel_tol=1e-12)


# system validation

def test_single_map_rejected():
    with pytest.raises(DomainError):
        SystemSpec((SimilitudeMap(0.5, np.eye(2), np.zeros(2)),), np.zeros(2), np.ones(2))


def test_map_leaving_seed_box_rejected():
    maps = (SimilitudeMap(0.5, np.eye(2), np.zeros(2)), SimilitudeMap(0.5, np.eye(2), np.array([0.75, 0.0])))
    with pytest.raises(DomainError):
        SystemSpec(maps, np.zeros(2), np.ones(2))


def test_non_orthogonal_rejected():
    with pytest.raises(DomainError):
        SimilitudeMap(0.5, np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2))


def test_ratio_one_map_rejected_in_system():
    maps = (SimilitudeMap(1.0, np.eye(2), np.zeros(2)), SimilitudeMap(0.5, np.eye(2), np.zeros(2)))
    with pytest.raises(DomainError):
        SystemSpec(maps, np.zeros(2), np.ones(2))


def test_json_round_trip():
    for name in ("four_corners", "segment2", "sierpinski", "cantor_dust_unrect3d"):
        spec = load_system(name)
        again = SystemSpec.from_dict(spec.to_dict())
        assert again.dim == spec.dim and again.card == spec.card
        for a, b in zip(spec.maps, again.maps):
            assert a.allclose(b, 0.0)


def test_unknown_builtin():
    with pytest.raises(DomainError):
        load_system("koch")


# generate

def test_depth_zero():
    a = generate(four_corners(), 0)
    assert len(a) == 1
    assert math.isclose(a.resolution, math.sqrt(2), rel_tol=1e-15)
    assert a.weights[0] == 1.0


def test_four_corners_depth_two():
    a = generate(four_corners(), 2)
    assert len(a) == 16
    assert np.allclose(a.box_hi - a.box_lo, 1 / 16, atol=0)
    assert np.all(a.weights == 1 / 16)


def test_segment_depth_three():
    a = generate(segment2(), 3)
    assert len(a) == 8
    assert np.allclose(a.diameters, 1 / 8, rtol=1e-15)


def test_words_are_lexicographic_and_indexable():
    a = generate(sierpinski(), 3)
    words = [tuple(int(v) for v in w) for w in a.words]
    assert words == list(itertools.product(range(1, 4), repeat=3))
    for j in (0, 5, 26):
        assert a.index_of(words[j]) == j


def test_atoms_inside_cylinder_boxes():
    for spec in (four_corners(), sierpinski(), segment2()):
        a = generate(spec, 5)
        assert np.all(a.atoms >= a.box_lo - 1e-15) and np.all(a.atoms <= a.box_hi + 1e-15)


def test_nesting_of_boxes():
    spec = sierpinski()
    a4, a5 = generate(spec, 4), generate(spec, 5)
    parent = np.arange(len(a5)) // spec.card
    assert np.all(a5.box_lo >= a4.box_lo[parent] - 1e-12)
    assert np.all(a5.box_hi <= a4.box_hi[parent] + 1e-12)


def test_cylinder_matches_compose():
    spec = four_corners()
    a = generate(spec, 3)
    for j in (0, 17, 63):
        cyl = a.cylinder(j)
        assert cyl.map.allclose(compose(spec, cyl.word), 1e-15)
        lo, hi = map_box(cyl.map, spec.seed_corner, spec.seed_sides)
        assert np.allclose(cyl.image_box[0], lo) and np.allclose(cyl.image_box[1], hi)
        assert math.isclose(cyl.diameter, cyl.map.ratio * spec.seed_diameter, rel_tol=1e-12)


def test_weight_conservation():
    for spec, depths in ((four_corners(), range(0, 10)), (sierpinski(), range(0, 11)), (segment2(), range(0, 13))):
        for k in depths:
            assert math.isclose(math.fsum(generate(spec, k).weights), 1.0, abs_tol=1e-10)


def test_unequal_ratio_weights():
    maps = (SimilitudeMap(0.5, np.eye(2), np.zeros(2)), SimilitudeMap(0.25, np.eye(2), np.array([0.75, 0.0])))
    spec = SystemSpec(maps, np.zeros(2), np.ones(2))
    t = similarity_dimension(spec)
    assert math.isclose(0.5**t + 0.25**t, 1.0, abs_tol=1e-12)
    a = generate(spec, 6)
    assert math.isclose(math.fsum(a.weights), 1.0, abs_tol=1e-12)
    assert math.isclose(a.weights[a.index_of((1, 2, 1, 1, 2, 2))], (0.5**t) ** 3 * (0.25**t) ** 3, rel_tol=1e-12)


def test_resolution_bound():
    spec = sierpinski()
    for k in range(6):
        a = generate(spec, k)
        assert a.resolution <= spec.uniform_ratio_bound**k * spec.seed_diameter * (1 + 1e-12)


def test_budget_exceeded():
    with pytest.raises(CapacityError) as err:
        generate(four_corners(), 6, budget=1000)
    assert err.value.required == 4096


# stopping families

def _brute_stopping(spec, x, r, max_depth):
    out = []
    for m in range(1, max_depth + 1):
        for w in itertools.product(range(1, spec.card + 1), repeat=m):
            cm = compose(spec, w)
            lo, hi = map_box(cm, spec.seed_corner, spec.seed_sides)
            if np.sum((np.clip(x, lo, hi) - x) ** 2) > r * r:
                continue
            parent = compose(spec, w[:-1]).ratio * spec.seed_diameter if m > 1 else math.inf
            if cm.ratio * spec.seed_diameter <= r < parent:
                out.append(w)
    return sorted(out)


def test_stopping_family_corner():
    spec = four_corners()
    fam = stopping_family(spec, generate(spec, 6), (0.0, 0.0), 0.3)
    assert fam.words == ((1, 1), (1, 2), (1, 3), (1, 4))


def test_stopping_family_far_ball_empty():
    spec = four_corners()
    assert stopping_family(spec, generate(spec, 4), (5.0, 5.0), 0.1).words == ()


def test_stopping_family_segment_closed_ball():
    # the closed ball B(0, 1/2) touches the second half-segment at (1/2, 0)
    spec = segment2()
    fam = stopping_family(spec, generate(spec, 6), (0.0, 0.0), 0.5)
    assert fam.words == ((1,), (2,))
    fam = stopping_family(spec, generate(spec, 6), (0.0, 0.0), 0.49)
    assert fam.words == ((1, 1), (1, 2))


def test_stopping_family_matches_brute_force():
    spec = four_corners()
    approx = generate(spec, 7)
    rng = np.random.default_rng(3)
    for _ in range(15):
        x = rng.uniform(-0.2, 1.2, size=2)
        r = float(rng.uniform(0.02, 0.6))
        assert list(stopping_family(spec, approx, x, r).words) == _brute_stopping(spec, x, r, 5)


def test_stopping_family_coverage_and_sandwich():
    spec = four_corners()
    approx = generate(spec, 10)
    rng = np.random.default_rng(4)
    smin = spec.ratios.min()
    for _ in range(100):
        x = approx.atoms[rng.integers(len(approx))]
        r = float(10 ** rng.uniform(-2.5, 0))
        fam = stopping_family(spec, approx, x, r)  # verify=True checks coverage
        d = np.array(fam.diameters)
        assert np.all(d <= r) and np.all(d >= smin * r * (1 - 1e-12))


def test_stopping_family_errors():
    spec = four_corners()
    with pytest.raises(DomainError):
        stopping_family(spec, generate(spec, 3), (0, 0), 2.0)
    with pytest.raises(RefinementError) as err:
        stopping_family(spec, generate(spec, 2), (0, 0), 0.01)
    assert err.value.required_depth == 4


def test_stopping_family_detects_broken_cover():
    spec = four_corners()
    approx = generate(spec, 5)
    approx.atoms[0] = [0.5, 0.5]  # atom moved outside every cylinder
    with pytest.raises(InvariantError):
        stopping_family(spec, approx, (0.5, 0.5), 0.2)


# osc and dimension

def test_osc_builtins():
    for name in ("four_corners", "segment2", "sierpinski", "cantor_dust_unrect3d"):
        assert check_osc(load_system(name)).satisfied


def test_osc_overlap_witness():
    rep = check_osc(overlapping_pair())
    assert not rep.satisfied and rep.witness == (1, 2)


def test_osc_rotated_disjoint_and_overlapping():
    disjoint = (SimilitudeMap(0.3, _rot(math.pi / 4), np.array([0.5, 0.0])),
                SimilitudeMap(0.3, np.eye(2), np.array([0.0, 0.7])))
    assert check_osc(SystemSpec(disjoint, np.zeros(2), np.ones(2))).satisfied
    overlap = (SimilitudeMap(0.5, _rot(math.pi / 4), np.array([0.5, 0.0])),
               SimilitudeMap(0.5, np.eye(2), np.array([0.25, 0.0])))
    assert not check_osc(SystemSpec(overlap, np.zeros(2), np.ones(2))).satisfied


def test_similarity_dimension():
    assert similarity_dimension(four_corners()) == 1.0
    assert similarity_dimension(segment2()) == 1.0
    assert math.isclose(similarity_dimension(sierpinski()), math.log(3) / math.log(2), rel_tol=1e-15)
    assert math.isclose(similarity_dimension(cantor_dust_unrect3d()), 1.5, rel_tol=1e-15)


def test_similarity_dimension_warns_without_osc():
    with pytest.warns(UserWarning):
        similarity_dimension(overlapping_pair())


# distortion constants

def test_bdp_four_corners():
    spec = four_corners()
    rep = bdp_cifs1_constants(spec, generate(spec, 7))
    assert rep.K_bdp == 1.0
    assert abs(rep.D - math.sqrt(2)) <= 0.05 * math.sqrt(2)


def test_bdp_segment():
    spec = segment2()
    rep = bdp_cifs1_constants(spec, generate(spec, 10))
    assert rep.K_bdp == 1.0
    assert abs(rep.D - 1.0) <= 0.05


def test_no_warning_for_builtins():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        generate(sierpinski(), 2)
