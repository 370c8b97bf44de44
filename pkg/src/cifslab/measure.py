"""Atomic approximations of the natural measure and the range queries on them.

Conventions: balls are closed, cubes are half-open ``prod [c - r/2, c + r/2)``,
strip bands are half-open ``[lower, upper)`` in the distance to the surface.
Measures of query regions are summed with ``math.fsum`` so that the value
is independent of the order in which atoms are visited.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError
from .ifs import LimitSetApprox

SURFACE_HIT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    points: np.ndarray
    weights: np.ndarray
    resolution: float
    diameter_bound: float

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise DomainError("atom weights must be positive")
        if self.points.shape[0] != self.weights.shape[0]:
            raise DomainError("points and weights differ in length")

    def __len__(self):
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @cached_property
    def total_mass(self) -> float:
        return math.fsum(self.weights)

    @cached_property
    def index(self) -> cKDTree:
        return cKDTree(self.points)

    def ball_indices(self, x, r: float) -> np.ndarray:
        """Sorted indices of atoms in the closed ball ``B(x, r)``."""
        x = np.asarray(x, dtype=float)
        cand = np.sort(np.asarray(self.index.query_ball_point(x, r * (1 + 1e-9) + 1e-300), dtype=int))
        pts = self.points[cand]
        return cand[np.sum((pts - x) ** 2, axis=1) <= r * r]

    def nearest_distance(self, y) -> np.ndarray:
        d, _ = self.index.query(np.atleast_2d(y))
        return d


def natural_measure(approx: LimitSetApprox, t: float | None = None) -> AtomicMeasure:
    """One atom per cylinder with weight ``prod ratio_i**t`` along its word."""
    if t is None or t == approx.dimension:
        weights = approx.weights
    else:
        per_letter = approx.spec.ratios**t
        weights = np.prod(per_letter[approx.words.astype(np.int64) - 1], axis=1) if approx.depth else np.ones(1)
    return AtomicMeasure(approx.atoms, np.asarray(weights, dtype=float), approx.resolution,
                         approx.spec.seed_diameter)


@dataclass(frozen=True)
class HalfOpenCube:
    center: np.ndarray
    side: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.side > 0:
            raise DomainError(f"cube side must be positive, got {self.side}")

    @property
    def lo(self):
        return self.center - self.side / 2

    @property
    def hi(self):
        return self.center + self.side / 2

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lo) & (p < self.hi), axis=1)

    def distance(self, points) -> np.ndarray:
        """Euclidean distance from points to the closure of the cube."""
        p = np.atleast_2d(points)
        gap = np.maximum(np.maximum(self.lo - p, p - self.hi), 0.0)
        return np.sqrt(np.sum(gap * gap, axis=1))


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise DomainError(f"ball radius must be positive, got {self.radius}")

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.sum((p - self.center) ** 2, axis=1) <= self.radius**2


def ball_measure(mu: AtomicMeasure, x, r: float) -> float:
    if not r > 0:
        raise DomainError(f"radius must be positive, got {r}")
    return math.fsum(mu.weights[mu.ball_indices(x, r)])


def cube_indices(mu: AtomicMeasure, cube: HalfOpenCube) -> np.ndarray:
    half_diag = 0.5 * cube.side * math.sqrt(mu.dim)
    cand = np.sort(np.asarray(mu.index.query_ball_point(cube.center, half_diag * (1 + 1e-9)), dtype=int))
    return cand[cube.contains(mu.points[cand])]


def cube_measure(mu: AtomicMeasure, cube: HalfOpenCube) -> float:
    return math.fsum(mu.weights[cube_indices(mu, cube)])


@dataclass(frozen=True, eq=False)
class DirectionPlane:
    """The affine plane ``basepoint + V`` described by an orthonormal normal basis."""

    basepoint: np.ndarray
    normal_basis: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.basepoint, dtype=float)
        nb = np.atleast_2d(np.asarray(self.normal_basis, dtype=float))
        if nb.shape[1] != base.shape[0] or nb.shape[0] >= base.shape[0]:
            raise DomainError("normal basis must have between 1 and n-1 vectors of length n")
        if np.max(np.abs(nb @ nb.T - np.eye(nb.shape[0]))) > 1e-12:
            raise DomainError("normal basis is not orthonormal to within 1e-12")
        object.__setattr__(self, "basepoint", base)
        object.__setattr__(self, "normal_basis", nb)

    @property
    def dim(self) -> int:
        return self.basepoint.shape[0]

    @property
    def plane_dim(self) -> int:
        return self.dim - self.normal_basis.shape[0]

    @cached_property
    def plane_basis(self) -> np.ndarray:
        """Orthonormal basis of the directions parallel to the plane."""
        _, _, vt = np.linalg.svd(self.normal_basis)
        return vt[self.normal_basis.shape[0]:]

    def distance(self, points) -> np.ndarray:
        p = np.atleast_2d(points) - self.basepoint
        return np.sqrt(np.sum((p @ self.normal_basis.T) ** 2, axis=1))

    def through(self, point) -> "DirectionPlane":
        return DirectionPlane(point, self.normal_basis)

    @classmethod
    def line(cls, angle: float, basepoint=(0.0, 0.0)) -> "DirectionPlane":
        """Planar line through ``basepoint`` with direction ``(cos angle, sin angle)``."""
        return cls(basepoint, [[-math.sin(angle), math.cos(angle)]])

    @classmethod
    def coordinate(cls, i: int, basepoint) -> "DirectionPlane":
        """The hyperplane ``{y : y^i = basepoint^i}`` (``i`` is 1-based)."""
        base = np.asarray(basepoint, dtype=float)
        normal = np.zeros((1, base.shape[0]))
        normal[0, i - 1] = 1.0
        return cls(base, normal)

    @classmethod
    def spanned_by(cls, directions, basepoint) -> "DirectionPlane":
        base = np.asarray(basepoint, dtype=float)
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        _, s, vt = np.linalg.svd(dirs)
        rank = int(np.sum(s > 1e-12 * s.max()))
        if rank == 0:
            raise DomainError("spanning directions are all zero")
        full = np.linalg.svd(np.vstack([vt[:rank], np.zeros((base.shape[0] - rank, base.shape[0]))]))[2]
        return cls(base, full[rank:])


@dataclass(frozen=True, eq=False)
class SphereShell:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0:
            raise DomainError(f"sphere radius must be positive, got {self.radius}")

    def distance(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.abs(np.sqrt(np.sum((p - self.center) ** 2, axis=1)) - self.radius)

    def inside(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.sum((p - self.center) ** 2, axis=1) <= self.radius**2


def band_edges(a: float, k_max: int) -> np.ndarray:
    """Tail sums ``sum_{j >= k} a**j`` for ``k = 0 .. k_max + 1``."""
    return np.array([a**k / (1.0 - a) for k in range(k_max + 2)])


def band_index(d: np.ndarray, a: float, k_max: int) -> np.ndarray:
    """Band ``k`` with ``edge[k+1] <= d < edge[k]``, or -1 outside all bands."""
    edges = band_edges(a, k_max)
    cnt = np.searchsorted(edges[::-1], d, side="right")
    k = (k_max + 1) - cnt
    return np.where((cnt >= 1) & (cnt <= k_max + 1), k, -1)


@dataclass(frozen=True)
class StripFamily:
    surface: object
    a: float
    k_max: int
    strip_measures: tuple
    lower: tuple
    upper: tuple
    surface_hits: int


def _surface_distances(mu: AtomicMeasure, surface):
    d = surface.distance(mu.points)
    if isinstance(surface, SphereShell):
        keep = surface.inside(mu.points)
        return d, keep
    return d, np.ones(len(mu), dtype=bool)


def strip_family(mu: AtomicMeasure, surface, a: float, k_max: int) -> StripFamily:
    if not 0.0 < a < 1.0:
        raise DomainError(f"decay must lie in (0, 1), got {a}")
    if isinstance(surface, SphereShell) and not a < surface.radius:
        raise DomainError(f"decay {a} must be smaller than the sphere radius {surface.radius}")
    if k_max < 0:
        raise DomainError("k_max must be >= 0")
    d, keep = _surface_distances(mu, surface)
    k = band_index(d, a, k_max)
    k = np.where(keep, k, -1)
    order = np.argsort(k, kind="stable")
    ks, ws = k[order], mu.weights[order]
    bounds = np.searchsorted(ks, np.arange(k_max + 2))
    measures = tuple(math.fsum(ws[bounds[j]:bounds[j + 1]]) for j in range(k_max + 1))
    if math.fsum(measures) > mu.total_mass * (1 + 1e-12):
        raise AssertionError("strip masses exceed the total mass")
    edges = band_edges(a, k_max)
    hits = int(np.sum(keep & (d <= SURFACE_HIT_TOL)))
    return StripFamily(surface, a, k_max, measures, tuple(edges[1:]), tuple(edges[:-1]), hits)


def strip_mass(mu: AtomicMeasure, plane: DirectionPlane, half_width: float, cube: HalfOpenCube | None = None) -> float:
    """Mass of ``{d(., plane) < half_width}``, optionally intersected with a cube."""
    mask = plane.distance(mu.points) < half_width
    if cube is not None:
        mask &= cube.contains(mu.points)
    return math.fsum(mu.weights[mask])


@dataclass(frozen=True)
class GrowthReport:
    exponent: float
    C_hat: float
    worst_x: tuple
    worst_r: float
    radii: tuple
    sample_count: int


def dyadic_radii(mu: AtomicMeasure, min_factor: float = 4.0) -> np.ndarray:
    radii = []
    r = mu.diameter_bound
    while r >= min_factor * mu.resolution:
        radii.append(r)
        r /= 2.0
    return np.array(radii)


def growth_constant(mu: AtomicMeasure, exponent: float, sample_count: int = 256, seed: int = 0) -> GrowthReport:
    """Largest ``mu(B(x, r)) / r**exponent`` over sampled atoms and dyadic radii in ``[4h, d(X)]``."""
    if not exponent > 0:
        raise DomainError("exponent must be positive")
    rng = np.random.default_rng(seed)
    n = len(mu)
    xs = np.sort(rng.choice(n, size=min(n, sample_count), replace=False))
    radii = dyadic_radii(mu)
    if radii.size == 0:
        raise DomainError("resolution too coarse for any radius in [4h, d(X)]")
    best, worst = -1.0, (None, None)
    for j in xs:
        probe = cKDTree(mu.points[j:j + 1])
        # cumulative weighted counts within each radius (closed balls)
        masses = probe.count_neighbors(mu.index, radii, weights=(None, mu.weights), cumulative=True)
        ratios = np.asarray(masses, dtype=float) / radii**exponent
        m = int(np.argmax(ratios))
        if ratios[m] > best:
            best = float(ratios[m])
            worst = (tuple(float(v) for v in mu.points[j]), float(radii[m]))
    return GrowthReport(float(exponent), best, worst[0], worst[1], tuple(float(r) for r in radii), int(xs.size))


def write_atoms_csv(mu: AtomicMeasure, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([f"x{i + 1}" for i in range(mu.dim)] + ["weight"])
    for p, w in zip(mu.points, mu.weights):
        writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])


def measure_report(mu: AtomicMeasure, growth: GrowthReport | None = None) -> dict:
    out = {"total_mass": mu.total_mass, "resolution": mu.resolution, "atoms": len(mu)}
    if growth is not None:
        out["growth"] = {"exponent": growth.exponent, "C_hat": growth.C_hat,
                         "worst_x": list(growth.worst_x), "worst_r": growth.worst_r}
    return out
