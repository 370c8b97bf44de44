"""Directed hole search, grid holes, inductive cube coverings and strip series.

Every hole is certified against the atom cloud and then shrunk by ``2h``:
each point of the limit set lies within ``h`` of an atom, so a ball or cube
at distance ``>= 2h`` from all atoms misses the limit set itself.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, InvariantError, RefinementError
from .ifs import LimitSetApprox, box_ball_sqdist, required_depth, stopping_family
from .measure import (AtomicMeasure, DirectionPlane, HalfOpenCube, SphereShell, strip_family,
                      strip_mass)

MIN_SCALE_FACTOR = 16.0
NO_HOLE_FACTOR = 4.0
GUARD_FACTOR = 2.0
PROFILE_SCALE_FACTOR = 64.0
CONTAIN_SHRINK = 1e-12
COARSE_POINTS = {1: 257, 2: 41}
REFINE_POINTS = {1: 33, 2: 9}


@dataclass(frozen=True)
class HoleCertificate:
    center: np.ndarray
    hole_radius: float
    outer_center: np.ndarray
    outer_radius: float
    c_value: float
    clearance_margin: float
    status: str
    family_size: int = 0
    sequential_radius: float = 0.0

    @property
    def found(self) -> bool:
        return self.status == "hole"


def _plane_grid(m: int, count: int) -> np.ndarray:
    """Points of ``[-1, 1]^m`` on a regular grid, restricted to the unit ball."""
    axis = np.linspace(-1.0, 1.0, count)
    pts = np.array(list(itertools.product(axis, repeat=m)))
    return pts[np.sum(pts * pts, axis=1) <= 1.0 + 1e-15]


def _best(values: np.ndarray, centers: np.ndarray) -> int:
    """Index of the largest value; ties go to the lexicographically smallest center."""
    keys = [centers[:, j] for j in range(centers.shape[1] - 1, -1, -1)] + [-values]
    return int(np.lexsort(keys)[0])


class _HoleObjective:
    def __init__(self, mu: AtomicMeasure, x, r, guard):
        self.mu, self.x, self.r, self.guard = mu, x, r, guard

    def __call__(self, centers: np.ndarray) -> np.ndarray:
        contain = self.r * (1.0 - CONTAIN_SHRINK) - np.sqrt(np.sum((centers - self.x) ** 2, axis=1))
        nn, _ = self.mu.index.query(centers)
        return np.minimum(contain, nn - self.guard)


def _sequential_refinement(fam, x, r, basis):
    """Shrink a ball on ``V + x`` so that it avoids each stopping-family box in turn."""
    m = basis.shape[0]
    grid = _plane_grid(m, COARSE_POINTS.get(m, 9))
    z, l = x.copy(), r
    for lo, hi in fam.boxes:
        if box_ball_sqdist(lo, hi, z) > l * l:
            continue
        centers = z + (grid * l) @ basis
        inner = l - np.sqrt(np.sum((centers - z) ** 2, axis=1))
        outside = np.sqrt(box_ball_sqdist(lo, hi, centers))
        radii = np.minimum(inner, outside)
        j = _best(radii, centers)
        if radii[j] <= 0:
            return z, 0.0
        z, l = centers[j], float(radii[j])
    return z, l


def find_directed_hole(mu: AtomicMeasure, approx: LimitSetApprox, x, r: float,
                       V: DirectionPlane, n_starts: int = 6) -> HoleCertificate:
    """Largest certified ball ``B(y, c r)`` inside ``B(x, r)`` avoiding the set, with ``y`` on ``V + x``.

    A hole of radius below ``4h`` is returned with status ``"no-hole"``.
    """
    x = np.asarray(x, dtype=float)
    h = mu.resolution
    dX = approx.spec.seed_diameter
    if r < MIN_SCALE_FACTOR * h * (1 - 1e-12) or r > dX * (1 + 1e-12):
        raise DomainError(f"radius {r} outside [16h, d(X)] = [{MIN_SCALE_FACTOR * h}, {dX}]")
    basis = V.plane_basis
    m = basis.shape[0]
    guard = GUARD_FACTOR * h
    objective = _HoleObjective(mu, x, r, guard)

    fam = stopping_family(approx.spec, approx, x, min(r, dX), verify=False)
    z_seq, l_seq = _sequential_refinement(fam, x, r, basis)

    coarse = _plane_grid(m, COARSE_POINTS.get(m, 9))
    centers = np.vstack([x + (coarse * r) @ basis, z_seq[None, :]])
    values = objective(centers)
    step = 2.0 * r / (COARSE_POINTS.get(m, 9) - 1)
    order = np.lexsort([centers[:, j] for j in range(centers.shape[1] - 1, -1, -1)] + [-values])
    starts = centers[order[:n_starts]]
    local = _plane_grid(m, REFINE_POINTS.get(m, 5))
    pool_c, pool_v = [centers], [values]
    for start in starts:
        c, width = start, step
        for _ in range(4):
            cand = c + (local * width) @ basis
            val = objective(cand)
            pool_c.append(cand)
            pool_v.append(val)
            c = cand[_best(val, cand)]
            width /= 4.0
    all_c, all_v = np.vstack(pool_c), np.concatenate(pool_v)
    j = _best(all_v, all_c)
    y, hole = all_c[j], float(all_v[j])
    # snap back onto V + x exactly up to rounding
    y = x + ((y - x) @ basis.T) @ basis
    return certify_hole(mu, x, r, y, V, hole, family_size=len(fam.words), sequential_radius=l_seq)


def certify_hole(mu, x, r, y, V, hole, family_size=0, sequential_radius=0.0) -> HoleCertificate:
    h = mu.resolution
    hole = min(hole, r * (1.0 - CONTAIN_SHRINK) - float(np.linalg.norm(y - x)))
    nn = float(mu.nearest_distance(y)[0])
    hole = min(hole, nn - GUARD_FACTOR * h)
    status = "hole" if hole >= NO_HOLE_FACTOR * h else "no-hole"
    if status == "hole":
        if float(np.linalg.norm(y - x)) + hole > r:
            raise InvariantError("hole is not contained in the outer ball")
        if float(np.linalg.norm((y - x) @ V.normal_basis.T)) > 1e-12 * max(1.0, r):
            raise InvariantError("hole center is off the plane V + x")
        if nn - hole < 0:
            raise InvariantError("an atom lies inside the certified hole")
    radius = max(hole, 0.0)
    return HoleCertificate(center=y, hole_radius=radius, outer_center=x, outer_radius=float(r),
                           c_value=radius / r, clearance_margin=nn - radius, status=status,
                           family_size=family_size, sequential_radius=sequential_radius)


@dataclass(frozen=True)
class PorositySample:
    point: tuple
    atom_index: int
    radius: float
    c: float
    clearance_margin: float
    status: str
    center: tuple


@dataclass(frozen=True)
class PorosityProfile:
    direction: DirectionPlane
    samples: tuple
    c_estimate: float
    per_point: tuple
    seed: int
    n_points: int
    radii: tuple

    @property
    def no_hole_fraction(self) -> float:
        return float(np.mean([c == 0.0 for c in self.per_point]))


def profile_radii(mu: AtomicMeasure, n_scales: int, floor_factor: float = PROFILE_SCALE_FACTOR) -> np.ndarray:
    """``n_scales`` dyadic radii ``d(X) 2^-j``, spread evenly over ``[floor_factor h, d(X)/2]``."""
    cands = []
    r = mu.diameter_bound / 2.0
    while r >= floor_factor * mu.resolution:
        cands.append(r)
        r /= 2.0
    if not cands:
        raise RefinementError("approximation too coarse for any profile scale")
    picks = np.unique(np.round(np.linspace(0, len(cands) - 1, min(n_scales, len(cands)))).astype(int))
    return np.array([cands[p] for p in picks])


def porosity_profile(mu: AtomicMeasure, approx: LimitSetApprox, V: DirectionPlane, n_points: int,
                     n_scales: int, seed: int = 0, atom_indices=None, radii=None,
                     threads: int = 1) -> PorosityProfile:
    """Best certified ``c`` at sampled atoms and scales; the estimate is the min over both."""
    if n_points < 1 or n_scales < 1:
        raise DomainError("n_points and n_scales must be >= 1")
    if atom_indices is None:
        rng = np.random.default_rng(seed)
        atom_indices = np.sort(rng.choice(len(mu), size=min(n_points, len(mu)), replace=False))
    atom_indices = np.asarray(atom_indices, dtype=int)
    radii = profile_radii(mu, n_scales) if radii is None else np.asarray(radii, dtype=float)
    jobs = [(int(j), float(r)) for j in atom_indices for r in radii]

    def run(job):
        j, r = job
        x = mu.points[j]
        cert = find_directed_hole(mu, approx, x, r, V.through(x))
        c = cert.c_value if cert.found else 0.0
        return PorositySample(tuple(float(v) for v in x), j, r, c, cert.clearance_margin, cert.status,
                              tuple(float(v) for v in cert.center))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(run, jobs))
    else:
        samples = [run(job) for job in jobs]
    per_point = []
    for p in range(len(atom_indices)):
        chunk = samples[p * len(radii):(p + 1) * len(radii)]
        per_point.append(min(s.c for s in chunk))
    return PorosityProfile(V, tuple(samples), float(min(per_point)), tuple(per_point), seed,
                           len(atom_indices), tuple(float(r) for r in radii))


def hyperplane_directions(n: int, count: int, seed: int = 0) -> list:
    """Deterministic set of hyperplanes ``V in G(n, n-1)`` given by unit normals.

    In the plane these are the lines at angles ``j pi / count``.  In higher
    dimensions normals come from a spiral grid on the upper half sphere
    (exact for ``n = 3``), topped up with seeded random normals otherwise.
    """
    origin = np.zeros(n)
    if n == 2:
        return [DirectionPlane.line(j * math.pi / count, origin) for j in range(count)]
    normals = []
    if n == 3:
        golden = math.pi * (3.0 - math.sqrt(5.0))
        for j in range(count):
            zc = 1.0 - (j + 0.5) / count
            rad = math.sqrt(1.0 - zc * zc)
            normals.append([rad * math.cos(golden * j), rad * math.sin(golden * j), zc])
    rng = np.random.default_rng(seed)
    while len(normals) < count:
        v = rng.standard_normal(n)
        normals.append(v / np.linalg.norm(v))
    return [DirectionPlane(origin, [np.asarray(v) / np.linalg.norm(v)]) for v in normals]


@dataclass(frozen=True)
class GridSpec:
    center: np.ndarray
    side: float
    axis: int
    fineness: int
    points: np.ndarray


def grid_points(x, r: float, i: int, q: int) -> GridSpec:
    """Centers of the ``q^(n-1)`` subcubes of ``A(x, r)`` that sit on ``{y^i = x^i}``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if q < 1 or not r > 0 or not 1 <= i <= n:
        raise DomainError(f"need q >= 1, r > 0 and 1 <= i <= {n}")
    offsets = (x - r / 2.0)[:, None] + (r / (2.0 * q)) * (2.0 * np.arange(1, q + 1) - 1.0)[None, :]
    axes = [offsets[j] if j != i - 1 else np.array([x[j]]) for j in range(n)]
    pts = np.array(list(itertools.product(*axes)))
    return GridSpec(x, float(r), i, q, pts)


@dataclass(frozen=True)
class GridHole:
    center: np.ndarray
    clearance: float
    found: bool
    clearances: np.ndarray
    candidates: np.ndarray


def _cube_clearances(mu: AtomicMeasure, centers: np.ndarray, side: float) -> np.ndarray:
    """Distance from each closed cube to the nearest atom, capped at ``side``."""
    half_diag = 0.5 * side * math.sqrt(mu.dim)
    hits = mu.index.query_ball_point(centers, half_diag + side)
    out = np.full(centers.shape[0], side)
    for j, idx in enumerate(hits):
        if idx:
            p = mu.points[np.asarray(idx, dtype=int)]
            gap = np.maximum(np.abs(p - centers[j]) - side / 2.0, 0.0)
            out[j] = min(side, float(np.sqrt(np.sum(gap * gap, axis=1)).min()))
    return out


def find_grid_hole(mu: AtomicMeasure, cube: HalfOpenCube, i: int, M: int) -> GridHole:
    """Grid subcube of side ``r/M`` on ``{y^i = x^i}`` farthest from the atoms.

    Found when its clearance is at least ``2h``.
    """
    if M < 4 or M % 2:
        raise DomainError(f"M must be an even integer >= 4, got {M}")
    grid = grid_points(cube.center, cube.side, i, M)
    clear = _cube_clearances(mu, grid.points, cube.side / M)
    j = _best(clear, grid.points)
    found = bool(clear[j] >= GUARD_FACTOR * mu.resolution)
    return GridHole(grid.points[j], float(clear[j]), found, clear, grid.points)


@dataclass(frozen=True)
class MSelection:
    M: int
    success_rates: dict
    target: float
    reached: bool


def select_grid_m(mu: AtomicMeasure, cubes, i: int, target: float = 0.99,
                  M_start: int = 4, M_max: int = 64) -> MSelection:
    """Smallest ``M = M_start 2^j`` whose grid hole succeeds on a ``target`` share of ``cubes``.

    Cubes whose subcubes would fall below ``4h`` at a given ``M`` stop the search there.
    """
    cubes = list(cubes)
    if not cubes:
        raise DomainError("need at least one cube")
    rates = {}
    M = M_start
    while M <= M_max:
        if min(c.side for c in cubes) / M < NO_HOLE_FACTOR * mu.resolution:
            break
        ok = [find_grid_hole(mu, c, i, M).found for c in cubes]
        rates[M] = float(np.mean(ok))
        if rates[M] >= target:
            return MSelection(M, rates, target, True)
        M *= 2
    last = max(rates) if rates else M_start
    return MSelection(last, rates, target, False)


@dataclass(frozen=True)
class CoveringFamily:
    level: int
    side: float
    centers: np.ndarray
    counts: tuple
    failures: tuple
    expected_count: int
    coverage_ok: bool
    strip_atoms: int
    uncovered_atoms: int
    M: int
    axis: int

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    @property
    def cubes(self):
        return [HalfOpenCube(c, self.side) for c in self.centers]


def build_covering(mu: AtomicMeasure, approx: LimitSetApprox, x, r: float, i: int, M: int,
                   k: int) -> CoveringFamily:
    """Inductive cube family: every surviving cube spawns its grid subcubes minus its hole."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = mu.resolution
    final_side = r * float(M) ** (-k)
    if final_side < NO_HOLE_FACTOR * h:
        need = required_depth(approx.spec, final_side / NO_HOLE_FACTOR)
        raise RefinementError(f"cube side {final_side} below 4h; need depth >= {need}", required_depth=need)
    centers = x[None, :]
    side = float(r)
    counts = [1]
    failures = []
    for level in range(1, k + 1):
        children = []
        for c in centers:
            hole = find_grid_hole(mu, HalfOpenCube(c, side), i, M)
            grid = grid_points(c, side, i, M).points
            if hole.found:
                keep = ~np.all(grid == hole.center, axis=1)
                children.append(grid[keep])
            else:
                failures.append((level, tuple(float(v) for v in c), hole.clearance))
                children.append(grid)
        centers = np.vstack(children)
        side = side / M
        counts.append(centers.shape[0])
    strip_atoms, uncovered = _coverage(mu, x, r, i, centers, side)
    return CoveringFamily(level=k, side=side, centers=centers, counts=tuple(counts),
                          failures=tuple(failures), expected_count=(M ** (n - 1) - 1) ** k,
                          coverage_ok=uncovered == 0, strip_atoms=strip_atoms,
                          uncovered_atoms=uncovered, M=M, axis=i)


def _coverage(mu, x, r, i, centers, side):
    """Count atoms of the level strip inside ``A(x, r)`` missing every (2h-padded) cube."""
    outer = HalfOpenCube(x, r)
    mask = outer.contains(mu.points) & (np.abs(mu.points[:, i - 1] - x[i - 1]) < side / 2.0)
    pts = mu.points[mask]
    if pts.shape[0] == 0:
        return 0, 0
    pad = GUARD_FACTOR * mu.resolution
    base = x - r / 2.0
    free = [j for j in range(x.shape[0]) if j != i - 1]
    cells = int(round(r / side))
    cube_cells = np.round((centers[:, free] - side / 2.0 - base[free]) / side).astype(np.int64)
    codes = np.zeros(centers.shape[0], dtype=np.int64)
    for col in range(len(free)):
        codes = codes * (cells + 2) + (cube_cells[:, col] + 1)
    lo_cell = np.floor((pts[:, free] - pad - base[free]) / side).astype(np.int64)
    hi_cell = np.floor((pts[:, free] + pad - base[free]) / side).astype(np.int64)
    covered = np.zeros(pts.shape[0], dtype=bool)
    for choice in itertools.product((0, 1), repeat=len(free)):
        cell = np.where(np.array(choice, dtype=bool), hi_cell, lo_cell)
        code = np.zeros(pts.shape[0], dtype=np.int64)
        for col in range(len(free)):
            code = code * (cells + 2) + (cell[:, col] + 1)
        covered |= np.isin(code, codes)
    return int(pts.shape[0]), int(np.sum(~covered))


@dataclass(frozen=True)
class EnvelopeRow:
    k: int
    measured: float
    envelope: float
    slack: float


@dataclass(frozen=True)
class StripSeries:
    a: float
    measures: tuple
    terms: tuple
    partial_sums: tuple
    resolution_limited: tuple
    surface_hits: int
    envelope: tuple = ()

    @property
    def total(self) -> float:
        return self.partial_sums[-1]


def strip_envelope(mu: AtomicMeasure, x, i: int, M: int, k_max: int, C_hat: float,
                   side: float = 1.0) -> tuple:
    """Compare ``mu(V_x^i(M^-k / 2) & A(x, side))`` with ``C_hat sqrt(n)^(n-1) (1 - M^(1-n))^k``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    plane = DirectionPlane.coordinate(i, x)
    cube = HalfOpenCube(x, side)
    rows = []
    for k in range(k_max + 1):
        measured = strip_mass(mu, plane, 0.5 * side * float(M) ** (-k), cube)
        env = C_hat * math.sqrt(n) ** (n - 1) * (1.0 - float(M) ** (1 - n)) ** k
        rows.append(EnvelopeRow(k, measured, env, env / measured if measured > 0 else math.inf))
    return tuple(rows)


def strip_series(mu: AtomicMeasure, surface, a: float, k_max: int, envelope: dict | None = None) -> StripSeries:
    """Terms ``k mu(S_k)`` of the strip series with partial sums.

    ``envelope`` (keys ``x``, ``i``, ``C_hat``) adds the geometric bound
    comparison with ``M = 1/a``.
    """
    fam = strip_family(mu, surface, a, k_max)
    terms = tuple(k * m for k, m in enumerate(fam.strip_measures))
    partial = tuple(float(v) for v in np.cumsum(terms))
    limited = tuple(a**k < mu.resolution for k in range(k_max + 1))
    rows = ()
    if envelope is not None:
        M = int(round(1.0 / a))
        rows = strip_envelope(mu, envelope["x"], envelope["i"], M, k_max, envelope["C_hat"],
                              envelope.get("side", 1.0))
    return StripSeries(a, fam.strip_measures, terms, partial, limited, fam.surface_hits, rows)


def max_resolved_k(mu: AtomicMeasure, a: float) -> int:
    """Largest ``k`` whose band width ``a^k`` is still at least ``h``."""
    return int(math.floor(math.log(mu.resolution) / math.log(a) + 1e-12))
