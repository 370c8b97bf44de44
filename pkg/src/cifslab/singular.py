"""Antisymmetric kernels, truncated operators and bilinear forms on atomic measures.

Pair sums are evaluated in fixed blocks of ``x`` atoms.  Each block reduces
its contributions into per-scale buckets, and the buckets are merged with
``math.fsum`` in block order, so results do not depend on the thread count.
The truncation predicate is the strict ``|x - y| > eps``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, InvariantError
from .measure import AtomicMeasure, Ball, HalfOpenCube, band_index, growth_constant

BLOCK_ROWS = 128
VALID_FLOOR_FACTOR = 10.0
VALID_CEIL_FACTOR = 0.1
DECAY_FACTOR = 1.2
MAX_INITIAL_STEPS = 2
CHAIN_TOL = 1e-9


# ---------------------------------------------------------------- kernels

@dataclass(frozen=True)
class KernelSpec:
    """Vectorized kernel ``K``: maps an ``(m, n)`` array of nonzero vectors to ``(m,)`` values.

    ``bound_constant`` is ``C_K`` in ``|K(x)| <= C_K |x|^-s`` with ``s = singular_exponent``.
    ``gradient_constant`` ``L`` (optional) bounds ``|grad K(x)| <= L |x|^-(s+1)``;
    ``None`` marks a kernel with no such bound (e.g. discontinuous ones).
    """
    evaluator: Callable[[np.ndarray], np.ndarray]
    bound_constant: float
    singular_exponent: float
    name: str
    gradient_constant: float | None = None

    def __call__(self, v) -> np.ndarray:
        return np.asarray(self.evaluator(np.atleast_2d(np.asarray(v, dtype=float))), dtype=float)


def _riesz_values(v: np.ndarray, i: int, m: float) -> np.ndarray:
    r = np.sqrt(np.sum(v * v, axis=1))
    return v[:, i - 1] / r ** (m + 1)


def riesz(i: int, m: float, dim: int | None = None) -> KernelSpec:
    """Riesz kernel ``R_i^m(x) = x_i / |x|^(m+1)``."""
    if i < 1 or (dim is not None and i > dim):
        raise DomainError(f"coordinate index {i} out of range")
    if not m > 0:
        raise DomainError("exponent m must be positive")

    def ev(v):
        return _riesz_values(v, i, m)

    return KernelSpec(ev, 1.0, float(m), f"riesz{i}^{m:g}", gradient_constant=max(1.0, float(m)))


def sign_modulated_riesz(i: int, m: float) -> KernelSpec:
    """``R_i^m(x) (-1)^floor(log2 |x|)``: antisymmetric, bounded like ``R_i^m``, discontinuous on dyadic spheres."""
    riesz(i, m)

    def ev(v):
        r = np.sqrt(np.sum(v * v, axis=1))
        sign = 1.0 - 2.0 * (np.floor(np.log2(r)).astype(np.int64) % 2)
        return _riesz_values(v, i, m) * sign

    return KernelSpec(ev, 1.0, float(m), f"stress{i}^{m:g}", gradient_constant=None)


def kernel_by_name(name: str, dim: int) -> KernelSpec:
    """Parse ``riesz<i>`` / ``riesz<i>^<m>`` / ``stress<i>`` (default ``m = dim - 1``)."""
    for prefix, make in (("riesz", riesz), ("stress", sign_modulated_riesz)):
        if name.startswith(prefix):
            body = name[len(prefix):]
            idx, _, m = body.partition("^")
            try:
                i = int(idx)
                mm = float(m) if m else float(dim - 1)
            except ValueError:
                break
            if not 1 <= i <= dim:
                raise DomainError(f"kernel coordinate {i} out of range for dimension {dim}")
            return make(i, mm)
    raise DomainError(f"unknown kernel {name!r}")


@dataclass(frozen=True)
class KernelCheck:
    antisymmetry_error: float
    growth_ratio: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.antisymmetry_error <= 1e-12 and self.growth_ratio <= 1.0 + 1e-12


def validate_kernel(K: KernelSpec, dim: int, count: int = 1000, seed: int = 0) -> KernelCheck:
    """Spot-check antisymmetry (relative) and the growth bound on seeded vectors."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((count, dim))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    v = dirs * 10.0 ** rng.uniform(-3, 3, size=count)[:, None]
    kp, km = K(v), K(-v)
    scale = np.maximum(np.abs(kp), np.finfo(float).tiny)
    anti = float(np.max(np.abs(kp + km) / scale))
    norms = np.linalg.norm(v, axis=1)
    growth = float(np.max(np.abs(kp) * norms ** K.singular_exponent / K.bound_constant))
    return KernelCheck(anti, growth, count)


# ---------------------------------------------------------- simple functions

def _region_contains(region, points: np.ndarray) -> np.ndarray:
    if region is None:
        return np.ones(points.shape[0], dtype=bool)
    return region.contains(points)


def _region_boundary_distance(region, points: np.ndarray) -> np.ndarray:
    if region is None:
        return np.full(points.shape[0], np.inf)
    if isinstance(region, HalfOpenCube):
        inside = np.minimum(points - region.lo, region.hi - points).min(axis=1)
        return np.where(inside >= 0, inside, region.distance(points))
    return np.abs(np.linalg.norm(points - region.center, axis=1) - region.radius)


@dataclass(frozen=True)
class SimpleFunction:
    """Finite sum of ``coef * indicator(region)``; a ``None`` region is the whole space."""
    terms: tuple = ()

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(pts.shape[0])
        for coef, region in self.terms:
            out += coef * _region_contains(region, pts)
        return out

    @classmethod
    def constant(cls, c: float = 1.0) -> "SimpleFunction":
        return cls(((float(c), None),)) if c else cls(())

    @classmethod
    def indicator(cls, region, coef: float = 1.0) -> "SimpleFunction":
        return cls(((float(coef), region),))

    @property
    def sup_bound(self) -> float:
        return math.fsum(abs(c) for c, _ in self.terms)

    def boundary_distance(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.full(pts.shape[0], np.inf)
        for _, region in self.terms:
            out = np.minimum(out, _region_boundary_distance(region, pts))
        return out

    def to_dict(self) -> list:
        rows = []
        for coef, region in self.terms:
            if region is None:
                rows.append({"coef": coef, "everywhere": True})
            elif isinstance(region, HalfOpenCube):
                rows.append({"coef": coef, "cube": {"center": [float(v) for v in region.center], "side": region.side}})
            else:
                rows.append({"coef": coef, "ball": {"center": [float(v) for v in region.center], "radius": region.radius}})
        return rows

    @classmethod
    def from_dict(cls, rows) -> "SimpleFunction":
        terms = []
        for j, row in enumerate(rows):
            coef = float(row.get("coef", 1.0))
            if row.get("everywhere"):
                terms.append((coef, None))
            elif "cube" in row:
                terms.append((coef, HalfOpenCube(np.asarray(row["cube"]["center"], float), float(row["cube"]["side"]))))
            elif "ball" in row:
                terms.append((coef, Ball(np.asarray(row["ball"]["center"], float), float(row["ball"]["radius"]))))
            else:
                raise DomainError(f"term {j}: expected one of 'cube', 'ball', 'everywhere'")
        return cls(tuple(terms))


# ------------------------------------------------------------- pointwise

def _check_schedule(schedule) -> np.ndarray:
    eps = np.asarray(schedule, dtype=float)
    if eps.ndim != 1 or eps.size == 0:
        raise DomainError("schedule must be a nonempty sequence")
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise DomainError("schedule must be positive and strictly decreasing")
    return eps


def dyadic_schedule(start: float, ratio: float, count: int) -> np.ndarray:
    if not (start > 0 and 0 < ratio < 1 and count >= 1):
        raise DomainError("need start > 0, ratio in (0, 1), count >= 1")
    return start * ratio ** np.arange(count)


def truncated_apply(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, x, eps: float) -> float:
    """``sum_{|x - p| > eps} K(x - p) f(p) w_p``."""
    if not eps > 0:
        raise DomainError("eps must be positive")
    return float(pointwise_trace(mu, K, f, x, [eps])[0])


def pointwise_trace(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, x, schedule) -> np.ndarray:
    """``T_eps(f)(x)`` for every ``eps`` of a decreasing schedule."""
    eps = _check_schedule(schedule)
    x = np.asarray(x, dtype=float)
    fv = f(mu.points)
    diff = x[None, :] - mu.points
    d = np.sqrt(np.sum(diff * diff, axis=1))
    out = []
    base = (d > eps.min()) & (fv != 0)
    kv = np.zeros(len(mu))
    kv[base] = K(diff[base]) * fv[base] * mu.weights[base]
    for e in eps:
        out.append(math.fsum(kv[d > e]))
    return np.array(out)


def maximal_sample(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, x, schedule) -> float:
    """``max_eps |T_eps(f)(x)|`` over the schedule."""
    return float(np.max(np.abs(pointwise_trace(mu, K, f, x, schedule))))


# ------------------------------------------------------------ pair sums

def _blocks(n_rows: int):
    return [(s, min(s + BLOCK_ROWS, n_rows)) for s in range(0, n_rows, BLOCK_ROWS)]


def _run_blocks(fn, blocks, threads: int):
    if threads <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, blocks))


def _merge(parts) -> np.ndarray:
    """Elementwise ``fsum`` over block results, taken in block order."""
    stack = np.array(parts)
    return np.array([math.fsum(stack[:, j]) for j in range(stack.shape[1])])


def _cumulative_from_top(buckets: np.ndarray) -> np.ndarray:
    """``out[j] = fsum(buckets[j+1:])``."""
    return np.array([math.fsum(buckets[j + 1:]) for j in range(buckets.size - 1)])


@dataclass(frozen=True)
class _PairPass:
    values: np.ndarray
    ties: np.ndarray
    tolerance: np.ndarray | None


def _pair_pass(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, g: SimpleFunction, eps: np.ndarray,
               threads: int = 1, h: float | None = None) -> _PairPass:
    """Bilinear values (and optionally the refinement tolerance) at every ``eps``, in input order."""
    asc = np.sort(eps)
    L = asc.size
    fv, gv = f(mu.points), g(mu.points)
    if h is not None:
        fb = f.boundary_distance(mu.points) <= 2.0 * h
        gb = g.boundary_distance(mu.points) <= 2.0 * h
        xs = np.flatnonzero((gv != 0) | gb)
        ys = np.flatnonzero((fv != 0) | fb)
        cut = max(asc[0] - 2.0 * h, 0.0)
        fsup, gsup = f.sup_bound, g.sup_bound
    else:
        xs = np.flatnonzero(gv != 0)
        ys = np.flatnonzero(fv != 0)
        cut = asc[0]
    P, w = mu.points, mu.weights
    py, wy, fy = P[ys], w[ys], fv[ys]
    C, s, Lg = K.bound_constant, K.singular_exponent, K.gradient_constant

    def block(bounds):
        lo, hi = bounds
        ix = xs[lo:hi]
        diff = P[ix][:, None, :] - py[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        keep = d > cut
        dk = d[keep]
        wxy = (w[ix][:, None] * wy[None, :])[keep]
        coef = (gv[ix][:, None] * fy[None, :])[keep]
        kv = K(diff[keep]) if dk.size else np.zeros(0)
        vals = kv * coef * wxy
        b = np.searchsorted(asc, dk, side="left")
        out = [np.bincount(b, weights=vals, minlength=L + 1)]
        out.append(np.array([np.count_nonzero(dk == e) for e in asc], dtype=float))
        if h is not None:
            near = (gb[ix][:, None] | fb[ys][None, :])[keep]
            safe = np.maximum(dk - 2.0 * h, np.finfo(float).tiny)
            jump = 2.0 * C * safe ** (-s) * wxy
            mag = np.abs(coef)
            # pairs near an f/g boundary: both terms bounded by |K| <= C_K (D - 2h)^-s
            bnd = np.where(near, jump * fsup * gsup, 0.0)
            out.append(np.bincount(np.searchsorted(asc, dk + 2.0 * h, side="left"), weights=bnd, minlength=L + 1))
            if Lg is not None:
                lip = np.where(near, 0.0, Lg * 2.0 * h * safe ** (-(s + 1)) * mag * wxy)
                out.append(np.bincount(np.searchsorted(asc, dk - 2.0 * h, side="left"), weights=lip, minlength=L + 1))
                jump_cols = [math.fsum(np.where(~near & (np.abs(dk - e) <= 2.0 * h), jump * mag, 0.0)) for e in asc]
            else:
                far = np.where(near, 0.0, jump * mag)
                out.append(np.bincount(np.searchsorted(asc, dk + 2.0 * h, side="left"), weights=far, minlength=L + 1))
                jump_cols = [0.0] * L
            out.append(np.array(jump_cols))
        return np.concatenate(out)

    parts = _run_blocks(block, _blocks(xs.size), threads)
    width = (L + 1) + L + ((L + 1) * 2 + L if h is not None else 0)
    merged = _merge(parts) if parts else np.zeros(width)
    values = _cumulative_from_top(merged[:L + 1])
    ties = merged[L + 1:2 * L + 1]
    tol = None
    if h is not None:
        o = 2 * L + 1
        bnd = _cumulative_from_top(merged[o:o + L + 1])
        other = _cumulative_from_top(merged[o + L + 1:o + 2 * (L + 1)])
        jump = merged[o + 2 * (L + 1):]
        tol = np.array([math.fsum((bnd[j], other[j], jump[j])) for j in range(L)])
        tol = np.where(asc > 4.0 * h, tol, np.inf)
    order = np.searchsorted(asc, eps)
    return _PairPass(values[order], ties[order].astype(int), None if tol is None else tol[order])


def bilinear_schedule(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, g: SimpleFunction, schedule,
                      threads: int = 1) -> np.ndarray:
    """``B_eps(f, g) = sum_{|x-y| > eps} K(x - y) f(y) g(x) w_x w_y`` for each ``eps``."""
    return _pair_pass(mu, K, f, g, _check_schedule(schedule), threads).values


def bilinear_form(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, g: SimpleFunction, eps: float,
                  threads: int = 1) -> float:
    if not eps > 0:
        raise DomainError("eps must be positive")
    return float(bilinear_schedule(mu, K, f, g, [eps], threads)[0])


# ------------------------------------------------------ weak convergence

def min_pair_distance(mu: AtomicMeasure) -> float:
    if len(mu) < 2:
        return math.inf
    d, _ = mu.index.query(mu.points, k=2)
    return float(d[:, 1].min())


def _increments(values: np.ndarray) -> np.ndarray:
    return np.abs(np.diff(values))


def _monotone_after(inc: np.ndarray, skip: int) -> bool:
    return any(bool(np.all(np.diff(inc[s:]) <= 0)) for s in range(min(skip, max(inc.size - 1, 0)) + 1))


def _decay_factor(inc: np.ndarray) -> float:
    if inc.size < 2 or inc[-1] <= 0:
        return math.inf if inc.size >= 2 else math.nan
    return float((inc[0] / inc[-1]) ** (1.0 / (inc.size - 1)))


@dataclass(frozen=True)
class ConvergenceTrace:
    depth: int | None
    resolution: float
    epsilons: np.ndarray
    values: np.ndarray
    increments: np.ndarray
    resolution_floor: float
    valid_floor: float
    valid_ceiling: float
    flags: tuple
    ties: np.ndarray
    tolerance: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.array([fl in ("ok", "tie") for fl in self.flags])

    @property
    def valid_increments(self) -> np.ndarray:
        return _increments(self.values[self.valid])

    @property
    def monotone(self) -> bool:
        return _monotone_after(self.valid_increments, MAX_INITIAL_STEPS)

    @property
    def decay_factor(self) -> float:
        return _decay_factor(self.valid_increments)

    def rows(self):
        """``(epsilon, value, increment, flag)``; the first increment is empty."""
        out = []
        for j, e in enumerate(self.epsilons):
            inc = "" if j == 0 else repr(float(self.increments[j - 1]))
            out.append((repr(float(e)), repr(float(self.values[j])), inc, self.flags[j]))
        return out


def _flags(eps, floor, valid_floor, ceiling, ties):
    out = []
    for e, t in zip(eps, ties):
        if e < floor:
            out.append("frozen")
        elif e < valid_floor:
            out.append("below-floor")
        elif e > ceiling:
            out.append("coarse")
        elif t:
            out.append("tie")
        else:
            out.append("ok")
    return tuple(out)


def convergence_trace(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, g: SimpleFunction, schedule,
                      depth: int | None = None, threads: int = 1) -> ConvergenceTrace:
    eps = _check_schedule(schedule)
    res = _pair_pass(mu, K, f, g, eps, threads, h=mu.resolution)
    floor = min_pair_distance(mu)
    vf = VALID_FLOOR_FACTOR * mu.resolution
    ceil = VALID_CEIL_FACTOR * mu.diameter_bound
    return ConvergenceTrace(depth, mu.resolution, eps, res.values, _increments(res.values), floor, vf, ceil,
                            _flags(eps, floor, vf, ceil, res.ties), res.ties, res.tolerance)


@dataclass(frozen=True)
class CrossDepthRow:
    coarse: int
    fine: int
    epsilon: float
    difference: float
    tolerance: float

    @property
    def agrees(self) -> bool:
        return self.difference <= self.tolerance


@dataclass(frozen=True)
class PointwiseDiagnostic:
    point: tuple
    atom_index: int
    values: np.ndarray
    increments: np.ndarray
    decay_factor: float

    @property
    def oscillating(self) -> bool:
        return not self.decay_factor >= DECAY_FACTOR


@dataclass(frozen=True)
class WeakConvergenceReport:
    traces: tuple
    cross_depth: tuple
    pointwise: tuple

    @property
    def agreement(self) -> bool:
        return all(r.agrees for r in self.cross_depth)

    @property
    def decaying(self) -> bool:
        return all(t.monotone and t.decay_factor >= DECAY_FACTOR for t in self.traces)

    @property
    def cauchy_consistent(self) -> bool:
        return bool(self.cross_depth) and self.agreement and self.decaying

    @property
    def max_disagreement(self) -> float:
        return max((r.difference for r in self.cross_depth), default=0.0)

    def verdict(self) -> dict:
        return {"cauchy_consistent": self.cauchy_consistent,
                "cross_depth_max_disagreement": self.max_disagreement}


def weak_convergence_trace(measures, K: KernelSpec, f: SimpleFunction, g: SimpleFunction, schedule,
                           depths=None, pointwise_atoms=(), threads: int = 1) -> WeakConvergenceReport:
    """Traces at successive depths plus the cross-depth agreement check.

    Refining depth ``d`` to ``d + 1`` moves each atom by at most ``h_d`` inside its
    cylinder and keeps cylinder masses.  For a coarse pair at distance ``D`` the
    change is therefore bounded by ``2 C_K (D - 2h)^-s`` when ``|D - eps| <= 2h``
    or when an endpoint lies within ``2h`` of an ``f``/``g`` region boundary, and by
    ``L 2h (D - 2h)^-(s+1)`` otherwise.  The tolerance at ``eps`` is the weighted
    sum of these per-pair bounds over the coarse measure.

    ``pointwise_atoms`` are atom indices of the finest measure at which
    ``T_eps(1)(x)`` is traced as a contrast.
    """
    measures = list(measures)
    if len(measures) < 2:
        raise DomainError("need at least two depths")
    eps = _check_schedule(schedule)
    depths = list(depths) if depths is not None else list(range(len(measures)))
    traces = tuple(convergence_trace(mu, K, f, g, eps, depth=d, threads=threads)
                   for mu, d in zip(measures, depths))
    rows = []
    for a, b in zip(traces[:-1], traces[1:]):
        for j, e in enumerate(eps):
            if a.valid[j] and b.valid[j]:
                rows.append(CrossDepthRow(a.depth, b.depth, float(e), float(abs(a.values[j] - b.values[j])),
                                          float(a.tolerance[j])))
    fine = measures[-1]
    one = SimpleFunction.constant(1.0)
    valid = traces[-1].valid
    diags = []
    for j in pointwise_atoms:
        x = fine.points[int(j)]
        vals = pointwise_trace(fine, K, one, x, eps)
        inc = _increments(vals[valid])
        diags.append(PointwiseDiagnostic(tuple(float(v) for v in x), int(j), vals, _increments(vals),
                                         _decay_factor(inc)))
    return WeakConvergenceReport(traces, tuple(rows), tuple(diags))


# ---------------------------------------------------------- cross integral

@dataclass(frozen=True)
class ShellDecomposition:
    """Face distances ``d_i`` of the interior atoms and shell counts ``floor N_i``.

    Faces are ordered ``(axis 1 low, axis 1 high, axis 2 low, ...)``;
    ``shell_counts`` is the smallest integer greater than ``N_i = log2(1 / d_i)``.
    """
    cube: HalfOpenCube
    faces: tuple
    distances: np.ndarray
    shell_counts: np.ndarray

    def check(self) -> None:
        if self.distances.size and not np.all(self.distances > 0):
            raise InvariantError("interior atom with zero face distance")
        bound = np.log(1.0 / self.distances) / math.log(2.0) + 1.0
        if np.any(self.shell_counts > bound + 1e-9):
            raise InvariantError("shell count exceeds log bound")


def shell_decomposition(cube: HalfOpenCube, points: np.ndarray) -> ShellDecomposition:
    n = cube.center.shape[0]
    faces = tuple((ax + 1, side) for ax in range(n) for side in ("low", "high"))
    cols = []
    for ax in range(n):
        cols.append(points[:, ax] - cube.lo[ax])
        cols.append(cube.hi[ax] - points[:, ax])
    d = np.stack(cols, axis=1) if cols else np.zeros((0, 2 * n))
    N = np.log2(1.0 / d) if d.size else d
    counts = (np.floor(N) + 1).astype(np.int64) if d.size else np.zeros_like(d, dtype=np.int64)
    return ShellDecomposition(cube, faces, d, counts)


@dataclass(frozen=True)
class CrossIntegralReport:
    value: float
    shell_bound: float
    strip_bound: float
    log_integrals: tuple
    strip_face_bounds: tuple
    C_hat: float
    a: float
    interior_atoms: int
    exterior_atoms: int
    excluded_face_atoms: int
    decomposition: ShellDecomposition

    @property
    def slack(self) -> float:
        return self.shell_bound / self.value if self.value > 0 else math.inf

    @property
    def value_within_shell(self) -> bool:
        return self.value <= self.shell_bound * (1.0 + CHAIN_TOL) + CHAIN_TOL

    @property
    def logs_within_strips(self) -> bool:
        return all(l <= s + CHAIN_TOL for l, s in zip(self.log_integrals, self.strip_face_bounds))

    @property
    def shell_within_strip(self) -> bool:
        return self.shell_bound <= self.strip_bound * (1.0 + CHAIN_TOL) + CHAIN_TOL

    def to_dict(self) -> dict:
        return {"value": self.value, "shell_bound": self.shell_bound, "strip_bound": self.strip_bound,
                "log_integrals": list(self.log_integrals), "strip_face_bounds": list(self.strip_face_bounds),
                "C_hat": self.C_hat, "a": self.a, "interior_atoms": self.interior_atoms,
                "exterior_atoms": self.exterior_atoms, "excluded_face_atoms": self.excluded_face_atoms,
                "slack": self.slack, "value_within_shell": self.value_within_shell,
                "logs_within_strips": self.logs_within_strips, "shell_within_strip": self.shell_within_strip}


def _pair_abs_sum(K, px, wx, py, wy, threads):
    if px.shape[0] == 0 or py.shape[0] == 0:
        return 0.0

    def block(bounds):
        lo, hi = bounds
        diff = px[lo:hi][:, None, :] - py[None, :, :]
        vals = np.abs(K(diff.reshape(-1, px.shape[1]))).reshape(hi - lo, -1)
        return np.array([math.fsum((vals * wx[lo:hi][:, None] * wy[None, :]).ravel())])

    return float(_merge(_run_blocks(block, _blocks(px.shape[0]), threads))[0])


def cross_integral(mu: AtomicMeasure, K: KernelSpec, A: HalfOpenCube, C_hat: float | None = None,
                   M: int = 4, threads: int = 1, strict: bool = True) -> CrossIntegralReport:
    """``sum_{x in A interior} sum_{y not in A} |K(x - y)| w_x w_y`` with the shell and strip bounds.

    Atoms on a face of ``A`` lie outside the open interior; those in ``A`` are
    excluded from both sides and counted.
    """
    n = mu.dim
    P, w = mu.points, mu.weights
    inA = A.contains(P)
    interior = np.all((P > A.lo) & (P < A.hi), axis=1)
    excluded = int(np.count_nonzero(inA & ~interior))
    outside = ~inA
    if C_hat is None:
        C_hat = growth_constant(mu, K.singular_exponent).C_hat
    value = _pair_abs_sum(K, P[interior], w[interior], P[outside], w[outside], threads)

    dec = shell_decomposition(A, P[interior])
    dec.check()
    wi = w[interior]
    logs = tuple(math.fsum(wi * np.log(1.0 / dec.distances[:, i])) for i in range(2 * n))
    pre = K.bound_constant * C_hat * 2.0 ** (n - 1) / math.log(2.0)
    shell = pre * (math.fsum(logs) + 2 * n)

    a = 1.0 / M
    s_i = 1.0 / (1.0 - a)
    strips = []
    for i in range(2 * n):
        d = dec.distances[:, i]
        if d.size:
            k_max = max(0, int(math.ceil(math.log(d.min() * (1.0 - a)) / math.log(a))))
            k = band_index(d, a, k_max)
            term = math.fsum(wi[k >= 0] * k[k >= 0])
        else:
            term = 0.0
        strips.append(math.log(1.0 / a) * term + math.log((1.0 - a) / (a * s_i)))
    strip = pre * (math.fsum(strips) + 2 * n)
    rep = CrossIntegralReport(value, shell, strip, logs, tuple(strips), float(C_hat), a, int(interior.sum()),
                              int(outside.sum()), excluded, dec)
    if strict and excluded == 0 and not rep.value_within_shell:
        raise InvariantError(f"cross integral {value} exceeds the shell bound {shell}")
    return rep


def averaged_operator(mu: AtomicMeasure, K: KernelSpec, f: SimpleFunction, z, r: float, threads: int = 1) -> float:
    """``mu(B)^-1 sum_{x in B} sum_{y not in B} K(x - y) f(y) w_x w_y`` with ``B = B(z, r)`` closed."""
    B = Ball(np.asarray(z, dtype=float), float(r))
    inside = B.contains(mu.points)
    mass = math.fsum(mu.weights[inside])
    if not mass > 0:
        raise DomainError("ball carries no mass")
    fv = f(mu.points)
    ys = (~inside) & (fv != 0)
    px, wx = mu.points[inside], mu.weights[inside]
    py, wy = mu.points[ys], mu.weights[ys] * fv[ys]
    if py.shape[0] == 0:
        return 0.0

    def block(bounds):
        lo, hi = bounds
        diff = px[lo:hi][:, None, :] - py[None, :, :]
        vals = K(diff.reshape(-1, px.shape[1])).reshape(hi - lo, -1)
        return np.array([math.fsum((vals * wx[lo:hi][:, None] * wy[None, :]).ravel())])

    return float(_merge(_run_blocks(block, _blocks(px.shape[0]), threads))[0]) / mass
