"""Finite similitude iterated function systems and their limit-set approximations.

Words are tuples of 1-based letters; ``(2, 1)`` stands for the composed map
``phi_2 o phi_1``.  Cylinder data at a fixed depth is kept in flat numpy
arrays ordered lexicographically by word, so the descendants of a depth-j
cylinder occupy a contiguous index range at every deeper level.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .errors import CapacityError, DomainError, InvariantError, RefinementError

DEFAULT_ATOM_BUDGET = 1 << 22
ORTHO_TOL = 1e-12
BOX_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class SimilitudeMap:
    """The map ``x -> ratio * orthogonal @ x + translation``."""

    ratio: float
    orthogonal: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        ortho = np.array(self.orthogonal, dtype=float)
        trans = np.array(self.translation, dtype=float)
        n = trans.shape[0]
        if ortho.shape != (n, n):
            raise DomainError(f"orthogonal part has shape {ortho.shape}, expected {(n, n)}")
        if not 0.0 < self.ratio <= 1.0:
            raise DomainError(f"ratio must lie in (0, 1), got {self.ratio}")
        if np.max(np.abs(ortho @ ortho.T - np.eye(n))) > ORTHO_TOL:
            raise DomainError("orthogonal part is not orthogonal to within 1e-12")
        ortho.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "ratio", float(self.ratio))
        object.__setattr__(self, "orthogonal", ortho)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls, dim: int) -> "SimilitudeMap":
        return cls(1.0, np.eye(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.translation.shape[0]

    def __call__(self, points):
        pts = np.asarray(points, dtype=float)
        return self.ratio * (pts @ self.orthogonal.T) + self.translation

    def then(self, inner: "SimilitudeMap") -> "SimilitudeMap":
        """Return ``self o inner``."""
        return SimilitudeMap(
            self.ratio * inner.ratio,
            self.orthogonal @ inner.orthogonal,
            self.ratio * (self.orthogonal @ inner.translation) + self.translation,
        )

    def fixed_point(self) -> np.ndarray:
        lhs = np.eye(self.dim) - self.ratio * self.orthogonal
        return np.linalg.solve(lhs, self.translation)

    def allclose(self, other: "SimilitudeMap", tol: float = 1e-12) -> bool:
        return (
            abs(self.ratio - other.ratio) <= tol
            and np.allclose(self.orthogonal, other.orthogonal, rtol=0, atol=tol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=tol)
        )

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "orthogonal": self.orthogonal.tolist(),
            "translation": self.translation.tolist(),
        }


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """A finite similitude IFS together with its seed box ``X``.

    Side lengths of the seed box may be zero; the system then lives in a
    lower-dimensional face of the ambient space (``segment2`` is an example)
    and "interior" is read relative to the non-degenerate coordinates.
    """

    maps: tuple
    seed_corner: np.ndarray
    seed_sides: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        maps = tuple(self.maps)
        corner = np.array(self.seed_corner, dtype=float)
        sides = np.array(self.seed_sides, dtype=float)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "seed_corner", corner)
        object.__setattr__(self, "seed_sides", sides)
        n = corner.shape[0]
        if n < 2:
            raise DomainError(f"ambient dimension must be >= 2, got {n}")
        if sides.shape != (n,) or np.any(sides < 0) or not np.any(sides > 0):
            raise DomainError("seed box sides must be nonnegative and not all zero")
        if len(maps) < 2:
            raise DomainError(f"a system needs at least two maps, got {len(maps)}")
        for i, m in enumerate(maps, start=1):
            if m.dim != n:
                raise DomainError(f"map {i} acts on R^{m.dim}, system is in R^{n}")
            if not m.ratio < 1.0:
                raise DomainError(f"map {i} has ratio {m.ratio}, must be < 1")
            lo, hi = map_box(m, corner, sides)
            tol = BOX_TOL * max(1.0, float(np.max(np.abs(corner) + sides)))
            if np.any(lo < corner - tol) or np.any(hi > corner + sides + tol):
                raise DomainError(f"map {i} does not send the seed box into itself")

    @property
    def dim(self) -> int:
        return self.seed_corner.shape[0]

    @property
    def card(self) -> int:
        return len(self.maps)

    @property
    def ratios(self) -> np.ndarray:
        return np.array([m.ratio for m in self.maps])

    @property
    def uniform_ratio_bound(self) -> float:
        return float(self.ratios.max())

    @property
    def seed_diameter(self) -> float:
        return float(np.sqrt(np.sum(self.seed_sides**2)))

    @property
    def seed_hi(self) -> np.ndarray:
        return self.seed_corner + self.seed_sides

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "seed_box": {"corner": self.seed_corner.tolist(), "sides": self.seed_sides.tolist()},
            "maps": [m.to_dict() for m in self.maps],
        }

    @classmethod
    def from_dict(cls, data: dict, name: str = "custom") -> "SystemSpec":
        try:
            box = data["seed_box"]
            maps = tuple(
                SimilitudeMap(float(m["ratio"]), np.array(m["orthogonal"], dtype=float),
                              np.array(m["translation"], dtype=float))
                for m in data["maps"]
            )
            spec = cls(maps, box["corner"], box["sides"], name=name)
        except KeyError as exc:
            raise DomainError(f"system description is missing field {exc}") from None
        if "dim" in data and int(data["dim"]) != spec.dim:
            raise DomainError(f"declared dim {data['dim']} disagrees with seed box dimension {spec.dim}")
        return spec


def _box_corners(corner, sides) -> np.ndarray:
    n = len(corner)
    bits = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    return corner + bits * sides


def map_box(m: SimilitudeMap, corner, sides):
    """Axis-aligned bounding box of ``m`` applied to the box ``corner + [0, sides]``."""
    img = m(_box_corners(corner, sides))
    return img.min(axis=0), img.max(axis=0)


def validate_word(spec: SystemSpec, word: Sequence[int]) -> tuple:
    letters = tuple(int(a) for a in word)
    for pos, a in enumerate(letters):
        if not 1 <= a <= spec.card:
            raise IndexError(f"letter {a} at position {pos + 1} is outside 1..{spec.card}")
    return letters


def compose(spec: SystemSpec, word: Sequence[int]) -> SimilitudeMap:
    """Return ``phi_{i1} o ... o phi_{im}`` for ``word = (i1, ..., im)``."""
    letters = validate_word(spec, word)
    result = SimilitudeMap.identity(spec.dim)
    for a in letters:
        result = result.then(spec.maps[a - 1])
    return result


@dataclass(frozen=True)
class Cylinder:
    word: tuple
    map: SimilitudeMap
    image_box: tuple
    diameter: float
    weight: float


def similarity_dimension(spec: SystemSpec) -> float:
    """Solve ``sum_i ratio_i**t = 1`` for ``t > 0``."""
    ratios = spec.ratios
    if not check_osc(spec).satisfied:
        warnings.warn("open set condition fails; similarity dimension may exceed the Hausdorff dimension")
    if np.all(ratios == ratios[0]):
        return math.log(len(ratios)) / math.log(1.0 / ratios[0])
    upper = math.log(len(ratios)) / math.log(1.0 / ratios.max())
    return brentq(lambda t: float(np.sum(ratios**t)) - 1.0, 0.0, upper, xtol=1e-14, rtol=1e-15)


@dataclass(frozen=True, eq=False)
class LimitSetApprox:
    """All depth-``depth`` cylinders of a system, one atom per cylinder.

    Per-cylinder data is stored in arrays indexed lexicographically by word.
    """

    spec: SystemSpec
    depth: int
    dimension: float
    words: np.ndarray
    ratios: np.ndarray
    orthogonals: np.ndarray
    translations: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    weights: np.ndarray
    atoms: np.ndarray
    reference_point: np.ndarray

    def __len__(self) -> int:
        return self.ratios.shape[0]

    @property
    def diameters(self) -> np.ndarray:
        return self.ratios * self.spec.seed_diameter

    @property
    def resolution(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.atoms)

    def cylinder(self, index: int) -> Cylinder:
        m = SimilitudeMap(float(self.ratios[index]), self.orthogonals[index], self.translations[index])
        return Cylinder(
            word=tuple(int(a) for a in self.words[index]),
            map=m,
            image_box=(self.box_lo[index].copy(), self.box_hi[index].copy()),
            diameter=float(self.diameters[index]),
            weight=float(self.weights[index]),
        )

    @property
    def cylinders(self):
        return [self.cylinder(j) for j in range(len(self))]

    def index_of(self, word: Sequence[int]) -> int:
        letters = validate_word(self.spec, word)
        if len(letters) != self.depth:
            raise DomainError(f"word has length {len(letters)}, approximation depth is {self.depth}")
        idx = 0
        for a in letters:
            idx = idx * self.spec.card + (a - 1)
        return idx


def generate(spec: SystemSpec, depth: int, budget: int = DEFAULT_ATOM_BUDGET) -> LimitSetApprox:
    """Build every depth-``depth`` cylinder and place one atom in each.

    The atom of cylinder ``w`` is ``phi_w(p)`` with ``p`` the fixed point of
    ``phi_1`` (the coded point of ``(1, 1, 1, ...)``).
    """
    if depth < 0:
        raise DomainError(f"depth must be >= 0, got {depth}")
    required = spec.card**depth
    if required > budget:
        raise CapacityError(f"depth {depth} needs {required} atoms, budget is {budget}", required=required)
    n, card = spec.dim, spec.card
    t = similarity_dimension(spec)
    base_r = spec.ratios
    base_o = np.stack([m.orthogonal for m in spec.maps])
    base_t = np.stack([m.translation for m in spec.maps])

    words = np.zeros((1, 0), dtype=np.int16)
    ratios = np.ones(1)
    orth = np.eye(n)[None]
    trans = np.zeros((1, n))
    for _ in range(depth):
        k = ratios.shape[0]
        # child (parent, i) = parent o phi_i, laid out parent-major
        new_r = (ratios[:, None] * base_r[None, :]).reshape(k * card)
        new_o = np.einsum("kij,ajl->kail", orth, base_o).reshape(k * card, n, n)
        shifted = np.einsum("kij,aj->kai", orth, base_t)
        new_t = (ratios[:, None, None] * shifted + trans[:, None, :]).reshape(k * card, n)
        letters = np.tile(np.arange(1, card + 1, dtype=np.int16), k)
        words = np.concatenate([np.repeat(words, card, axis=0), letters[:, None]], axis=1)
        ratios, orth, trans = new_r, new_o, new_t

    corners = _box_corners(spec.seed_corner, spec.seed_sides)
    imgs = ratios[:, None, None] * np.einsum("kij,cj->kci", orth, corners) + trans[:, None, :]
    ref = spec.maps[0].fixed_point()
    atoms = ratios[:, None] * (orth @ ref) + trans
    # weights from letter products keep rounding identical across depths
    weights = np.prod((base_r**t)[words.astype(np.int64) - 1], axis=1) if depth else np.ones(1)
    return LimitSetApprox(
        spec=spec, depth=depth, dimension=t, words=words, ratios=ratios, orthogonals=orth,
        translations=trans, box_lo=imgs.min(axis=1), box_hi=imgs.max(axis=1),
        weights=weights, atoms=atoms, reference_point=ref,
    )


def box_ball_sqdist(lo, hi, x) -> np.ndarray:
    """Squared distance from ``x`` to closed boxes ``[lo, hi]`` (broadcasting)."""
    gap = np.maximum(np.maximum(lo - x, x - hi), 0.0)
    return np.sum(gap * gap, axis=-1)


@dataclass(frozen=True)
class StoppingFamily:
    center: np.ndarray
    radius: float
    words: tuple
    boxes: tuple
    diameters: tuple
    card_bound: int
    diameter_ratio: float


def required_depth(spec: SystemSpec, r: float) -> int:
    """Smallest depth whose cylinders all have diameter <= r."""
    s, d = spec.uniform_ratio_bound, spec.seed_diameter
    if r >= d:
        return 0
    return int(math.ceil(math.log(r / d) / math.log(s) - 1e-12))


def stopping_family(spec: SystemSpec, approx: LimitSetApprox, x, r: float,
                    verify: bool = True) -> StoppingFamily:
    """Words ``w`` meeting ``B(x, r)`` with ``d(phi_w X) <= r < d(phi_parent X)``.

    The parent of a length-one word is the empty word, whose diameter is
    treated as unbounded so that ``r = d(X)`` is admissible.  With ``verify``
    every atom of ``approx`` inside ``B(x, r)`` is checked to lie in one of
    the returned boxes.
    """
    x = np.asarray(x, dtype=float)
    dX = spec.seed_diameter
    if not 0.0 < r <= dX:
        raise DomainError(f"radius must lie in (0, d(X)] = (0, {dX}], got {r}")
    if approx.resolution > r:
        need = required_depth(spec, r)
        raise RefinementError(
            f"approximation depth {approx.depth} too coarse for r={r}; need depth >= {need}",
            required_depth=need,
        )
    r2 = r * r
    words, boxes, diams = [], [], []
    root = SimilitudeMap.identity(spec.dim)
    stack = [((), root)]
    while stack:
        word, m = stack.pop()
        children = []
        for a in range(1, spec.card + 1):
            child = m.then(spec.maps[a - 1])
            lo, hi = map_box(child, spec.seed_corner, spec.seed_sides)
            if box_ball_sqdist(lo, hi, x) > r2:
                continue
            cw = word + (a,)
            diam = child.ratio * dX
            if diam <= r:
                words.append(cw)
                boxes.append((lo, hi))
                diams.append(diam)
            else:
                children.append((cw, child))
        stack.extend(reversed(children))
    order = sorted(range(len(words)), key=lambda j: words[j])
    words = tuple(words[j] for j in order)
    boxes = tuple(boxes[j] for j in order)
    diams = tuple(diams[j] for j in order)
    fam = StoppingFamily(
        center=x, radius=float(r), words=words, boxes=boxes, diameters=diams,
        card_bound=len(words), diameter_ratio=min(diams) / r if diams else float("nan"),
    )
    if verify and words:
        idx = approx.tree.query_ball_point(x, r * (1 + 1e-12))
        pts = approx.atoms[np.sort(np.asarray(idx, dtype=int))]
        pts = pts[np.sum((pts - x) ** 2, axis=1) <= r2]
        lo = np.array([b[0] for b in boxes])
        hi = np.array([b[1] for b in boxes])
        tol = BOX_TOL * max(1.0, float(np.max(np.abs(x))) + dX)
        inside = np.all((pts[:, None, :] >= lo - tol) & (pts[:, None, :] <= hi + tol), axis=2)
        if pts.size and not np.all(inside.any(axis=1)):
            raise InvariantError("stopping family does not cover the atoms inside the ball")
    elif verify:
        idx = approx.tree.query_ball_point(x, r * (1 - 1e-12))
        if idx:
            raise InvariantError("empty stopping family but atoms lie inside the ball")
    return fam


@dataclass(frozen=True)
class OscReport:
    satisfied: bool
    witness: tuple | None
    reason: str = ""


def _open_images_overlap(spec: SystemSpec, mi: SimilitudeMap, mj: SimilitudeMap) -> bool:
    corner, sides = spec.seed_corner, spec.seed_sides
    live = sides > 0
    perm_i = np.all(np.isclose(np.abs(mi.orthogonal), np.round(np.abs(mi.orthogonal)), atol=1e-12))
    perm_j = np.all(np.isclose(np.abs(mj.orthogonal), np.round(np.abs(mj.orthogonal)), atol=1e-12))
    if perm_i and perm_j:
        lo_i, hi_i = map_box(mi, corner, sides)
        lo_j, hi_j = map_box(mj, corner, sides)
        # relative interior: degenerate axes are closed points, the rest open intervals
        flat_i, flat_j = hi_i - lo_i <= 0, hi_j - lo_j <= 0
        for a in range(spec.dim):
            if flat_i[a] and flat_j[a]:
                if lo_i[a] != lo_j[a]:
                    return False
            elif flat_i[a]:
                if not lo_j[a] < lo_i[a] < hi_j[a]:
                    return False
            elif flat_j[a]:
                if not lo_i[a] < lo_j[a] < hi_i[a]:
                    return False
            elif not (lo_i[a] < hi_j[a] and lo_j[a] < hi_i[a]):
                return False
        return True
    # general orientation: maximise a common interior margin by linear programming
    from scipy.optimize import linprog

    n = spec.dim
    # variables u (n), v (n), m ; phi_i(u) = phi_j(v); corner + m <= u <= hi - m on live axes
    A_eq = np.hstack([mi.ratio * mi.orthogonal, -mj.ratio * mj.orthogonal, np.zeros((n, 1))])
    b_eq = mj.translation - mi.translation
    rows, rhs = [], []
    for block in range(2):
        for a in range(n):
            if not live[a]:
                continue
            e = np.zeros(2 * n + 1)
            e[block * n + a] = -1.0
            e[-1] = 1.0
            rows.append(e.copy())
            rhs.append(-corner[a])
            e[block * n + a] = 1.0
            rows.append(e)
            rhs.append(corner[a] + sides[a])
    bounds = []
    for block in range(2):
        for a in range(n):
            bounds.append((corner[a], corner[a]) if not live[a] else (None, None))
    bounds.append((None, float(np.max(sides))))
    c = np.zeros(2 * n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), A_eq=A_eq, b_eq=b_eq, bounds=bounds)
    return bool(res.status == 0 and -res.fun > 1e-12)


def check_osc(spec: SystemSpec) -> OscReport:
    """Open set condition with ``U`` the (relative) interior of the seed box."""
    # containment phi_i(U) in U follows from phi_i(X) in X, enforced by SystemSpec
    for i, j in itertools.combinations(range(spec.card), 2):
        if _open_images_overlap(spec, spec.maps[i], spec.maps[j]):
            return OscReport(False, (i + 1, j + 1), f"images of maps {i + 1} and {j + 1} overlap")
    return OscReport(True, None, "pairwise disjoint open images")


@dataclass(frozen=True)
class DistortionReport:
    K_bdp: float
    D: float
    level: int
    descendant_levels: int
    cylinders_sampled: int


def bdp_cifs1_constants(spec: SystemSpec, approx: LimitSetApprox, max_points: int = 2048,
                        max_cylinders: int = 64, seed: int = 0) -> DistortionReport:
    """Distortion constant (1 for similitudes) and the diameter comparison constant D.

    ``d(phi_w E)`` is estimated by the diameter of the descendant atoms of a
    cylinder, compared against the derivative norm ``ratio_w``.
    """
    if approx.depth < 1:
        raise DomainError("need an approximation of depth >= 1")
    card = spec.card
    levels = max(1, int(math.floor(math.log(max_points) / math.log(card) + 1e-12)))
    levels = min(levels, approx.depth - 1) if approx.depth > 1 else 1
    level = approx.depth - levels
    if level < 1:
        level, levels = 1, approx.depth - 1
    if levels < 1:
        raise DomainError("need an approximation of depth >= 2 to see descendants")
    count = card**level
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(count, size=min(count, max_cylinders), replace=False))
    span = card**levels
    D = 1.0
    for c in chosen:
        pts = approx.atoms[c * span:(c + 1) * span]
        spread = float(pdist(pts).max())
        norm = float(np.prod(spec.ratios[approx.words[c * span, :level].astype(int) - 1]))
        D = max(D, norm / spread, spread / norm)
    return DistortionReport(1.0, D, level, levels, len(chosen))


def _similitude(ratio, translation, orthogonal=None) -> SimilitudeMap:
    translation = np.asarray(translation, dtype=float)
    if orthogonal is None:
        orthogonal = np.eye(translation.shape[0])
    return SimilitudeMap(ratio, orthogonal, translation)


def four_corners() -> SystemSpec:
    offs = [(0.0, 0.0), (0.75, 0.0), (0.0, 0.75), (0.75, 0.75)]
    return SystemSpec(tuple(_similitude(0.25, c) for c in offs), [0, 0], [1, 1], name="four_corners")


def segment2() -> SystemSpec:
    offs = [(0.0, 0.0), (0.5, 0.0)]
    return SystemSpec(tuple(_similitude(0.5, c) for c in offs), [0, 0], [1, 0], name="segment2")


def sierpinski() -> SystemSpec:
    h = math.sqrt(3.0) / 2.0
    offs = [(0.0, 0.0), (0.5, 0.0), (0.25, h / 2.0)]
    return SystemSpec(tuple(_similitude(0.5, c) for c in offs), [0, 0], [1, h], name="sierpinski")


def cantor_dust_unrect3d() -> SystemSpec:
    offs = list(itertools.product((0.0, 0.75), repeat=3))
    return SystemSpec(tuple(_similitude(0.25, c) for c in offs), [0, 0, 0], [1, 1, 1],
                      name="cantor_dust_unrect3d")


BUILTIN_SYSTEMS = {
    "four_corners": four_corners,
    "segment2": segment2,
    "sierpinski": sierpinski,
    "cantor_dust_unrect3d": cantor_dust_unrect3d,
}


def load_system(source) -> SystemSpec:
    """Builtin system by key, or a system from its JSON dictionary form."""
    if isinstance(source, SystemSpec):
        return source
    if isinstance(source, str):
        try:
            return BUILTIN_SYSTEMS[source]()
        except KeyError:
            raise DomainError(f"unknown system {source!r}; builtins: {sorted(BUILTIN_SYSTEMS)}") from None
    return SystemSpec.from_dict(source)
