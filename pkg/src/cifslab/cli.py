"""Command line experiment runner.

Every experiment writes one JSON report (``<kind>.json``) plus optional CSV
data files into ``--out``.  Outputs depend only on the configuration and the
seed.  Exit codes: 0 success (any scientific verdict), 2 usage, 3 capacity,
4 internal invariant failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .errors import CapacityError, CifsError, DomainError, InvariantError, RefinementError
from .ifs import check_osc, generate, load_system, similarity_dimension
from .measure import (DirectionPlane, HalfOpenCube, growth_constant, natural_measure, write_atoms_csv)
from .porosity import (build_covering, hyperplane_directions, max_resolved_k, porosity_profile,
                       select_grid_m, strip_series)
from .singular import (SimpleFunction, cross_integral, dyadic_schedule, kernel_by_name, weak_convergence_trace)

EXIT_OK, EXIT_USAGE, EXIT_CAPACITY, EXIT_INVARIANT = 0, 2, 3, 4
KINDS = ("generate", "osc-check", "porosity", "covering", "strips", "weakconv", "crossint")
SUITE_KINDS = ("osc-check", "porosity", "covering", "strips", "weakconv", "crossint")

# config key -> (type check, default)
SCHEMA = {
    "kind": (str, None),
    "system": ((str, dict), "four_corners"),
    "depth": (int, 6),
    "depths": (list, None),
    "seed": (int, 0),
    "threads": (int, 1),
    "out": (str, "."),
    "direction": (str, "all:16"),
    "points": (int, 64),
    "scales": (int, 5),
    "on_plane": (bool, False),
    "grid_m": (int, None),
    "levels": (int, 4),
    "axis": (int, 2),
    "x": (list, None),
    "r": ((int, float), 1.0),
    "offset": ((int, float), 0.0),
    "a": ((int, float), 0.25),
    "k_max": (int, None),
    "kernel": (str, "riesz1"),
    "eps_start": ((int, float), 0.0625),
    "eps_ratio": ((int, float), 0.5),
    "eps_count": (int, 5),
    "f": (list, None),
    "g": (list, None),
    "cube": (dict, None),
    "pointwise_atoms": (int, 4),
}


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- output

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------- config

def _check_type(key, value, typ):
    if typ is int and isinstance(value, bool):
        raise UsageError(f"config.{key}: expected int, got bool")
    if not isinstance(value, typ):
        names = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise UsageError(f"config.{key}: expected {names}, got {type(value).__name__}")


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not text.strip():
        raise UsageError(f"config {path} is empty")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict) or not cfg:
        raise UsageError(f"config {path}: expected a nonempty JSON object")
    for key, value in cfg.items():
        if key not in SCHEMA:
            raise UsageError(f"config.{key}: unknown field")
        if value is not None:
            _check_type(key, value, SCHEMA[key][0])
    if "kind" in cfg and cfg["kind"] not in KINDS + ("suite",):
        raise UsageError(f"config.kind: unknown experiment {cfg['kind']!r}")
    return cfg


def resolve(ns: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (flags win)."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    if ns.config:
        cfg.update(load_config(ns.config))
    for key in SCHEMA:
        val = getattr(ns, key, None)
        if val is not None:
            cfg[key] = val
    if ns.command and ns.command != "run":
        cfg["kind"] = ns.command
    if not cfg.get("kind"):
        raise UsageError("no experiment kind given")
    if cfg["threads"] < 1:
        raise UsageError("threads: must be >= 1")
    if isinstance(cfg["system"], str) and cfg["system"].endswith(".json"):
        try:
            cfg["system"] = json.loads(Path(cfg["system"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"system: cannot load {cfg['system']}: {exc}") from None
    return cfg


# ---------------------------------------------------------- experiments

def _measure(spec, depth):
    approx = generate(spec, depth)
    return approx, natural_measure(approx)


def _unit(n, k):
    e = np.zeros(n)
    e[k - 1] = 1.0
    return e


def parse_directions(text: str, n: int, seed: int) -> list:
    """``axisK``, ``coordK``, ``theta:<radians>`` or ``all[:count]``, comma separated."""
    out = []
    origin = np.zeros(n)
    for tok in text.split(","):
        tok = tok.strip()
        try:
            if tok.startswith("axis"):
                k = int(tok[4:])
                if not 1 <= k <= n:
                    raise ValueError
                out.append(DirectionPlane.spanned_by([_unit(n, k)], origin))
            elif tok.startswith("coord"):
                k = int(tok[5:])
                if not 1 <= k <= n:
                    raise ValueError
                out.append(DirectionPlane.coordinate(k, origin))
            elif tok.startswith("theta:"):
                if n != 2:
                    raise UsageError("direction: theta is only defined for n = 2")
                out.append(DirectionPlane.line(float(tok[6:]), origin))
            elif tok.startswith("all"):
                count = int(tok[4:]) if tok.startswith("all:") else 16
                out.extend(hyperplane_directions(n, count, seed))
            else:
                raise ValueError
        except ValueError:
            raise UsageError(f"direction: cannot parse {tok!r}") from None
    return out


def direction_angles(V: DirectionPlane) -> list:
    """Planar lines: angle of the line in ``[0, pi)``.  Otherwise hyperspherical angles of the first normal."""
    if V.dim == 2:
        d = V.plane_basis[0]
        return [math.atan2(d[1], d[0]) % math.pi]
    v = V.normal_basis[0]
    angles = []
    for j in range(v.shape[0] - 1):
        angles.append(math.atan2(float(np.linalg.norm(v[j + 1:])), float(v[j])))
    return angles


def run_generate(cfg, spec, out: Path) -> dict:
    approx, mu = _measure(spec, cfg["depth"])
    with (out / "atoms.csv").open("w", newline="") as fh:
        write_atoms_csv(mu, fh)
    rep = {"kind": "generate", "system": spec.to_dict(), "depth": cfg["depth"], "atoms": len(mu),
           "resolution": mu.resolution, "total_mass": mu.total_mass}
    write_json(out / "generate.json", rep)
    return {"report": "generate.json", "data": ["atoms.csv"]}


def run_osc(cfg, spec, out: Path) -> dict:
    osc = check_osc(spec)
    rep = {"kind": "osc-check", "satisfied": osc.satisfied, "witness": osc.witness, "reason": osc.reason,
           "similarity_dimension": similarity_dimension(spec) if osc.satisfied else None}
    write_json(out / "osc.json", rep)
    return {"report": "osc.json", "data": []}


def run_porosity(cfg, spec, out: Path) -> dict:
    approx, mu = _measure(spec, cfg["depth"])
    n = spec.dim
    dirs = parse_directions(cfg["direction"], n, cfg["seed"])
    rows, summary = [], []
    for j, V in enumerate(dirs):
        atoms = None
        if cfg["on_plane"]:
            on = np.flatnonzero(V.through(spec.seed_corner).distance(mu.points) <= 1e-12)
            if on.size == 0:
                raise DomainError("no atoms lie on the chosen plane through the seed corner")
            rng = np.random.default_rng(cfg["seed"])
            atoms = np.sort(rng.choice(on, size=min(cfg["points"], on.size), replace=False))
        prof = porosity_profile(mu, approx, V, cfg["points"], cfg["scales"], seed=cfg["seed"],
                                atom_indices=atoms, threads=cfg["threads"])
        ang = direction_angles(V)
        for s in prof.samples:
            rows.append([j, *ang, *s.point, s.radius, s.c, s.clearance_margin, s.status])
        summary.append({"direction_id": j, "angles": ang, "normal_basis": V.normal_basis,
                        "c_estimate": prof.c_estimate, "no_hole_fraction": prof.no_hole_fraction,
                        "status": "hole" if prof.c_estimate > 0 else "no-hole"})
    theta = ["theta"] if n == 2 else [f"theta{k + 1}" for k in range(n - 1)]
    write_csv(out / "porosity.csv", ["direction_id", *theta, *[f"x{k + 1}" for k in range(n)],
                                     "r", "c", "clearance_margin", "status"], rows)
    rep = {"kind": "porosity", "depth": cfg["depth"], "seed": cfg["seed"], "points": cfg["points"],
           "scales": cfg["scales"], "resolution": mu.resolution, "directions": summary,
           "c_estimate": min(d["c_estimate"] for d in summary)}
    write_json(out / "porosity.json", rep)
    return {"report": "porosity.json", "data": ["porosity.csv"]}


def _point(cfg, n, default):
    x = cfg["x"] if cfg["x"] is not None else default
    if len(x) != n:
        raise UsageError(f"x: expected {n} coordinates")
    return np.asarray(x, dtype=float)


def run_covering(cfg, spec, out: Path) -> dict:
    approx, mu = _measure(spec, cfg["depth"])
    n = spec.dim
    x = _point(cfg, n, [0.7, 0.2] if n == 2 else list(spec.seed_corner + 0.5 * spec.seed_sides))
    r, i = float(cfg["r"]), cfg["axis"]
    if not 1 <= i <= n:
        raise UsageError(f"axis: must lie in 1..{n}")
    selection = None
    M = cfg["grid_m"]
    if M is None:
        rng = np.random.default_rng(cfg["seed"])
        idx = rng.choice(len(mu), size=min(64, len(mu)), replace=False)
        cubes = [HalfOpenCube(mu.points[j], r / 4.0) for j in np.sort(idx)]
        selection = select_grid_m(mu, cubes, i)
        M = selection.M
    levels = cfg["levels"]
    if cfg.get("clip_levels"):
        # deepest level the approximation resolves
        levels = max(0, min(levels, int(math.floor(math.log(r / (4.0 * mu.resolution)) / math.log(M)))))
    fam = build_covering(mu, approx, x, r, i, M, levels)
    rows = [[k, c, (M ** (n - 1) - 1) ** k] for k, c in enumerate(fam.counts)]
    write_csv(out / "covering.csv", ["level", "count", "expected"], rows)
    rep = {"kind": "covering", "x": x, "r": r, "axis": i, "M": M, "levels": levels,
           "counts": fam.counts, "expected_count": fam.expected_count, "count_ok": fam.count == fam.expected_count,
           "coverage_ok": fam.coverage_ok, "strip_atoms": fam.strip_atoms, "uncovered_atoms": fam.uncovered_atoms,
           "failures": [list(f) for f in fam.failures],
           "m_selection": None if selection is None else {"M": selection.M, "reached": selection.reached,
                                                          "rates": {str(k): v for k, v in selection.success_rates.items()}}}
    write_json(out / "covering.json", rep)
    return {"report": "covering.json", "data": ["covering.csv"]}


def run_strips(cfg, spec, out: Path) -> dict:
    approx, mu = _measure(spec, cfg["depth"])
    n = spec.dim
    a = float(cfg["a"])
    if not 0 < a < 1:
        raise UsageError("a: must lie in (0, 1)")
    base = np.zeros(n)
    base[cfg["axis"] - 1] = float(cfg["offset"])
    surface = DirectionPlane.coordinate(cfg["axis"], base)
    k_max = cfg["k_max"] if cfg["k_max"] is not None else max_resolved_k(mu, a)
    ser = strip_series(mu, surface, a, k_max)
    rows = [[k, ser.measures[k], ser.terms[k], ser.partial_sums[k], int(ser.resolution_limited[k])]
            for k in range(k_max + 1)]
    write_csv(out / "strips.csv", ["k", "measure", "term", "partial_sum", "resolution_limited"], rows)
    rep = {"kind": "strips", "a": a, "axis": cfg["axis"], "offset": cfg["offset"], "k_max": k_max,
           "total": ser.total, "surface_hits": ser.surface_hits, "resolution": mu.resolution}
    write_json(out / "strips.json", rep)
    return {"report": "strips.json", "data": ["strips.csv"]}


def _default_cubes(n, h):
    side = 0.5 + 2 * h
    f = HalfOpenCube(np.full(n, 0.25), side)
    g_center = np.full(n, 0.25)
    g_center[0] = 0.75
    return f, HalfOpenCube(g_center, side)


def _weakconv_cubes(n):
    # overlapping cubes, so pairs exist at every scale of the schedule
    g_center = np.full(n, 0.1)
    g_center[0] = 0.2
    return HalfOpenCube(np.full(n, 0.1), 0.2), HalfOpenCube(g_center, 0.2)


def run_weakconv(cfg, spec, out: Path) -> dict:
    depths = cfg["depths"] or [cfg["depth"], cfg["depth"] + 1]
    if len(depths) < 2 or any(not isinstance(d, int) or isinstance(d, bool) for d in depths):
        raise UsageError("depths: need at least two integer depths")
    measures = [_measure(spec, d)[1] for d in depths]
    K = kernel_by_name(cfg["kernel"], spec.dim)
    fc, gc = _weakconv_cubes(spec.dim)
    f = SimpleFunction.from_dict(cfg["f"]) if cfg["f"] is not None else SimpleFunction.indicator(fc)
    g = SimpleFunction.from_dict(cfg["g"]) if cfg["g"] is not None else SimpleFunction.indicator(gc)
    sched = dyadic_schedule(cfg["eps_start"], cfg["eps_ratio"], cfg["eps_count"])
    rng = np.random.default_rng(cfg["seed"])
    fine = measures[-1]
    extra = rng.choice(np.arange(1, len(fine)), size=min(max(cfg["pointwise_atoms"] - 1, 0), len(fine) - 1),
                       replace=False) if cfg["pointwise_atoms"] > 0 else []
    atoms = [0, *sorted(int(j) for j in extra)] if cfg["pointwise_atoms"] > 0 else []
    rep = weak_convergence_trace(measures, K, f, g, sched, depths=depths, pointwise_atoms=atoms,
                                 threads=cfg["threads"])
    data = []
    for tr in rep.traces:
        name = f"weakconv_depth{tr.depth}.csv"
        write_csv(out / name, ["epsilon", "value", "increment", "flag"], tr.rows())
        data.append(name)
    write_json(out / "verdict.json", rep.verdict())
    data.append("verdict.json")
    report = {
        "kind": "weakconv", "kernel": K.name, "f": f.to_dict(), "g": g.to_dict(), "schedule": sched,
        "verdict": rep.verdict(),
        "tolerance_model": "per coarse pair at distance D: 2 C_K (D-2h)^-s if |D-eps|<=2h or an endpoint is "
                           "within 2h of an f/g boundary, else L 2h (D-2h)^-(s+1); weighted sum over pairs",
        "traces": [{"depth": t.depth, "resolution": t.resolution, "values": t.values, "increments": t.increments,
                    "tolerance": t.tolerance, "flags": t.flags, "resolution_floor": t.resolution_floor,
                    "valid_floor": t.valid_floor, "monotone": t.monotone, "decay_factor": t.decay_factor}
                   for t in rep.traces],
        "cross_depth": [{"coarse": r.coarse, "fine": r.fine, "epsilon": r.epsilon, "difference": r.difference,
                         "tolerance": r.tolerance, "agrees": r.agrees} for r in rep.cross_depth],
        "pointwise": [{"atom_index": d.atom_index, "point": d.point, "values": d.values,
                       "increments": d.increments, "decay_factor": d.decay_factor,
                       "oscillating": d.oscillating} for d in rep.pointwise],
    }
    write_json(out / "weakconv.json", report)
    return {"report": "weakconv.json", "data": data}


def run_crossint(cfg, spec, out: Path) -> dict:
    approx, mu = _measure(spec, cfg["depth"])
    K = kernel_by_name(cfg["kernel"], spec.dim)
    if cfg["cube"] is not None:
        try:
            A = HalfOpenCube(np.asarray(cfg["cube"]["center"], float), float(cfg["cube"]["side"]))
        except (KeyError, TypeError):
            raise UsageError("cube: expected {\"center\": [...], \"side\": s}") from None
    else:
        A = _default_cubes(spec.dim, mu.resolution)[0]
    a = float(cfg["a"])
    M = int(round(1.0 / a))
    if not math.isclose(M * a, 1.0) or M < 2:
        raise UsageError("a: must be 1/M for an integer M >= 2")
    C_hat = growth_constant(mu, K.singular_exponent, seed=cfg["seed"]).C_hat
    rep = cross_integral(mu, K, A, C_hat=C_hat, M=M, threads=cfg["threads"])
    out_rep = {"kind": "crossint", "kernel": K.name, "cube": {"center": A.center, "side": A.side},
               "depth": cfg["depth"], **rep.to_dict()}
    write_json(out / "crossint.json", out_rep)
    return {"report": "crossint.json", "data": []}


RUNNERS = {"generate": run_generate, "osc-check": run_osc, "porosity": run_porosity, "covering": run_covering,
           "strips": run_strips, "weakconv": run_weakconv, "crossint": run_crossint}


def run_suite(cfg, spec, out: Path) -> dict:
    artifacts, data = [], []
    for kind in SUITE_KINDS:
        res = RUNNERS[kind](dict(cfg, kind=kind, clip_levels=True), spec, out)
        artifacts.append(res["report"])
        data.extend(res["data"])
    manifest = {"system": spec.to_dict(), "seed": cfg["seed"], "depth": cfg["depth"],
                "artifacts": artifacts, "data": data}
    write_json(out / "manifest.json", manifest)
    return {"report": "manifest.json", "data": artifacts + data}


def run(cfg: dict) -> dict:
    spec = load_system(cfg["system"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["kind"] == "suite":
        return run_suite(cfg, spec, out)
    return RUNNERS[cfg["kind"]](cfg, spec, out)


# ---------------------------------------------------------------- bundle

def report_bundle(dirs, out: Path) -> dict:
    """Merge run directories into per-figure CSVs; unreadable runs are listed, not fatal."""
    out.mkdir(parents=True, exist_ok=True)
    eps_rows, strip_rows, angle_rows = [], [], []
    included, missing = [], []
    for d in map(Path, dirs):
        found = False
        for path in sorted(d.glob("weakconv_depth*.csv")):
            depth = int(path.stem[len("weakconv_depth"):])
            with path.open() as fh:
                for row in csv.DictReader(fh):
                    eps_rows.append([str(d), depth, row["epsilon"], row["value"], row["increment"], row["flag"]])
            found = True
        if (d / "strips.csv").exists():
            with (d / "strips.csv").open() as fh:
                for row in csv.DictReader(fh):
                    strip_rows.append([str(d), row["k"], row["measure"], row["term"]])
            found = True
        if (d / "porosity.json").exists():
            rep = json.loads((d / "porosity.json").read_text())
            for dd in rep["directions"]:
                angle_rows.append([str(d), dd["direction_id"], *[repr(a) for a in dd["angles"]],
                                   repr(dd["c_estimate"]) if dd["c_estimate"] is not None else ""])
            found = True
        (included if found else missing).append(str(d))
    files = []
    if eps_rows:
        write_csv(out / "fig_eps_vs_value.csv", ["run", "depth", "epsilon", "value", "increment", "flag"], eps_rows)
        files.append("fig_eps_vs_value.csv")
    if strip_rows:
        write_csv(out / "fig_k_vs_strip.csv", ["run", "k", "measure", "term"], strip_rows)
        files.append("fig_k_vs_strip.csv")
    if angle_rows:
        width = max(len(r) for r in angle_rows) - 3
        theta = ["theta"] if width == 1 else [f"theta{k + 1}" for k in range(width)]
        write_csv(out / "fig_angle_vs_c.csv", ["run", "direction_id", *theta, "c_estimate"], angle_rows)
        files.append("fig_angle_vs_c.csv")
    manifest = {"included": included, "missing": missing, "files": files, "complete": not missing}
    write_json(out / "bundle.json", manifest)
    return manifest


# ------------------------------------------------------------------ argv

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; explicit flags override it")
    common.add_argument("--system", help="builtin system name or path to a system JSON file")
    common.add_argument("--depth", type=int)
    common.add_argument("--depths", type=int, nargs="+")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--threads", type=int)
    common.add_argument("--direction", help="axisK, coordK, theta:<rad> or all[:count], comma separated")
    common.add_argument("--points", type=int)
    common.add_argument("--scales", type=int)
    common.add_argument("--on-plane", dest="on_plane", action="store_const", const=True,
                        help="sample only atoms on the direction plane through the seed corner")
    common.add_argument("--grid-m", dest="grid_m", type=int)
    common.add_argument("--levels", type=int)
    common.add_argument("--axis", type=int)
    common.add_argument("--x", type=float, nargs="+")
    common.add_argument("--r", type=float)
    common.add_argument("--offset", type=float)
    common.add_argument("--a", type=float)
    common.add_argument("--k-max", dest="k_max", type=int)
    common.add_argument("--kernel")
    common.add_argument("--eps-start", dest="eps_start", type=float)
    common.add_argument("--eps-ratio", dest="eps_ratio", type=float)
    common.add_argument("--eps-count", dest="eps_count", type=int)
    common.add_argument("--pointwise-atoms", dest="pointwise_atoms", type=int)

    p = argparse.ArgumentParser(prog="cifslab", description="Experiments on limit sets of similitude systems.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the experiment named by the config 'kind' field")
    for kind in KINDS + ("suite",):
        sub.add_parser(kind, parents=[common])
    b = sub.add_parser("bundle", help="merge run directories into plot-data CSVs")
    b.add_argument("runs", nargs="+")
    b.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if len(argv) >= 2 and argv[0] == "run" and argv[1] in KINDS + ("suite",):
        argv = argv[1:]
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if ns.command == "bundle":
            report_bundle(ns.runs, Path(ns.out))
            return EXIT_OK
        cfg = resolve(ns)
        run(cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except InvariantError as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (RefinementError, DomainError, IndexError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CifsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
