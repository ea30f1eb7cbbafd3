"""Command-line front end: ``python -m almosttoric <command> <system> [options]``.

Every command writes its report into the output directory (``--out``, else
``$ALMOSTTORIC_OUT``, else ``./almosttoric-out``).  A ``--config`` file
(YAML or JSON) overrides the flags it mentions.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .bifurcation import (
    PlaneDiffeo,
    build_diagram,
    compute_envelopes,
    trace_strata,
    validate_image_structure,
)
from .connectivity import GUARANTEED, NONE, WEAK, connectivity_verdict, morse_bott_audit
from .exprdsl import ParseError
from .phasespace import load_system
from .singular import almost_toric_audit, find_critical_points
from .systems import CATALOG, build, catalog_names

OUT_ENV = "ALMOSTTORIC_OUT"
EXIT_OK, EXIT_ERROR, EXIT_FLAGGED, EXIT_NO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    system: str
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    budget: int = 256
    j_grid: tuple | None = None          # (start, stop, num)
    image_box: tuple | None = None
    diffeo: object = None
    cone: tuple | None = None            # (alpha, beta) or (alpha, beta, (x, y))
    compact: bool | None = None
    proper: bool | None = None
    finite_interior: bool = False
    function: str = "x"
    spots: int = 5
    fiber_budget: int = 1000
    export_fibers: bool = False
    out: Path = Path("almosttoric-out")
    seed: int = 0


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _kv(items) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise ConfigError(f"expected key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="almosttoric",
                                description="Singularities, bifurcation diagrams and fiber "
                                            "connectivity of integrable systems F = (J, H).")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("system", help="catalog name or path to a system file (.yaml/.json)")
        sp.add_argument("--param", action="append", metavar="K=V", help="catalog parameter, e.g. n=3")
        sp.add_argument("--tol", action="append", metavar="K=V", help="tolerance override")
        sp.add_argument("--budget", type=int, help="seed budget for the critical-point search")
        sp.add_argument("--image-box", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
        sp.add_argument("--seed", type=int, help="RNG seed (default 0)")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./almosttoric-out)")
        sp.add_argument("--config", help="YAML/JSON file whose keys override the flags")

    sp = sub.add_parser("classify", help="locate and classify critical points")
    common(sp)
    sp = sub.add_parser("diagram", help="trace the bifurcation diagram (CSV, SVG, JSON)")
    common(sp)
    sp.add_argument("--j-grid", type=float, nargs=3, metavar=("START", "STOP", "NUM"))
    sp = sub.add_parser("envelopes", help="envelopes H-, H+ and the image-structure check")
    common(sp)
    sp.add_argument("--j-grid", type=float, nargs=3, metavar=("START", "STOP", "NUM"))
    sp = sub.add_parser("connectivity", help="connectivity verdict with fiber spot checks")
    common(sp)
    sp.add_argument("--diffeo", help="identity | swap | rotation:ANGLE | 'GX;GY[;IX;IY]'")
    sp.add_argument("--cone", type=float, nargs=2, metavar=("ALPHA", "BETA"))
    sp.add_argument("--apex", type=float, nargs=2, metavar=("X", "Y"))
    sp.add_argument("--compact", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--proper", action=argparse.BooleanOptionalAction, default=None)
    sp.add_argument("--finite-interior", action="store_true",
                    help="assert finitely many critical values inside the image")
    sp.add_argument("--spots", type=int, help="number of spot-check fibers (at least 5)")
    sp.add_argument("--fiber-budget", type=int, help="seed budget per spot-check fiber")
    sp.add_argument("--export-fibers", action="store_true", help="write fiber point clouds as CSV")
    sp = sub.add_parser("audit", help="almost-toric audit and Morse-Bott indices of f o g o F")
    common(sp)
    sp.add_argument("--function", help="f(x, y) for the Morse-Bott audit (default x)")
    sp.add_argument("--diffeo", help="identity | swap | rotation:ANGLE | 'GX;GY[;IX;IY]'")
    sub.add_parser("catalog", help="list the built-in systems").add_argument(
        "--json", action="store_true", help="print the catalog as JSON")
    return p


def _diffeo_spec(text):
    if text is None or isinstance(text, dict):
        return text
    text = str(text).strip()
    if text in ("identity", "swap"):
        return text
    if text.startswith("rotation:"):
        return {"rotation": float(text.split(":", 1)[1])}
    parts = [s.strip() for s in text.split(";")]
    if len(parts) not in (2, 4):
        raise ConfigError(f"cannot read diffeomorphism {text!r}")
    spec = {"gx": parts[0], "gy": parts[1]}
    if len(parts) == 4:
        spec["inverse"] = parts[2:]
    return spec


_KEYS = {"system", "params", "tolerances", "budget", "j_grid", "image_box", "diffeo", "cone",
         "apex", "compact", "proper", "finite_interior", "function", "spots", "fiber_budget",
         "export_fibers", "out", "seed"}


def make_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(args.command, args.system)
    cfg.params = _kv(args.param)
    cfg.tolerances = _kv(args.tol)
    for name in ("budget", "seed", "spots", "fiber_budget", "function"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "image_box", None):
        b = args.image_box
        cfg.image_box = ((b[0], b[1]), (b[2], b[3]))
    if getattr(args, "j_grid", None):
        cfg.j_grid = tuple(args.j_grid)
    cfg.diffeo = _diffeo_spec(getattr(args, "diffeo", None))
    if getattr(args, "cone", None):
        cfg.cone = tuple(args.cone) + ((tuple(args.apex),) if args.apex else ())
    cfg.compact = getattr(args, "compact", None)
    cfg.proper = getattr(args, "proper", None)
    cfg.finite_interior = bool(getattr(args, "finite_interior", False))
    cfg.export_fibers = bool(getattr(args, "export_fibers", False))
    cfg.out = Path(args.out or os.environ.get(OUT_ENV) or "almosttoric-out")
    if args.config:
        _apply_file(cfg, Path(args.config))
    if cfg.budget < 1 or cfg.fiber_budget < 1:
        raise ConfigError("budgets must be positive")
    if cfg.spots < 5:
        raise ConfigError("at least 5 spot checks are required")
    return cfg


def _apply_file(cfg: RunConfig, path: Path) -> None:
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for k, v in data.items():
        if k == "params":
            cfg.params.update(v or {})
        elif k == "tolerances":
            cfg.tolerances.update(v or {})
        elif k == "image_box":
            cfg.image_box = (tuple(v[0]), tuple(v[1]))
        elif k == "j_grid":
            cfg.j_grid = tuple(v)
        elif k == "diffeo":
            cfg.diffeo = _diffeo_spec(v)
        elif k == "cone":
            cfg.cone = tuple(v[:2]) + ((tuple(v[2]),) if len(v) > 2 else ())
        elif k == "apex":
            if cfg.cone is None:
                raise ConfigError("apex given without cone")
            cfg.cone = tuple(cfg.cone[:2]) + (tuple(v),)
        elif k == "out":
            cfg.out = Path(v)
        else:
            setattr(cfg, k, v)


def load(cfg: RunConfig):
    """The configured system, with tolerance and image-box overrides applied."""
    path = Path(cfg.system)
    if cfg.system in CATALOG:
        system = build(cfg.system, cfg.params)
    elif path.suffix in (".yaml", ".yml", ".json") and path.exists():
        if cfg.params:
            raise ConfigError("--param applies to catalog systems only")
        system = load_system(path)
    else:
        raise ConfigError(f"unknown system {cfg.system!r}; known: {', '.join(catalog_names())}")
    if cfg.tolerances:
        system = system.with_tolerances(cfg.tolerances)
    if cfg.image_box is not None:
        system = replace(system, image_box=cfg.image_box)
    if system.image_box is None:
        raise ConfigError("the system needs an image_box (flag, config or system file)")
    return system


def _connectivity_defaults(cfg: RunConfig) -> tuple:
    entry = CATALOG.get(cfg.system)
    setup = entry.connectivity if entry is not None else {}
    spec = cfg.diffeo if cfg.diffeo is not None else setup.get("diffeo")
    cone = cfg.cone if cfg.cone is not None else setup.get("cone")
    return PlaneDiffeo.from_spec(spec), cone


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def clean(obj):
    """JSON-safe copy: numpy to Python, floats to 12 significant digits, inf as text."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        x = float(f"{x:.12g}")
        return 0.0 if x == 0 else x
    if isinstance(obj, (set, frozenset)):
        return sorted(clean(v) for v in obj)
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(clean(data), indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return f"{float(x):.12g}"


def write_strata_csv(out: Path, d) -> list[Path]:
    """One CSV per stratum, columns x, y, wtype."""
    paths = []
    for k, s in enumerate(d.strata):
        path = out / f"stratum_{k}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "wtype"])
            for p, t in zip(s.points, s.wtypes):
                w.writerow([_fmt(p[0]), _fmt(p[1]), t])
        paths.append(path)
    return paths


def write_envelopes_csv(path: Path, env) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "hminus", "hplus"])
        for x, a, b in zip(env.j_grid, env.hminus, env.hplus):
            w.writerow([_fmt(x), _fmt(a), _fmt(b)])


def write_svg(path: Path, d, env=None, size: int = 480) -> None:
    """Strata as polylines, envelopes dashed, rank-zero values as dots."""
    (x0, y0), (x1, y1) = d.image_box
    pad = 20

    def X(x):
        return pad + (x - x0) / (x1 - x0) * (size - 2 * pad)

    def Y(y):
        return size - pad - (y - y0) / (y1 - y0) * (size - 2 * pad)

    def poly(P, closed, style):
        step = max(1, len(P) // 2000)
        Q = P[::step]
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in Q)
        tag = "polygon" if closed else "polyline"
        return f'  <{tag} points="{pts}" fill="none" {style}/>'

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'  <rect x="0" y="0" width="{size}" height="{size}" fill="white"/>']
    if x0 < 0 < x1:
        lines.append(f'  <line x1="{X(0):.2f}" y1="{pad}" x2="{X(0):.2f}" y2="{size - pad}" '
                     'stroke="#bbb" stroke-width="0.5"/>')
    if y0 < 0 < y1:
        lines.append(f'  <line x1="{pad}" y1="{Y(0):.2f}" x2="{size - pad}" y2="{Y(0):.2f}" '
                     'stroke="#bbb" stroke-width="0.5"/>')
    if env is not None:
        for C in env.curves():
            C = C[(C[:, 1] >= y0) & (C[:, 1] <= y1)]
            if len(C) > 1:
                lines.append(poly(C, False, 'stroke="#2a7" stroke-width="1" stroke-dasharray="4 3"'))
    for s in d.strata:
        if len(s.points) > 1:
            lines.append(poly(s.points, s.closed, 'stroke="black" stroke-width="1.5"'))
    colour = {"focus-focus": "red", "elliptic-elliptic": "blue"}
    for (a, b), w in d.isolated_values:
        lines.append(f'  <circle cx="{X(a):.2f}" cy="{Y(b):.2f}" r="3.5" '
                     f'fill="{colour.get(w, "orange")}"><title>{w}</title></circle>')
    lines.append("</svg>")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _records(system, cfg):
    stats: dict = {}
    recs = find_critical_points(system, n_seeds=cfg.budget, seed=cfg.seed, stats=stats)
    return recs, stats


def _j_grid(system, cfg):
    if cfg.j_grid is not None:
        a, b, n = cfg.j_grid
        if int(n) < 2:
            raise ConfigError("j-grid needs at least 2 points")
        return np.linspace(a, b, int(n))
    (x0, _), (x1, _) = system.image_box
    return np.linspace(x0, x1, 121)


def _header(system, cfg) -> dict:
    return {"system": system.name, "params": cfg.params, "seed": cfg.seed, "budget": cfg.budget,
            "proper": system.proper, "compact": system.compact,
            "tolerances": {k: getattr(system.tol, k) for k in vars(system.tol)}}


def cmd_classify(cfg: RunConfig) -> int:
    system = load(cfg)
    recs, stats = _records(system, cfg)
    audit = almost_toric_audit(system, recs, cfg.budget)
    flagged = [r for r in recs if not r.admissible]
    report = {**_header(system, cfg), "records": [r.to_dict() for r in recs],
              "seed_stats": stats, "almost_toric": audit.to_dict(),
              "flagged": [r.to_dict() for r in flagged]}
    write_json(cfg.out / "classify.json", report)
    n0 = sum(r.rank == 0 for r in recs)
    print(f"{system.name}: {n0} rank-0 and {len(recs) - n0} rank-1 records, "
          f"{len(flagged)} flagged -> {cfg.out / 'classify.json'}")
    return EXIT_FLAGGED if flagged else EXIT_OK


def cmd_diagram(cfg: RunConfig) -> int:
    system = load(cfg)
    recs, _ = _records(system, cfg)
    strata = trace_strata(system, recs)
    env = compute_envelopes(system, _j_grid(system, cfg), seed=cfg.seed, strata=strata)
    d = build_diagram(system, recs, envelopes=env, strata=strata)
    write_strata_csv(cfg.out, d)
    write_envelopes_csv(cfg.out / "envelopes.csv", env)
    write_svg(cfg.out / "diagram.svg", d, env)
    write_json(cfg.out / "diagram.json", {**_header(system, cfg), "diagram": d.to_dict()})
    print(f"{system.name}: {len(d.strata)} strata, {len(d.isolated_values)} isolated values, "
          f"{len(d.tangencies)} vertical tangencies -> {cfg.out}")
    return EXIT_OK


def cmd_envelopes(cfg: RunConfig) -> int:
    system = load(cfg)
    recs, _ = _records(system, cfg)
    strata = trace_strata(system, recs)
    env = compute_envelopes(system, _j_grid(system, cfg), seed=cfg.seed, strata=strata)
    d = build_diagram(system, recs, envelopes=env, strata=strata)
    rep = validate_image_structure(d, system, seed=cfg.seed)
    write_envelopes_csv(cfg.out / "envelopes.csv", d.envelopes)
    write_json(cfg.out / "envelopes.json", {**_header(system, cfg),
                                            "envelopes": d.envelopes.to_dict(),
                                            "image_structure": rep.to_dict()})
    print(f"{system.name}: image structure {'PASS' if rep.passed else 'FAIL'} "
          f"-> {cfg.out / 'envelopes.json'}")
    return EXIT_OK if rep.passed else EXIT_NO


def cmd_connectivity(cfg: RunConfig) -> int:
    system = load(cfg)
    g, cone = _connectivity_defaults(cfg)
    recs, _ = _records(system, cfg)
    d = build_diagram(system, recs)
    v = connectivity_verdict(system, d, recs, g, cone, compact=cfg.compact, proper=cfg.proper,
                             finite_interior=cfg.finite_interior, n_spot=cfg.spots,
                             budget=cfg.fiber_budget, seed=cfg.seed)
    write_json(cfg.out / "connectivity.json", {**_header(system, cfg), "verdict": v.to_dict()})
    if cfg.export_fibers:
        for i, fs in enumerate(v.spot_checks):
            with (cfg.out / f"fiber_{i}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([f"x{k + 1}" for k in range(fs.points.shape[1])] + ["component"])
                for p, lab in zip(fs.points, fs.labels):
                    w.writerow([_fmt(t) for t in p] + [int(lab)])
    counts = [fs.components for fs in v.spot_checks]
    print(f"{system.name}: {v.status}"
          + (f" (failed: {'; '.join(v.failed)})" if v.failed else "")
          + f", spot-check components {counts} -> {cfg.out / 'connectivity.json'}")
    return {GUARANTEED: EXIT_OK, WEAK: EXIT_FLAGGED, NONE: EXIT_NO}[v.status]


def cmd_audit(cfg: RunConfig) -> int:
    system = load(cfg)
    g = PlaneDiffeo.from_spec(cfg.diffeo)
    recs, _ = _records(system, cfg)
    audit = almost_toric_audit(system, recs, cfg.budget)
    mb = morse_bott_audit(system, cfg.function, g, seed=cfg.seed)
    write_json(cfg.out / "audit.json", {**_header(system, cfg), "almost_toric": audit.to_dict(),
                                        "morse_bott": mb.to_dict(), "diffeo": g.to_dict()})
    idx = sorted({(m.value, m.index) for m in mb.manifolds})
    print(f"{system.name}: almost-toric {'PASS' if audit.passed else 'FAIL'}, "
          f"Morse-Bott {'PASS' if mb.passed else 'FAIL'} (value, index) {idx}")
    return EXIT_OK if audit.passed and mb.passed else EXIT_NO


def cmd_catalog(as_json: bool) -> int:
    if as_json:
        data = {n: {"description": CATALOG[n].description, "defaults": CATALOG[n].defaults,
                    "reference": {k: {"value": repr(r.value), "provenance": r.provenance}
                                  for k, r in CATALOG[n].reference.items()}}
                for n in catalog_names()}
        print(json.dumps(clean(data), indent=2, sort_keys=True))
    else:
        for n in catalog_names():
            print(f"{n:26s} {CATALOG[n].description}")
    return EXIT_OK


COMMANDS = {"classify": cmd_classify, "diagram": cmd_diagram, "envelopes": cmd_envelopes,
            "connectivity": cmd_connectivity, "audit": cmd_audit}


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    if args.command == "catalog":
        return cmd_catalog(args.json)
    try:
        cfg = make_config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, ParseError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
