"""Catalog of example systems with closed-form reference data.

Every reference value carries a provenance tag: ``paper`` (stated by the
source analysis of the system), ``derived`` (computed here from a stated
formula or an independent oracle) or ``trivial`` (immediate from the
normal form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exprdsl import parse_expr
from .phasespace import PhaseSpace, SymplecticForm, SystemDef, TWO_PI

__all__ = ["AXIS_CROSSING", "CATALOG", "MODELS", "CatalogEntry", "Ref", "build", "catalog_names",
           "reference_curve", "parametric_curve"]


@dataclass(frozen=True)
class Ref:
    value: object
    provenance: str  # "paper" | "derived" | "trivial"


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    description: str
    builder: Callable[..., SystemDef]
    defaults: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    # default connectivity setup: plane diffeo spec and cone (alpha, beta, apex)
    connectivity: dict = field(default_factory=dict)


def _canonical_r4(name: str, J: str, H: str, *, proper: bool = False,
                  image_box=((-1.0, -1.0), (1.0, 1.0))) -> SystemDef:
    names = ("x1", "x2", "xi1", "xi2")
    sp = PhaseSpace(4, seed_box=((-1.5,) * 4, (1.5,) * 4), names=names)
    return SystemDef(sp, parse_expr(J, 4, names), parse_expr(H, 4, names), name=name,
                     proper=proper, image_box=image_box)


def spherical_pendulum() -> SystemDef:
    names = ("q1", "q2", "q3", "p1", "p2", "p3")
    P = lambda s: parse_expr(s, 6, names)  # noqa: E731
    sp = PhaseSpace(
        6,
        constraints=(P("q1^2 + q2^2 + q3^2 - 1"), P("q1*p1 + q2*p2 + q3*p3")),
        seed_box=((-1.0, -1.0, -1.0, -2.5, -2.5, -2.5), (1.0, 1.0, 1.0, 2.5, 2.5, 2.5)),
        names=names,
    )
    return SystemDef(sp, P("q1*p2 - q2*p1"), P("0.5*(p1^2 + p2^2 + p3^2) + q3"),
                     name="spherical-pendulum", proper=True, compact=False,
                     image_box=((-3.0, -1.5), (3.0, 3.2)))


def annulus(n: int = 1) -> SystemDef:
    """S^2 x T^2 with F = (h cos nb, h sin nb), h in [1, 2].

    The sphere is the unit sphere in (X, Y, Z) with height h = 3/2 + Z/2;
    its form dh ^ da is -1/2 times the area form x.(u x v).  The torus form
    n db ^ dc is kept as a weighted coordinate pair.
    """
    n = int(n)
    if n < 1:
        raise ValueError("annulus needs an integer n >= 1")
    names = ("X", "Y", "Z", "b", "c")
    P = lambda s: parse_expr(s, 5, names)  # noqa: E731
    form = SymplecticForm(pairs=((3, 4, float(n)),), spheres=((0, 1, 2, -0.5),))
    sp = PhaseSpace(
        5,
        constraints=(P("X^2 + Y^2 + Z^2 - 1"),),
        form=form,
        seed_box=((-1.0, -1.0, -1.0, 0.0, 0.0), (1.0, 1.0, 1.0, TWO_PI, TWO_PI)),
        periodic_dims=(3, 4),
        names=names,
    )
    h = "(1.5 + 0.5*Z)"
    return SystemDef(sp, P(f"{h}*cos({n}*b)"), P(f"{h}*sin({n}*b)"), name=f"annulus-n{n}",
                     proper=True, compact=True, image_box=((-2.5, -2.5), (2.5, 2.5)))


def toric_r4() -> SystemDef:
    return _canonical_r4("toric-r4", "(x1^2 + xi1^2)/2", "(x2^2 + xi2^2)/2", proper=True,
                         image_box=((-0.5, -0.5), (2.0, 2.0)))


def toric_s2s2() -> SystemDef:
    """Product of height functions on two unit spheres, rescaled to [0, 1]^2."""
    names = ("X1", "Y1", "Z1", "X2", "Y2", "Z2")
    P = lambda s: parse_expr(s, 6, names)  # noqa: E731
    form = SymplecticForm(spheres=((0, 1, 2, 1.0), (3, 4, 5, 1.0)))
    sp = PhaseSpace(
        6,
        constraints=(P("X1^2 + Y1^2 + Z1^2 - 1"), P("X2^2 + Y2^2 + Z2^2 - 1")),
        form=form,
        seed_box=((-1.0,) * 6, (1.0,) * 6),
        names=names,
    )
    return SystemDef(sp, P("(1 + Z1)/2"), P("(1 + Z2)/2"), name="toric-s2s2",
                     proper=True, compact=True, image_box=((-0.25, -0.25), (1.25, 1.25)))


def coupled_spin_oscillator() -> SystemDef:
    """F = (2u^2 + 2v^2 + z, ux + vy) on S^2 x R^2.

    The form is the unit-sphere area form plus 4 dv ^ du; with this weight
    both components of J rotate at unit speed in the same sense, which is
    what makes {J, H} vanish.
    """
    names = ("x", "y", "z", "u", "v")
    P = lambda s: parse_expr(s, 5, names)  # noqa: E731
    form = SymplecticForm(pairs=((3, 4, -4.0),), spheres=((0, 1, 2, 1.0),))
    sp = PhaseSpace(
        5,
        constraints=(P("x^2 + y^2 + z^2 - 1"),),
        form=form,
        seed_box=((-1.0, -1.0, -1.0, -1.5, -1.5), (1.0, 1.0, 1.0, 1.5, 1.5)),
        names=names,
    )
    return SystemDef(sp, P("2*u^2 + 2*v^2 + z"), P("u*x + v*y"), name="coupled-spin-oscillator",
                     proper=True, compact=False, image_box=((-1.5, -2.0), (4.0, 2.0)))


MODELS = {
    "model-ee": ("(x1^2 + xi1^2)/2", "(x2^2 + xi2^2)/2", "elliptic-elliptic", 0),
    "model-ff": ("x1*xi2 - x2*xi1", "x1*xi1 + x2*xi2", "focus-focus", 0),
    "model-he": ("x1*xi1", "(x2^2 + xi2^2)/2", "hyperbolic-elliptic", 0),
    "model-hh": ("x1*xi1", "x2*xi2", "hyperbolic-hyperbolic", 0),
    "model-te": ("xi1", "(x2^2 + xi2^2)/2", "transversally-elliptic", 1),
    "model-th": ("xi1", "x2*xi2", "transversally-hyperbolic", 1),
}


def _model(name: str) -> Callable[[], SystemDef]:
    J, H, _, _ = MODELS[name]
    return lambda: _canonical_r4(name, J, H)


# ---------------------------------------------------------------------------
# closed forms for the spherical pendulum
# ---------------------------------------------------------------------------

def parametric_curve(lam):
    """(j, h) of the rank-one critical family at parameter lambda, 0 < |lambda| <= 1."""
    lam = np.asarray(lam, float)
    return (lam ** 4 - 1.0) / lam, (1.0 - 3.0 * lam ** 4) / (2.0 * lam ** 2)


def reference_curve(h, name: str = "spherical-pendulum"):
    """|j| on the boundary branch of the pendulum image at energy ``h`` (h >= -1)."""
    if name != "spherical-pendulum":
        raise ValueError("reference curve only known for the spherical pendulum")
    h = np.asarray(h, float)
    if np.any(h < -1.0):
        raise ValueError("the critical curve only exists for h >= -1")
    r = np.sqrt(h * h + 3.0)
    # at h = -1 the bracket 3 - h^2 + h r is 0 up to rounding
    val = (2.0 / 9.0) * np.maximum(3.0 - h * h + h * r, 0.0) * np.sqrt(h + r)
    return float(val) if val.ndim == 0 else val


AXIS_CROSSING = 2.0 * 3.0 ** 0.25 / 3.0


CATALOG: dict[str, CatalogEntry] = {
    "spherical-pendulum": CatalogEntry(
        "spherical-pendulum",
        "Spherical pendulum on TS^2 in R^6: J = q1 p2 - q2 p1, H = |p|^2/2 + q3.",
        spherical_pendulum,
        reference={
            "rank0": Ref([((0.0, 0.0, 1.0, 0.0, 0.0, 0.0), "focus-focus", (0.0, 1.0)),
                          ((0.0, 0.0, -1.0, 0.0, 0.0, 0.0), "elliptic-elliptic", (0.0, -1.0))],
                         "paper"),
            "rank1_types": Ref({"transversally-elliptic"}, "paper"),
            "almost_toric": Ref(True, "paper"),
            "axis_crossing": Ref(AXIS_CROSSING, "paper"),
            "vertical_tangencies": Ref(0, "paper"),
            "fiber_components": Ref({(0.5, 1.0): 1}, "derived"),
            "connectivity_verdict": Ref("GUARANTEED-CONNECTED", "paper"),
        },
        connectivity={"diffeo": "swap", "cone": (math.pi / 3, math.pi / 3, (-1.0, 0.0))},
    ),
    "annulus": CatalogEntry(
        "annulus",
        "S^2 x T^2 with F = (h cos nb, h sin nb); image is the annulus 1 <= |c| <= 2.",
        annulus,
        defaults={"n": 1},
        reference={
            "rank0": Ref([], "derived"),
            "rank1_types": Ref({"transversally-elliptic"}, "paper"),
            "almost_toric": Ref(True, "paper"),
            "vertical_tangencies": Ref(4, "derived"),
            "circle_radii": Ref((1.0, 2.0), "paper"),
            "fiber_components": Ref("n", "paper"),
            "morse_indices": Ref({-2.0: 0, -1.0: 2, 1.0: 1, 2.0: 3}, "paper"),
            "connectivity_verdict": Ref("NO-GUARANTEE", "paper"),
        },
        connectivity={"diffeo": "identity"},
    ),
    "toric-r4": CatalogEntry(
        "toric-r4",
        "Elliptic-elliptic normal form F = ((x1^2+xi1^2)/2, (x2^2+xi2^2)/2) on R^4.",
        toric_r4,
        reference={
            "rank0": Ref([((0.0, 0.0, 0.0, 0.0), "elliptic-elliptic", (0.0, 0.0))], "trivial"),
            "rank1_types": Ref({"transversally-elliptic"}, "trivial"),
            "almost_toric": Ref(True, "trivial"),
            "fiber_components": Ref({(0.0, 0.0): 1, (0.5, 0.5): 1}, "trivial"),
            "connectivity_verdict": Ref("GUARANTEED-CONNECTED", "trivial"),
        },
        # the quadrant is centred on the positive x-axis by a -45 degree turn
        connectivity={"diffeo": {"rotation": -math.pi / 4}, "cone": (math.pi / 3, math.pi / 3)},
    ),
    "toric-s2s2": CatalogEntry(
        "toric-s2s2",
        "Height functions on S^2 x S^2 rescaled so the image is the unit square.",
        toric_s2s2,
        reference={
            "rank0": Ref([((0, 0, s1, 0, 0, s2), "elliptic-elliptic", ((1 + s1) / 2, (1 + s2) / 2))
                          for s1 in (-1.0, 1.0) for s2 in (-1.0, 1.0)], "trivial"),
            "rank1_types": Ref({"transversally-elliptic"}, "trivial"),
            "almost_toric": Ref(True, "trivial"),
            "envelopes": Ref((0.0, 1.0), "trivial"),
            "fiber_components": Ref({(0.5, 0.5): 1}, "trivial"),
            "connectivity_verdict": Ref("GUARANTEED-CONNECTED", "trivial"),
        },
        # a tilted square has no vertical edges
        connectivity={"diffeo": {"rotation": math.pi / 8}},
    ),
    "coupled-spin-oscillator": CatalogEntry(
        "coupled-spin-oscillator",
        "F = (2u^2 + 2v^2 + z, ux + vy) on S^2 x R^2 (form: area + 4 dv^du).",
        coupled_spin_oscillator,
        reference={
            # types are regression data from classify_rank0 under the chosen form
            "rank0": Ref([((0.0, 0.0, 1.0, 0.0, 0.0), "focus-focus", (1.0, 0.0)),
                          ((0.0, 0.0, -1.0, 0.0, 0.0), "elliptic-elliptic", (-1.0, 0.0))],
                         "derived"),
            "almost_toric": Ref(True, "derived"),
            "vertical_tangencies": Ref(0, "derived"),
            "connectivity_verdict": Ref("GUARANTEED-CONNECTED", "derived"),
        },
        connectivity={"diffeo": "identity", "cone": (math.pi / 3, math.pi / 3, (-2.0, 0.0))},
    ),
}

for _name, (_J, _H, _wtype, _rank) in MODELS.items():
    _pt = Ref([((0.0, 0.0, 0.0, 0.0), _wtype, (0.0, 0.0))] if _rank == 0 else [], "trivial")
    CATALOG[_name] = CatalogEntry(
        _name,
        f"Quadratic normal form ({_wtype}): J = {_J}, H = {_H}.",
        _model(_name),
        reference={"rank0": _pt, "wtype": Ref(_wtype, "trivial"), "rank": Ref(_rank, "trivial"),
                   "almost_toric": Ref("hyperbolic" not in _wtype, "trivial")},
    )


def catalog_names() -> list[str]:
    return sorted(CATALOG)


def build(name: str, params: dict | None = None) -> SystemDef:
    """Instantiate a catalog system; ``params`` override the entry defaults."""
    if name not in CATALOG:
        raise KeyError(f"unknown system {name!r}; known: {', '.join(catalog_names())}")
    entry = CATALOG[name]
    kwargs = dict(entry.defaults)
    for k, v in (params or {}).items():
        if k not in entry.defaults:
            raise ValueError(f"system {name!r} has no parameter {k!r}")
        kwargs[k] = v
    if name == "annulus":
        n = kwargs["n"]
        if isinstance(n, str):
            if not n.strip().lstrip("+").isdigit():
                raise ValueError("annulus parameter n must be a positive integer")
            n = int(n)
        if isinstance(n, float):
            if not n.is_integer():
                raise ValueError("annulus parameter n must be a positive integer")
            n = int(n)
        kwargs["n"] = n
    return entry.builder(**kwargs)


if __name__ == "__main__":  # pragma: no cover
    for nm in catalog_names():
        print(nm, "-", CATALOG[nm].description)
    print("axis crossing", AXIS_CROSSING, math.isclose(reference_curve(0.0), AXIS_CROSSING))
