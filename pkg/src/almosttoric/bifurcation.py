"""Bifurcation diagrams in the (J, H)-plane.

Rank-one critical points come in one-parameter families of orbits; their
images are traced by predictor-corrector continuation of the equations

    cos(t) grad J + sin(t) grad H - C^T mu = 0,   c(x) = 0

in the unknowns z = (x, t, mu).  The solution set is two-dimensional (the
orbit direction and the family direction), so the predictor follows the
null-space direction with the largest image-plane speed.  A coarse pass with
adaptive steps is followed by a batched densification pass that inserts
corrected vertices until consecutive image points are at most ``trace_step``
apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .exprdsl import ExprTree, Var, evaluate, parse_expr
from .phasespace import SystemDef, Tolerances, gauss_newton, sample_feasible, seed_points
from .singular import (
    CriticalPointRecord,
    RankError,
    _multipliers,
    _rank1_system,
    classify_rank1,
    differential_singular_values,
)

TANGENCY_KINDS = ("transversal", "vertical-tangency", "nondegenerate-contact",
                  "outward-contact", "degenerate-contact")


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass
class Stratum:
    points: np.ndarray                   # (N, 2) image vertices
    wtypes: list[str]
    phase: np.ndarray | None = None      # (N, d + 1 + k) solutions (x, t, mu)
    closed: bool = False
    ends: tuple[str, str] = ("open", "open")
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "wtypes": list(self.wtypes),
                "closed": self.closed, "ends": list(self.ends), "flags": list(self.flags)}


@dataclass(frozen=True)
class Tangency:
    point: tuple[float, float]
    kind: str
    stratum: int
    vertex: float    # fractional vertex index along the stratum

    def to_dict(self) -> dict:
        return {"point": list(self.point), "kind": self.kind, "stratum": self.stratum,
                "vertex": self.vertex}


@dataclass
class Contact:
    point: tuple[float, float]
    kind: str
    stratum: int
    nondegenerate: bool | None = None
    outward: bool | None = None

    def to_dict(self) -> dict:
        return {"point": list(self.point), "kind": self.kind, "stratum": self.stratum,
                "nondegenerate": self.nondegenerate, "outward": self.outward}


@dataclass
class Envelopes:
    """H-(x) = inf of H over J = x and H+(x) = sup, sampled on a grid."""

    j_grid: np.ndarray
    hminus: np.ndarray
    hplus: np.ndarray
    j_range: tuple[float, float] = (-math.inf, math.inf)
    flags: list = field(default_factory=list)
    refinement: float = 0.0

    def __call__(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Piecewise-linear evaluation; NaN outside the grid."""
        x = np.atleast_1d(np.asarray(x, float))
        return _pl(self.j_grid, self.hminus, x), _pl(self.j_grid, self.hplus, x)

    def curves(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.isfinite(self.hminus)
        hi = np.isfinite(self.hplus)
        return (np.column_stack([self.j_grid[lo], self.hminus[lo]]),
                np.column_stack([self.j_grid[hi], self.hplus[hi]]))

    def to_dict(self) -> dict:
        return {"j_grid": self.j_grid.tolist(), "hminus": self.hminus.tolist(),
                "hplus": self.hplus.tolist(), "j_range": list(self.j_range),
                "flags": self.flags, "refinement": self.refinement}


def _pl(xg: np.ndarray, yg: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.full(x.shape, np.nan)
    if xg.size == 0:
        return out
    inside = (x >= xg[0]) & (x <= xg[-1])
    i = np.clip(np.searchsorted(xg, x[inside], side="right") - 1, 0, max(xg.size - 2, 0))
    if xg.size == 1:
        out[inside] = yg[0]
        return out
    x0, x1 = xg[i], xg[i + 1]
    y0, y1 = yg[i], yg[i + 1]
    w = (x[inside] - x0) / (x1 - x0)
    with np.errstate(invalid="ignore"):
        val = (1 - w) * y0 + w * y1
    # an infinite neighbour makes the interval unbounded
    val = np.where(np.isinf(y0), y0, np.where(np.isinf(y1), y1, val))
    val = np.where(w == 0.0, y0, val)
    out[inside] = val
    return out


@dataclass
class BifurcationDiagram:
    strata: list[Stratum]
    isolated_values: list[tuple[tuple[float, float], str]]
    tangencies: list[Tangency]
    envelopes: Envelopes | None
    image_box: tuple
    tol: Tolerances = field(default_factory=Tolerances)
    envelope_curves: tuple | None = None
    frame: tuple = ()                      # diffeomorphisms applied, in order

    def vertices(self) -> np.ndarray:
        pts = [s.points for s in self.strata if len(s.points)]
        return np.vstack(pts) if pts else np.zeros((0, 2))

    def to_dict(self) -> dict:
        return {
            "strata": [s.to_dict() for s in self.strata],
            "isolated_values": [{"value": list(v), "wtype": w} for v, w in self.isolated_values],
            "tangencies": [t.to_dict() for t in self.tangencies],
            "envelopes": self.envelopes.to_dict() if self.envelopes else None,
            "image_box": [list(self.image_box[0]), list(self.image_box[1])],
            "frame": [g.name for g in self.frame],
        }


# ---------------------------------------------------------------------------
# plane diffeomorphisms
# ---------------------------------------------------------------------------

_PLANE = ("x", "y")


@dataclass(frozen=True)
class PlaneDiffeo:
    gx: ExprTree
    gy: ExprTree
    domain: tuple = ((-1e3, -1e3), (1e3, 1e3))
    inverse_pair: tuple | None = None
    name: str = "g"

    @classmethod
    def parse(cls, gx: str, gy: str, domain=None, inverse=None, name: str | None = None):
        inv = None
        if inverse is not None:
            inv = (parse_expr(inverse[0], 2, _PLANE), parse_expr(inverse[1], 2, _PLANE))
        return cls(parse_expr(gx, 2, _PLANE), parse_expr(gy, 2, _PLANE),
                   tuple(map(tuple, domain)) if domain is not None else ((-1e3, -1e3), (1e3, 1e3)),
                   inv, name or f"({gx}, {gy})")

    @classmethod
    def identity(cls) -> "PlaneDiffeo":
        return cls.parse("x", "y", inverse=("x", "y"), name="identity")

    @classmethod
    def swap(cls) -> "PlaneDiffeo":
        return cls.parse("y", "x", inverse=("y", "x"), name="swap")

    @classmethod
    def rotation(cls, angle: float) -> "PlaneDiffeo":
        c, s = repr(math.cos(angle)), repr(math.sin(angle))
        return cls.parse(f"{c}*x - {s}*y", f"{s}*x + {c}*y",
                         inverse=(f"{c}*x + {s}*y", f"-{s}*x + {c}*y"),
                         name=f"rotation({angle!r})")

    @classmethod
    def from_spec(cls, spec) -> "PlaneDiffeo":
        """``"identity"``, ``"swap"``, ``{"rotation": angle}`` or ``{"gx", "gy", ...}``."""
        if spec is None or spec == "identity":
            return cls.identity()
        if spec == "swap":
            return cls.swap()
        if isinstance(spec, dict) and "rotation" in spec:
            return cls.rotation(float(spec["rotation"]))
        if isinstance(spec, dict) and {"gx", "gy"} <= set(spec):
            return cls.parse(str(spec["gx"]), str(spec["gy"]), spec.get("domain"),
                             spec.get("inverse"), spec.get("name"))
        raise ValueError(f"cannot read plane diffeomorphism from {spec!r}")

    @property
    def is_identity(self) -> bool:
        return self.gx.root == Var(0) and self.gy.root == Var(1)

    def __call__(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        if pts.shape[0] == 0:
            return pts.copy()
        return np.column_stack([evaluate(self.gx, pts, order=0).value,
                                evaluate(self.gy, pts, order=0).value])

    def jacobian(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        return np.stack([evaluate(self.gx, pts, order=1).grad,
                         evaluate(self.gy, pts, order=1).grad], axis=1)

    def validate(self, n: int = 33, extra=None) -> float:
        """Minimum |det Dg| over a grid of the domain (and ``extra`` points)."""
        lo, hi = (np.asarray(v, float) for v in self.domain)
        gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n))
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        if extra is not None and len(extra):
            pts = np.vstack([pts, extra])
        det = np.abs(np.linalg.det(self.jacobian(pts)))
        m = float(np.min(det))
        if not m > 1e-8:
            raise ValueError(f"diffeomorphism {self.name!r} has |det Dg| = {m:.2e} on its domain")
        return m

    def inverse(self) -> "PlaneDiffeo":
        if self.inverse_pair is None:
            raise ValueError(f"diffeomorphism {self.name!r} has no declared inverse")
        lo, hi = (np.asarray(v, float) for v in self.domain)
        corners = self(np.array([[lo[0], lo[1]], [lo[0], hi[1]], [hi[0], lo[1]], [hi[0], hi[1]]]))
        dom = (tuple(corners.min(axis=0)), tuple(corners.max(axis=0)))
        return PlaneDiffeo(self.inverse_pair[0], self.inverse_pair[1], dom,
                           (self.gx, self.gy), f"inverse of {self.name}")

    def to_dict(self) -> dict:
        d = {"gx": self.gx.to_source(_PLANE), "gy": self.gy.to_source(_PLANE),
             "domain": [list(self.domain[0]), list(self.domain[1])], "name": self.name}
        if self.inverse_pair is not None:
            d["inverse"] = [e.to_source(_PLANE) for e in self.inverse_pair]
        return d


# ---------------------------------------------------------------------------
# continuation
# ---------------------------------------------------------------------------

class _Tracer:
    def __init__(self, system: SystemDef, trace_step: float, coarse_factor: float):
        self.system = system
        self.sp = system.space
        self.tol = system.tol
        self.d = self.sp.ambient_dim
        self.fun = _rank1_system(system)
        self.h_fine = trace_step
        self.h_max = trace_step * coarse_factor
        lo, hi = (np.asarray(v, float) for v in system.image_box)
        self.lo, self.hi = lo, hi
        self.periodic = np.array(self.sp.periodic_dims, int)

    def wrap(self, z: np.ndarray) -> np.ndarray:
        if self.periodic.size == 0:
            return z
        z = z.copy()
        z[:, self.periodic] = np.mod(z[:, self.periodic], 2 * math.pi)
        return z

    def image(self, z: np.ndarray) -> np.ndarray:
        return self.system.image(np.atleast_2d(z)[:, :self.d])

    def correct(self, Z: np.ndarray, max_iter: int):
        return gauss_newton(self.fun, Z, self.tol.tol_constraint, max_iter,
                            self.tol.max_halvings, wrap=self.wrap if self.periodic.size else None)

    def tangent(self, z: np.ndarray):
        _, jac = self.fun(z[None, :])
        J = jac[0]
        n = J.shape[1]
        _, s, vt = np.linalg.svd(J)
        rank = int(np.sum(s > 1e-9 * max(s[0], 1.0)))
        N = vt[rank:].T
        x = z[None, :self.d]
        gJ = evaluate(self.system.J, x, order=1).grad[0]
        gH = evaluate(self.system.H, x, order=1).grad[0]
        P = np.zeros((2, n))
        P[0, :self.d], P[1, :self.d] = gJ, gH
        U, S, Vt = np.linalg.svd(P @ N)
        if S[0] < 1e-12:
            return None, None
        return N @ Vt[0] / S[0], U[:, 0]

    def delta(self, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
        dz = zb - za
        # the combination angle t is periodic as well
        p = np.append(self.periodic, self.d)
        dz[..., p] = np.mod(dz[..., p] + math.pi, 2 * math.pi) - math.pi
        return dz

    def in_box(self, c: np.ndarray) -> bool:
        return bool(np.all(c >= self.lo) and np.all(c <= self.hi))

    def run(self, z0: np.ndarray, sign: float, rank0: list, max_steps: int = 20000):
        """Coarse continuation in one direction; returns (points, end, flags)."""
        z = z0.copy()
        c0 = self.image(z)[0]
        c = c0
        t, u = self.tangent(z)
        if t is None:
            return [z], "stall", ("stall",)
        u_prev = sign * u
        pts, end, flags = [z], "max-steps", ()
        h = self.h_max
        travelled = 0.0
        for _ in range(max_steps):
            t, u = self.tangent(z)
            if t is None:
                end, flags = "stall", ("stall",)
                break
            if float(u @ u_prev) < 0:
                t, u = -t, -u
            near = min((float(np.hypot(*(c - v))) for v in rank0), default=math.inf)
            hcap = self.h_fine if near < 3 * self.h_max else self.h_max
            h = min(h, hcap)
            accepted = False
            while h >= self.tol.min_step:
                out = self.correct((z + h * t)[None, :], 8)
                if out.converged[0]:
                    zn = out.x[0]
                    cn = self.image(zn)[0]
                    dc = cn - c
                    dist = float(np.hypot(*dc))
                    if 0.5 * h <= dist <= 1.5 * h and float(dc @ u) > 0.94 * dist:
                        accepted = True
                        break
                h *= 0.5
            if not accepted:
                end, flags = "stall", ("stall",)
                break
            z, u_prev = zn, dc / dist
            travelled += dist
            c = cn
            if not self.in_box(c):
                end = "box"
                break
            pts.append(z)
            s1 = differential_singular_values(self.system, z[None, :self.d])[0, 0]
            if s1 < self.tol.tol_rank:
                end = "rank0"
                break
            near = [(float(np.hypot(*(c - v))), i) for i, v in enumerate(rank0)]
            if near and min(near)[0] < self.h_fine:
                end = f"rank0:{min(near)[1]}"
                break
            if travelled > 4 * self.h_max and np.hypot(*(c - c0)) < 0.75 * self.h_max:
                end = "loop"
                break
            h = min(1.5 * h, hcap)
        return pts, end, flags

    def densify(self, Z: np.ndarray, closed: bool, fixed: np.ndarray) -> np.ndarray:
        """Insert corrected vertices until image gaps are at most trace_step."""
        h = self.h_fine
        for _round in range(8):
            C = self.image(Z)
            nxt = np.roll(Z, -1, axis=0) if closed else Z[1:]
            Cn = np.roll(C, -1, axis=0) if closed else C[1:]
            gaps = np.hypot(*(Cn - C[:len(Cn)]).T)
            need = np.flatnonzero(gaps > h)
            if need.size == 0:
                return Z
            new_rows, owner, expect, slack = [], [], [], []
            for i in need:
                m = min(int(math.ceil(gaps[i] / (0.9 * h))), 256)
                dz = self.delta(Z[i], nxt[i])
                for j in range(1, m):
                    new_rows.append(Z[i] + (j / m) * dz)
                    owner.append(i + j / m)
                    expect.append(C[i] + (j / m) * (Cn[i] - C[i]))
                    slack.append(max(gaps[i], h))
            if not new_rows:
                return Z
            out = self.correct(self.wrap(np.array(new_rows)), 20)
            # a corrected vertex must stay near its chord; ends joining two
            # ambient copies of one image loop interpolate to nowhere useful
            expect, slack = np.array(expect), np.array(slack)
            X = out.x
            off = np.hypot(*(self.image(X) - expect).T)
            keep = out.converged & (off <= slack)
            bad = np.flatnonzero(~keep)
            if bad.size:
                # retry from the owning vertex along the stratum tangent
                retry, rows = [], []
                for r in bad:
                    i = int(owner[r])
                    t, u = self.tangent(Z[i])
                    if t is None:
                        continue
                    step = float(np.hypot(*(expect[r] - C[i])))
                    sgn = 1.0 if float(u @ (Cn[i] - C[i])) >= 0 else -1.0
                    retry.append(r)
                    rows.append(Z[i] + sgn * step * t)
                if rows:
                    o2 = self.correct(self.wrap(np.array(rows)), 20)
                    off2 = np.hypot(*(self.image(o2.x) - expect[retry]).T)
                    ok2 = o2.converged & (off2 <= slack[retry])
                    X = X.copy()
                    X[np.array(retry)[ok2]] = o2.x[ok2]
                    keep[np.array(retry)[ok2]] = True
            if not keep.any():
                return Z
            order_key = np.concatenate([np.arange(len(Z), dtype=float), np.array(owner)[keep]])
            Z = np.vstack([Z, X[keep]])
            fixed = np.concatenate([fixed, np.zeros(int(keep.sum()), bool)])
            idx = np.argsort(order_key, kind="stable")
            Z, fixed = Z[idx], fixed[idx]
        return Z


def _segment_distance(p: np.ndarray, P: np.ndarray) -> float:
    if len(P) == 1:
        return float(np.hypot(*(p - P[0])))
    a, b = P[:-1], P[1:]
    ab = b - a
    L = np.sum(ab * ab, axis=1)
    t = np.clip(np.sum((p - a) * ab, axis=1) / np.where(L > 0, L, 1.0), 0.0, 1.0)
    q = a + t[:, None] * ab
    return float(np.min(np.hypot(*(q - p).T)))


def _rank1_start_point(system: SystemDef, x: np.ndarray, theta_hint: float | None = None):
    from .singular import _rank1_start
    z = _rank1_start(system, x[None, :])
    if theta_hint is not None:
        d = system.space.ambient_dim
        loc_t = theta_hint
        z[0, d] = loc_t
        gJ = evaluate(system.J, x[None, :], order=1).grad[0]
        gH = evaluate(system.H, x[None, :], order=1).grad[0]
        if system.space.k:
            C = np.stack([evaluate(c, x[None, :], order=1).grad[0] for c in system.space.constraints])
            z[0, d + 1:] = _multipliers(C, math.cos(loc_t) * gJ + math.sin(loc_t) * gH)
    return z[0]


def trace_strata(system: SystemDef, records: list[CriticalPointRecord], trace_step: float | None = None,
                 coarse_factor: float = 20.0, classify_every: int = 50) -> list[Stratum]:
    """Trace the images of the rank-one families through the given representatives."""
    tol = system.tol
    h = trace_step or tol.trace_step
    tr = _Tracer(system, h, coarse_factor)
    d = tr.d
    rank0 = [r for r in records if r.rank == 0]
    rank0_img = [np.array(r.image) for r in rank0]
    reps = sorted((r for r in records if r.rank == 1 and tr.in_box(np.array(r.image))),
                  key=lambda r: (r.image[0], r.image[1]))
    strata: list[Stratum] = []
    cover_tol = 1e-5
    for rep in reps:
        img = np.array(rep.image)
        if any(_segment_distance(img, s.points) < cover_tol for s in strata):
            continue
        z0 = _rank1_start_point(system, rep.point)
        out = tr.correct(z0[None, :], 20)
        if not out.converged[0]:
            continue
        z0 = out.x[0]
        fwd, end_f, fl_f = tr.run(z0, +1.0, rank0_img)
        closed = end_f == "loop"
        if closed:
            bwd, end_b, fl_b = [z0], "loop", ()
        else:
            bwd, end_b, fl_b = tr.run(z0, -1.0, rank0_img)
        Z = np.array(bwd[::-1] + fwd[1:])
        ends = [end_b, end_f]
        fixed = np.zeros(len(Z), bool)
        # attach rank-zero endpoints exactly
        for side, end in ((0, end_b), (1, end_f)):
            if end.startswith("rank0:"):
                r0 = rank0[int(end.split(":")[1])]
                zr = Z[0 if side == 0 else -1].copy()
                zr[:d] = r0.point
                if system.space.k:
                    t = zr[d]
                    gJ = evaluate(system.J, r0.point[None, :], order=1).grad[0]
                    gH = evaluate(system.H, r0.point[None, :], order=1).grad[0]
                    C = np.stack([evaluate(c, r0.point[None, :], order=1).grad[0]
                                  for c in system.space.constraints])
                    zr[d + 1:] = _multipliers(C, math.cos(t) * gJ + math.sin(t) * gH)
                if side == 0:
                    Z = np.vstack([zr, Z])
                    fixed = np.concatenate([[True], fixed])
                else:
                    Z = np.vstack([Z, zr])
                    fixed = np.concatenate([fixed, [True]])
                ends[side] = "rank0"
        Z = tr.densify(Z, closed, fixed)
        P = tr.image(Z)
        wt = _vertex_types(system, Z[:, :d], rank0, classify_every)
        flags = tuple(sorted(set(fl_f) | set(fl_b)))
        strata.append(Stratum(P, wt, Z, closed, (ends[0], ends[1]), flags))
    strata.sort(key=lambda s: (round(float(s.points[0, 0]), 9), round(float(s.points[0, 1]), 9)))
    return strata


def _vertex_types(system: SystemDef, X: np.ndarray, rank0: list, every: int) -> list[str]:
    n = len(X)
    idx = sorted(set(range(0, n, max(every, 1))) | {n - 1})
    known = {}
    for i in idx:
        hit = [r for r in rank0 if system.space.distance(X[i], r.point) < 1e-9]
        if hit:
            known[i] = hit[0].wtype
            continue
        try:
            known[i] = classify_rank1(system, X[i])[0]
        except (RankError, np.linalg.LinAlgError, ValueError):
            known[i] = "unresolved"
    keys = np.array(sorted(known))
    out = []
    for i in range(n):
        if i in known:
            out.append(known[i])
            continue
        j = keys[np.argmin(np.abs(keys - i))]
        out.append(known[int(j)])
    return out


def rank1_residuals(system: SystemDef, stratum: Stratum) -> np.ndarray:
    """Residuals of the rank-one critical equations at every traced vertex."""
    r, _ = _rank1_system(system)(stratum.phase)
    return np.max(np.abs(r), axis=1)


# ---------------------------------------------------------------------------
# tangencies and contacts
# ---------------------------------------------------------------------------

def _tangents(P: np.ndarray, closed: bool) -> np.ndarray:
    if len(P) < 2:
        return np.zeros_like(P)
    if closed:
        return np.roll(P, -1, axis=0) - np.roll(P, 1, axis=0)
    t = np.empty_like(P)
    t[1:-1] = P[2:] - P[:-2]
    t[0] = P[1] - P[0]
    t[-1] = P[-1] - P[-2]
    return t


def _arclength(P: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(P, axis=0).T))])


def _local_spline(P: np.ndarray, closed: bool, i: int, half: int = 3):
    """Cubic splines x(s), y(s) over a window of vertices around i (cyclic if closed)."""
    n = len(P)
    if closed:
        idx = np.arange(i - half, i + half + 2) % n
        W = P[idx]
    else:
        lo, hi = max(0, i - half), min(n, i + half + 2)
        idx = np.arange(lo, hi)
        W = P[lo:hi]
    s = _arclength(W)
    keep = np.concatenate([[True], np.diff(s) > 0])
    W, s, idx = W[keep], s[keep], idx[keep]
    return CubicSpline(s, W[:, 0]), CubicSpline(s, W[:, 1]), s, idx


def _vertical_events(P: np.ndarray, closed: bool, tang_tol: float):
    """(point, fractional vertex) for every vertical tangency of one polyline."""
    t = _tangents(P, closed)
    if len(P) < 2:
        return []
    tx = t[:, 0]
    norm = np.hypot(t[:, 0], t[:, 1])
    flagged = np.abs(tx) < tang_tol * np.maximum(norm, 1e-300)
    events = [(tuple(map(float, P[i])), float(i)) for i in np.flatnonzero(flagged)]
    n = len(P)
    pairs = range(n) if closed else range(n - 1)
    for i in pairs:
        j = (i + 1) % n
        if flagged[i] or flagged[j] or tx[i] * tx[j] >= 0:
            continue
        sx, sy, s, idx = _local_spline(P, closed, i)
        k = int(np.flatnonzero(idx == i)[0])
        a, b = s[k], s[k + 1]
        dx = sx.derivative()
        try:
            if dx(a) * dx(b) < 0:
                r = brentq(dx, a, b, xtol=1e-14)
            else:
                r = a + (b - a) * tx[i] / (tx[i] - tx[j])
        except ValueError:
            r = a + (b - a) * tx[i] / (tx[i] - tx[j])
        frac = (r - a) / (b - a) if b > a else 0.0
        events.append(((float(sx(r)), float(sy(r))), i + float(frac)))
    events.sort(key=lambda e: e[1])
    return events


def detect_vertical_tangencies(d: BifurcationDiagram, tang_tol: float | None = None) -> list[Tangency]:
    """Vertical tangencies of every stratum, refined between vertices."""
    tt = d.tol.tang_tol if tang_tol is None else tang_tol
    out = []
    for si, s in enumerate(d.strata):
        for pt, v in _vertical_events(s.points, s.closed, tt):
            out.append(Tangency(pt, "vertical-tangency", si, v))
    return out


def classify_contact(d: BifurcationDiagram, line_x: float, member=None, touch_tol: float = 1e-6,
                     nondeg_tol: float = 1e-3, probe: float = 1e-2) -> list[Contact]:
    """Label every meeting of the vertical line {x = line_x} with the strata.

    ``member`` is a membership oracle for the image region (points (B, 2) ->
    bool array); by default the diagram's envelopes are used.
    """
    if member is None:
        member = _envelope_member(d)
    out: list[Contact] = []
    for si, s in enumerate(d.strata):
        P = s.points
        if len(P) < 2:
            continue
        events = [(pt, v) for pt, v in _vertical_events(P, s.closed, d.tol.tang_tol)
                  if abs(pt[0] - line_x) <= touch_tol]
        n = len(P)
        f = P[:, 0] - line_x
        pairs = range(n) if s.closed else range(n - 1)
        for i in pairs:
            j = (i + 1) % n
            if not (f[i] * f[j] < 0 or (f[i] == 0 and f[j] != 0)):
                continue
            if any(min(abs(v - i), abs(v - j), n - abs(v - i) if s.closed else n) <= 3
                   for _, v in events):
                continue
            w = f[i] / (f[i] - f[j]) if f[i] != f[j] else 0.0
            pt = P[i] + w * (P[j] - P[i])
            out.append(Contact((float(pt[0]), float(pt[1])), "transversal", si))
        for pt, v in events:
            i = int(round(v))
            at_end = (not s.closed) and (i <= 0 or i >= n - 1)
            sx, _, ss, idx = _local_spline(P, s.closed, min(max(int(v), 0), n - 2))
            k = int(np.argmin(np.abs(idx - int(v))))
            r = ss[k] + (v - int(v)) * (ss[min(k + 1, len(ss) - 1)] - ss[k])
            curv = float(sx.derivative(2)(r))
            nondeg = (not at_end) and abs(curv) > nondeg_tol
            probes = np.array([[pt[0], pt[1] + e] for e in (probe, -probe, probe / 2, -probe / 2)])
            outward = not bool(np.any(member(probes)))
            if not nondeg:
                kind = "degenerate-contact"
            elif outward:
                kind = "outward-contact"
            else:
                kind = "nondegenerate-contact"
            out.append(Contact(pt, kind, si, nondeg, outward))
    out.sort(key=lambda c: (c.point[1], c.stratum))
    return out


def _envelope_member(d: BifurcationDiagram):
    env = d.envelopes
    if env is None or d.frame:
        raise ValueError("no membership oracle: pass `member` or compute envelopes first")
    tol = d.tol.env_tol

    def member(pts):
        pts = np.atleast_2d(pts)
        lo, hi = env(pts[:, 0])
        with np.errstate(invalid="ignore"):
            return (pts[:, 1] >= lo - tol) & (pts[:, 1] <= hi + tol)

    return member


def check_cone(d: BifurcationDiagram, image_samples, alpha: float, beta: float,
               apex=(0.0, 0.0)) -> bool:
    """True iff the samples (and the diagram) lie in the cone C_{alpha, beta}.

    The cone is {apex + r (cos p, sin p) : r >= 0, -alpha <= p <= beta},
    i.e. the half-planes y >= -tan(alpha) x and y <= tan(beta) x about the
    apex.  ``image_samples`` are given in the source frame and are pushed
    through the diagram's diffeomorphisms.
    """
    if not (alpha > 0 and beta > 0 and alpha + beta < math.pi):
        raise ValueError("cone needs alpha > 0, beta > 0 and alpha + beta < pi")
    pts = np.atleast_2d(np.asarray(image_samples, float)).reshape(-1, 2)
    for g in d.frame:
        pts = g(pts)
    pts = np.vstack([pts, d.vertices()])
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    v = pts - np.asarray(apex, float)
    r = np.hypot(v[:, 0], v[:, 1])
    phi = np.arctan2(v[:, 1], v[:, 0])
    ok = (r <= 1e-12) | ((phi >= -alpha - 1e-12) & (phi <= beta + 1e-12))
    return bool(np.all(ok))


# ---------------------------------------------------------------------------
# diagram assembly and diffeomorphisms
# ---------------------------------------------------------------------------

def build_diagram(system: SystemDef, records: list[CriticalPointRecord], envelopes: Envelopes | None = None,
                  trace_step: float | None = None, strata: list[Stratum] | None = None) -> BifurcationDiagram:
    if strata is None:
        strata = trace_strata(system, records, trace_step)
    lo, hi = (np.asarray(v, float) for v in system.image_box)
    iso = []
    for r in records:
        if r.rank == 0:
            c = np.array(r.image)
            if np.all(c >= lo) and np.all(c <= hi):
                iso.append(((float(c[0]), float(c[1])), r.wtype))
    iso.sort()
    d = BifurcationDiagram(strata, iso, [], envelopes, system.image_box, system.tol,
                           envelopes.curves() if envelopes is not None else None)
    d.tangencies = detect_vertical_tangencies(d)
    return d


def apply_diffeo(d: BifurcationDiagram, g: PlaneDiffeo) -> BifurcationDiagram:
    """Push the diagram through g; tangencies are recomputed in the new frame."""
    lo, hi = (np.asarray(v, float) for v in g.domain)
    pts = [d.vertices(), np.array([v for v, _ in d.isolated_values]).reshape(-1, 2)]
    if d.envelope_curves is not None:
        pts += list(d.envelope_curves)
    allp = np.vstack(pts)
    allp = allp[np.all(np.isfinite(allp), axis=1)]
    if np.any(allp < lo) or np.any(allp > hi):
        raise ValueError(f"diagram leaves the domain of {g.name!r}")
    g.validate(extra=allp)
    strata = [replace(s, points=g(s.points)) for s in d.strata]
    iso = [(tuple(map(float, g(np.array([v]))[0])), w) for v, w in d.isolated_values]
    curves = None
    if d.envelope_curves is not None:
        curves = tuple(g(c) for c in d.envelope_curves)
    nd = BifurcationDiagram(strata, iso, [], d.envelopes, d.image_box, d.tol, curves,
                            d.frame + (g,))
    nd.tangencies = detect_vertical_tangencies(nd)
    return nd


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------

def _fiber_system(system: SystemDef):
    """Residual [c; J - a] (per-row target a) for projection onto J-fibers."""
    sp = system.space

    def fun(x, a):
        jets = [evaluate(c, x, order=1, errors="nan") for c in sp.constraints]
        jJ = evaluate(system.J, x, order=1, errors="nan")
        r = np.column_stack([j.value for j in jets] + [jJ.value - a[:, 0]])
        jac = np.stack([j.grad for j in jets] + [jJ.grad], axis=1)
        return r, jac

    return fun


def _level_system(system: SystemDef):
    """Residual [c; J - a; H - b] for projection onto full fibers."""
    sp = system.space

    def fun(x, ab):
        jets = [evaluate(c, x, order=1, errors="nan") for c in sp.constraints]
        jJ = evaluate(system.J, x, order=1, errors="nan")
        jH = evaluate(system.H, x, order=1, errors="nan")
        r = np.column_stack([j.value for j in jets] + [jJ.value - ab[:, 0], jH.value - ab[:, 1]])
        jac = np.stack([j.grad for j in jets] + [jJ.grad, jH.grad], axis=1)
        return r, jac

    return fun


def _kkt_system(system: SystemDef, obj: ExprTree, con: ExprTree | None):
    """Stationarity of obj on {c = 0, con = a}: z = (x, lam, mu)."""
    sp = system.space
    d, k = sp.ambient_dim, sp.k
    nl = 1 if con is not None else 0

    def fun(z, a):
        x = z[:, :d]
        lam = z[:, d:d + nl]
        mu = z[:, d + nl:]
        jo = evaluate(obj, x, errors="nan")
        b = x.shape[0]
        if k:
            jc = [evaluate(c, x, errors="nan") for c in sp.constraints]
            C = np.stack([j.grad for j in jc], axis=1)
            hC = np.stack([j.hess for j in jc], axis=1)
            cval = np.stack([j.value for j in jc], axis=1)
        else:
            C, hC, cval = np.zeros((b, 0, d)), np.zeros((b, 0, d, d)), np.zeros((b, 0))
        g = jo.grad - np.einsum("bkd,bk->bd", C, mu)
        hess = jo.hess - np.einsum("bk,bkij->bij", mu, hC)
        rows = [g]
        if con is not None:
            jk = evaluate(con, x, errors="nan")
            g = g - lam * jk.grad
            hess = hess - lam[:, :, None] * jk.hess
            rows = [g, (jk.value - a[:, 0])[:, None]]
        r = np.hstack(rows + [cval])
        m = d + nl + k
        jac = np.zeros((b, r.shape[1], m))
        jac[:, :d, :d] = hess
        if con is not None:
            jac[:, :d, d] = -jk.grad
            jac[:, d, :d] = jk.grad
        jac[:, :d, d + nl:] = -np.transpose(C, (0, 2, 1))
        jac[:, d + nl:, :d] = C
        return r, jac

    return fun


def _kkt_start(system: SystemDef, obj: ExprTree, con: ExprTree | None, x: np.ndarray) -> np.ndarray:
    sp = system.space
    go = evaluate(obj, x, order=1).grad
    cols = []
    if con is not None:
        cols.append(evaluate(con, x, order=1).grad)
    cols += [evaluate(c, x, order=1).grad for c in sp.constraints]
    if not cols:
        return x.copy()
    A = np.stack(cols, axis=2)          # (B, d, m)
    mult = np.einsum("bmd,bd->bm", np.linalg.pinv(A), go)
    return np.hstack([x, mult])


def _wrap_rows(system: SystemDef):
    sp = system.space
    if not sp.periodic_dims:
        return None
    d = sp.ambient_dim
    return lambda z: np.hstack([sp.wrap(z[:, :d]), z[:, d:]])


def fiber_extrema(system: SystemDef, xs, n_seeds: int = 32, seed: int = 0) -> dict:
    """Multi-start estimates of inf and sup of H over {J = x} for every x."""
    sp = system.space
    tol = sp.tol
    d = sp.ambient_dim
    xs = np.atleast_1d(np.asarray(xs, float))
    m = xs.size
    S = seed_points(sp, n_seeds, np.random.default_rng(seed))
    X0 = np.tile(S, (m, 1))
    a = np.repeat(xs, n_seeds)[:, None]
    pr = gauss_newton(_fiber_system(system), X0, tol.tol_constraint, tol.max_iter,
                      tol.max_halvings, wrap=sp.wrap if sp.periodic_dims else None, params=a)
    feas = pr.converged.reshape(m, n_seeds)
    Hp = evaluate(system.H, pr.x, order=0, errors="nan").value.reshape(m, n_seeds)
    top, bottom = system.image_box[1][1], system.image_box[0][1]

    ok = pr.converged
    Z0 = _kkt_start(system, system.H, system.J, pr.x[ok])
    kk = gauss_newton(_kkt_system(system, system.H, system.J), Z0, tol.tol_constraint,
                      tol.max_iter, tol.max_halvings, wrap=_wrap_rows(system), params=a[ok])
    Hk = np.full(m * n_seeds, np.nan)
    Hk[np.flatnonzero(ok)[kk.converged]] = evaluate(system.H, kk.x[kk.converged, :d], order=0).value
    Hk = Hk.reshape(m, n_seeds)

    hmin = np.full(m, np.nan)
    hmax = np.full(m, np.nan)
    for i in range(m):
        if not feas[i].any():
            continue
        hp = Hp[i][feas[i]]
        hk = Hk[i][np.isfinite(Hk[i])]
        lo = float(hk.min()) if hk.size else math.inf
        hi = float(hk.max()) if hk.size else -math.inf
        # on a compact fiber the extremes are stationary values; a sample
        # beyond every stationary value means the extreme is not attained
        if hp.min() < lo - tol.env_tol or hp.min() < bottom:
            lo = -math.inf
        if hp.max() > hi + tol.env_tol or hp.max() > top:
            hi = math.inf
        hmin[i], hmax[i] = lo, hi
    return {"hmin": hmin, "hmax": hmax}


def j_range(system: SystemDef, n_seeds: int = 64, seed: int = 0) -> tuple[float, float]:
    """Extent of J(M): critical values of J, unbounded if samples leave the box."""
    sp = system.space
    tol = sp.tol
    d = sp.ambient_dim
    S = sample_feasible(sp, n_seeds, np.random.default_rng(seed))
    if S.shape[0] == 0:
        return (math.nan, math.nan)
    Jf = evaluate(system.J, S, order=0).value
    Z0 = _kkt_start(system, system.J, None, S)
    kk = gauss_newton(_kkt_system(system, system.J, None), Z0, tol.tol_constraint, tol.max_iter,
                      tol.max_halvings, wrap=_wrap_rows(system), params=np.zeros((len(S), 1)))
    if not kk.converged.any():
        return (-math.inf, math.inf)
    Jk = evaluate(system.J, kk.x[kk.converged, :d], order=0).value
    # extremes of J are critical values; a sample beyond all of them means unbounded
    lo = float(Jk.min()) if Jf.min() >= Jk.min() - tol.env_tol else -math.inf
    hi = float(Jk.max()) if Jf.max() <= Jk.max() + tol.env_tol else math.inf
    return lo, hi


def _strata_crossings(strata: list[Stratum], x: float) -> np.ndarray:
    ys = []
    for s in strata:
        P = s.points
        if s.closed:
            P = np.vstack([P, P[:1]])
        f = P[:, 0] - x
        hit = np.flatnonzero(f == 0)
        ys.extend(P[hit, 1])
        cr = np.flatnonzero(f[:-1] * f[1:] < 0)
        w = f[cr] / (f[cr] - f[cr + 1])
        ys.extend(P[cr, 1] + w * (P[cr + 1, 1] - P[cr, 1]))
    return np.array(ys)


def compute_envelopes(system: SystemDef, j_grid, n_seeds: int = 32, seed: int = 0,
                      strata: list[Stratum] | None = None, refine: bool = True,
                      chord_tol: float = 5e-4, max_rounds: int = 24) -> Envelopes:
    """H-(x), H+(x) on a grid by multi-start constrained optimization.

    Stratum crossings are images of actual points, so they bound the
    envelopes; a disagreement above 10 env_tol with the optimizer flags the
    grid point.  With ``refine`` the optimization is repeated with twice the
    seeds and the largest change is recorded.  The finite ends of J(M) are
    added to the grid, and intervals whose estimated chord error exceeds
    ``chord_tol`` are bisected (square-root edges, corners).
    """
    tol = system.tol
    jr = j_range(system, seed=seed)
    xs = np.asarray(j_grid, float)
    ends = [v for v in jr if np.isfinite(v) and xs.min() <= v <= xs.max()]
    xs = np.unique(np.concatenate([xs, ends]))
    flags: list = []
    change = [0.0]

    def values(x):
        ex = fiber_extrema(system, x, n_seeds, seed)
        hmin, hmax = ex["hmin"], ex["hmax"]
        if refine:
            ex2 = fiber_extrema(system, x, 2 * n_seeds, seed + 1)
            for a, b in ((hmin, ex2["hmin"]), (hmax, ex2["hmax"])):
                both = np.isfinite(a) & np.isfinite(b)
                if both.any():
                    change[0] = max(change[0], float(np.max(np.abs(a[both] - b[both]))))
                with np.errstate(invalid="ignore"):
                    moved = both & (np.abs(a - b) > tol.env_tol)
                for i in np.flatnonzero(moved):
                    flags.append({"x": float(x[i]), "reason": "seed doubling changed the value"})
            hmin = np.fmin(hmin, ex2["hmin"])
            hmax = np.fmax(hmax, ex2["hmax"])
        if strata:
            for i, xi in enumerate(x):
                if np.isnan(hmin[i]):
                    continue
                ys = _strata_crossings(strata, float(xi))
                if ys.size == 0:
                    continue
                lo, hi = float(ys.min()), float(ys.max())
                if np.isfinite(hmin[i]) and lo < hmin[i] - 10 * tol.env_tol:
                    flags.append({"x": float(xi), "reason": "stratum below optimized minimum"})
                if np.isfinite(hmax[i]) and hi > hmax[i] + 10 * tol.env_tol:
                    flags.append({"x": float(xi), "reason": "stratum above optimized maximum"})
                hmin[i] = min(hmin[i], lo)
                hmax[i] = max(hmax[i], hi)
        return hmin, hmax

    hmin, hmax = values(xs)
    for _ in range(max_rounds):
        ok = ~np.isnan(hmin)
        X, L, U = xs[ok], hmin[ok], hmax[ok]
        dx = np.diff(X)
        steep = np.zeros(dx.size, bool)
        for V in (L, U):
            with np.errstate(invalid="ignore"):
                sl = np.diff(V) / dx
                # chord error of the piecewise-linear model from the slope change
                err = np.abs(np.diff(sl)) * np.minimum(dx[:-1], dx[1:]) / 4.0
            bad = np.flatnonzero(err > chord_tol)
            steep[bad] = True
            steep[bad + 1] = True
        steep &= dx > 1e-7
        mids = 0.5 * (X[:-1] + X[1:])[steep]
        ml, mu = values(mids)
        xs = np.concatenate([xs, mids])
        hmin = np.concatenate([hmin, ml])
        hmax = np.concatenate([hmax, mu])
        order = np.argsort(xs, kind="stable")
        xs, hmin, hmax = xs[order], hmin[order], hmax[order]
    keep = ~np.isnan(hmin)
    flags.sort(key=lambda f: (f["x"], f["reason"]))
    return Envelopes(xs[keep], hmin[keep], hmax[keep], jr, flags, change[0])


# ---------------------------------------------------------------------------
# image structure
# ---------------------------------------------------------------------------

def image_membership(system: SystemDef, n_seeds: int = 16, seed: int = 0):
    """Oracle: c is in F(M) iff some seed projects onto the fiber over c."""
    sp = system.space
    tol = sp.tol
    S = seed_points(sp, n_seeds, np.random.default_rng(seed))

    def member(pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, float))
        m = pts.shape[0]
        X0 = np.tile(S, (m, 1))
        ab = np.repeat(pts, n_seeds, axis=0)
        out = gauss_newton(_level_system(system), X0, tol.tol_constraint, tol.max_iter,
                           tol.max_halvings, wrap=sp.wrap if sp.periodic_dims else None, params=ab)
        return out.converged.reshape(m, n_seeds).any(axis=1)

    return member


@dataclass
class ImageReport:
    boundary_ok: bool
    boundary_violations: list
    focus_interior_ok: bool
    focus_violations: list
    samples_ok: bool
    sample_violations: int
    n_samples: int
    worst_excess: float
    band_ok: bool
    band_violations: list
    n_band: int

    @property
    def reconstruction_ok(self) -> bool:
        return self.samples_ok and self.band_ok

    @property
    def passed(self) -> bool:
        return self.boundary_ok and self.focus_interior_ok and self.reconstruction_ok

    def to_dict(self) -> dict:
        return {"boundary_ok": self.boundary_ok, "boundary_violations": self.boundary_violations,
                "focus_interior_ok": self.focus_interior_ok, "focus_violations": self.focus_violations,
                "samples_ok": self.samples_ok, "sample_violations": self.sample_violations,
                "n_samples": self.n_samples, "worst_excess": self.worst_excess,
                "band_ok": self.band_ok, "band_violations": self.band_violations,
                "n_band": self.n_band, "passed": self.passed}


def validate_image_structure(d: BifurcationDiagram, system: SystemDef, n_samples: int = 10000,
                             sample_tol: float | None = None, n_band: int = 200, seed: int = 0,
                             boundary_vertices: int = 40, margin: float = 0.05) -> ImageReport:
    """Check the epigraph-hypograph description of F(M).

    (a) non-focus-focus stratum vertices lie on an envelope graph (or on a
    vertical edge at an end of J(M)); (b) focus-focus values are interior;
    (c) sampled images lie between the envelopes and, conversely, sampled
    points between the envelopes are images.
    """
    if d.frame:
        raise ValueError("image structure is checked in the source frame")
    env = d.envelopes
    if env is None:
        raise ValueError("diagram has no envelopes")
    tol = system.tol
    stol = tol.env_tol if sample_tol is None else sample_tol
    rng = np.random.default_rng(seed)

    # (a)
    cand = []
    for si, s in enumerate(d.strata):
        n = len(s.points)
        idx = np.unique(np.linspace(0, n - 1, min(boundary_vertices, n)).round().astype(int))
        for i in idx:
            if s.wtypes[i] != "focus-focus":
                cand.append((si, int(i), s.points[i]))
    bviol = []
    if cand:
        xs = np.array([c[2][0] for c in cand])
        ex = fiber_extrema(system, xs, 32, seed)
        jlo, jhi = env.j_range
        for (si, i, p), lo, hi in zip(cand, ex["hmin"], ex["hmax"]):
            on = (abs(p[1] - lo) <= tol.env_tol or abs(p[1] - hi) <= tol.env_tol
                  or abs(p[0] - jlo) <= tol.env_tol or abs(p[0] - jhi) <= tol.env_tol)
            if not on:
                bviol.append({"stratum": si, "vertex": i, "point": [float(p[0]), float(p[1])],
                              "hminus": float(lo), "hplus": float(hi)})

    # (b)
    step = float(np.median(np.diff(env.j_grid))) if env.j_grid.size > 1 else tol.env_tol
    fviol = []
    for v, w in d.isolated_values:
        if w != "focus-focus":
            continue
        lo, hi = env(v[0])
        inside = (lo[0] + step < v[1] < hi[0] - step) and env.j_range[0] + step < v[0] < env.j_range[1] - step
        if not inside:
            fviol.append({"value": list(v), "hminus": float(lo[0]), "hplus": float(hi[0])})

    # (c) forward inclusion
    X = sample_feasible(system.space, int(n_samples * 1.25) + 16, rng)[:n_samples]
    C = system.image(X)
    outside = (C[:, 0] < env.j_grid[0]) | (C[:, 0] > env.j_grid[-1])
    if outside.any():
        stepx = step
        lo_x, hi_x = C[:, 0].min(), C[:, 0].max()
        extra = np.concatenate([np.arange(env.j_grid[0] - stepx, lo_x - stepx, -stepx)[::-1],
                                np.arange(env.j_grid[-1] + stepx, hi_x + stepx, stepx)])
        if extra.size:
            ex = compute_envelopes(system, extra, refine=False)
            grid = np.concatenate([env.j_grid, ex.j_grid])
            order = np.argsort(grid)
            env = Envelopes(grid[order], np.concatenate([env.hminus, ex.hminus])[order],
                            np.concatenate([env.hplus, ex.hplus])[order], env.j_range)
    lo, hi = env(C[:, 0])
    with np.errstate(invalid="ignore"):
        excess = np.fmax(lo - C[:, 1], C[:, 1] - hi)
    excess = np.where(np.isnan(excess), np.inf, excess)
    nviol = int(np.sum(excess > stol))
    worst = float(np.max(excess)) if excess.size else 0.0

    # (c) reverse inclusion: points between the envelopes are images
    box_lo, box_hi = (np.asarray(v, float) for v in system.image_box)
    xg = env.j_grid
    band = []
    tries = 0
    verts = d.vertices()
    iso = np.array([v for v, _ in d.isolated_values]).reshape(-1, 2)
    while len(band) < n_band and tries < 50 * n_band:
        tries += 1
        x = rng.uniform(max(xg[0], box_lo[0]), min(xg[-1], box_hi[0]))
        l, h = env(x)
        l, h = max(l[0], box_lo[1]), min(h[0], box_hi[1])
        if not h - l > 2 * margin:
            continue
        y = rng.uniform(l + margin, h - margin)
        p = np.array([x, y])
        if verts.size and np.min(np.hypot(*(verts - p).T)) < margin:
            continue
        if iso.size and np.min(np.hypot(*(iso - p).T)) < margin:
            continue
        band.append(p)
    band = np.array(band).reshape(-1, 2)
    inside = image_membership(system, seed=seed)(band) if band.size else np.zeros(0, bool)
    bv = [[float(p[0]), float(p[1])] for p in band[~inside]]

    return ImageReport(not bviol, bviol, not fviol, fviol, nviol == 0, nviol, int(len(C)), worst,
                       not bv, bv, int(len(band)))
