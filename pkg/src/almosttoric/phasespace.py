"""Embedded symplectic four-manifolds as constrained ambient charts.

A :class:`PhaseSpace` is a region of R^d cut out by ``k = d - 4`` constraint
functions, carrying a closed 2-form given by an ambient matrix field.  The
default form is the canonical one, sum dq^i ^ dp_i with the first half of
the coordinates as positions.  Sphere factors (area forms on unit spheres)
and weighted coordinate pairs are also available, so compact factors such
as S^2 can be represented without an atlas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .exprdsl import ExprTree, evaluate, parse_expr

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Tolerances:
    """Numerical thresholds shared by every module (all overridable)."""

    tol_constraint: float = 1e-10
    tol_sympl: float = 1e-8
    tol_poisson: float = 1e-8
    tol_rank: float = 1e-7
    tol_nondeg: float = 1e-8
    dedup_radius: float = 1e-5
    trace_step: float = 1e-3
    min_step: float = 1e-7
    tang_tol: float = 1e-6
    env_tol: float = 1e-4
    max_iter: int = 50
    max_halvings: int = 8

    def updated(self, overrides: dict | None) -> "Tolerances":
        if not overrides:
            return self
        names = {f.name for f in fields(self)}
        unknown = set(overrides) - names
        if unknown:
            raise ValueError(f"unknown tolerance(s): {sorted(unknown)}")
        for k, v in overrides.items():
            if not v > 0:
                raise ValueError(f"tolerance {k} must be positive")
        cast = {k: (int(v) if k in ("max_iter", "max_halvings") else float(v))
                for k, v in overrides.items()}
        return replace(self, **cast)


class DegenerateEmbedding(ValueError):
    """The constraint Jacobian or the restricted 2-form is singular."""


class ProjectionError(RuntimeError):
    """Newton projection did not reach a feasible point."""

    def __init__(self, message: str, reason: str, x: np.ndarray, iterations: int):
        super().__init__(message)
        self.reason = reason
        self.x = x
        self.iterations = iterations


@dataclass(frozen=True)
class SymplecticForm:
    """Ambient 2-form as a sum of weighted pairs and sphere area forms.

    ``pairs`` holds ``(i, j, w)`` meaning ``w dx_i ^ dx_j``; ``spheres`` holds
    ``(i, j, k, s)`` meaning ``s * x.(u x v)`` on the unit sphere spanned by
    coordinates ``(i, j, k)``.  Indices are zero-based.
    """

    pairs: tuple[tuple[int, int, float], ...] = ()
    spheres: tuple[tuple[int, int, int, float], ...] = ()

    @classmethod
    def canonical(cls, dim: int) -> "SymplecticForm":
        if dim % 2:
            raise ValueError("canonical form needs an even ambient dimension")
        n = dim // 2
        return cls(pairs=tuple((i, i + n, 1.0) for i in range(n)))

    def matrix(self, x: np.ndarray) -> np.ndarray:
        """Form matrices Omega(x) with omega(u, v) = u^T Omega v; x is (B, d)."""
        x = np.atleast_2d(x)
        b, d = x.shape
        om = np.zeros((b, d, d))
        for i, j, w in self.pairs:
            om[:, i, j] += w
            om[:, j, i] -= w
        for i, j, k, s in self.spheres:
            # x.(u x v) = sum over cyclic (a, b, c) of x_c (u_a v_b - u_b v_a)
            for a, bb, c in ((i, j, k), (j, k, i), (k, i, j)):
                om[:, a, bb] += s * x[:, c]
                om[:, bb, a] -= s * x[:, c]
        return om


@dataclass(frozen=True)
class PhaseSpace:
    ambient_dim: int
    constraints: tuple[ExprTree, ...] = ()
    form: SymplecticForm | None = None
    seed_box: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    periodic_dims: tuple[int, ...] = ()
    tol: Tolerances = field(default_factory=Tolerances)
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.ambient_dim - len(self.constraints) != 4:
            raise ValueError("ambient_dim minus number of constraints must be 4")
        for c in self.constraints:
            if c.arity != self.ambient_dim:
                raise ValueError("constraint arity does not match ambient_dim")
        if self.form is None:
            object.__setattr__(self, "form", SymplecticForm.canonical(self.ambient_dim))
        if self.seed_box is None:
            lo = tuple(0.0 if i in self.periodic_dims else -1.0 for i in range(self.ambient_dim))
            hi = tuple(TWO_PI if i in self.periodic_dims else 1.0 for i in range(self.ambient_dim))
            object.__setattr__(self, "seed_box", (lo, hi))

    @property
    def k(self) -> int:
        return len(self.constraints)

    def parse(self, src: str) -> ExprTree:
        return parse_expr(src, self.ambient_dim, self.names)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Reduce periodic coordinates into [0, 2 pi)."""
        if not self.periodic_dims:
            return x
        x = np.array(x, dtype=float, copy=True)
        idx = list(self.periodic_dims)
        x[..., idx] = np.mod(x[..., idx], TWO_PI)
        return x

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Euclidean embedding in which periodic coordinates become (cos, sin)."""
        x = np.atleast_2d(x)
        if not self.periodic_dims:
            return x
        keep = [i for i in range(self.ambient_dim) if i not in self.periodic_dims]
        per = x[:, list(self.periodic_dims)]
        return np.hstack([x[:, keep], np.cos(per), np.sin(per)])

    def distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = np.asarray(a, float) - np.asarray(b, float)
        if self.periodic_dims:
            idx = list(self.periodic_dims)
            d[..., idx] = (d[..., idx] + math.pi) % TWO_PI - math.pi
        return np.linalg.norm(d, axis=-1)


@dataclass(frozen=True)
class SystemDef:
    """An integrable system F = (J, H) on a phase space."""

    space: PhaseSpace
    J: ExprTree
    H: ExprTree
    name: str = "system"
    proper: bool = False
    compact: bool = False
    image_box: tuple[tuple[float, float], tuple[float, float]] | None = None

    @property
    def tol(self) -> Tolerances:
        return self.space.tol

    def with_tolerances(self, overrides: dict | None) -> "SystemDef":
        sp = replace(self.space, tol=self.space.tol.updated(overrides))
        return replace(self, space=sp)

    def image(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        j = evaluate(self.J, x, order=0, errors="nan").value
        h = evaluate(self.H, x, order=0, errors="nan").value
        return np.column_stack([j, h])


# ---------------------------------------------------------------------------
# local geometry
# ---------------------------------------------------------------------------

def constraint_jacobian(sp: PhaseSpace, x: np.ndarray) -> np.ndarray:
    """Stacked constraint gradients, shape (B, k, d)."""
    x = np.atleast_2d(x)
    if sp.k == 0:
        return np.zeros((x.shape[0], 0, sp.ambient_dim))
    return np.stack([evaluate(c, x, order=1).grad for c in sp.constraints], axis=1)


def tangent_frames(sp: PhaseSpace, x: np.ndarray) -> np.ndarray:
    """Orthonormal frames of the constraint tangent spaces, shape (B, d, 4)."""
    x = np.atleast_2d(x)
    b, d = x.shape
    if sp.k == 0:
        return np.broadcast_to(np.eye(d), (b, d, d)).copy()
    C = constraint_jacobian(sp, x)
    _, s, vt = np.linalg.svd(C, full_matrices=True)
    scale = np.maximum(s[:, :1], 1.0)
    if np.any(s[:, -1:] <= 1e-12 * scale):
        raise DegenerateEmbedding("constraint Jacobian is rank deficient")
    return np.transpose(vt[:, sp.k:, :], (0, 2, 1))


def tangent_basis(sp: PhaseSpace, m) -> np.ndarray:
    """Orthonormal 4-frame (columns) of the tangent space at ``m``."""
    return tangent_frames(sp, np.asarray(m, float)[None, :])[0]


def restricted_forms(sp: PhaseSpace, x: np.ndarray, T: np.ndarray) -> np.ndarray:
    """4x4 matrices of the 2-form restricted to the frames ``T``."""
    om = sp.form.matrix(x)
    return np.einsum("bia,bij,bjc->bac", T, om, T)


def _field_coords(sp: PhaseSpace, grads: np.ndarray, x: np.ndarray, T: np.ndarray):
    W = restricted_forms(sp, x, T)
    det = np.linalg.det(W)
    if np.any(np.abs(det) <= sp.tol.tol_sympl):
        raise DegenerateEmbedding("restricted 2-form is singular")
    rhs = np.einsum("bia,bi->ba", T, grads)
    # omega(v, w) = df(w) for tangent w  <=>  W^T a = T^T grad f
    a = np.linalg.solve(np.transpose(W, (0, 2, 1)), rhs[..., None])[..., 0]
    return a, W, rhs


def hamiltonian_fields(sp: PhaseSpace, f: ExprTree, x: np.ndarray) -> np.ndarray:
    """Hamiltonian vector fields of ``f`` at the rows of ``x`` (ambient)."""
    x = np.atleast_2d(np.asarray(x, float))
    T = tangent_frames(sp, x)
    a, _, _ = _field_coords(sp, evaluate(f, x, order=1).grad, x, T)
    return np.einsum("bia,ba->bi", T, a)


def hamiltonian_field(sp: PhaseSpace, f: ExprTree, m) -> np.ndarray:
    """The tangent vector X with omega(X, .) = df on the tangent space at m."""
    m = np.asarray(m, float)[None, :]
    T = tangent_frames(sp, m)
    a, W, rhs = _field_coords(sp, evaluate(f, m, order=1).grad, m, T)
    resid = np.linalg.norm(W[0].T @ a[0] - rhs[0])
    if resid > 1e-10 * (1.0 + np.linalg.norm(rhs[0])):
        raise DegenerateEmbedding(f"Hamiltonian field solve residual {resid:.2e}")
    return T[0] @ a[0]


def poisson_brackets(sp: PhaseSpace, f: ExprTree, g: ExprTree, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, float))
    T = tangent_frames(sp, x)
    af, W, _ = _field_coords(sp, evaluate(f, x, order=1).grad, x, T)
    ag = np.linalg.solve(np.transpose(W, (0, 2, 1)),
                         np.einsum("bia,bi->ba", T, evaluate(g, x, order=1).grad)[..., None])[..., 0]
    return np.einsum("ba,bac,bc->b", af, W, ag)


def poisson_bracket(sp: PhaseSpace, f: ExprTree, g: ExprTree, m) -> float:
    """{f, g}(m) = omega(X_f, X_g)."""
    return float(poisson_brackets(sp, f, g, np.asarray(m, float)[None, :])[0])


# ---------------------------------------------------------------------------
# Gauss-Newton
# ---------------------------------------------------------------------------

@dataclass
class NewtonBatch:
    x: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray


def gauss_newton(
    fun: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    z0: np.ndarray,
    tol: float,
    max_iter: int = 50,
    max_halvings: int = 8,
    wrap: Callable[[np.ndarray], np.ndarray] | None = None,
    rcond: float = 1e-12,
    params: np.ndarray | None = None,
) -> NewtonBatch:
    """Damped minimum-norm Gauss-Newton over a batch of starting points.

    ``fun(z)`` returns residuals (B, m) and Jacobians (B, m, D).  Each step is
    the pseudo-inverse step, halved (at most ``max_halvings`` times) until the
    squared residual decreases; rows that cannot decrease are abandoned.
    With ``params`` given, ``fun(z, params[rows])`` receives per-row data.
    """
    z = np.array(z0, dtype=float, copy=True)
    b = z.shape[0]
    if params is not None:
        call = lambda zz, rows: fun(zz, params[rows])  # noqa: E731
    else:
        call = lambda zz, rows: fun(zz)  # noqa: E731
    r, jac = call(z, slice(None))
    res = _maxabs(r)
    conv = res < tol
    dead = np.zeros(b, bool)
    iters = np.zeros(b, int)
    for _ in range(max_iter):
        act = np.flatnonzero(~conv & ~dead)
        if act.size == 0:
            break
        iters[act] += 1
        step = -np.einsum("bij,bj->bi", np.linalg.pinv(jac[act], rcond=rcond), r[act])
        merit0 = np.sum(r[act] ** 2, axis=1)
        pending = np.arange(act.size)
        t = 1.0
        for _h in range(max_halvings + 1):
            rows = act[pending]
            zt = z[rows] + t * step[pending]
            if wrap is not None:
                zt = wrap(zt)
            rt, jt = call(zt, rows)
            merit = np.sum(rt ** 2, axis=1)
            merit = np.where(np.isfinite(merit), merit, np.inf)
            ok = merit < merit0[pending]
            good = rows[ok]
            z[good], r[good], jac[good] = zt[ok], rt[ok], jt[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            t *= 0.5
        dead[act[pending]] = True
        res = _maxabs(r)
        conv = res < tol
    return NewtonBatch(z, conv, iters, res)


def _maxabs(r: np.ndarray) -> np.ndarray:
    if r.shape[1] == 0:
        return np.zeros(r.shape[0])
    m = np.max(np.abs(r), axis=1)
    return np.where(np.isfinite(m), m, np.inf)


def _target_system(sp: PhaseSpace, targets: Sequence[tuple[ExprTree, float]]):
    exprs = list(sp.constraints) + [t[0] for t in targets]
    values = np.array([0.0] * sp.k + [float(t[1]) for t in targets])

    def fun(x):
        if not exprs:
            return np.zeros((x.shape[0], 0)), np.zeros((x.shape[0], 0, x.shape[1]))
        jets = [evaluate(e, x, order=1, errors="nan") for e in exprs]
        r = np.stack([j.value for j in jets], axis=1) - values
        jac = np.stack([j.grad for j in jets], axis=1)
        return r, jac

    return fun


def project_batch(sp: PhaseSpace, targets: Sequence[tuple[ExprTree, float]],
                  x0: np.ndarray) -> NewtonBatch:
    """Project many seeds onto {constraints = 0, f_i = c_i} at once."""
    x0 = np.atleast_2d(np.asarray(x0, float))
    tol = sp.tol
    out = gauss_newton(_target_system(sp, targets), x0, tol.tol_constraint,
                       tol.max_iter, tol.max_halvings, wrap=sp.wrap)
    out.x = sp.wrap(out.x)
    return out


def newton_project(sp: PhaseSpace, targets: Sequence[tuple[ExprTree, float]], x0):
    """Project ``x0`` onto the constraint set intersected with the targets.

    The constraints are always included (with target 0); ``targets`` lists
    extra equations ``f = c``.  Returns ``(x, iterations)``.
    """
    x0 = np.asarray(x0, float)
    out = project_batch(sp, targets, x0[None, :])
    x = out.x[0]
    if out.converged[0]:
        return x, int(out.iterations[0])
    fun = _target_system(sp, targets)
    _, jac = fun(x[None, :])
    s = np.linalg.svd(jac[0], compute_uv=False) if jac.shape[1] else np.ones(1)
    if s.size and s[-1] <= 1e-8 * max(s[0], 1.0):
        raise ProjectionError("Jacobian rank collapse (near the critical set)",
                              "rank-collapse", x, int(out.iterations[0]))
    raise ProjectionError(f"no convergence, residual {out.residual[0]:.3e}",
                          "no-convergence", x, int(out.iterations[0]))


# ---------------------------------------------------------------------------
# sampling helpers
# ---------------------------------------------------------------------------

def seed_points(sp: PhaseSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` scrambled Sobol points in the seed box."""
    lo, hi = (np.asarray(v, float) for v in sp.seed_box)
    sob = qmc.Sobol(sp.ambient_dim, scramble=True, seed=rng)
    pts = sob.random_base2(max(1, math.ceil(math.log2(max(n, 2)))))[:n]
    return lo + pts * (hi - lo)


def sample_feasible(sp: PhaseSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """Project ``n`` seeds onto the constraints; returns the converged ones."""
    out = project_batch(sp, [], seed_points(sp, n, rng))
    return out.x[out.converged]


def check_integrable(system: SystemDef, n: int = 1000, seed: int = 0) -> dict:
    """Numerical integrability audit: {J,H} and restricted-form checks."""
    sp = system.space
    rng = np.random.default_rng(seed)
    x = sample_feasible(sp, n, rng)
    T = tangent_frames(sp, x)
    det = np.abs(np.linalg.det(restricted_forms(sp, x, T)))
    pb = poisson_brackets(sp, system.J, system.H, x)
    gj = np.linalg.norm(evaluate(system.J, x, order=1).grad, axis=1)
    gh = np.linalg.norm(evaluate(system.H, x, order=1).grad, axis=1)
    bound = sp.tol.tol_poisson * (1.0 + gj * gh)
    return {
        "points": int(x.shape[0]),
        "max_abs_bracket": float(np.max(np.abs(pb))) if x.size else float("nan"),
        "bracket_ok": bool(np.all(np.abs(pb) <= bound)),
        "min_abs_form_det": float(np.min(det)) if x.size else float("nan"),
        "form_ok": bool(np.all(det > sp.tol.tol_sympl)),
    }


# ---------------------------------------------------------------------------
# system definition files
# ---------------------------------------------------------------------------

def _form_from_spec(spec, dim: int) -> SymplecticForm:
    if spec is None:
        return SymplecticForm.canonical(dim)
    pairs, spheres = [], []
    for item in spec:
        kind = item.get("type")
        if kind == "canonical":
            w = float(item.get("weight", 1.0))
            for i, j in item["pairs"]:
                pairs.append((int(i) - 1, int(j) - 1, w))
        elif kind == "sphere":
            i, j, k = (int(c) - 1 for c in item["coords"])
            spheres.append((i, j, k, float(item.get("scale", 1.0))))
        else:
            raise ValueError(f"unknown form component type {kind!r}")
    return SymplecticForm(tuple(pairs), tuple(spheres))


def _form_to_spec(form: SymplecticForm) -> list:
    out = []
    for i, j, w in form.pairs:
        out.append({"type": "canonical", "pairs": [[i + 1, j + 1]], "weight": w})
    for i, j, k, s in form.spheres:
        out.append({"type": "sphere", "coords": [i + 1, j + 1, k + 1], "scale": s})
    return out


def system_from_dict(d: dict) -> SystemDef:
    """Build a :class:`SystemDef` from the system-file mapping (see README)."""
    missing = {"ambient_dim", "J", "H"} - set(d)
    if missing:
        raise ValueError(f"system definition lacks {sorted(missing)}")
    dim = int(d["ambient_dim"])
    names = tuple(d["variables"]) if d.get("variables") else None
    if names is not None and len(names) != dim:
        raise ValueError("variables must list one name per ambient coordinate")

    def P(src):
        return parse_expr(str(src), dim, names)

    periodic = tuple(int(i) - 1 for i in d.get("periodic_dims", []))
    box = d.get("seed_box")
    seed_box = None if box is None else (tuple(map(float, box[0])), tuple(map(float, box[1])))
    tol = Tolerances().updated(d.get("tolerances"))
    sp = PhaseSpace(
        ambient_dim=dim,
        constraints=tuple(P(c) for c in d.get("constraints", [])),
        form=_form_from_spec(d.get("form"), dim),
        seed_box=seed_box,
        periodic_dims=periodic,
        tol=tol,
        names=names,
    )
    ib = d.get("image_box")
    image_box = None if ib is None else (tuple(map(float, ib[0])), tuple(map(float, ib[1])))
    return SystemDef(sp, P(d["J"]), P(d["H"]), name=str(d.get("name", "system")),
                     proper=bool(d.get("proper", False)), compact=bool(d.get("compact", False)),
                     image_box=image_box)


def system_to_dict(system: SystemDef) -> dict:
    sp = system.space
    out = {
        "name": system.name,
        "ambient_dim": sp.ambient_dim,
        "form": _form_to_spec(sp.form),
        "constraints": [c.to_source() for c in sp.constraints],
        "J": system.J.to_source(),
        "H": system.H.to_source(),
        "seed_box": [list(sp.seed_box[0]), list(sp.seed_box[1])],
        "periodic_dims": [i + 1 for i in sp.periodic_dims],
        "proper": system.proper,
        "compact": system.compact,
    }
    if system.image_box is not None:
        out["image_box"] = [list(system.image_box[0]), list(system.image_box[1])]
    return out


def load_system(path) -> SystemDef:
    """Read a YAML (or JSON) system definition file."""
    import yaml

    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return system_from_dict(data)
