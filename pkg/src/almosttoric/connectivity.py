"""Fiber connectivity: theorem-hypothesis audit, fiber sampling and Morse-Bott indices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .bifurcation import (
    BifurcationDiagram,
    PlaneDiffeo,
    _kkt_start,
    _kkt_system,
    _level_system,
    _wrap_rows,
    apply_diffeo,
    check_cone,
    classify_contact,
    image_membership,
)
from .exprdsl import ExprTree, evaluate, parse_expr, substitute
from .phasespace import (SystemDef, constraint_jacobian, gauss_newton,
                         hamiltonian_fields, project_batch, sample_feasible, seed_points)
from .singular import CriticalPointRecord, _local, _lagrangian_hessian, almost_toric_audit

GUARANTEED = "GUARANTEED-CONNECTED"
WEAK = "WEAK-GUARANTEE"
NONE = "NO-GUARANTEE"


# ---------------------------------------------------------------------------
# fiber sampling
# ---------------------------------------------------------------------------

@dataclass
class FiberSample:
    target: tuple[float, float]
    points: np.ndarray
    epsilon: float
    components: int | None
    labels: np.ndarray
    stability: list[int]
    budgets: list[int]
    status: str = "ok"

    @property
    def stable(self) -> bool:
        return len(self.stability) >= 2 and self.stability[-1] == self.stability[-2]

    def to_dict(self) -> dict:
        return {"target": list(self.target), "accepted": int(len(self.points)),
                "epsilon": self.epsilon, "components": self.components,
                "stability": self.stability, "budgets": self.budgets, "status": self.status}


def _to_tree(sp, X: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Coordinates of Q in the frame of ``_periodic_tree(sp, X)``."""
    if not sp.periodic_dims:
        return Q
    Y = Q - X.min(axis=0)
    p = list(sp.periodic_dims)
    Y[:, p] = np.mod(Q[:, p], 2 * math.pi)
    return _box_clip(sp, X, Y)


def _box(sp, X: np.ndarray) -> np.ndarray:
    box = 3.0 * np.ptp(X, axis=0) + 1.0
    box[list(sp.periodic_dims)] = 2 * math.pi
    return box


def _box_clip(sp, X, Y):
    # the box is half-open; mod can round up to the period itself
    return np.minimum(np.maximum(Y, 0.0), np.nextafter(_box(sp, X), 0.0))


def _periodic_tree(sp, X: np.ndarray) -> cKDTree:
    """k-d tree whose metric wraps the periodic coordinates."""
    if not sp.periodic_dims:
        return cKDTree(X)
    Y = X - X.min(axis=0)
    p = list(sp.periodic_dims)
    Y[:, p] = np.mod(X[:, p], 2 * math.pi)
    return cKDTree(_box_clip(sp, X, Y), boxsize=_box(sp, X))


def cluster(sp, X: np.ndarray, floor: float, links=None) -> tuple[int, np.ndarray, float]:
    """Components of the eps-neighbour graph, eps = max(3 median NN distance, floor).

    ``links`` is an optional pair of index arrays of extra known edges;
    eps then also covers the longest link, since sampled curves through
    one piece come that close to each other.
    """
    if len(X) == 1:
        return 1, np.zeros(1, int), floor
    tree = _periodic_tree(sp, X)
    dist, _ = tree.query(tree.data, k=2)
    eps = max(3.0 * float(np.median(dist[:, 1])), floor)
    if links is not None and len(links[0]):
        D = X[links[0]] - X[links[1]]
        if sp.periodic_dims:
            p = list(sp.periodic_dims)
            D[:, p] = np.mod(D[:, p] + math.pi, 2 * math.pi) - math.pi
        eps = max(eps, 1.01 * float(np.max(np.linalg.norm(D, axis=1))))
    graph = tree.sparse_distance_matrix(tree, eps, output_type="coo_matrix")
    if links is not None:
        i, j = links
        graph = coo_matrix((np.ones(len(graph.row) + len(i)),
                            (np.concatenate([graph.row, i]), np.concatenate([graph.col, j]))),
                           shape=graph.shape)
    n, labels = connected_components(graph, directed=False)
    return int(n), labels, eps


def thin(sp, X: np.ndarray, r: float, rng) -> np.ndarray:
    """Greedy Poisson-disk thinning: keep points pairwise farther apart than r."""
    tree = _periodic_tree(sp, X)
    alive = np.ones(len(X), bool)
    keep = []
    for i in rng.permutation(len(X)):
        if not alive[i]:
            continue
        keep.append(i)
        alive[tree.query_ball_point(tree.data[i], r)] = False
    return X[np.sort(keep)]


def _fiber_tangents(system: SystemDef, X: np.ndarray) -> np.ndarray:
    """Orthonormal frames (B, d, d - k - 2) of the fiber tangent spaces."""
    sp = system.space
    rows = [constraint_jacobian(sp, X),
            evaluate(system.J, X, order=1).grad[:, None, :],
            evaluate(system.H, X, order=1).grad[:, None, :]]
    _, _, vt = np.linalg.svd(np.concatenate(rows, axis=1), full_matrices=True)
    return np.transpose(vt[:, sp.k + 2:, :], (0, 2, 1))


def _grow(system: SystemDef, X: np.ndarray, c, r: float, rng, n_dir: int = 6,
          max_rounds: int = 400) -> np.ndarray:
    """Grow an r-net over the fiber components that X touches.

    Newton projection from box seeds piles points up unevenly and leaves
    holes.  Starting from an r-thinned X, every newly added point sends
    ``n_dir`` walkers a distance 1.5 r along random fiber-tangent
    directions; projected walkers farther than r from the net join it.
    Each projection must land near its walker, so growth stays on the
    component it started from.  Growth stops at the seed box enlarged by
    half its size on each side, which bounds the net on unbounded fibers.
    """
    sp = system.space
    tol = sp.tol
    lo, hi = (np.asarray(v, float) for v in sp.seed_box)
    lo, hi = lo - 0.5 * (hi - lo), hi + 0.5 * (hi - lo)
    net = thin(sp, X, r, rng)
    front = net
    for _ in range(max_rounds):
        if len(front) == 0:
            break
        T = _fiber_tangents(system, front)
        u = rng.standard_normal((len(front), n_dir, T.shape[2]))
        u /= np.linalg.norm(u, axis=2, keepdims=True)
        Y = (front[:, None, :] + 1.5 * r * np.einsum("bij,bkj->bki", T, u)).reshape(-1, sp.ambient_dim)
        out = gauss_newton(_level_system(system), Y, tol.tol_constraint, tol.max_iter,
                           tol.max_halvings, wrap=sp.wrap if sp.periodic_dims else None,
                           params=np.tile(c, (len(Y), 1)))
        ok = out.converged & (np.linalg.norm(out.x - Y, axis=1) < 3.0 * r)
        cand = sp.wrap(out.x[ok]) if sp.periodic_dims else out.x[ok]
        cand = cand[np.all((cand >= lo) & (cand <= hi), axis=1)]
        if len(cand) == 0:
            break
        d, _ = _periodic_tree(sp, net).query(_to_tree(sp, net, cand))
        cand = cand[d > r]
        if len(cand) == 0:
            break
        front = thin(sp, cand, r, rng)
        net = np.vstack([net, front])
    return net


def sample_fiber(system: SystemDef, c, budget: int = 1000, seed: int = 0,
                 min_accept: int = 50, doublings: int = 2) -> FiberSample:
    """Sample F^-1(c) at budgets b, 2b, 4b and count components at each.

    Each level projects ``budget`` box seeds onto the fiber, then grows a
    uniform net from them (net spacing: twice the median nearest-neighbour
    distance of the projected seeds) before clustering.
    """
    sp = system.space
    tol = sp.tol
    c = (float(c[0]), float(c[1]))
    floor = 10.0 * math.sqrt(tol.tol_constraint)
    counts, budgets = [], []
    X = np.zeros((0, sp.ambient_dim))
    labels = np.zeros(0, int)
    eps = floor
    for level in range(doublings + 1):
        n = budget * 2 ** level
        rng = np.random.default_rng([seed, level])
        S = seed_points(sp, n, rng)
        out = gauss_newton(_level_system(system), S, tol.tol_constraint, tol.max_iter,
                           tol.max_halvings, wrap=sp.wrap if sp.periodic_dims else None,
                           params=np.tile(c, (n, 1)))
        X = out.x[out.converged]
        if sp.periodic_dims:
            X = sp.wrap(X)
        budgets.append(n)
        if len(X) < min_accept:
            return FiberSample(c, X, eps, None, np.zeros(len(X), int), counts, budgets,
                               f"only {len(X)} accepted points (< {min_accept})")
        tree = _periodic_tree(sp, X)
        d0, _ = tree.query(tree.data, k=2)
        X = _grow(system, X, c, max(2.0 * float(np.median(d0[:, 1])), floor), rng)
        k, labels, eps = cluster(sp, X, floor)
        counts.append(k)
    fs = FiberSample(c, X, eps, counts[-1], labels, counts, budgets)
    if not fs.stable:
        fs.components = None
        fs.status = "unstable component count"
    return fs


def local_dimension(system: SystemDef, fs: FiberSample, k: int = 12, n_probe: int = 50,
                    ratio: float = 10.0, radius: float = 0.01, seed: int = 0) -> float:
    """Fraction of probe points whose neighbourhood on the fiber has 2 dominant directions.

    The net in ``fs`` is too coarse to resolve curvature, so each probe gets
    ``k`` fresh neighbours: ambient offsets of size ``radius`` projected back
    onto the fiber.
    """
    sp = system.space
    tol = sp.tol
    X = fs.points
    if len(X) == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    probes = X[rng.choice(len(X), size=min(n_probe, len(X)), replace=False)]
    m = len(probes)
    Y = np.repeat(probes, k, axis=0) + radius * rng.normal(size=(m * k, sp.ambient_dim))
    out = gauss_newton(_level_system(system), Y, tol.tol_constraint, tol.max_iter,
                       tol.max_halvings, params=np.tile(fs.target, (m * k, 1)))
    D = out.x - np.repeat(probes, k, axis=0)
    ok = out.converged & (np.linalg.norm(D, axis=1) < 5 * radius)
    good = 0
    for i in range(m):
        sel = slice(i * k, (i + 1) * k)
        Di = D[sel][ok[sel]]
        if len(Di) < 4:
            continue
        Di = np.vstack([Di, np.zeros(sp.ambient_dim)])
        s = np.linalg.svd(Di - Di.mean(axis=0), compute_uv=False)
        if s[1] > ratio * s[2]:
            good += 1
    return good / m


# ---------------------------------------------------------------------------
# Morse-Bott audit
# ---------------------------------------------------------------------------

_PLANE = ("x", "y")


@dataclass
class CriticalManifold:
    value: float
    dim: int
    index: int
    coindex: int
    n_points: int
    representative: np.ndarray
    image: tuple[float, float]

    def to_dict(self) -> dict:
        return {"value": self.value, "dim": self.dim, "index": self.index,
                "coindex": self.coindex, "n_points": self.n_points,
                "representative": self.representative.tolist(), "image": list(self.image)}


@dataclass
class MorseBottReport:
    function: str
    manifolds: list[CriticalManifold]
    passed: bool
    note: str = ""

    @property
    def indices(self) -> dict[float, int]:
        return {m.value: m.index for m in self.manifolds}

    def to_dict(self) -> dict:
        return {"function": self.function, "manifolds": [m.to_dict() for m in self.manifolds],
                "passed": self.passed, "note": self.note}


class HypothesisError(ValueError):
    """A hypothesis of the Morse-Bott construction fails for the given f."""


def orbit_cloud(system: SystemDef, P: np.ndarray, steps: int = 240, dt: float = 0.05) -> np.ndarray:
    """Points along the orbits of X_J + phi X_H (phi the golden ratio) through P.

    Critical sets of f o F are unions of torus-action orbits, so the cloud
    stays on the critical manifolds while filling them out.  Rows are
    stacked step by step: row s * len(P) + w is walker w after s steps.
    """
    sp = system.space
    phi = 0.5 * (1.0 + math.sqrt(5.0))

    def field(x):
        return hamiltonian_fields(sp, system.J, x) + phi * hamiltonian_fields(sp, system.H, x)

    x = np.array(P, float)
    out = [x]
    for _ in range(steps):
        k1 = field(x)
        k2 = field(x + 0.5 * dt * k1)
        k3 = field(x + 0.5 * dt * k2)
        k4 = field(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if sp.k:
            x = project_batch(sp, [], x).x
        elif sp.periodic_dims:
            x = sp.wrap(x)
        out.append(x)
    return np.vstack(out)


def _plane_critical_points(fg: ExprTree, box, n: int = 15) -> np.ndarray:
    lo, hi = (np.asarray(v, float) for v in box)
    gx, gy = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n))
    Z0 = np.column_stack([gx.ravel(), gy.ravel()])

    def fun(z):
        j = evaluate(fg, z, errors="nan")
        return j.grad, j.hess

    out = gauss_newton(fun, Z0, 1e-10, 50, 8)
    P = out.x[out.converged]
    inside = np.all((P >= lo) & (P <= hi), axis=1)
    return P[inside]


def morse_bott_audit(system: SystemDef, f: ExprTree | str = "x", g: PlaneDiffeo | None = None,
                     diagram: BifurcationDiagram | None = None, n_seeds: int = 512, seed: int = 0,
                     f_crit_sep: float = 1e-3, zero_tol: float = 1e-6) -> MorseBottReport:
    """Critical manifolds of L = f o g o F with transversal indices.

    ``f`` is a function of the plane variables x, y.  The verdict fails when
    an index or a co-index equals 1.
    """
    sp = system.space
    tol = sp.tol
    d = sp.ambient_dim
    g = g or PlaneDiffeo.identity()
    fsrc = f if isinstance(f, str) else f.to_source(_PLANE)
    ftree = parse_expr(f, 2, _PLANE) if isinstance(f, str) else f
    fg = substitute(ftree, (g.gx, g.gy))
    if diagram is not None and diagram.strata:
        crit = _plane_critical_points(fg, system.image_box)
        V = diagram.vertices()
        for p in crit:
            if np.min(np.hypot(*(V - p).T)) <= f_crit_sep:
                raise HypothesisError(f"f o g has a critical point at {p.tolist()} on the strata")
    L = substitute(fg, (system.J, system.H))

    S = seed_points(sp, n_seeds, np.random.default_rng(seed))
    Z0 = _kkt_start(system, L, None, S)
    out = gauss_newton(_kkt_system(system, L, None), Z0, tol.tol_constraint, tol.max_iter,
                       tol.max_halvings, wrap=_wrap_rows(system), params=np.zeros((n_seeds, 1)))
    X = out.x[out.converged, :d]
    if sp.periodic_dims:
        X = sp.wrap(X)
    if len(X) == 0:
        return MorseBottReport(fsrc, [], True, "no critical points reached from the seeds")

    vals = evaluate(L, X, order=0).value
    loc = _local(system, X)
    jl = evaluate(L, X)
    sig = []
    for i in range(len(X)):
        Hs = _lagrangian_hessian(loc, i, jl.grad[i], jl.hess[i])
        ev = np.linalg.eigvalsh(0.5 * (Hs + Hs.T))
        scale = max(np.max(np.abs(ev)), 1e-300)
        zero = np.abs(ev) <= zero_tol * scale
        sig.append((int(np.sum(zero)), int(np.sum((ev < 0) & ~zero)), int(np.sum((ev > 0) & ~zero))))

    # group by (value, signature), fill each group out along the torus
    # orbits, then split it into connected pieces
    keys = {}
    for i, (v, s) in enumerate(zip(vals, sig)):
        keys.setdefault((round(float(v), 6), s), []).append(i)
    manifolds = []
    floor = 10.0 * math.sqrt(tol.tol_constraint)
    for (v, (dim, idx, coidx)), members in sorted(keys.items()):
        P = X[members]
        labels = np.zeros(len(P), int)
        n = 1
        if len(P) > 1:
            # walkers start from a thinned subset; every KKT point then
            # takes the label of its nearest walker sample
            W = thin(sp, P, 0.25, np.random.default_rng([seed, 11])) if dim > 0 else P
            m = len(W)
            links = None
            if dim > 0:
                # consecutive samples of one orbit lie on one connected piece
                W = orbit_cloud(system, W)
                i = np.arange(len(W) - m)
                links = (i, i + m)
            n, wl, _ = cluster(sp, W, floor, links)
            _, near = _periodic_tree(sp, W).query(_to_tree(sp, W, P))
            labels = wl[near]
        for lab in range(n):
            sel = np.flatnonzero(labels == lab)
            if sel.size == 0:
                continue
            rep = P[sel[0]]
            img = system.image(rep[None, :])[0]
            manifolds.append(CriticalManifold(float(v), dim, idx, coidx, int(sel.size), rep,
                                              (float(img[0]), float(img[1]))))
    manifolds.sort(key=lambda m: (m.value, m.index, m.representative.tolist()))
    passed = all(m.index != 1 and m.coindex != 1 for m in manifolds)
    note = "seed-limited: only critical manifolds reached from the seeds are listed"
    return MorseBottReport(fsrc, manifolds, passed, note)


# ---------------------------------------------------------------------------
# verdict
# ---------------------------------------------------------------------------

@dataclass
class ConnectivityVerdict:
    status: str
    failed: list[str]
    hypotheses: dict
    spot_checks: list[FiberSample] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"status": self.status, "failed": self.failed, "hypotheses": self.hypotheses,
                "spot_checks": [s.to_dict() for s in self.spot_checks]}


def spot_values(system: SystemDef, d: BifurcationDiagram, n: int = 5, seed: int = 0,
                margin: float = 0.05) -> np.ndarray:
    """Images of random feasible points at distance > margin from the strata."""
    X = sample_feasible(system.space, 64 * n, np.random.default_rng([seed, 7]))
    C = system.image(X)
    lo, hi = (np.asarray(v, float) for v in system.image_box)
    V = d.vertices()
    iso = np.array([v for v, _ in d.isolated_values]).reshape(-1, 2)
    ref = np.vstack([V, iso])
    out = []
    for c in C:
        if np.any(c < lo) or np.any(c > hi):
            continue
        if ref.size and np.min(np.hypot(*(ref - c).T)) <= margin:
            continue
        if any(np.hypot(*(c - o)) < margin for o in out):
            continue
        out.append(c)
        if len(out) == n:
            break
    return np.array(out).reshape(-1, 2)


def connectivity_verdict(system: SystemDef, d: BifurcationDiagram,
                         records: list[CriticalPointRecord], g: PlaneDiffeo | None = None,
                         cone: tuple | None = None, compact: bool | None = None,
                         proper: bool | None = None, finite_interior: bool = False,
                         n_spot: int = 5, budget: int = 1000, seed: int = 0,
                         cone_samples: int = 2000, member=None) -> ConnectivityVerdict:
    """Theorem-based verdict plus empirical fiber spot checks.

    ``cone`` is (alpha, beta) or (alpha, beta, apex) in the g-frame.
    Properness, compactness and finiteness of interior critical values are
    user assertions (defaulting to the system's flags) and are recorded.
    ``member`` overrides the image-membership oracle used to classify
    contacts (points in the original frame to booleans).
    """
    g = g or PlaneDiffeo.identity()
    compact = system.compact if compact is None else compact
    proper = system.proper if proper is None else proper
    audit = almost_toric_audit(system, records)
    dg = apply_diffeo(d, g)
    vt = [t for t in dg.tangencies if t.kind == "vertical-tangency"]
    hyp = {"almost_toric": audit.passed, "vertical_tangencies": len(vt), "proper": bool(proper),
           "compact": bool(compact), "finite_interior_critical_values": bool(finite_interior),
           "diffeo": g.to_dict(), "offending_records": [r.to_dict() for r in audit.offending]}
    failed = []
    if not audit.passed:
        failed.append("almost-toric")
    if not proper:
        failed.append("properness not asserted")

    cone_ok = None
    if cone is not None:
        alpha, beta = cone[0], cone[1]
        apex = cone[2] if len(cone) > 2 else (0.0, 0.0)
        X = sample_feasible(system.space, cone_samples, np.random.default_rng([seed, 3]))
        cone_ok = check_cone(dg, system.image(X), alpha, beta, apex)
        hyp["cone"] = {"alpha": alpha, "beta": beta, "apex": list(apex), "contained": cone_ok}
    if not compact and not cone_ok:
        failed.append("cone condition" if cone is not None else "neither compact nor cone given")

    status = NONE
    if not failed and not vt:
        status = GUARANTEED
    elif vt:
        contacts = _tangency_contacts(system, dg, g, vt, member)
        hyp["contacts"] = [c.to_dict() for c in contacts]
        all_outward = bool(contacts) and all(c.kind == "outward-contact" for c in contacts)
        if not failed and compact and finite_interior and all_outward:
            status = WEAK
        else:
            failed.append("vertical tangencies" + ("" if all_outward else
                                                    " (not all outward non-degenerate contacts)"))
            if compact and not finite_interior and all_outward:
                failed.append("finite interior critical values not asserted")

    spots = [sample_fiber(system, c, budget, seed=seed + i)
             for i, c in enumerate(spot_values(system, d, n_spot, seed))]
    return ConnectivityVerdict(status, failed, hyp, spots)


def _tangency_contacts(system: SystemDef, dg: BifurcationDiagram, g: PlaneDiffeo, vt,
                       member0=None) -> list:
    if g.is_identity:
        inv = None
    else:
        try:
            inv = g.inverse()
        except ValueError:
            return []
    member0 = member0 or image_membership(system)

    def member(pts):
        pts = np.atleast_2d(pts)
        return member0(inv(pts) if inv is not None else pts)

    out = []
    seen = set()
    for t in vt:
        key = round(t.point[0], 6)
        if key in seen:
            continue
        seen.add(key)
        for c in classify_contact(dg, t.point[0], member):
            if c.kind != "transversal" and abs(c.point[1] - t.point[1]) < 1e-3:
                out.append(c)
    return out
