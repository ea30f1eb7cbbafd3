"""Critical points of F = (J, H): location, rank and Williamson type."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exprdsl import evaluate
from .phasespace import (
    SystemDef,
    gauss_newton,
    restricted_forms,
    seed_points,
    tangent_frames,
)

WTYPES = (
    "elliptic-elliptic",
    "focus-focus",
    "transversally-elliptic",
    "transversally-hyperbolic",
    "hyperbolic-elliptic",
    "hyperbolic-hyperbolic",
    "degenerate",
    "unresolved",
)
ADMISSIBLE = frozenset({"elliptic-elliptic", "focus-focus", "transversally-elliptic"})


class RankError(ValueError):
    """The requested classification does not match the point's rank."""


@dataclass
class CriticalPointRecord:
    point: np.ndarray
    rank: int | None
    wtype: str
    eigen_data: list
    image: tuple[float, float]
    certificate: dict = field(default_factory=dict)

    @property
    def admissible(self) -> bool:
        return self.wtype in ADMISSIBLE

    def to_dict(self) -> dict:
        return {
            "point": [float(v) for v in self.point],
            "rank": self.rank,
            "wtype": self.wtype,
            "eigen_data": self.eigen_data,
            "image": [float(self.image[0]), float(self.image[1])],
            "certificate": self.certificate,
        }


# ---------------------------------------------------------------------------
# local data
# ---------------------------------------------------------------------------

@dataclass
class _Local:
    x: np.ndarray
    T: np.ndarray            # (B, d, 4)
    W: np.ndarray            # (B, 4, 4) restricted form
    gJ: np.ndarray
    gH: np.ndarray
    hJ: np.ndarray
    hH: np.ndarray
    C: np.ndarray            # (B, k, d)
    hC: np.ndarray           # (B, k, d, d)
    cval: np.ndarray         # (B, k)


def _local(system: SystemDef, x: np.ndarray, frames: bool = True) -> _Local:
    sp = system.space
    x = np.atleast_2d(np.asarray(x, float))
    jJ = evaluate(system.J, x, errors="nan")
    jH = evaluate(system.H, x, errors="nan")
    b, d = x.shape
    if sp.k:
        jc = [evaluate(c, x) for c in sp.constraints]
        C = np.stack([j.grad for j in jc], axis=1)
        hC = np.stack([j.hess for j in jc], axis=1)
        cval = np.stack([j.value for j in jc], axis=1)
    else:
        C, hC, cval = np.zeros((b, 0, d)), np.zeros((b, 0, d, d)), np.zeros((b, 0))
    T = W = None
    if frames:
        T = tangent_frames(sp, x)
        W = restricted_forms(sp, x, T)
    return _Local(x, T, W, jJ.grad, jH.grad, jJ.hess, jH.hess, C, hC, cval)


def _multipliers(C: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Least-squares Lagrange multipliers mu with g ~ C^T mu (single point)."""
    if C.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(C.T, g, rcond=None)[0]


def _lagrangian_hessian(loc: _Local, i: int, grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """Intrinsic Hessian on the constraint manifold, in the tangent frame."""
    mu = _multipliers(loc.C[i], grad)
    Hm = hess - np.einsum("k,kij->ij", mu, loc.hC[i]) if mu.size else hess
    T = loc.T[i]
    return T.T @ Hm @ T


def differential_singular_values(system: SystemDef, x) -> np.ndarray:
    """Scale-normalized singular values (s1 >= s2) of dF restricted to TM."""
    loc = _local(system, x)
    D = np.stack([np.einsum("bi,bia->ba", loc.gJ, loc.T), np.einsum("bi,bia->ba", loc.gH, loc.T)],
                 axis=1)
    s = np.linalg.svd(D, compute_uv=False)
    scale = np.maximum(1.0, np.maximum(np.linalg.norm(loc.gJ, axis=1), np.linalg.norm(loc.gH, axis=1)))
    return s / scale[:, None]


def decide_rank(s: np.ndarray, tol_rank: float) -> int | None:
    s1, s2 = float(s[0]), float(s[1])
    if s1 < tol_rank:
        return 0
    if s2 < tol_rank and s1 > 10.0 * tol_rank:
        return 1
    if s2 >= tol_rank:
        return 2
    return None


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def _eig_kind(ev: np.ndarray, rel: float) -> tuple[int, int, int]:
    scale = max(np.max(np.abs(ev)), 1e-300)
    re = np.abs(ev.real) <= rel * scale
    im = np.abs(ev.imag) <= rel * scale
    n_imag = int(np.sum(re & ~im))
    n_real = int(np.sum(im & ~re))
    n_cplx = int(np.sum(~re & ~im))
    return n_real, n_imag, n_cplx


def classify_rank0(system: SystemDef, m, draws: int = 5, seed: int = 0) -> tuple[str, list, dict]:
    """Williamson type of a rank-zero point.

    The linearized flow of c1 J + c2 H is A(c) = W^-T Hess_M(c1 J + c2 H) in
    any tangent frame (W the restricted form, Hess_M the constrained
    Hessian); its spectrum does not depend on the frame.  ``draws`` random
    generic c must agree on the eigenvalue pattern.
    """
    tol = system.tol
    loc = _local(system, m)
    s = differential_singular_values(system, m)[0]
    if s[0] >= tol.tol_rank:
        raise RankError(f"point is not rank 0 (s1 = {s[0]:.2e})")
    LJ = _lagrangian_hessian(loc, 0, loc.gJ[0], loc.hJ[0])
    LH = _lagrangian_hessian(loc, 0, loc.gH[0], loc.hH[0])
    Wt = loc.W[0].T
    AJ = np.linalg.solve(Wt, LJ)
    AH = np.linalg.solve(Wt, LH)
    scale = max(np.linalg.norm(AJ), np.linalg.norm(AH), 1e-300)
    span = np.linalg.svd(np.stack([AJ.ravel(), AH.ravel()]), compute_uv=False)
    comm = np.linalg.norm(AJ @ AH - AH @ AJ) / scale ** 2
    diag = {"span_ratio": float(span[1] / max(span[0], 1e-300)), "commutator": float(comm),
            "draws": []}

    rng = np.random.default_rng(seed)
    patterns = []
    spectra = []
    degenerate = span[1] <= tol.tol_nondeg * span[0]
    for _ in range(draws):
        c = rng.normal(size=2)
        c /= np.linalg.norm(c)
        A = c[0] * AJ + c[1] * AH
        ev = np.linalg.eigvals(A)
        ev = ev[np.lexsort((ev.imag, ev.real))]
        amax = max(np.max(np.abs(ev)), 1e-300)
        # Hamiltonian matrices have spectra symmetric under negation
        sym = max(np.min(np.abs(ev + e)) for e in ev) / amax
        gaps = np.abs(ev[:, None] - ev[None, :])
        np.fill_diagonal(gaps, np.inf)
        sep = float(np.min(gaps)) / amax
        smallest = float(np.min(np.abs(ev))) / max(scale, 1e-300)
        diag["draws"].append({"c": c.tolist(), "symmetry": float(sym), "separation": sep,
                              "smallest": smallest})
        if smallest <= tol.tol_nondeg or sep <= 1e-6:
            degenerate = True
        patterns.append(_eig_kind(ev, 1e-6))
        spectra.append(ev)

    eig = [[float(e.real), float(e.imag)] for e in spectra[0]]
    if degenerate:
        return "degenerate", eig, diag
    if len(set(patterns)) != 1:
        diag["patterns"] = [list(p) for p in patterns]
        return "unresolved", eig, diag
    n_real, n_imag, n_cplx = patterns[0]
    wtype = {
        (0, 4, 0): "elliptic-elliptic",
        (0, 0, 4): "focus-focus",
        (4, 0, 0): "hyperbolic-hyperbolic",
        (2, 2, 0): "hyperbolic-elliptic",
    }.get((n_real, n_imag, n_cplx), "unresolved")
    return wtype, eig, diag


def classify_rank1(system: SystemDef, m) -> tuple[str, list, dict]:
    """Transversal type of a rank-one point.

    With a dJ + b dH = 0 on TM and K the independent combination, the
    Hessian of G = aJ + bH is restricted to a complement of X_K inside
    ker dK; the orbit of X_K lies in the critical set of G, so any
    complement gives the same signature.
    """
    tol = system.tol
    loc = _local(system, m)
    T, W = loc.T[0], loc.W[0]
    D = np.stack([loc.gJ[0] @ T, loc.gH[0] @ T])
    U, s, _ = np.linalg.svd(D)
    scale = max(1.0, np.linalg.norm(loc.gJ[0]), np.linalg.norm(loc.gH[0]))
    if s[0] / scale < tol.tol_rank:
        raise RankError("both differentials vanish: the point is rank 0")
    a, b = U[:, 1]
    kdir = U[:, 0]
    gG = a * loc.gJ[0] + b * loc.gH[0]
    hG = a * loc.hJ[0] + b * loc.hH[0]
    LG = _lagrangian_hessian(loc, 0, gG, hG)
    kvec = D.T @ kdir
    xK = np.linalg.solve(W.T, kvec)
    Q, _ = np.linalg.qr(np.column_stack([kvec, xK]), mode="complete")
    S = Q[:, 2:]
    B = S.T @ LG @ S
    B = 0.5 * (B + B.T)
    ev = np.linalg.eigvalsh(B)
    hscale = max(1.0, np.linalg.norm(LG))
    det = float(ev[0] * ev[1])
    cert = {"combination": [float(a), float(b)], "s1": float(s[0] / scale),
            "s2": float(s[1] / scale), "transversal_det": det,
            "orbit_leak": float(np.linalg.norm(LG @ (xK / max(np.linalg.norm(xK), 1e-300))) / hscale)}
    if abs(det) <= tol.tol_nondeg * hscale ** 2:
        return "degenerate", [float(e) for e in ev], cert
    wtype = "transversally-elliptic" if det > 0 else "transversally-hyperbolic"
    return wtype, [float(e) for e in ev], cert


# ---------------------------------------------------------------------------
# location
# ---------------------------------------------------------------------------

def _rank0_system(system: SystemDef):
    sp = system.space
    d, k = sp.ambient_dim, sp.k

    def fun(z):
        x = z[:, :d]
        mu, nu = z[:, d:d + k], z[:, d + k:]
        loc = _local(system, x, frames=False)
        Ct = np.transpose(loc.C, (0, 2, 1))
        rJ = loc.gJ - np.einsum("bik,bk->bi", Ct, mu)
        rH = loc.gH - np.einsum("bik,bk->bi", Ct, nu)
        r = np.hstack([rJ, rH, loc.cval])
        b = z.shape[0]
        jac = np.zeros((b, 2 * d + k, d + 2 * k))
        jac[:, :d, :d] = loc.hJ - np.einsum("bk,bkij->bij", mu, loc.hC)
        jac[:, :d, d:d + k] = -Ct
        jac[:, d:2 * d, :d] = loc.hH - np.einsum("bk,bkij->bij", nu, loc.hC)
        jac[:, d:2 * d, d + k:] = -Ct
        jac[:, 2 * d:, :d] = loc.C
        return r, jac

    return fun


def _rank1_system(system: SystemDef):
    """Residuals of cos(t) grad J + sin(t) grad H - C^T mu = 0, c = 0 in z = (x, t, mu)."""
    sp = system.space
    d, k = sp.ambient_dim, sp.k

    def fun(z):
        x, t, mu = z[:, :d], z[:, d], z[:, d + 1:]
        loc = _local(system, x, frames=False)
        ct, st = np.cos(t), np.sin(t)
        Ct = np.transpose(loc.C, (0, 2, 1))
        g = ct[:, None] * loc.gJ + st[:, None] * loc.gH
        r = np.hstack([g - np.einsum("bik,bk->bi", Ct, mu), loc.cval])
        b = z.shape[0]
        jac = np.zeros((b, d + k, d + 1 + k))
        jac[:, :d, :d] = (ct[:, None, None] * loc.hJ + st[:, None, None] * loc.hH
                          - np.einsum("bk,bkij->bij", mu, loc.hC))
        jac[:, :d, d] = -st[:, None] * loc.gJ + ct[:, None] * loc.gH
        jac[:, :d, d + 1:] = -Ct
        jac[:, d:, :d] = loc.C
        return r, jac

    return fun


def _rank1_start(system: SystemDef, x: np.ndarray) -> np.ndarray:
    """Initial (t, mu) for the rank-one system from the least singular combination."""
    loc = _local(system, x, frames=False)
    b, d = x.shape
    k = system.space.k
    z = np.zeros((b, d + 1 + k))
    z[:, :d] = x
    for i in range(b):
        C = loc.C[i]
        if k:
            Q, _ = np.linalg.qr(C.T)
            P = np.eye(d) - Q @ Q.T
        else:
            P = np.eye(d)
        G = np.column_stack([P @ loc.gJ[i], P @ loc.gH[i]])
        _, _, vt = np.linalg.svd(G)
        a, bb = vt[-1]
        t = np.arctan2(bb, a)
        z[i, d] = t
        if k:
            z[i, d + 1:] = _multipliers(C, np.cos(t) * loc.gJ[i] + np.sin(t) * loc.gH[i])
    return z


def _rank0_start(system: SystemDef, x: np.ndarray) -> np.ndarray:
    loc = _local(system, x, frames=False)
    b, d = x.shape
    k = system.space.k
    z = np.zeros((b, d + 2 * k))
    z[:, :d] = x
    if k:
        for i in range(b):
            z[i, d:d + k] = _multipliers(loc.C[i], loc.gJ[i])
            z[i, d + k:] = _multipliers(loc.C[i], loc.gH[i])
    return z


def solve_rank0(system: SystemDef, x0: np.ndarray):
    sp = system.space
    d = sp.ambient_dim
    tol = sp.tol
    wrap = (lambda z: np.hstack([sp.wrap(z[:, :d]), z[:, d:]])) if sp.periodic_dims else None
    out = gauss_newton(_rank0_system(system), _rank0_start(system, x0), tol.tol_constraint,
                       tol.max_iter, tol.max_halvings, wrap=wrap)
    return out.x[:, :d], out.converged, out.residual


def solve_rank1(system: SystemDef, x0: np.ndarray):
    sp = system.space
    d = sp.ambient_dim
    tol = sp.tol
    wrap = (lambda z: np.hstack([sp.wrap(z[:, :d]), z[:, d:]])) if sp.periodic_dims else None
    out = gauss_newton(_rank1_system(system), _rank1_start(system, x0), tol.tol_constraint,
                       tol.max_iter, tol.max_halvings, wrap=wrap)
    return out.x, out.converged, out.residual


def make_record(system: SystemDef, x, residual: float = 0.0, seed: int = 0) -> CriticalPointRecord:
    x = np.asarray(x, float)
    tol = system.tol
    s = differential_singular_values(system, x)[0]
    rank = decide_rank(s, tol.tol_rank)
    img = system.image(x)[0]
    cert = {"residual": float(residual), "s1": float(s[0]), "s2": float(s[1])}
    if rank == 0:
        wtype, eig, diag = classify_rank0(system, x, seed=seed)
        cert["span_ratio"] = diag["span_ratio"]
        cert["commutator"] = diag["commutator"]
    elif rank == 1:
        wtype, eig, diag = classify_rank1(system, x)
        cert.update(diag)
    else:
        wtype, eig = "unresolved", []
    T = tangent_frames(system.space, x[None, :])
    cert["form_det"] = float(abs(np.linalg.det(restricted_forms(system.space, x[None, :], T)[0])))
    return CriticalPointRecord(x, rank if rank in (0, 1) else None, wtype, eig,
                               (float(img[0]), float(img[1])), cert)


def find_critical_points(system: SystemDef, seeds: np.ndarray | None = None, n_seeds: int = 256,
                         seed: int = 0, rank1_spacing: float = 0.05,
                         stats: dict | None = None) -> list[CriticalPointRecord]:
    """Locate and classify critical points from a batch of seeds.

    Two Gauss-Newton systems run from every seed: the rank-zero system
    (both restricted differentials vanish) and the rank-at-most-one system
    (a unit combination of the differentials vanishes).  Rank-zero hits are
    merged within ``dedup_radius``; rank-one hits, which fill whole
    families, are thinned to one representative per ``rank1_spacing`` of
    image distance.
    """
    sp = system.space
    tol = sp.tol
    if seeds is None:
        seeds = seed_points(sp, n_seeds, np.random.default_rng(seed))
    seeds = np.atleast_2d(np.asarray(seeds, float))
    lo, hi = (np.asarray(v) for v in sp.seed_box)
    seeds = np.clip(seeds, lo, hi)

    x0, ok0, res0 = solve_rank0(system, seeds)
    z1, ok1, res1 = solve_rank1(system, seeds)
    d = sp.ambient_dim
    cand = [(x, r) for x, r in zip(x0[ok0], res0[ok0])]
    cand += [(z[:d], r) for z, r in zip(z1[ok1], res1[ok1])]
    if stats is not None:
        stats.update({"seeds": int(seeds.shape[0]), "rank0_converged": int(ok0.sum()),
                      "rank1_converged": int(ok1.sum()),
                      "dropped": int(2 * seeds.shape[0] - ok0.sum() - ok1.sum())})
    if not cand:
        return []
    xs = np.array([c[0] for c in cand])
    res = np.array([c[1] for c in cand])
    sv = differential_singular_values(system, xs)
    images = system.image(xs)

    records: list[CriticalPointRecord] = []
    kept0: list[np.ndarray] = []
    kept1: list[np.ndarray] = []
    order = np.lexsort((res, sv[:, 0]))
    for i in order:
        rank = decide_rank(sv[i], tol.tol_rank)
        if rank == 2:
            continue
        if rank == 0 or rank is None:
            if any(sp.distance(xs[i], y) < tol.dedup_radius for y in kept0):
                continue
            kept0.append(xs[i])
        else:
            if any(np.hypot(*(images[i] - y)) < rank1_spacing for y in kept1):
                continue
            kept1.append(images[i])
        records.append(make_record(system, xs[i], res[i], seed=seed))
    records.sort(key=lambda r: (r.image[0], r.image[1], r.rank if r.rank is not None else 9))
    return records


@dataclass
class AuditVerdict:
    passed: bool
    offending: list
    n_records: int
    seed_budget: int | None
    note: str

    def to_dict(self) -> dict:
        return {"passed": self.passed, "offending": [r.to_dict() for r in self.offending],
                "n_records": self.n_records, "seed_budget": self.seed_budget, "note": self.note}


def almost_toric_audit(system: SystemDef, records: list[CriticalPointRecord],
                       seed_budget: int | None = None) -> AuditVerdict:
    """Pass iff every located singularity is non-degenerate without hyperbolic part."""
    bad = [r for r in records if not r.admissible]
    note = ("verdict covers only the critical points reached from the seeds"
            + (f" ({seed_budget} seeds)" if seed_budget else ""))
    return AuditVerdict(not bad, bad, len(records), seed_budget, note)
