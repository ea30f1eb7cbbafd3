import numpy as np
import pytest
from scipy.linalg import expm

from almosttoric.exprdsl import parse_expr, substitute
from almosttoric.phasespace import SystemDef
from almosttoric.singular import (
    ADMISSIBLE, RankError, almost_toric_audit, classify_rank0, classify_rank1, decide_rank,
    differential_singular_values, find_critical_points, make_record,
)
from almosttoric.systems import MODELS, build, parametric_curve

OMEGA = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])


def random_symplectic(rng, scale=0.6):
    A = rng.normal(size=(4, 4)) * scale
    return expm(OMEGA @ (A + A.T) / 2)


def conjugate(system, S):
    """The model F o S, whose critical point at the origin has the same type."""
    rows = [parse_expr(" + ".join(f"({float(S[i, j])!r})*v{j + 1}" for j in range(4)), 4) for i in range(4)]
    return SystemDef(system.space, substitute(system.J, rows), substitute(system.H, rows),
                     name=system.name + "-conj")


def test_random_maps_are_symplectic():
    rng = np.random.default_rng(0)
    for _ in range(5):
        S = random_symplectic(rng)
        assert np.allclose(S.T @ OMEGA @ S, OMEGA, atol=1e-12)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_normal_forms_classify_exactly(name):
    wtype, rank = MODELS[name][2], MODELS[name][3]
    rec = make_record(build(name), np.zeros(4))
    assert rec.rank == rank
    assert rec.wtype == wtype
    assert rec.admissible == (wtype in ADMISSIBLE)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_classification_invariant_under_symplectic_conjugation(name):
    wtype = MODELS[name][2]
    base = build(name)
    rng = np.random.default_rng(sorted(MODELS).index(name))
    for _ in range(20):
        rec = make_record(conjugate(base, random_symplectic(rng)), np.zeros(4))
        assert rec.wtype == wtype


@pytest.mark.parametrize("name", ["model-ee", "model-ff", "model-he", "model-hh"])
def test_generic_combinations_agree(name):
    s = build(name)
    types = {classify_rank0(s, np.zeros(4), draws=5, seed=k)[0] for k in range(10)}
    assert types == {MODELS[name][2]}


def test_hamiltonian_spectrum_symmetric():
    s = build("spherical-pendulum")
    rng = np.random.default_rng(1)
    for x in ([0, 0, 1, 0, 0, 0], [0, 0, -1, 0, 0, 0]):
        _, eig, _ = classify_rank0(s, np.array(x, float))
        ev = np.array([complex(a, b) for a, b in eig])
        scale = np.max(np.abs(ev))
        assert max(np.min(np.abs(ev + e)) for e in ev) <= 1e-8 * scale
    for name in ("model-ee", "model-ff", "model-he", "model-hh"):
        s = conjugate(build(name), random_symplectic(rng))
        ev = np.array([complex(a, b) for a, b in classify_rank0(s, np.zeros(4))[1]])
        assert max(np.min(np.abs(ev + e)) for e in ev) <= 1e-8 * np.max(np.abs(ev))


def test_pendulum_rank0_records(pendulum):
    _, records, _ = pendulum
    r0 = [r for r in records if r.rank == 0]
    assert sorted(r.wtype for r in r0) == ["elliptic-elliptic", "focus-focus"]
    ff = next(r for r in r0 if r.wtype == "focus-focus")
    ee = next(r for r in r0 if r.wtype == "elliptic-elliptic")
    assert np.allclose(ff.point, [0, 0, 1, 0, 0, 0], atol=1e-8)
    assert np.allclose(ee.point, [0, 0, -1, 0, 0, 0], atol=1e-8)
    assert np.allclose(ff.image, (0, 1), atol=1e-8)
    assert np.allclose(ee.image, (0, -1), atol=1e-8)


def test_pendulum_rank1_family(pendulum):
    _, records, _ = pendulum
    r1 = [r for r in records if r.rank == 1]
    assert len(r1) > 20
    assert {r.wtype for r in r1} == {"transversally-elliptic"}
    k = np.array([0.0, 0.0, 1.0])
    for r in r1:
        q, p = r.point[:3], r.point[3:]
        assert q[2] < 0
        lam = np.sqrt(-q[2])                       # q3 = -lambda^2
        c = np.cross(q, k) / lam
        sgn = 1.0 if np.dot(p, c) >= 0 else -1.0   # p = (1/lambda) q x k, lambda of either sign
        assert np.linalg.norm(p - sgn * c) < 1e-8
        j, h = parametric_curve(sgn * lam)
        assert np.allclose(r.image, (j, h), atol=1e-8)


def test_family_point_at_half_is_transversally_elliptic():
    s = build("spherical-pendulum")
    q1 = np.sqrt(1 - 1 / 16)
    x = np.array([q1, 0.0, -0.25, 0.0, -2 * q1, 0.0])
    wtype, eig, cert = classify_rank1(s, x)
    assert wtype == "transversally-elliptic"
    assert len(eig) == 2 and min(eig) > 0
    assert np.allclose(s.image(x)[0], parametric_curve(0.5), atol=1e-12)


def test_rank1_model_points():
    te, th = build("model-te"), build("model-th")
    for t in np.linspace(-1, 1, 5):
        x = np.array([t, 0.0, 0.3 * t, 0.0])
        assert classify_rank1(te, x)[0] == "transversally-elliptic"
        assert classify_rank1(th, x)[0] == "transversally-hyperbolic"


def test_rank_mismatch_raises():
    with pytest.raises(RankError):
        classify_rank0(build("model-te"), np.zeros(4))
    with pytest.raises(RankError):
        classify_rank1(build("model-ee"), np.zeros(4))


def test_ambiguous_rank_is_unresolved():
    assert decide_rank(np.array([5e-7, 1e-9]), 1e-7) is None
    assert decide_rank(np.array([1e-8, 1e-9]), 1e-7) == 0
    assert decide_rank(np.array([1.0, 1e-9]), 1e-7) == 1
    assert decide_rank(np.array([1.0, 0.5]), 1e-7) == 2


@pytest.mark.parametrize("name", ["spherical-pendulum", "annulus", "toric-r4", "toric-s2s2",
                                  "coupled-spin-oscillator", "model-th"])
def test_rank_consistency(name):
    s = build(name)
    tol = s.tol.tol_rank
    for r in find_critical_points(s, n_seeds=128):
        sv = differential_singular_values(s, r.point)[0]
        if r.rank == 0:
            assert sv[0] < tol and sv[1] < tol
        elif r.rank == 1:
            assert sv[1] < tol and sv[0] > 10 * tol


def test_toric_model_single_rank0_point():
    r0 = [r for r in find_critical_points(build("toric-r4")) if r.rank == 0]
    assert len(r0) == 1
    assert r0[0].wtype == "elliptic-elliptic"
    assert np.allclose(r0[0].point, 0, atol=1e-8)


def test_annulus_has_only_rank1_circles(annulus1):
    _, records, _ = annulus1
    assert records and all(r.rank == 1 for r in records)
    radii = sorted({round(float(np.hypot(*r.image)), 6) for r in records})
    assert radii == [1.0, 2.0]
    assert all(abs(abs(r.point[2]) - 1) < 1e-8 for r in records)


def test_coupled_system_rank0_points():
    s = build("coupled-spin-oscillator")
    r0 = sorted((r for r in find_critical_points(s) if r.rank == 0), key=lambda r: r.point[2])
    assert len(r0) == 2
    assert np.allclose(r0[0].point, [0, 0, -1, 0, 0], atol=1e-8)
    assert np.allclose(r0[1].point, [0, 0, 1, 0, 0], atol=1e-8)
    assert [r.wtype for r in r0] == ["elliptic-elliptic", "focus-focus"]


def test_audit_verdicts(pendulum, annulus1):
    assert almost_toric_audit(pendulum[0], pendulum[1]).passed
    assert almost_toric_audit(annulus1[0], annulus1[1]).passed
    s = build("model-th")
    v = almost_toric_audit(s, find_critical_points(s), seed_budget=256)
    assert not v.passed
    assert v.offending and all("hyperbolic" in r.wtype for r in v.offending)
    assert "256 seeds" in v.note
