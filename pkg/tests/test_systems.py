import math

import numpy as np
import pytest
from conftest import pipeline
from scipy.optimize import brentq

from almosttoric.bifurcation import PlaneDiffeo, apply_diffeo
from almosttoric.connectivity import sample_fiber
from almosttoric.phasespace import check_integrable, sample_feasible
from almosttoric.singular import almost_toric_audit
from almosttoric.systems import (
    AXIS_CROSSING, CATALOG, build, catalog_names, parametric_curve, reference_curve,
)


def test_unknown_name_and_bad_params():
    with pytest.raises(KeyError):
        build("double-pendulum")
    for bad in (0, -2, 1.5, "two", "0"):
        with pytest.raises(ValueError):
            build("annulus", {"n": bad})
    with pytest.raises(ValueError):
        build("spherical-pendulum", {"n": 2})
    assert build("annulus", {"n": "3"}).name == "annulus-n3"
    assert build("annulus", {"n": 2.0}).name == "annulus-n2"


def test_reference_curve_values():
    assert reference_curve(-1.0) == 0.0
    assert reference_curve(0.0) == pytest.approx(AXIS_CROSSING, abs=1e-15)
    assert AXIS_CROSSING == pytest.approx(0.877382, abs=1e-6)
    with pytest.raises(ValueError):
        reference_curve(-1.01)
    with pytest.raises(ValueError):
        reference_curve(0.0, name="annulus")


def test_reference_curve_at_one_against_parametric_solve():
    lam = brentq(lambda t: parametric_curve(t)[1] - 1.0, 0.2, 1.0, xtol=1e-15)
    j, _ = parametric_curve(lam)
    assert reference_curve(1.0) == pytest.approx(abs(j), abs=1e-12)


def test_parametric_and_cartesian_forms_agree():
    lam = np.linspace(0.005, 1.0, 200)
    for sgn in (1.0, -1.0):
        j, h = parametric_curve(sgn * lam)
        assert np.max(np.abs(np.abs(j) - reference_curve(h))) < 1e-9 * np.maximum(1, np.abs(j)).max()


def test_entries_have_provenance():
    for name in catalog_names():
        for key, ref in CATALOG[name].reference.items():
            assert ref.provenance in ("paper", "derived", "trivial"), (name, key)


@pytest.mark.parametrize("name", catalog_names())
def test_builders_satisfy_phase_space_invariants(name):
    report = check_integrable(build(name), n=1000)
    assert report["points"] > 500
    assert report["bracket_ok"] and report["form_ok"]


def test_annulus_image_is_annulus():
    s = build("annulus", {"n": 2})
    C = s.image(sample_feasible(s.space, 4000, np.random.default_rng(0)))
    r = np.hypot(*C.T)
    assert r.min() >= 1 - 1e-12 and r.max() <= 2 + 1e-12
    assert r.min() < 1.01 and r.max() > 1.99
    ang = np.mod(np.arctan2(C[:, 1], C[:, 0]), 2 * math.pi)
    assert np.histogram(ang, bins=8)[0].min() > 0


def test_toric_r4_is_the_normal_form():
    s = build("toric-r4")
    x = np.array([0.3, -0.7, 1.1, 0.2])
    assert s.image(x)[0] == pytest.approx([(0.09 + 1.21) / 2, (0.49 + 0.04) / 2], abs=1e-15)


def test_coupled_system_rank0_regression():
    _, records, _ = pipeline("coupled-spin-oscillator")
    got = sorted(((tuple(np.round(r.point, 8) + 0.0), r.wtype, tuple(np.round(r.image, 8) + 0.0))
                  for r in records if r.rank == 0), key=lambda t: t[0][2])
    want = sorted(CATALOG["coupled-spin-oscillator"].reference["rank0"].value, key=lambda t: t[0][2])
    assert [(p, w, v) for p, w, v in got] == [(tuple(p), w, tuple(v)) for p, w, v in want]


@pytest.mark.parametrize("name", catalog_names())
def test_catalog_audit_matrix(name):
    system, records, d = pipeline(name)
    ref = CATALOG[name].reference
    assert almost_toric_audit(system, records).passed == ref["almost_toric"].value
    key = lambda img: tuple(np.round(img, 6) + 0.0)  # noqa: E731
    r0 = sorted((r for r in records if r.rank == 0), key=lambda r: key(r.image))
    want = sorted(ref["rank0"].value, key=lambda t: key(t[2]))
    assert len(r0) == len(want)
    for r, (pt, wtype, img) in zip(r0, want):
        assert r.wtype == wtype
        assert np.allclose(r.point, pt, atol=1e-8)
        assert np.allclose(r.image, img, atol=1e-8)
    if "rank1_types" in ref:
        assert {r.wtype for r in records if r.rank == 1} == ref["rank1_types"].value
    if "vertical_tangencies" in ref:
        g = PlaneDiffeo.from_spec(CATALOG[name].connectivity.get("diffeo"))
        n_vt = len(apply_diffeo(d, g).tangencies) if name != "annulus" else len(d.tangencies)
        assert n_vt == ref["vertical_tangencies"].value
    fc = ref.get("fiber_components")
    if isinstance(fc, type(ref["rank0"])) and isinstance(fc.value, dict):
        for c, k in fc.value.items():
            assert sample_fiber(system, c).components == k
    if "wtype" in ref:
        (rec,) = [r for r in records if np.allclose(r.point, 0, atol=1e-8)] or [None]
        if ref["rank"].value == 0:
            assert rec is not None and rec.wtype == ref["wtype"].value


def test_annulus_fiber_reference_is_n():
    assert CATALOG["annulus"].reference["fiber_components"].value == "n"
    for n in (1, 2):
        s = build("annulus", {"n": n})
        assert sample_fiber(s, (0.0, 1.5)).components == n
