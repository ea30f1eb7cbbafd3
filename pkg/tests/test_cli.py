import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from goldens import GOLDEN, summarize

from almosttoric.cli import OUT_ENV, clean, main
from almosttoric.systems import catalog_names, reference_curve


def run(*args, env=None, cwd=None):
    e = dict(os.environ)
    e.pop(OUT_ENV, None)
    e.update(env or {})
    return subprocess.run([sys.executable, "-m", "almosttoric", *map(str, args)],
                          capture_output=True, text=True, env=e, cwd=cwd)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_lists_subcommands():
    r = run("--help")
    assert r.returncode == 0
    for cmd in ("classify", "diagram", "envelopes", "connectivity", "audit", "catalog"):
        assert cmd in r.stdout
    assert run("connectivity", "--help").returncode == 0


def test_catalog_listing():
    r = run("catalog", "--json")
    assert r.returncode == 0
    assert sorted(json.loads(r.stdout)) == catalog_names()


def test_classify_pendulum(tmp_path):
    r = run("classify", "spherical-pendulum", "--out", tmp_path)
    assert r.returncode == 0, r.stderr
    rep = json.loads((tmp_path / "classify.json").read_text())
    r0 = sorted((rec["wtype"], rec["image"]) for rec in rep["records"] if rec["rank"] == 0)
    assert [w for w, _ in r0] == ["elliptic-elliptic", "focus-focus"]
    assert rep["almost_toric"]["passed"]


def test_classify_toric_and_hyperbolic(tmp_path):
    assert main(["classify", "toric-r4", "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "classify.json").read_text())
    assert [r["wtype"] for r in rep["records"] if r["rank"] == 0] == ["elliptic-elliptic"]
    assert main(["classify", "model-hh", "--out", str(tmp_path / "b")]) == 2
    rep = json.loads((tmp_path / "b" / "classify.json").read_text())
    assert any(r["wtype"] == "hyperbolic-hyperbolic" for r in rep["flagged"])


@pytest.mark.parametrize("args", [
    ["classify", "no-such-system"],
    ["classify", "annulus", "--param", "n=0"],
    ["classify", "annulus", "--tol", "tol_rank=-1"],
    ["classify", "annulus", "--tol", "bogus=1"],
    ["connectivity", "toric-r4", "--spots", "3"],
    ["connectivity", "toric-r4", "--diffeo", "x;y;z"],
    ["classify", "annulus", "--param", "n"],
])
def test_config_errors_exit_1(tmp_path, args):
    assert main(args + ["--out", str(tmp_path)]) == 1


def test_bad_expression_in_system_file(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("ambient_dim: 4\nJ: v1 +* v2\nH: v3\nimage_box: [[-1, -1], [1, 1]]\n")
    assert main(["classify", str(path), "--out", str(tmp_path)]) == 1
    assert "byte" in capsys.readouterr().err


def test_system_file_input(tmp_path):
    path = tmp_path / "ff.yaml"
    path.write_text("name: ff\nambient_dim: 4\nJ: v1*v4 - v2*v3\nH: v1*v3 + v2*v4\n"
                    "seed_box: [[-1, -1, -1, -1], [1, 1, 1, 1]]\nimage_box: [[-1, -1], [1, 1]]\n")
    assert main(["classify", str(path), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "classify.json").read_text())
    assert [r["wtype"] for r in rep["records"] if r["rank"] == 0] == ["focus-focus"]


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "run.yaml"
    out = tmp_path / "from-config"
    cfg.write_text(f"seed: 7\nbudget: 64\ntolerances: {{tol_rank: 2.0e-7}}\nout: {out}\n")
    assert main(["classify", "toric-r4", "--seed", "1", "--budget", "128", "--out",
                 str(tmp_path / "from-flag"), "--config", str(cfg)]) == 0
    rep = json.loads((out / "classify.json").read_text())
    assert rep["seed"] == 7 and rep["budget"] == 64
    assert rep["tolerances"]["tol_rank"] == 2e-7
    assert not (tmp_path / "from-flag" / "classify.json").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text("sneed: 1\n")
    assert main(["classify", "toric-r4", "--out", str(tmp_path), "--config", str(bad)]) == 1


def test_env_var_sets_default_output_dir(tmp_path):
    target = tmp_path / "env-out"
    r = run("classify", "toric-r4", env={OUT_ENV: str(target)}, cwd=tmp_path)
    assert r.returncode == 0, r.stderr
    assert (target / "classify.json").exists()
    r = run("classify", "toric-r4", "--out", tmp_path / "flag", env={OUT_ENV: str(target)})
    assert (tmp_path / "flag" / "classify.json").exists()


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.mark.parametrize("args", [
    ["classify", "spherical-pendulum"],
    ["diagram", "annulus", "--param", "n=2"],
    ["connectivity", "toric-r4", "--export-fibers"],
    ["audit", "annulus"],
])
def test_byte_reproducibility(tmp_path, args):
    a, b = tmp_path / "a", tmp_path / "b"
    ra, rb = run(*args, "--out", a), run(*args, "--out", b)
    assert ra.returncode == rb.returncode
    A, B = _tree_bytes(a), _tree_bytes(b)
    assert A and A.keys() == B.keys()
    for k in A:
        assert A[k] == B[k], k


def test_diagram_pendulum_curve_files(tmp_path):
    assert main(["diagram", "spherical-pendulum", "--out", str(tmp_path)]) == 0
    files = sorted(tmp_path.glob("stratum_*.csv"))
    assert len(files) == 2
    for f in files:
        rows = read_csv(f)
        x = np.array([float(r["x"]) for r in rows])
        y = np.array([float(r["y"]) for r in rows])
        assert {r["wtype"] for r in rows} <= {"transversally-elliptic", "elliptic-elliptic"}
        m = (y >= -1) & (y <= 3)
        assert np.max(np.abs(np.abs(x[m]) - reference_curve(y[m]))) < 1e-6
    env = read_csv(tmp_path / "envelopes.csv")
    assert list(env[0]) == ["x", "hminus", "hplus"]
    svg = (tmp_path / "diagram.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") >= 2
    assert "focus-focus" in svg
    assert json.loads((tmp_path / "diagram.json").read_text())["diagram"]["strata"]


def test_diagram_annulus_two_circles(tmp_path):
    assert main(["diagram", "annulus", "--param", "n=1", "--out", str(tmp_path)]) == 0
    radii = []
    for f in sorted(tmp_path.glob("stratum_*.csv")):
        rows = read_csv(f)
        r = np.hypot([float(t["x"]) for t in rows], [float(t["y"]) for t in rows])
        assert np.ptp(r) < 1e-9
        radii.append(round(float(r.mean()), 9))
    assert sorted(radii) == [1.0, 2.0]


def test_diagram_square(tmp_path):
    assert main(["diagram", "toric-s2s2", "--out", str(tmp_path)]) == 0
    pts = np.vstack([[(float(t["x"]), float(t["y"])) for t in read_csv(f)]
                     for f in tmp_path.glob("stratum_*.csv")])
    on_edge = np.min(np.abs(np.column_stack([pts, 1 - pts])), axis=1)
    assert np.max(on_edge) < 1e-9
    assert np.all((pts > -1e-9) & (pts < 1 + 1e-9))
    for corner in ((0, 0), (0, 1), (1, 0), (1, 1)):
        assert np.min(np.hypot(*(pts - corner).T)) < 1e-9


def test_connectivity_exit_codes(tmp_path):
    r = run("connectivity", "spherical-pendulum", "--out", tmp_path / "p")
    assert r.returncode == 0, r.stderr
    assert main(["connectivity", "toric-r4", "--out", str(tmp_path / "t")]) == 0
    assert main(["connectivity", "annulus", "--param", "n=3", "--out", str(tmp_path / "a")]) == 3
    v = json.loads((tmp_path / "a" / "connectivity.json").read_text())["verdict"]
    assert v["status"] == "NO-GUARANTEE"
    assert [s["components"] for s in v["spot_checks"]] == [3] * len(v["spot_checks"])


def test_connectivity_flags(tmp_path):
    # without the swap and the cone the pendulum image has no compactness or cone certificate
    assert main(["connectivity", "spherical-pendulum", "--diffeo", "identity", "--cone", "1.0", "1.0",
                 "--out", str(tmp_path)]) == 3
    v = json.loads((tmp_path / "connectivity.json").read_text())["verdict"]
    assert "cone condition" in v["failed"]
    assert main(["connectivity", "toric-r4", "--no-proper", "--out", str(tmp_path)]) == 3
    assert main(["connectivity", "toric-r4", "--export-fibers", "--spots", "6",
                 "--out", str(tmp_path / "f")]) == 0
    rows = read_csv(tmp_path / "f" / "fiber_5.csv")
    assert list(rows[0]) == ["x1", "x2", "x3", "x4", "component"]


def test_audit_exit_codes(tmp_path):
    assert main(["audit", "annulus", "--param", "n=2", "--out", str(tmp_path / "a")]) == 3
    rep = json.loads((tmp_path / "a" / "audit.json").read_text())["morse_bott"]
    assert sorted({(m["value"], m["index"]) for m in rep["manifolds"]}) == [
        (-2.0, 0), (-1.0, 2), (1.0, 1), (2.0, 3)]
    assert main(["audit", "spherical-pendulum", "--diffeo", "swap",
                 "--out", str(tmp_path / "p")]) == 0


def test_clean_is_stable():
    data = {"b": np.float64(1 / 3), "a": [np.inf, -np.inf, np.nan, -0.0], "c": np.array([1, 2])}
    assert clean(data) == {"a": ["inf", "-inf", "nan", 0.0], "b": 0.333333333333, "c": [1, 2]}


@pytest.mark.parametrize("name", catalog_names())
def test_golden_reports(tmp_path, name):
    want = json.loads((GOLDEN / f"{name}.json").read_text())
    assert summarize(name, tmp_path) == want
