import functools

import pytest

from almosttoric.bifurcation import build_diagram, trace_strata
from almosttoric.singular import find_critical_points
from almosttoric.systems import build


@functools.lru_cache(maxsize=None)
def pipeline(name, n=None):
    """(system, records, diagram) for a catalog entry, computed once per session."""
    system = build(name, {"n": n} if n is not None else None)
    records = find_critical_points(system)
    strata = trace_strata(system, records)
    return system, records, build_diagram(system, records, strata=strata)


@pytest.fixture(scope="session")
def pendulum():
    return pipeline("spherical-pendulum")


@pytest.fixture(scope="session")
def annulus1():
    return pipeline("annulus", 1)


@functools.lru_cache(maxsize=None)
def with_envelopes(name, n=None, j_grid=None):
    """The cached pipeline plus envelopes on ``j_grid`` (default: image-box width, 121 points)."""
    import numpy as np

    from almosttoric.bifurcation import compute_envelopes

    system, records, d = pipeline(name, n)
    if j_grid is None:
        (x0, _), (x1, _) = system.image_box
        j_grid = (x0, x1, 121)
    env = compute_envelopes(system, np.linspace(*j_grid), strata=d.strata)
    return system, build_diagram(system, records, envelopes=env, strata=d.strata)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
