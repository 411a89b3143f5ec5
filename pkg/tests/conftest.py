"""Shared builders for the test suite."""

import numpy as np
import pytest

from jumpfbsde.benchmarks import affine_problem
from jumpfbsde.model import Coefficient, CoefficientSet, Partials
from jumpfbsde.scenario import TimeGrid, generate


def x_coefficient(fn, dfn):
    """Scalar coefficient ``fn(x)`` (n = m = d = k = 1, no marks) with supplied derivative ``dfn``."""

    def value(t, x, y, z, r, v):
        return fn(x)

    def partials(t, x, y, z, r, v):
        P = x.shape[0]
        return Partials(dfn(x)[:, :, None], np.zeros((P, 1, 1)), np.zeros((P, 1, 1, 1)),
                        np.zeros((P, 1, 0, 1)), np.zeros((P, 1, 1)))

    return Coefficient(value, partials, "custom")


def with_drift(spec, coef):
    c = spec.coeffs
    return type(spec)(**{**{f: getattr(spec, f) for f in spec.__dataclass_fields__},
                         "coeffs": CoefficientSet(coef, c.g, c.sigma, c.f, c.l, c.phi, c.h)})


@pytest.fixture
def scalar_zero():
    return affine_problem(name="zero")


def batch_for(spec, N=16, P=512, seed=0, workers=1):
    return generate(TimeGrid(spec.T, N), spec.marks, P, spec.dims.d, rng=seed, workers=workers)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion (tests tagged with a ``criterion`` property)."""
    rows = []
    for outcome in ("passed", "failed", "xfailed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props and getattr(rep, "when", "call") in ("call", "setup"):
                rows.append((props["criterion"], "PASS" if outcome == "passed" else "FAIL", props.get("detail", "")))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(rows):
            terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())
