import dataclasses

import numpy as np
import pytest

from meanfield_clt import build_preset
from meanfield_clt.model import ModelDerivatives, SampleableMeasure
from meanfield_clt.simulate import SimConfig


def zero_derivatives(d=1, m=1, **overrides):
    base = dict(
        b2=lambda x, y, nu: np.zeros((x.shape[0], d, m)),
        b3=lambda x, y, nu, xt: np.zeros((x.shape[0], xt.shape[0], d)),
        b02=lambda y, nu: np.zeros((m, m)),
        b03=lambda y, nu, xt: np.zeros((xt.shape[0], m)),
        d2=lambda x, y, h, nu: np.zeros((x.shape[0], m)),
        d3=lambda x, y, h, nu, xt: np.zeros((x.shape[0], xt.shape[0])),
        vanishing=frozenset({"b2", "b3", "b02", "b03", "d2", "d3"}),
    )
    base.update(overrides)
    return ModelDerivatives(**base)


def custom_spec(**changes):
    """A decoupled 1-d spec with selected fields replaced."""
    spec = build_preset("decoupled")
    return dataclasses.replace(spec, **changes)


@pytest.fixture
def decoupled():
    return build_preset("decoupled")


@pytest.fixture
def example1():
    return build_preset("example1")


@pytest.fixture
def small_cfg():
    return SimConfig(n_particles=20, ensemble_size=200, dt=0.05, horizon=0.5, seed=7, replication_count=4)


__all__ = ["zero_derivatives", "custom_spec", "SampleableMeasure", "ACCEPTANCE_LINES"]


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
