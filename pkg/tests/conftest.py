import time

import numpy as np
import pytest

from degenhess.fields import Box, ScalarFieldC2, make_base
from degenhess.staircase import (
    LinearMapBase,
    StairConfig,
    VectorFieldC1,
    run_construction,
    run_first_order,
)


@pytest.fixture(scope="session")
def run_wallclock():
    """Wall-clock seconds of the session's construction fixtures."""
    return {}


@pytest.fixture(scope="session")
def quadratic_run(run_wallclock):
    """Four stages on f0 = |x|^2 / 2 over the unit square, k=2, p=1.5."""
    box = Box((0.0, 0.0), (1.0, 1.0))
    w = ScalarFieldC2(
        make_base("quadratic", {"matrix": [[1.0, 0.0], [0.0, 1.0]]}, 2), box
    )
    t0 = time.perf_counter()
    result = run_construction(
        w, 2, 1.5, 0.3, 0.1, 4, config=StairConfig(seed=11, tau=0.9)
    )
    run_wallclock["quadratic"] = time.perf_counter() - t0
    return result


@pytest.fixture(scope="session")
def identity_first_order_run(run_wallclock):
    """Three first-order stages on u0 = id over the unit square, p=1.1."""
    box = Box((0.0, 0.0), (1.0, 1.0))
    u = VectorFieldC1(LinearMapBase(np.eye(2)), box)
    t0 = time.perf_counter()
    result = run_first_order(
        u, 2, 1.1, 0.3, 0.1, 3, config=StairConfig(seed=3, tau=0.9)
    )
    run_wallclock["identity"] = time.perf_counter() - t0
    return result
