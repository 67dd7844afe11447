import numpy as np
import pytest

from splatsim.core import SimConfig
from splatsim.synth import make_block


@pytest.fixture(scope="session")
def small_config():
    # coarse grid keeps unit tests fast; domain is always the 2-unit cube
    return SimConfig(grid_resolution=16)


@pytest.fixture()
def rest_block():
    return make_block(counts=(6, 6, 6), size=(0.4, 0.4, 0.4), young=1e4)


def quad_bspline(x):
    """Reference 1D quadratic B-spline, |x| in grid units from the node."""
    ax = abs(x)
    if ax < 0.5:
        return 0.75 - ax * ax
    if ax < 1.5:
        return 0.5 * (1.5 - ax) ** 2
    return 0.0


def quad_bspline_grad(x):
    """d/dx of quad_bspline (grid units)."""
    ax = abs(x)
    s = 1.0 if x >= 0 else -1.0
    if ax < 0.5:
        return -2.0 * ax * s
    if ax < 1.5:
        return -(1.5 - ax) * s
    return 0.0


def stencil_nodes(pos, dx, origin=-1.0):
    """Support node indices of a position for the quadratic kernel, brute
    force: every node whose 1D weight is nonzero on each axis."""
    nodes = int(round(2.0 / dx)) + 1
    out = []
    for a in range(3):
        u = (pos[a] - origin) / dx
        axis = [i for i in range(nodes) if quad_bspline(u - i) > 0.0]
        out.append(axis)
    return out
