"""Shared fixtures: materials, coarse grids, and manufactured solutions."""

import numpy as np
import pytest

from heatflux import material as material_mod
from heatflux.forward import Grid


@pytest.fixture(scope="session")
def builtin_material():
    return material_mod.builtin_material()


def make_constant_material(alpha: float, u_top: float = 8.0e9):
    """Material with constant diffusivity `alpha` covering [0, u_top].

    Constant capacity and conductivity give alpha'(u) = k/C everywhere, which
    makes manufactured solutions exactly representable.
    """
    cap = 3.8e6
    theta_top = material_mod.THETA_REF + u_top / cap
    theta = np.linspace(material_mod.THETA_REF, theta_top, 33)
    return material_mod.build_material(
        theta, np.full(theta.shape, cap), np.full(theta.shape, alpha * cap)
    )


@pytest.fixture(scope="session")
def constant_material():
    return make_constant_material(4.0e-6)


@pytest.fixture
def coarse_grid():
    return Grid(L=0.05, T=2.0, nx=21, nt=40)
