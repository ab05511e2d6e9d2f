import numpy as np
import pytest

from normalsym.geometry import Circle, FlatTorus, Sphere2, stereographic_sphere_chart


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def circle():
    return Circle()


@pytest.fixture(scope="session")
def torus():
    return FlatTorus()


@pytest.fixture(scope="session")
def sphere():
    return Sphere2()


@pytest.fixture(scope="session")
def stereo():
    return stereographic_sphere_chart()


def random_tangent(rng, n, d, max_norm):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v * rng.uniform(0.0, max_norm, size=(n, 1))
