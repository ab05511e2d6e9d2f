import numpy as np
import pytest

from normalsym.errors import DepthExceeded
from normalsym.geometry import GenericChart
from normalsym.jets_phase import (MAX_PHASE_DEPTH, chart_change_jet, coincidence_tensor,
                                  phase_jet)
from normalsym.symbols import Covector, sample_chart_points


def _covectors(M, rng, n, scale=5.0):
    grid = sample_chart_points(M, 8).reshape(-1, M.dim)
    x = grid[rng.integers(0, len(grid), size=n)]
    zeta = rng.normal(size=(n, M.dim)) * scale
    return Covector(M, x, zeta)


def _keys(d, lo, hi, alpha_zero=False):
    from normalsym.taylor import multi_indices
    out = []
    for m in multi_indices(2 * d, hi):
        a, b = m[:d], m[d:]
        if lo <= sum(b) and (not alpha_zero or sum(a) == 0):
            out.append((a, b))
    return out


@pytest.mark.parametrize("name", ["circle", "torus", "sphere", "stereo"])
def test_phase_zero_alpha_vanishes(name, request, rng):
    M = request.getfixturevalue(name)
    xi = _covectors(M, rng, 50)
    pj = phase_jet(xi, 4)
    bound = 1e-6 * (1 + np.linalg.norm(xi.zeta, axis=-1))
    for key in _keys(M.dim, 2, 4, alpha_zero=True):
        assert np.all(np.abs(pj[key]) <= bound), key


def test_phase_linear_on_flat_torus(torus, rng):
    xi = _covectors(torus, rng, 10)
    pj = phase_jet(xi, 4)
    for key in _keys(2, 2, 4):
        assert np.all(pj[key] == 0)
    # first beta derivatives are the covector itself, x-derivatives of those vanish
    assert np.allclose(pj[((0, 0), (1, 0))], xi.zeta[:, 0])
    assert np.allclose(pj[((1, 0), (0, 1))], 0)


def test_phase_sphere_curvature_tensor(sphere, rng):
    """|alpha| = 1, |beta| = 2 entries contract zeta with the coincidence tensor;
    checked by the exact jet route and by nested-log finite differences."""
    xi = _covectors(sphere, rng, 6, scale=2.0)
    ex = phase_jet(xi, 3)
    fd = phase_jet(xi, 3, exact=False)
    # on the unit sphere R^k_{mln} = d_kl d_mn - d_kn d_ml, written out independently
    d = np.eye(2)
    R = np.einsum("kl,mn->kmln", d, d) - np.einsum("kn,ml->kmln", d, d)
    T = (np.einsum("klmn->knlm", R) + np.einsum("kmln->knlm", R)) / 3.0
    for n in range(2):
        for l in range(2):
            for m in range(l, 2):
                a = tuple(int(i == n) for i in range(2))
                b = tuple(int(i == l) + int(i == m) for i in range(2))
                want = xi.zeta @ T[:, n, l, m]
                assert np.allclose(ex[(a, b)], want, atol=1e-10)
                assert np.allclose(fd[(a, b)], want, atol=1e-5 * (1 + np.abs(xi.zeta).max()))


def test_phase_homogeneity(sphere, stereo, rng):
    for M, tol in [(sphere, 0.0), (stereo, 0.0)]:
        xi = _covectors(M, rng, 8)
        a, b = phase_jet(xi, 3), phase_jet(xi.scaled(2.0), 3)
        for k in a.entries:
            assert np.allclose(b.entries[k], 2 * a.entries[k], rtol=1e-12, atol=1e-12)


def test_phase_depth_limit(sphere, rng):
    with pytest.raises(DepthExceeded):
        phase_jet(_covectors(sphere, rng, 1), MAX_PHASE_DEPTH + 1)


def test_chart_change_flat(torus, circle):
    cj = chart_change_jet(torus, np.array([0.3, 1.2]))
    assert np.allclose(cj.first, np.eye(2), atol=1e-10)
    assert np.all(cj.second == 0) and np.max(np.abs(cj.third)) == 0
    cc = chart_change_jet(circle, np.array([[0.4], [2.0]]))
    assert np.abs(cc.third).max() == 0 and cc.discrepancy < 1e-8


def test_chart_change_sphere(sphere):
    x = np.array([[1.0, 0.3], [2.0, -1.0]])
    cj = chart_change_jet(sphere, sphere.from_chart(x))
    assert cj.discrepancy < 1e-5
    assert np.allclose(cj.first, np.eye(2), atol=1e-10)
    T = coincidence_tensor(sphere.curvature(sphere.from_chart(x)))
    assert np.allclose(cj.third, T)
    # a nonzero entry: d/dz^1 of d^2 z^1/dz^2 dz^2 = -2/3 on the unit sphere
    assert cj.third[0, 0, 0, 1, 1] == pytest.approx(-2 / 3, abs=1e-12)


def test_chart_change_generic_chart():
    """Conformal metric with black-box geometry: both routes agree."""
    def metric(x):
        f = np.exp(0.2 * x[..., 0] ** 2 + 0.1 * x[..., 1])
        return f[..., None, None] * np.eye(2)
    M = GenericChart(metric_fn=metric, ndim=2, injectivity=0.5, bounds=((-1, 1), (-1, 1)))
    cj = chart_change_jet(M, np.array([0.1, -0.2]), tol=1e-4)
    assert cj.discrepancy < 1e-4
