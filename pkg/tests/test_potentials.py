import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resgap import potentials as P
from resgap import _kernels as K

SPECS = {
    "eckart": P.eckart(1.3, 0.8),
    "three": P.three_bump_for_ratio(8, amp_over_energy=50.0),
    "poly": P.PotentialSpec("custom_polynomial_times_gaussian",
                            (P.Bump(2.0, (0.5, -0.2), 1.1, (0.3, -0.1)),), 2),
}


def test_eckart_profile():
    x = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(P.potential_on_points(SPECS["eckart"], x[:, None]),
                               1.3 / np.cosh(x / 0.8) ** 2, rtol=1e-14)


def test_three_bump_geometry():
    s = SPECS["three"]
    c = np.array([b.center for b in s.bumps])
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    np.testing.assert_allclose(d[np.triu_indices(3, 1)], 8.0)
    # the level set V = E sits at distance a = 1 from each centre
    assert P.eval_potential(s, c[0] + np.array([0.0, 1.0])) == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("name", sorted(SPECS))
@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_derivatives_match_finite_differences(name, x):
    s = SPECS[name]
    x = np.array(x[:s.dimension])
    g = P.eval_potential(s, x, 1)
    H = P.eval_potential(s, x, 2)
    step = 1e-5
    for i in range(s.dimension):
        e = np.zeros(s.dimension)
        e[i] = step
        fd = (P.eval_potential(s, x + e) - P.eval_potential(s, x - e)) / (2 * step)
        assert g[i] == pytest.approx(fd, rel=1e-6, abs=1e-7)
        fdg = (P.eval_potential(s, x + e, 1) - P.eval_potential(s, x - e, 1)) / (2 * step)
        np.testing.assert_allclose(H[:, i], fdg, rtol=1e-5, atol=1e-6)
    # compiled kernel agrees
    kind, amps, centers, widths, poly = s.packed
    gk, Hk = np.empty(s.dimension), np.empty((s.dimension, s.dimension))
    K.potential_derivs(kind, amps, centers, widths, poly, x.astype(float), gk, Hk, True)
    np.testing.assert_allclose(gk, g, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(Hk, H, rtol=1e-12, atol=1e-14)


def test_complex_continuation_is_holomorphic():
    s = SPECS["eckart"]
    z = np.array([[0.4 + 0.1j]])
    v = P.potential_on_points(s, z)[0]
    assert v == pytest.approx(1.3 / np.cosh(z[0, 0] / 0.8) ** 2, rel=1e-13)


@pytest.mark.parametrize("bad", [
    {"kind": "gaussian_sum", "dimension": 1, "bumps": [{"amplitude": 1, "center": [0], "width": -1}]},
    {"kind": "nope", "dimension": 1, "bumps": []},
    {"kind": "eckart", "dimension": 3, "bumps": []},
    {"kind": "eckart", "dimension": 1, "bumps": [{"amplitude": 1, "center": [0, 1], "width": 1}]},
])
def test_invalid_specs_rejected(bad):
    with pytest.raises(P.PotentialError):
        P.PotentialSpec.from_dict(bad)


@pytest.mark.parametrize("name", sorted(SPECS))
def test_json_round_trip(name):
    s = SPECS[name]
    back = P.PotentialSpec.from_json(s.to_json())
    assert back == s and back.digest() == s.digest()
    assert json.loads(s.to_json())["format"] == P.FORMAT_VERSION


def test_effective_radius_bounds_the_tail():
    s = SPECS["three"]
    R = s.effective_radius
    ang = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    pts = (R + 0.01) * np.column_stack([np.cos(ang), np.sin(ang)])
    assert np.max(P.potential_on_points(s, pts)) < P.TOL_V * s.vmax
