import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resgap import potentials as P
from resgap import pressure as PR
from resgap import trapping as T

ECKART = P.eckart()
TWO = P.gaussian_sum([50, 50], [[-4, 0], [4, 0]], [0.3575, 0.3575])


@pytest.fixture(scope="module")
def eckart_bundle():
    return PR.orbit_bundle(ECKART, 1.0, 0.01)


@pytest.fixture(scope="module")
def two_bundle():
    S = T.sample_trapped_set(TWO, 1.0, 0.01, (32, 32), span=5)
    return PR.orbit_bundle(TWO, 1.0, 0.01, S)


@pytest.mark.parametrize("method", ["separated", "cover"])
def test_fixed_point_pressure_is_linear(eckart_bundle, method):
    # one hyperbolic fixed point with rate 2: P(s) = -2 s
    c = PR.pressure_curve(ECKART, 1.0, 0.01, [0, 0.5, 1], method=method, bundle=eckart_bundle)
    np.testing.assert_allclose(c.P_values, [0.0, -1.0, -2.0], atol=1e-6)


@pytest.mark.parametrize("method", ["separated", "cover"])
def test_single_orbit_pressure_matches_monodromy(two_bundle, oracle, method):
    o = oracle["bounce_orbit"]
    rate = np.log(o["multiplier"]) / o["period"]
    c = PR.pressure_curve(TWO, 1.0, 0.01, [0, 0.5, 1], method=method, bundle=two_bundle)
    for s, p, u in zip(c.s_values, c.P_values, c.uncertainties):
        assert abs(p + s * rate) <= max(u, 0.03), (s, p, u)
    assert c.is_nonincreasing() and c.is_convex()


def _dist_t(bundle, i, j, k):
    d = bundle.states[i, :k + 1] - bundle.states[j, :k + 1]
    return np.max(np.linalg.norm(d, axis=-1))


@pytest.mark.parametrize("frac", [0.25, 0.5, 1.0])
def test_separated_set_is_separated_and_maximal(two_bundle, frac):
    b = two_bundle
    t = b.metadata["t0"] * 2
    eps = frac * PR.default_grids(b)[0][0]
    sep = PR.build_separated_set(b, eps, t)
    k = b.step(t)
    m = sep.members
    rng = np.random.default_rng(1)
    pairs = rng.choice(m.size, size=(min(200, m.size * m.size), 2))
    for a, c in pairs:
        if a != c:
            assert _dist_t(b, m[a], m[c], k) > eps
    others = np.setdiff1d(np.arange(len(b)), m)
    for i in rng.choice(others, size=min(50, others.size), replace=False):
        assert min(_dist_t(b, i, j, k) for j in m) <= eps


def test_partition_sum_is_log_consistent(two_bundle):
    sep = PR.build_separated_set(two_bundle, 0.5, two_bundle.metadata["t0"])
    for s in (0.0, 0.3, 1.0):
        assert np.log(PR.partition_sum(sep, s)) == pytest.approx(PR.log_partition_sum(sep, s))
    assert PR.partition_sum(sep, 0.0) == len(sep)


def test_empty_trapped_set_raises():
    with pytest.raises(PR.PressureError):
        PR.orbit_bundle(P.free(2), 1.0, 0.01)


def test_eckart_gap_prediction():
    g = PR.predicted_gap(ECKART, 1.0, 0.01)
    assert g.gamma == pytest.approx(1.0, abs=1e-6)
    assert g.verdict == "gap predicted"


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=6))
def test_curve_shape_checks(coeffs):
    s = np.linspace(0, 1, 5)
    # convex and nonincreasing by construction: a - b s + c s^2 with b >= 2c >= 0
    a, b, c = coeffs[0], abs(coeffs[1]) + 2 * abs(coeffs[2]), abs(coeffs[2])
    curve = PR.PressureCurve(s, a - b * s + c * s * s, np.zeros(5), "separated", 1.0, 0.01)
    assert curve.is_nonincreasing(0.0) and curve.is_convex(1e-12)
    flipped = PR.PressureCurve(s, -(a - b * s + c * s * s) + 0.5 * s, np.zeros(5), "x", 1, 0)
    assert not flipped.is_nonincreasing(0.0) or not flipped.is_convex(1e-12) or c == 0


def test_curve_csv_header(eckart_bundle):
    c = PR.pressure_curve(ECKART, 1.0, 0.01, [0, 1], bundle=eckart_bundle)
    lines = c.to_csv().splitlines()
    assert lines[0] == "s,P,uncertainty,method" and len(lines) == 3
