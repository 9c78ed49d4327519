import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from resgap import dynamics as D
from resgap import potentials as P

THREE = P.three_bump_for_ratio(8, amp_over_energy=50.0)
ECKART = P.eckart()


def _field(spec):
    return lambda t, y: D.hamilton_field(spec, y)


def test_flow_matches_scipy_dop853():
    rho = D.PhasePoint([0.3, -2.0], [0.9, 0.3])
    ref = solve_ivp(_field(THREE), (0, 20), rho.vec, method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    assert np.max(np.abs(D.flow(THREE, rho, 20.0, 1e-12).vec - ref)) < 1e-8


def test_eckart_separatrix_closed_form():
    # on the incoming branch xi = -tanh x of E = 1, d/dt sinh x = -2 sinh x
    x0 = -2.0
    rho = D.PhasePoint([x0], [np.tanh(-x0)])
    for t in (0.5, 1.0, 2.0):
        x = D.flow(ECKART, rho, t).x[0]
        assert np.sinh(x) == pytest.approx(np.sinh(x0) * np.exp(-2 * t), rel=1e-8)


def test_free_flow_is_straight_line():
    rho = D.PhasePoint([1.0, -1.0], [0.3, 0.4])
    out = D.flow(P.free(2), rho, 3.0)
    np.testing.assert_allclose(out.x, rho.x + 6.0 * rho.xi, atol=1e-12)
    np.testing.assert_allclose(out.xi, rho.xi, atol=1e-14)


def test_time_limit_and_dimension_checks():
    with pytest.raises(ValueError):
        D.flow(ECKART, D.PhasePoint([0.0], [1.0]), 10 * D.T_MAX)
    with pytest.raises(ValueError):
        D.flow(THREE, D.PhasePoint([0.0], [1.0]), 1.0)
    with pytest.raises(ValueError):
        D.PhasePoint([np.nan], [0.0])


def test_reversibility():
    rho = D.PhasePoint([0.2, 0.1], [0.6, -0.7])
    back = D.flow(THREE, D.flow(THREE, rho, 7.0), -7.0)
    np.testing.assert_allclose(back.vec, rho.vec, atol=1e-8)


phase = st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 2 * np.pi), st.floats(0.5, 1.5))


def _point(p):
    x1, x2, ang, E = p
    V = P.potential_on_points(THREE, np.array([[x1, x2]]))[0]
    if V >= E:
        return None
    r = np.sqrt(E - V)
    return D.PhasePoint([x1, x2], [r * np.cos(ang), r * np.sin(ang)])


@settings(max_examples=25, deadline=None)
@given(phase, st.floats(0.5, 15.0))
def test_energy_and_symplecticity(p, t):
    rho = _point(p)
    if rho is None:
        return
    E0 = D.hamiltonian(THREE, rho)
    out, blk = D.flow_with_jacobian(THREE, rho, t)
    assert abs(D.hamiltonian(THREE, out) - E0) <= 1e-8 * (1 + t)
    assert D.symplectic_defect(blk.J) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(phase, st.floats(0.2, 6.0), st.floats(0.2, 6.0))
def test_cocycle(p, s, t):
    rho = _point(p)
    if rho is None:
        return
    mid, Js = D.flow_with_jacobian(THREE, rho, s)
    _, Jt = D.flow_with_jacobian(THREE, mid, t)
    _, Jst = D.flow_with_jacobian(THREE, rho, s + t)
    err = np.max(np.abs(Jt.J @ Js.J - Jst.J)) / max(1.0, np.max(np.abs(Jst.J)))
    assert err <= 1e-6


def test_trajectory_samples_agree_with_flow():
    rho = D.PhasePoint([0.1, 0.2], [0.5, 0.7])
    times = np.linspace(0.5, 5, 10)
    tr = D.trajectory(THREE, rho, times)
    for t, row in zip(times, tr):
        np.testing.assert_allclose(row, D.flow(THREE, rho, t).vec, atol=1e-8)
    batch = D.flow_batch(THREE, rho.vec[None], times)
    np.testing.assert_allclose(batch[0], tr, atol=1e-10)
