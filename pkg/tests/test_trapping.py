import numpy as np
import pytest

from resgap import dynamics as D
from resgap import potentials as P
from resgap import trapping as T

ECKART = P.eckart()
TWO = P.gaussian_sum([50, 50], [[-4, 0], [4, 0]], [0.3575, 0.3575])


@pytest.fixture(scope="module")
def two_sample():
    return T.sample_trapped_set(TWO, 1.0, 0.01, (32, 32), span=5)


def test_free_particle_escape_time_closed_form():
    spec = P.free(2)
    R = 10.0
    x0, xi0 = np.array([1.0, 2.0]), np.array([0.6, -0.8])
    t, _ = T.escape_times(spec, np.concatenate([x0, xi0])[None], R, 50.0)
    # |x0 + 2 t xi0| = R
    a, b, c = 4 * xi0 @ xi0, 4 * x0 @ xi0, x0 @ x0 - R * R
    assert t[0] == pytest.approx((-b + np.sqrt(b * b - 4 * a * c)) / (2 * a), rel=1e-8)


def test_free_potential_has_empty_trapped_set():
    s = T.sample_trapped_set(P.free(1), 1.0, 0.1)
    assert s.empty and s.metadata["flag"] == "no trapping found"


def test_eckart_trapped_set_is_the_barrier_top():
    s = T.sample_trapped_set(ECKART, 1.0, 0.01)
    assert len(s) >= 1
    assert np.max(np.abs(s.points)) < 1e-8


def test_eckart_below_top_has_no_trapping():
    s = T.sample_trapped_set(ECKART, 0.9, 0.01)
    assert s.empty


def test_eckart_frame_at_fixed_point():
    # linearisation [[0, 2], [2, 0]]: E+ = span(1, 1), E- = span(1, -1), rate 2
    f = T.hyperbolic_frame(ECKART, D.PhasePoint([0.0], [0.0]))
    assert f.converged and f.fixed_point
    up = f.e_plus[:, 0]
    assert abs(abs(up @ np.array([1, 1]) / np.sqrt(2)) - 1) < 1e-8
    lam = T.unstable_jacobian(ECKART, D.PhasePoint([0.0], [0.0]), 3.0, f)
    assert lam == pytest.approx(6.0, rel=1e-8)


def test_escape_certificate_radius_check():
    with pytest.raises(ValueError):
        T.escape_time(TWO, D.PhasePoint([0.0, 0.0], [1.0, 0.0]), escape_radius=1.0)


def test_bounce_orbit_unstable_jacobian(oracle):
    o = oracle["bounce_orbit"]
    rho = D.PhasePoint.from_vec(o["point"])
    for k in (1, 2):
        lam = T.unstable_jacobian(TWO, rho, k * o["period"])
        assert lam == pytest.approx(k * np.log(o["multiplier"]), rel=1e-6)


def test_bounce_orbit_is_trapped():
    rec = T.escape_time(TWO, D.PhasePoint([0.0, 0.0], [1.0, 0.0]), T_max=60.0, tol=T.SAMPLE_TOL)
    assert rec.t_forward > 40 and rec.t_backward > 40


def test_sampled_two_bump_set_lies_on_the_axis(two_sample):
    s = two_sample
    assert len(s) > 10
    pts = s.points
    # the only trapped orbit runs along x2 = 0 with xi2 = 0; finite trapping times
    # leave transverse offsets that the bounces amplify by up to the multiplier
    assert np.max(np.abs(pts[:, [1, 3]])) < 1e-2
    assert np.median(np.abs(pts[:, 1])) < 1e-3
    assert np.all(np.abs(s.energies(TWO) - 1.0) <= 0.01)
    assert np.all(np.minimum(s.t_forward, s.t_backward) >= s.t_trap)


def test_cocycle_of_unstable_jacobian():
    rho = D.PhasePoint([0.0, 0.0], [1.0, 0.0])
    s, t = 2.3, 3.1
    mid = D.flow(TWO, rho, s)
    a = T.unstable_jacobian(TWO, rho, s)
    b = T.unstable_jacobian(TWO, mid, t)
    c = T.unstable_jacobian(TWO, rho, s + t)
    assert abs(a + b - c) <= 1e-6 * max(1.0, abs(c))


def test_cone_invariance_on_bounce_orbit(oracle):
    o = oracle["bounce_orbit"]
    rho = D.PhasePoint.from_vec(o["point"])
    ok, worst = T.cone_invariance(TWO, rho, o["period"] / 2, gamma=0.5)
    assert ok, worst


def test_batched_frames_agree_with_single(two_sample):
    pts = two_sample.points[:5]
    B, res = T.unstable_frames(TWO, pts)
    for p, b in zip(pts, B):
        f = T.hyperbolic_frame(TWO, D.PhasePoint.from_vec(p))
        U = f.weak_unstable()
        Q1, _ = np.linalg.qr(U)
        Q2, _ = np.linalg.qr(b)
        s = np.linalg.svd(Q1.T @ Q2, compute_uv=False)
        assert np.min(s) > 1 - 1e-6
