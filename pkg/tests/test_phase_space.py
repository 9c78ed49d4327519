import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resgap import phase_space as F
from resgap import potentials as P
from resgap import quantum as Q

H = 1 / 16
GRID = Q.GridSpec(1, 12.0, 1024)


def _gauss(x0, xi0=0.0, grid=GRID, h=H):
    return Q.coherent_state(grid, h, x0, xi0)


def _wide(shape=(161, 161)):
    return F.Window((-4, 4), (-2.0, 2.0), shape)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-0.8, 0.8), st.floats(0.7, 2.0))
def test_normalisation(x0, xi0, width):
    # squeezed packet: still has unit norm, so the field mass must be one
    x = GRID.axis
    u = np.exp(1j * x * xi0 / H - (x - x0) ** 2 / (2 * H * width ** 2))
    u /= np.sqrt(np.vdot(u, u).real * GRID.dx)
    fld = F.fbi_transform(u, GRID, H, F.Window((-4.5, 4.5), (-3.2, 3.2), (241, 241)))
    assert fld.mass() == pytest.approx(1.0, rel=1e-6)
    assert np.all(fld.values >= 0)


def test_gaussian_concentrates_at_its_centre():
    fld = F.fbi_transform(_gauss(0.7), GRID, H, _wide())
    i, j = np.unravel_index(np.argmax(fld.values), fld.values.shape)
    assert abs(fld.window.xs[i] - 0.7) <= 0.05 and abs(fld.window.xis[j]) <= 0.05


def test_plane_wave_profile():
    xi0 = 0.5
    x = GRID.axis
    u = np.exp(1j * x * xi0 / H)
    fld = F.fbi_transform(u, GRID, H, F.Window((-1, 1), (-1.5, 1.5), (5, 301)))
    col = fld.values[2]
    xis = fld.window.xis
    assert abs(xis[np.argmax(col)] - xi0) < 0.011
    # |Tu|^2 is proportional to exp(-(xi - xi0)^2 / h): width sqrt(h) in xi
    mask = col > col.max() * 1e-3
    fit = np.polyfit(xis[mask] - xi0, np.log(col[mask]), 2)
    assert fit[0] == pytest.approx(-1 / H, rel=1e-3)


@settings(max_examples=5, deadline=None)
@given(st.integers(-20, 20))
def test_translation_covariance(k):
    shift = k * GRID.dx
    a = F.fbi_transform(_gauss(0.3), GRID, H, F.Window((-1, 1), (-1, 1), (41, 41)))
    b = F.fbi_transform(_gauss(0.3 + shift), GRID, H, F.Window((-1 + shift, 1 + shift), (-1, 1), (41, 41)))
    np.testing.assert_allclose(a.values, b.values, atol=1e-9 * a.values.max())


def test_mass_away_from_wavefront_is_negligible():
    fld = F.fbi_transform(_gauss(0.0, 0.5), GRID, H, _wide())
    far = np.abs(fld.phase_points()[:, 1] - 0.5) > 1.5
    assert fld.values.ravel()[far].sum() <= 1e-6 * fld.values.sum()


def test_nyquist_guard():
    with pytest.raises(ValueError):
        F.fbi_transform(_gauss(0.0), GRID, H, F.Window((-1, 1), (-8.5, 8.5), (5, 5)))


def test_mass_fraction_limits():
    fld = F.fbi_transform(_gauss(0.2), GRID, H, _wide((41, 41)))
    assert F.mass_fraction_on_set(fld, fld.phase_points(), 1e-9) == pytest.approx(1.0)
    assert F.mass_fraction_on_set(fld, [[0.2, 0.0]], 0.0) == 0.0
    with pytest.raises(ValueError):
        F.mass_fraction_on_set(fld, np.empty((0, 2)), 1.0)


def test_two_dimensional_slice_normalisation():
    grid = Q.GridSpec(2, 4.0, 64)
    h = 0.25
    u = Q.coherent_state(grid, h, [0.3, -0.2], [0.4, 0.1])
    # the field factorises; through the centre the transverse factor is 1,
    # so the (x1, xi1) slice carries unit mass
    w = F.Window((-3.5, 3.5), (-2.8, 3.2), (81, 81), base=(0.0, -0.2, 0.0, 0.1), axes=(0, 2))
    fld = F.fbi_transform(u, grid, h, w)
    assert fld.mass() == pytest.approx(1.0, rel=1e-5)


def test_decay_rate_report():
    spec = P.eckart()
    z = 0.998046875 - 0.062469474967654204j
    rep = F.decay_rate_check(z, spec, 1.0, H)
    assert rep.classical_rate == pytest.approx(2.0, rel=1e-8)
    assert rep.ratio == pytest.approx(1.0, abs=1e-3)
    assert F.decay_rate_check(1.0 + 0j, spec, 1.0, H).ratio == 0.0
    with pytest.raises(ValueError):
        F.decay_rate_check(z, spec, 0.5, H)


def test_deeper_resonances_follow_the_ladder(oracle):
    for n, (a, b) in enumerate(oracle["sech2_poles"]["1/64"]):
        rep = F.decay_rate_check(complex(a, b), P.eckart(), 1.0, 1 / 64)
        assert rep.quantum_rate == pytest.approx(2 * (2 * n + 1), rel=0.01)


def test_outgoing_branches_are_on_the_shell():
    S = F.outgoing_branches_eckart(P.eckart(), 1.0, 4.0)
    np.testing.assert_allclose(S[:, 1] ** 2 + 1 / np.cosh(S[:, 0]) ** 2, 1.0, atol=1e-12)
    np.testing.assert_allclose(S[:, 1], np.tanh(S[:, 0]), atol=1e-12)


def test_csv_and_svg_exports():
    fld = F.fbi_transform(_gauss(0.0), GRID, H, F.Window((-1, 1), (-1, 1), (4, 3)))
    lines = fld.to_csv().splitlines()
    assert lines[0] == "x,xi,value" and len(lines) == 13
    assert fld.to_svg(log_scale=True).startswith("<svg")
