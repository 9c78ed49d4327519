"""Independent reference values, recomputed by tests and frozen in data/oracles.json."""

import json
from pathlib import Path

import mpmath as mp
import numpy as np
from scipy.integrate import solve_ivp

DATA = Path(__file__).parent / "data" / "oracles.json"


def sech2_poles(h, count=3, dps=40):
    """Poles of the transmission coefficient of -h^2 d^2 + sech^2 x, as energies.

    With nu = 1/h^2 and mu = sqrt(1/4 - nu), the transmission amplitude is
    Gamma(1/2 - ik + mu) Gamma(1/2 - ik - mu) / (Gamma(-ik) Gamma(1 - ik)); its
    poles are located by a root search on the reciprocal.
    """
    mp.mp.dps = dps
    nu = mp.mpf(1) / mp.mpf(h) ** 2
    mu = mp.sqrt(mp.mpf(1) / 4 - nu)

    def inv_t(k):
        a = -1j * k
        return mp.gamma(a) * mp.gamma(1 + a) * mp.rgamma(mp.mpf(1) / 2 + a + mu) \
            * mp.rgamma(mp.mpf(1) / 2 + a - mu)

    out = []
    for n in range(count):
        # rough start off the exact ladder
        k0 = mp.mpc(float(mp.sqrt(nu)) - 0.1, -(n + 0.5) - 0.1)
        k = mp.findroot(inv_t, k0)
        E = complex(mp.mpf(h) ** 2 * k ** 2)
        out.append(E)
    return out


def _two_bump_field(A, c, w):
    def dV(x):
        g = np.zeros(2)
        H = np.zeros((2, 2))
        for s in (-1, 1):
            d = x - np.array([s * c, 0.0])
            e = A * np.exp(-d @ d / (2 * w * w))
            g += -e * d / (w * w)
            H += e * (np.outer(d, d) / w ** 4 - np.eye(2) / w ** 2)
        return g, H

    def rhs(t, y):
        x, xi = y[:2], y[2:4]
        g, H = dV(x)
        J = y[4:].reshape(4, 4)
        A_ = np.zeros((4, 4))
        A_[:2, 2:] = 2 * np.eye(2)
        A_[2:, :2] = -H
        return np.concatenate([2 * xi, -g, (A_ @ J).ravel()])
    return rhs


def bounce_orbit(A=50.0, c=4.0, w=0.3575, E=1.0):
    """Period and unstable multiplier of the orbit bouncing on the x1-axis between
    two Gaussian bumps at (+-c, 0), from scipy's DOP853 and the monodromy matrix."""
    rhs = _two_bump_field(A, c, w)
    V0 = 2 * A * np.exp(-c * c / (2 * w * w))
    y0 = np.concatenate([[0.0, 0.0, np.sqrt(E - V0), 0.0], np.eye(4).ravel()])

    def cross(t, y):
        return y[0]
    cross.direction = 1
    sol = solve_ivp(rhs, (0, 60), y0, method="DOP853", rtol=1e-13, atol=1e-13,
                    events=cross, dense_output=True)
    T = float(sol.t_events[0][1] if sol.t_events[0][0] < 1e-9 else sol.t_events[0][0])
    yT = solve_ivp(rhs, (0, T), y0, method="DOP853", rtol=1e-13, atol=1e-13).y[:, -1]
    M = yT[4:].reshape(4, 4)
    mult = float(np.max(np.abs(np.linalg.eigvals(M))))
    return {"period": T, "multiplier": mult, "point": y0[:4].tolist(),
            "amplitude": A, "center": c, "width": w}


def compute():
    out = {"sech2_poles": {}}
    for name, h in (("1/16", 1 / 16), ("1/32", 1 / 32), ("1/64", 1 / 64)):
        out["sech2_poles"][name] = [[z.real, z.imag] for z in sech2_poles(h)]
    out["bounce_orbit"] = bounce_orbit()
    return out


def load():
    return json.loads(DATA.read_text())


if __name__ == "__main__":
    DATA.write_text(json.dumps(compute(), indent=2) + "\n")
