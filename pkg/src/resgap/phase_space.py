"""FBI (Gaussian wave-packet) transforms of grid states and simple microlocal checks.

The transform is

    Tu(x, xi) = (pi h)^{-n/4} int exp(i <x - y, xi> / h - |x - y|^2 / (2h)) u(y) dy,

normalised so that int |Tu|^2 dx dxi / (2 pi h)^n = ||u||^2.  The Husimi field is
|Tu|^2 on a phase-space window (n = 1) or on a two-dimensional slice (n = 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import flow_batch, hamilton_field
from .potentials import PotentialSpec, potential_on_points
from .quantum import GridSpec
from .trapping import TrappedSample, escape_times, unstable_frames


@dataclass(frozen=True)
class Window:
    """Rectangle [x_lo, x_hi] x [xi_lo, xi_hi] sampled on an (nx, nxi) grid.

    For n = 2 it is the slice through ``base = (x1, x2, xi1, xi2)`` in which the
    coordinates ``axes = (i, j)`` of the phase-space vector vary (default: x1 and xi1).
    """
    x_range: tuple[float, float]
    xi_range: tuple[float, float]
    shape: tuple[int, int] = (121, 121)
    base: tuple | None = None
    axes: tuple[int, int] = (0, 1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.shape[0])

    @property
    def xis(self) -> np.ndarray:
        return np.linspace(*self.xi_range, self.shape[1])

    @property
    def cell(self) -> float:
        dx = (self.x_range[1] - self.x_range[0]) / max(self.shape[0] - 1, 1)
        dxi = (self.xi_range[1] - self.xi_range[0]) / max(self.shape[1] - 1, 1)
        return dx * dxi


@dataclass(frozen=True)
class HusimiField:
    window: Window
    values: np.ndarray
    h: float
    normalization: float
    n: int = 1
    metadata: dict = field(default_factory=dict)

    def phase_points(self) -> np.ndarray:
        """Coordinates (x, xi) of every field sample for n = 1, or the full 2n-vector."""
        X, XI = np.meshgrid(self.window.xs, self.window.xis, indexing="ij")
        if self.n == 1:
            return np.column_stack([X.ravel(), XI.ravel()])
        base = np.array(self.window.base, float)
        pts = np.tile(base, (X.size, 1))
        i, j = self.window.axes
        pts[:, i] = X.ravel()
        pts[:, j] = XI.ravel()
        return pts

    def mass(self) -> float:
        """Riemann sum of the field with the (2 pi h)^-n phase-space measure.

        For n = 2 this is a slice integral (measure of the two varying coordinates).
        """
        return float(self.values.sum() * self.window.cell / (2 * np.pi * self.h))

    def to_csv(self) -> str:
        lines = ["x,xi,value"]
        for x, xi, v in zip(*np.meshgrid(self.window.xs, self.window.xis, indexing="ij"),
                            self.values):
            for a, b, c in zip(np.atleast_1d(x), np.atleast_1d(xi), np.atleast_1d(v)):
                lines.append(f"{a:.10g},{b:.10g},{c:.10g}")
        return "\n".join(lines) + "\n"

    def to_svg(self, log_scale: bool = False, size: int = 360) -> str:
        v = self.values.copy()
        if log_scale:
            v = np.log10(np.maximum(v, v.max() * 1e-8))
        v = (v - v.min()) / max(np.ptp(v), 1e-300)
        nx, nxi = v.shape
        cw, ch = size / nx, size / nxi
        rects = []
        for i in range(nx):
            for j in range(nxi):
                g = int(255 * (1 - v[i, j]))
                rects.append(f'<rect x="{i * cw:.2f}" y="{(nxi - 1 - j) * ch:.2f}" '
                             f'width="{cw + 0.05:.2f}" height="{ch + 0.05:.2f}" '
                             f'fill="rgb({g},{g},255)"/>')
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
                + "".join(rects) + "</svg>\n")


def _check_nyquist(grid: GridSpec, h: float, window: Window):
    kmax = np.pi / grid.dx
    ximax = max(abs(window.xi_range[0]), abs(window.xi_range[1]))
    # the packet has xi-width sqrt(h); keep 6 widths inside the grid band
    if ximax + 6 * np.sqrt(h) > h * kmax:
        raise ValueError(f"window reaches |xi| = {ximax:g}, beyond what the grid resolves "
                         f"({h * kmax - 6 * np.sqrt(h):.3g})")


def fbi_transform(u, grid: GridSpec, h: float, window: Window, *, chunk: int = 64) -> HusimiField:
    """|Tu|^2 on ``window``.

    The y-integral is a Riemann sum on the state's grid, truncated to the
    Gaussian's support (|x - y| <= 9 sqrt(h)).
    """
    u = np.asarray(u, complex)
    _check_nyquist(grid, h, window)
    c = (np.pi * h) ** (-grid.n / 4)
    ax = grid.axis
    cut = 9 * np.sqrt(h)
    xs, xis = window.xs, window.xis
    out = np.empty((xs.size, xis.size))
    if grid.n == 1:
        for i, x in enumerate(xs):
            m = np.abs(ax - x) <= cut
            y = ax[m]
            g = np.exp(-(x - y) ** 2 / (2 * h)) * u[m]
            ph = np.exp(1j * np.outer(xis, x - y) / h)
            out[i] = np.abs(c * grid.dx * (ph @ g)) ** 2
        return HusimiField(window, out, h, c, 1)
    if window.base is None:
        raise ValueError("2D windows need a base point for the slice")
    base = np.asarray(window.base, float)
    U = u.reshape(grid.N, grid.N)
    i_ax, j_ax = window.axes
    for a, x in enumerate(xs):
        for b0 in range(0, xis.size, chunk):
            xb = xis[b0:b0 + chunk]
            pts = np.tile(base, (xb.size, 1))
            pts[:, i_ax] = x
            pts[:, j_ax] = xb
            vals = np.empty(xb.size, complex)
            for k, p in enumerate(pts):
                m1 = np.abs(ax - p[0]) <= cut
                m2 = np.abs(ax - p[1]) <= cut
                y1, y2 = ax[m1], ax[m2]
                g1 = np.exp(1j * (p[0] - y1) * p[2] / h - (p[0] - y1) ** 2 / (2 * h))
                g2 = np.exp(1j * (p[1] - y2) * p[3] / h - (p[1] - y2) ** 2 / (2 * h))
                vals[k] = g1 @ U[np.ix_(m1, m2)] @ g2
            out[a, b0:b0 + chunk] = np.abs(c * grid.cell * vals) ** 2
    return HusimiField(window, out, h, c, 2)


def mass_fraction_on_set(field_: HusimiField, S, delta_nbhd: float, *, spec: PotentialSpec | None = None,
                         energy: float | None = None, delta: float | None = None) -> float:
    """Share of the field mass within ``delta_nbhd`` of the point cloud ``S``.

    With ``spec``, ``energy`` and ``delta`` the field is first restricted to the
    energy shell |p - E| <= delta, and the fraction is relative to that mass.
    """
    S = np.atleast_2d(np.asarray(S, float))
    if S.size == 0:
        raise ValueError("empty reference set")
    pts = field_.phase_points()
    w = field_.values.ravel().copy()
    if spec is not None and energy is not None and delta is not None:
        n = spec.dimension
        x = pts[:, :n]
        xi = pts[:, n:]
        p = (xi * xi).sum(1) + potential_on_points(spec, x)
        w[np.abs(p - energy) > delta] = 0.0
    total = w.sum()
    if total <= 0:
        return 0.0
    if delta_nbhd <= 0:
        return 0.0
    d, _ = cKDTree(S).query(pts, distance_upper_bound=delta_nbhd)
    return float(w[np.isfinite(d)].sum() / total)


def outgoing_branches_eckart(spec: PotentialSpec, E: float, x_max: float, n: int = 2001) -> np.ndarray:
    """Unstable manifold of the barrier top at E = max V for a single 1D eckart bump:
    xi = sqrt(E - V(x)) sign(x), which is the forward-escaping branch on both sides."""
    if spec.dimension != 1 or spec.kind != "eckart" or len(spec.bumps) != 1:
        raise ValueError("closed form only for a single 1D eckart bump")
    b = spec.bumps[0]
    x = np.linspace(-x_max, x_max, n) + b.center[0]
    V = potential_on_points(spec, x)
    xi = np.sign(x - b.center[0]) * np.sqrt(np.maximum(E - V, 0.0))
    return np.column_stack([x, xi])


def outgoing_tail(spec: PotentialSpec, sample: TrappedSample, *, T: float = 20.0,
                  n_times: int = 40, radius: float | None = None) -> np.ndarray:
    """Points of Gamma^+ (backward-trapped set) near K_E for n = 2.

    Points of the sample are pushed a little along their unstable directions
    (which keeps them backward trapped) and flowed forward over [0, T]; the
    forward flow of a backward-trapped point stays in Gamma^+.
    """
    pts = sample.points
    if pts.size == 0:
        return np.empty((0, 2 * spec.dimension))
    bases, res = unstable_frames(spec, pts)
    ok = res < 1e-4
    pts, bases = pts[ok], bases[ok]
    offs = []
    for sgn in (-1, 1):
        for a in (1e-3, 1e-2):
            offs.append(pts + sgn * a * bases[:, :, 0])
    seeds = np.concatenate([pts] + offs)
    if radius is not None:
        tb, _ = escape_times(spec, seeds, radius, T, -1)
        seeds = seeds[np.isinf(tb)]
    times = np.linspace(T / n_times, T, n_times)
    traj = flow_batch(spec, seeds, times)
    return np.concatenate([seeds, traj.reshape(-1, traj.shape[-1])])


@dataclass(frozen=True)
class DecayReport:
    quantum_rate: float
    classical_rate: float
    ratio: float
    source: str


def fixed_point_exponent(spec: PotentialSpec, E: float, delta: float = 1e-6) -> float | None:
    """Unstable rate at a critical point of V with V = E, or None when there is none.

    Only the barrier tops at bump centres are tried; the rate is the largest real
    eigenvalue of the linearised Hamilton field there.
    """
    n = spec.dimension
    for b in spec.bumps:
        x0 = np.asarray(b.center, float)
        v0 = np.concatenate([x0, np.zeros(n)])
        if np.linalg.norm(hamilton_field(spec, v0)) > 1e-8:
            continue
        if abs(float(potential_on_points(spec, x0[None])[0]) - E) > delta:
            continue
        step = 1e-5
        A = np.column_stack([(hamilton_field(spec, v0 + step * e) - hamilton_field(spec, v0 - step * e))
                             / (2 * step) for e in np.eye(2 * n)])
        return float(np.max(np.linalg.eigvals(A).real))
    return None


def decay_rate_check(z, spec: PotentialSpec, E: float, h: float, *,
                     classical_rate: float | None = None, delta: float = 1e-6) -> DecayReport:
    """Compare -2 Im z / h with the classical expansion rate.

    ``z`` may be a complex number or a resonance entry.  Without an explicit
    ``classical_rate`` the barrier-top exponent is used when E sits on a
    critical value of V.
    """
    z = complex(getattr(z, "z", z))
    source = "given"
    if classical_rate is None:
        classical_rate = fixed_point_exponent(spec, E, delta)
        source = "fixed point"
    if classical_rate is None or not np.isfinite(classical_rate) or classical_rate <= 0:
        raise ValueError("classical exponent unavailable")
    q = -2 * z.imag / h
    return DecayReport(float(q), float(classical_rate), float(q / classical_rate), source)
