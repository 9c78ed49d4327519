"""Hamiltonian flow of ``p = |xi|^2 + V(x)`` and its differential.

The flow is the one generated by the Hamilton vector field of ``p``, i.e.
``x' = 2 xi`` and ``xi' = -dV(x)``.  Trajectories are integrated with an adaptive
Dormand-Prince 8(5,3) scheme compiled with numba; the variational equation is
carried along in the same state vector when the differential is requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .potentials import PotentialSpec

TOL = 1e-10
TOL_SYMP = 1e-8
TOL_E = 1e-8
T_MAX = 200.0
MAX_STEPS = 2_000_000


class FlowError(RuntimeError):
    """Integration failed (step-size underflow or non-finite state)."""


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if x.shape != xi.shape or x.ndim != 1:
            raise ValueError("x and xi must be vectors of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xi))):
            raise ValueError("phase point has non-finite components")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def vec(self) -> np.ndarray:
        return np.concatenate([self.x, self.xi])

    @classmethod
    def from_vec(cls, v) -> "PhasePoint":
        v = np.asarray(v, float)
        n = v.size // 2
        return cls(v[:n].copy(), v[n:2 * n].copy())


@dataclass(frozen=True)
class TangentBlock:
    J: np.ndarray
    t: float


def symplectic_form(n: int) -> np.ndarray:
    I = np.eye(n)
    Z = np.zeros((n, n))
    return np.block([[Z, I], [-I, Z]])


def symplectic_defect(J: np.ndarray, relative: bool = False) -> float:
    """max |J^T Omega J - Omega|; with ``relative`` divided by max(1, ||J||^2).

    Rounding alone puts eps ||J||^2 into the product, so the absolute value stops
    being informative once the flow has expanded by more than about 1e4.
    """
    n = J.shape[0] // 2
    om = symplectic_form(n)
    d = float(np.max(np.abs(J.T @ om @ J - om)))
    if relative:
        d /= max(1.0, float(np.linalg.norm(J, 2)) ** 2)
    return d


def hamiltonian(spec: PotentialSpec, rho: PhasePoint) -> float:
    return spec.energy(rho.x, rho.xi)


def hamilton_field(spec: PotentialSpec, v: np.ndarray) -> np.ndarray:
    """H_p at the phase-space vector ``v = (x, xi)``."""
    n = spec.dimension
    kind, amps, centers, widths, poly = spec.packed
    grad = np.empty(n)
    hess = np.empty((n, n))
    K.potential_derivs(kind, amps, centers, widths, poly, np.ascontiguousarray(v[:n]),
                       grad, hess, False)
    return np.concatenate([2.0 * v[n:2 * n], -grad])


def _check(spec: PotentialSpec, rho: PhasePoint, t: float):
    if rho.n != spec.dimension:
        raise ValueError(f"{rho.n}D phase point for a {spec.dimension}D potential")
    if abs(t) > T_MAX:
        raise ValueError(f"|t| = {abs(t)} exceeds T_MAX = {T_MAX}")


def _run(spec, y0, t, tol, with_jac, samples=None):
    kind, amps, centers, widths, poly = spec.packed
    times = np.empty(0) if samples is None else np.asarray(samples, float)
    out = np.empty((times.size, y0.size))
    y, t_reached, status, _, _ = K.integrate(
        y0, float(t), spec.dimension, with_jac, kind, amps, centers, widths, poly,
        tol, tol, 0.0, 0.0, times, out, MAX_STEPS, np.empty(0), np.zeros(2, np.int64))
    if status == K.STATUS_UNDERFLOW:
        raise FlowError(f"step-size underflow at t = {t_reached}")
    if status in (K.STATUS_NONFINITE, K.STATUS_MAXSTEPS):
        raise FlowError(f"trajectory left the numeric range at t = {t_reached}")
    return y, out


def flow(spec: PotentialSpec, rho: PhasePoint, t: float, tol: float = TOL) -> PhasePoint:
    """Phi^t(rho)."""
    _check(spec, rho, t)
    y, _ = _run(spec, rho.vec, t, tol, False)
    return PhasePoint.from_vec(y)


def flow_with_jacobian(spec: PotentialSpec, rho: PhasePoint, t: float,
                       tol: float = TOL) -> tuple[PhasePoint, TangentBlock]:
    """Phi^t(rho) together with d Phi^t(rho) in (x, xi) coordinates."""
    _check(spec, rho, t)
    m = 2 * spec.dimension
    y0 = np.concatenate([rho.vec, np.eye(m).ravel()])
    y, _ = _run(spec, y0, t, tol, True)
    return PhasePoint.from_vec(y[:m]), TangentBlock(y[m:].reshape(m, m), float(t))


def trajectory(spec: PotentialSpec, rho: PhasePoint, times, tol: float = TOL,
               with_jacobian: bool = False) -> np.ndarray:
    """States at ``times`` (all of one sign, increasing in magnitude).

    Rows are ``(x, xi)`` or ``(x, xi, vec(J))`` when ``with_jacobian``.
    """
    times = np.asarray(times, float)
    if times.size == 0:
        return np.empty((0, 2 * spec.dimension))
    _check(spec, rho, times[-1])
    m = 2 * spec.dimension
    y0 = rho.vec if not with_jacobian else np.concatenate([rho.vec, np.eye(m).ravel()])
    _, out = _run(spec, y0, times[-1], tol, with_jacobian, samples=times)
    return out


def flow_batch(spec: PotentialSpec, points: np.ndarray, times, tol: float = TOL,
               with_jacobian: bool = False) -> np.ndarray:
    """Sample many trajectories; returns array (npoints, ntimes, state_dim)."""
    points = np.ascontiguousarray(points, float)
    times = np.asarray(times, float)
    m = 2 * spec.dimension
    if with_jacobian:
        eye = np.broadcast_to(np.eye(m).ravel(), (points.shape[0], m * m))
        y0 = np.ascontiguousarray(np.hstack([points, eye]))
    else:
        y0 = points
    kind, amps, centers, widths, poly = spec.packed
    out = np.empty((points.shape[0], times.size, y0.shape[1]))
    status = np.empty(points.shape[0], dtype=np.int64)
    K.sample_batch(y0, times, spec.dimension, with_jacobian, kind, amps, centers,
                   widths, poly, tol, tol, MAX_STEPS, out, status)
    bad = np.nonzero(status != K.STATUS_DONE)[0]
    if bad.size:
        raise FlowError(f"{bad.size} trajectories failed (first index {bad[0]})")
    return out
