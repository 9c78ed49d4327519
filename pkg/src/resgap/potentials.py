"""Scattering potentials built from radial bumps.

Every potential is a finite sum ``V(x) = sum_j A_j g(|x - c_j|^2 / w_j^2)`` where the
profile ``g`` depends on the family:

* ``gaussian_sum``: ``g(q) = exp(-q / 2)``
* ``eckart``: ``g(q) = sech^2(sqrt(q))`` (the classical ``cosh^-2`` barrier in 1D)
* ``custom_polynomial_times_gaussian``: ``g(q) = (1 + sum_k a_k q^k) exp(-q / 2)``

All three extend holomorphically to a complex neighbourhood of the real axis, which
is what global complex scaling needs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1

KINDS = ("gaussian_sum", "eckart", "custom_polynomial_times_gaussian")
KIND_CODES = {name: code for code, name in enumerate(KINDS)}

#: relative size of |V| that counts as "outside the potential"
TOL_V = 1e-10


class PotentialError(ValueError):
    """Raised for malformed potential descriptions."""


@dataclass(frozen=True)
class Bump:
    amplitude: float
    center: tuple[float, ...]
    width: float
    poly: tuple[float, ...] = ()


@dataclass(frozen=True)
class PotentialSpec:
    kind: str
    bumps: tuple[Bump, ...]
    dimension: int
    _packed: tuple = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise PotentialError(f"unknown potential kind {self.kind!r}")
        if self.dimension not in (1, 2):
            raise PotentialError(f"dimension must be 1 or 2, got {self.dimension}")
        for b in self.bumps:
            if len(b.center) != self.dimension:
                raise PotentialError(
                    f"bump center {b.center} does not match dimension {self.dimension}"
                )
            if not (b.amplitude > 0 and np.isfinite(b.amplitude)):
                raise PotentialError(f"amplitude must be positive, got {b.amplitude}")
            if not (b.width > 0 and np.isfinite(b.width)):
                raise PotentialError(f"width must be positive, got {b.width}")
            if b.poly and self.kind != "custom_polynomial_times_gaussian":
                raise PotentialError("polynomial coefficients only apply to "
                                     "custom_polynomial_times_gaussian")
        object.__setattr__(self, "_packed", _pack(self))

    # -- numeric views -------------------------------------------------------
    @property
    def packed(self) -> tuple:
        """(kind_code, amps, centers, widths, poly) arrays for compiled kernels."""
        return self._packed

    @property
    def is_free(self) -> bool:
        return len(self.bumps) == 0

    @property
    def holomorphic(self) -> bool:
        return True

    @property
    def vmax(self) -> float:
        """Upper bound for max V (exact for a single bump with nonnegative profile)."""
        if self.is_free:
            return 0.0
        amps = np.array([b.amplitude for b in self.bumps])
        if self.kind == "custom_polynomial_times_gaussian":
            qs = np.linspace(0.0, 60.0, 6001)
            peak = max(np.max(np.abs(_profile(self.kind, qs, np.array(b.poly))))
                       for b in self.bumps)
            return float(amps.sum() * peak)
        return float(amps.sum())

    @property
    def effective_radius(self) -> float:
        """Smallest R0 with sup_{|x|>R0} |V| < TOL_V * max|V| (sampled)."""
        if self.is_free:
            return 0.0
        scale = self.vmax
        best = 0.0
        qs = np.linspace(0.0, 4000.0, 400001)
        for b in self.bumps:
            g = np.abs(_profile(self.kind, qs, np.array(b.poly))) * b.amplitude
            # each bump decays below tol/m individually so the sum does too
            outside = np.nonzero(g >= TOL_V * scale / len(self.bumps))[0]
            q_last = qs[outside[-1]] if outside.size else 0.0
            best = max(best, np.linalg.norm(b.center) + b.width * np.sqrt(q_last))
        return float(best)

    def energy(self, x, xi) -> float:
        x = np.asarray(x, float)
        xi = np.asarray(xi, float)
        return float(xi @ xi + eval_potential(self, x, 0))

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        bumps = []
        for b in self.bumps:
            d = {"amplitude": b.amplitude, "center": list(b.center), "width": b.width}
            if b.poly:
                d["poly"] = list(b.poly)
            bumps.append(d)
        return {"format": FORMAT_VERSION, "kind": self.kind, "bumps": bumps,
                "dimension": self.dimension}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PotentialSpec":
        if not isinstance(d, dict):
            raise PotentialError("potential must be a JSON object")
        fmt = d.get("format", FORMAT_VERSION)
        if fmt != FORMAT_VERSION:
            raise PotentialError(f"unsupported potential format {fmt}")
        try:
            kind = d["kind"]
            dim = int(d["dimension"])
            bumps = tuple(
                Bump(float(b["amplitude"]), tuple(float(c) for c in b["center"]),
                     float(b["width"]), tuple(float(c) for c in b.get("poly", ())))
                for b in d.get("bumps", [])
            )
        except (KeyError, TypeError) as exc:
            raise PotentialError(f"malformed potential: {exc}") from exc
        return cls(kind, bumps, dim)

    @classmethod
    def from_json(cls, text: str) -> "PotentialSpec":
        return cls.from_dict(json.loads(text))


def _pack(spec: PotentialSpec) -> tuple:
    m = len(spec.bumps)
    n = spec.dimension
    amps = np.array([b.amplitude for b in spec.bumps], dtype=float).reshape(m)
    centers = np.array([b.center for b in spec.bumps], dtype=float).reshape(m, n)
    widths = np.array([b.width for b in spec.bumps], dtype=float).reshape(m)
    k = max([len(b.poly) for b in spec.bumps] + [1])
    poly = np.zeros((m, k))
    for j, b in enumerate(spec.bumps):
        poly[j, :len(b.poly)] = b.poly
    return KIND_CODES[spec.kind], amps, centers, widths, poly


# -- constructors ----------------------------------------------------------------

def free(dimension: int = 1) -> PotentialSpec:
    return PotentialSpec("gaussian_sum", (), dimension)


def eckart(amplitude: float = 1.0, width: float = 1.0) -> PotentialSpec:
    """The 1D barrier ``amplitude * cosh(x / width)^-2``."""
    return PotentialSpec("eckart", (Bump(amplitude, (0.0,), width),), 1)


def gaussian_sum(amplitudes: Sequence[float], centers, widths) -> PotentialSpec:
    centers = np.atleast_2d(np.asarray(centers, float))
    if np.ndim(widths) == 0:
        widths = [widths] * len(amplitudes)
    bumps = tuple(Bump(float(a), tuple(map(float, c)), float(w))
                  for a, c, w in zip(amplitudes, centers, widths))
    return PotentialSpec("gaussian_sum", bumps, centers.shape[1])


def three_bump(separation: float, amplitude: float, width: float = 1.0) -> PotentialSpec:
    """Three identical Gaussian bumps on an equilateral triangle of side ``separation``.

    Bump ``0`` sits on the positive x2 axis; the triangle is centred at the origin.
    """
    radius = separation / np.sqrt(3.0)
    angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    centers[np.abs(centers) < 1e-15] = 0.0
    return gaussian_sum([amplitude] * 3, centers, width)


def three_bump_for_ratio(ratio: float, energy: float = 1.0, radius: float = 1.0,
                         amp_over_energy: float = 50.0) -> PotentialSpec:
    """Three-bump geometry whose level curves ``{V = E}`` are near-circles of radius
    ``radius`` (``a``) with centres ``ratio * a`` apart (``R``)."""
    amplitude = amp_over_energy * energy
    width = radius / np.sqrt(2.0 * np.log(amp_over_energy))
    return three_bump(ratio * radius, amplitude, width)


# -- evaluation --------------------------------------------------------------------

def _profile(kind: str, q, poly=None, order: int = 0):
    """Radial profile g(q) and its q-derivatives (order 0, 1, 2), complex-safe."""
    q = np.asarray(q)
    if kind == "gaussian_sum":
        e = np.exp(-q / 2)
        return (e, -e / 2, e / 4)[order]
    if kind == "custom_polynomial_times_gaussian":
        poly = np.zeros(0) if poly is None else np.asarray(poly)
        c = np.concatenate([[1.0], poly])
        pv = np.polynomial.polynomial.polyval(q, c)
        dc = np.polynomial.polynomial.polyder(c) if c.size > 1 else np.zeros(1)
        d2c = np.polynomial.polynomial.polyder(dc) if dc.size > 1 else np.zeros(1)
        dp = np.polynomial.polynomial.polyval(q, dc)
        d2p = np.polynomial.polynomial.polyval(q, d2c)
        e = np.exp(-q / 2)
        if order == 0:
            return pv * e
        if order == 1:
            return (dp - pv / 2) * e
        return (d2p - dp + pv / 4) * e
    # eckart: sech^2(sqrt q), even in sqrt q so any branch works
    u = np.sqrt(q + 0j) if np.iscomplexobj(q) else np.sqrt(np.abs(q))
    s2 = 1.0 / np.cosh(u) ** 2
    if order == 0:
        return s2
    small = np.abs(q) < 1e-4
    us = np.where(small, 1.0, u)
    th = np.tanh(us)
    s2s = 1.0 / np.cosh(us) ** 2
    g1 = -s2s * th / us
    if order == 1:
        series = -1 + 4 * q / 3 - 17 * q ** 2 / 15 + 248 * q ** 3 / 315
        return np.where(small, series, g1)
    dphi = -((-2 * s2s * th ** 2 + s2s ** 2) * us - s2s * th) / us ** 2
    g2 = dphi / (2 * us)
    series = 4 / 3 - 34 * q / 15 + 248 * q ** 2 / 105
    return np.where(small, series, g2)


def eval_potential(spec: PotentialSpec, x, derivative_order: int = 0):
    """V, grad V or Hess V at one point ``x`` (real or complex).

    Returns a scalar, an ``(n,)`` vector or an ``(n, n)`` matrix.
    """
    if derivative_order not in (0, 1, 2):
        raise PotentialError(f"unsupported derivative order {derivative_order}")
    x = np.asarray(x)
    if x.shape == ():
        x = x.reshape(1)
    if x.shape != (spec.dimension,):
        raise PotentialError(f"point of shape {x.shape} for a {spec.dimension}D potential")
    if not np.all(np.isfinite(x)):
        raise PotentialError("non-finite evaluation point")
    n = spec.dimension
    dtype = complex if np.iscomplexobj(x) else float
    if derivative_order == 0:
        out = np.zeros((), dtype)
    elif derivative_order == 1:
        out = np.zeros(n, dtype)
    else:
        out = np.zeros((n, n), dtype)
    for b in spec.bumps:
        d = (x - np.asarray(b.center)) / b.width
        q = d @ d
        poly = np.array(b.poly)
        if derivative_order == 0:
            out = out + b.amplitude * _profile(spec.kind, q, poly, 0)
        elif derivative_order == 1:
            out = out + b.amplitude * _profile(spec.kind, q, poly, 1) * 2 * d / b.width
        else:
            g1 = _profile(spec.kind, q, poly, 1)
            g2 = _profile(spec.kind, q, poly, 2)
            out = out + b.amplitude * (4 * g2 * np.outer(d, d) + 2 * g1 * np.eye(n)) / b.width ** 2
    if derivative_order == 0:
        return out[()] if dtype is complex else float(out)
    return out


def potential_on_points(spec: PotentialSpec, points) -> np.ndarray:
    """Vectorised V on an array of points with trailing axis of length n.

    Complex points are allowed (analytic continuation).
    """
    pts = np.asarray(points)
    n = spec.dimension
    if n == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
        pts = pts[..., None]
    dtype = complex if np.iscomplexobj(pts) else float
    out = np.zeros(pts.shape[:-1], dtype)
    for b in spec.bumps:
        d = (pts - np.asarray(b.center)) / b.width
        q = np.sum(d * d, axis=-1)
        out = out + b.amplitude * _profile(spec.kind, q, np.array(b.poly), 0)
    return out
