"""Discretised ``P(h) = -h^2 Delta + V`` and its resonances.

Two deformations turn resonances into eigenvalues: complex scaling (global
``x -> e^{i theta} x`` or exterior, along a contour that is real in a ball) and a
complex absorbing potential ``-i W``.  Grids are either periodic with a spectral
Laplacian or Dirichlet boxes with a fourth-order finite-difference stencil.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .potentials import PotentialSpec, potential_on_points

log = logging.getLogger(__name__)

TOL_RES = 1e-8
# boxes for scaled operators reach down to SCALING_REACH * theta * E; the rotated
# continuum sits near arg z = -2 theta, so 1/2 leaves a wide margin
SCALING_REACH = 0.5
MIN_PPW = 4.0
DENSE_LIMIT = 4096


class GridError(ValueError):
    """The grid cannot represent the requested problem."""


class BoxError(ValueError):
    """The resonance box reaches past what the deformation exposes."""


class EigenSolveError(RuntimeError):
    def __init__(self, msg, shift=None):
        super().__init__(msg if shift is None else f"{msg} (shift {shift})")
        self.shift = shift


class SolveError(RuntimeError):
    def __init__(self, msg, suggestion=None):
        super().__init__(msg)
        self.suggestion = suggestion


def smoothstep(s):
    """C^2 monotone ramp s^3 (10 - 15 s + 6 s^2), clipped to [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10 - 15 * s + 6 * s ** 2)


# -- specs ------------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    n: int
    L: float
    N: int
    boundary: str = "periodic_fourier"

    def __post_init__(self):
        if self.n not in (1, 2):
            raise GridError(f"grid dimension must be 1 or 2, got {self.n}")
        if self.boundary not in ("periodic_fourier", "dirichlet_fd"):
            raise GridError(f"unknown boundary {self.boundary!r}")
        if not self.L > 0 or self.N < 8:
            raise GridError("grid needs L > 0 and N >= 8")
        if self.boundary == "periodic_fourier" and self.N & (self.N - 1):
            raise GridError(f"periodic grids need N a power of two, got {self.N}")

    @property
    def dx(self) -> float:
        if self.boundary == "periodic_fourier":
            return 2 * self.L / self.N
        return 2 * self.L / (self.N + 1)

    @property
    def axis(self) -> np.ndarray:
        if self.boundary == "periodic_fourier":
            return -self.L + self.dx * np.arange(self.N)
        return -self.L + self.dx * np.arange(1, self.N + 1)

    @property
    def size(self) -> int:
        return self.N ** self.n

    def points(self) -> np.ndarray:
        """Grid points, shape (N**n, n), x1 varying slowest."""
        ax = self.axis
        if self.n == 1:
            return ax[:, None]
        X1, X2 = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([X1.ravel(), X2.ravel()])

    @property
    def cell(self) -> float:
        return self.dx ** self.n

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CapSpec:
    """``W = strength * w((|x| - R1) / r1)`` with the C^2 smoothstep ``w``."""
    R1: float
    r1: float
    strength: float = 1.0

    def __post_init__(self):
        if self.R1 < 0 or self.r1 <= 0 or self.strength < 0:
            raise ValueError("CAP needs R1 >= 0, r1 > 0 and strength >= 0")

    def values(self, points) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(points), axis=-1)
        return self.strength * smoothstep((r - self.R1) / self.r1)

    @property
    def tag(self) -> str:
        return f"cap:{self.R1:g}:{self.r1:g}:{self.strength:g}"


@dataclass(frozen=True)
class ScalingSpec:
    """Complex scaling by angle ``theta``.

    ``global`` maps x to e^{i theta} x.  ``exterior`` follows x + i F(x) with F = 0 on
    |x| <= R0 and F = tan(theta) x beyond 2 R0; in 2D the contour is taken
    coordinate-wise.  The blend on [R0, 2 R0] is either the ``quintic`` matching
    F, F', F'' at both ends, or ``smooth``, whose joins are C-infinity.  The quintic
    has a jump in F''' at the joins, which caps finite-difference accuracy near
    them at a few 1e-5; the smooth blend keeps the full stencil order.
    """
    theta: float
    mode: str = "global"
    R0: float = 0.0
    profile_kind: str = "quintic"

    def __post_init__(self):
        if self.mode not in ("global", "exterior"):
            raise ValueError(f"unknown scaling mode {self.mode!r}")
        if not 0 <= self.theta < np.pi / 4:
            raise ValueError("theta must lie in [0, pi/4)")
        if self.mode == "exterior" and self.R0 <= 0:
            raise ValueError("exterior scaling needs R0 > 0")
        if self.profile_kind not in ("quintic", "smooth"):
            raise ValueError(f"unknown contour profile {self.profile_kind!r}")

    @property
    def tag(self) -> str:
        if self.mode == "global":
            return f"global:{self.theta:g}"
        extra = ":smooth" if self.profile_kind == "smooth" else ""
        return f"exterior:{self.theta:g}:{self.R0:g}{extra}"

    def profile(self, s):
        """F(s) and its first two derivatives for a real coordinate s (odd in s)."""
        s = np.asarray(s, float)
        a = np.abs(s)
        sg = np.sign(s)
        t = np.tan(self.theta)
        R0 = self.R0
        u = np.clip((a - R0) / R0, 0.0, 1.0)
        if self.profile_kind == "smooth":
            p, p1, p2 = _smooth_blend(u)
        else:
            # p(u) = 16u^3 - 23u^4 + 9u^5: p = p' = p'' = 0 at u = 0, p = 2, p' = 1, p'' = 0 at 1
            p = u ** 3 * (16 - 23 * u + 9 * u ** 2)
            p1 = u ** 2 * (48 - 92 * u + 45 * u ** 2)
            p2 = u * (96 - 276 * u + 180 * u ** 2)
        out = a >= 2 * R0
        F = np.where(out, t * a, R0 * t * p)
        F1 = np.where(out, t, t * p1)
        F2 = np.where(out, 0.0, t / R0 * p2)
        return sg * F, F1, sg * F2


def _flat(u):
    """exp(-1/u) for u > 0, else 0, with its derivative."""
    u = np.asarray(u, float)
    f = np.zeros_like(u)
    m = u > 0
    f[m] = np.exp(-1 / u[m])
    d = np.zeros_like(u)
    d[m] = f[m] / u[m] ** 2
    return f, d


def _blend_slope(u):
    """Slope of the smooth blend and its derivative.

    A C-infinity step from 0 to 1 plus a normalised bump carrying the extra area
    1.5, so the blend itself ends at 2 with unit slope and every higher
    derivative vanishes at both joins.
    """
    u = np.asarray(u, float)
    a, da = _flat(u)
    b, db = _flat(1 - u)
    den = a + b
    step = a / den
    dstep = (da * b + a * db) / den ** 2
    bump, dbump = _flat(u * (1 - u))
    dbump = dbump * (1 - 2 * u)
    return step + 1.5 * bump / _BUMP_AREA, dstep + 1.5 * dbump / _BUMP_AREA


_GL_X, _GL_W = np.polynomial.legendre.leggauss(80)
_BUMP_AREA = float(0.5 * np.sum(_GL_W * _flat(0.25 * (1 - _GL_X ** 2))[0]))


def _smooth_blend(u):
    u = np.asarray(u, float)
    # value by 80-point Gauss-Legendre on [0, u]; the integrand is smooth
    nodes = 0.5 * u[..., None] * (_GL_X + 1)
    p = 0.5 * u * np.sum(_GL_W * _blend_slope(nodes)[0], axis=-1)
    p1, p2 = _blend_slope(u)
    return p, p1, p2


# -- operators --------------------------------------------------------------------------

@dataclass
class Operator:
    """Assembled operator; ``matrix`` is dense (ndarray) or sparse (CSR)."""
    matrix: object
    grid: GridSpec
    h: float
    deformation: object
    spec: PotentialSpec
    potential: np.ndarray
    absorber: np.ndarray | None = None
    hermitian: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def dense(self) -> bool:
        return isinstance(self.matrix, np.ndarray)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, v):
        return self.matrix @ v

    def to_dense(self) -> np.ndarray:
        return self.matrix if self.dense else self.matrix.toarray()

    @property
    def deformation_tag(self) -> str:
        return "none" if self.deformation is None else self.deformation.tag

    def digest(self) -> str:
        payload = json.dumps({"grid": self.grid.digest(), "h": self.h,
                              "deformation": self.deformation_tag,
                              "potential": self.spec.digest()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def points_per_wavelength(grid: GridSpec, h: float, energy_max: float) -> float:
    """Grid points per shortest classical wavelength 2 pi h / sqrt(energy_max)."""
    return 2 * np.pi * h / (np.sqrt(max(energy_max, 1e-300)) * grid.dx)


def _spectral_1d(N, L):
    k = np.fft.fftfreq(N, d=2 * L / N) * 2 * np.pi
    F = np.fft.fft(np.eye(N), axis=0)
    D2 = np.real(np.fft.ifft(-(k ** 2)[:, None] * F, axis=0))
    k1 = k.copy()
    k1[N // 2] = 0.0
    D1 = np.real(np.fft.ifft((1j * k1)[:, None] * F, axis=0))
    return D1, D2


def _fd_1d(N, dx):
    """Fourth-order first and second differences with zero Dirichlet data."""
    e = np.ones(N)
    D1 = sp.diags([e[:-2] / 12, -8 * e[:-1] / 12, 8 * e[:-1] / 12, -e[:-2] / 12],
                  [-2, -1, 1, 2], shape=(N, N)) / dx
    D2 = sp.diags([-e[:-2] / 12, 16 * e[:-1] / 12, -30 * e / 12, 16 * e[:-1] / 12,
                   -e[:-2] / 12], [-2, -1, 0, 1, 2], shape=(N, N)) / dx ** 2
    return D1.tocsr(), D2.tocsr()


def assemble_operator(spec: PotentialSpec, grid: GridSpec, h: float, deformation=None,
                      *, energy_max: float = 1.0) -> Operator:
    """Matrix of P(h), P(h) - iW or the complex-scaled P_theta on the grid.

    ``energy_max`` is the top of the energy range of interest; the grid must carry at
    least four points per classical wavelength there.
    """
    if spec.dimension != grid.n:
        raise GridError(f"{spec.dimension}D potential on a {grid.n}D grid")
    if not h > 0:
        raise ValueError("h must be positive")
    ppw = points_per_wavelength(grid, h, energy_max)
    if ppw < MIN_PPW:
        raise GridError(f"under-resolved grid: {ppw:.2f} points per wavelength at "
                        f"energy {energy_max:g} (need {MIN_PPW:g})")
    periodic = grid.boundary == "periodic_fourier"
    if periodic and grid.size > DENSE_LIMIT and grid.n == 2:
        raise GridError(f"periodic 2D grid with {grid.size} points is too large for a "
                        "dense operator; use dirichlet_fd")
    pts = grid.points()
    N = grid.N
    if periodic:
        D1, D2 = _spectral_1d(N, grid.L)
        eye = np.eye(N)
        kron = np.kron
    else:
        D1, D2 = _fd_1d(N, grid.dx)
        eye = sp.identity(N, format="csr")
        kron = sp.kron

    def along(A, axis):
        if grid.n == 1:
            return A
        return kron(A, eye) if axis == 0 else kron(eye, A)

    V = potential_on_points(spec, pts) if not spec.is_free else np.zeros(grid.size)
    absorber = None
    hermitian = False
    if isinstance(deformation, ScalingSpec) and deformation.theta > 0:
        if deformation.mode == "global":
            lap = sum(along(D2, a) for a in range(grid.n))
            kin = -h ** 2 * np.exp(-2j * deformation.theta) * lap
            Vd = potential_on_points(spec, np.exp(1j * deformation.theta) * pts) \
                if not spec.is_free else np.zeros(grid.size, complex)
        else:
            ax = grid.axis
            F, F1, F2 = deformation.profile(ax)
            zp = 1 + 1j * F1
            zpp = 1j * F2
            g2 = 1 / zp ** 2
            g3 = zpp / zp ** 3
            if periodic:
                A = g2[:, None] * D2 - g3[:, None] * D1
            else:
                A = sp.diags(g2) @ D2 - sp.diags(g3) @ D1
            lap = sum(along(A, a) for a in range(grid.n))
            kin = -h ** 2 * lap
            zax = ax + 1j * F
            if grid.n == 1:
                z = zax[:, None]
            else:
                Z1, Z2 = np.meshgrid(zax, zax, indexing="ij")
                z = np.column_stack([Z1.ravel(), Z2.ravel()])
            Vd = potential_on_points(spec, z) if not spec.is_free else np.zeros(grid.size, complex)
        mat = kin + (np.diag(Vd) if periodic else sp.diags(Vd))
    else:
        lap = sum(along(D2, a) for a in range(grid.n))
        mat = -h ** 2 * lap
        if isinstance(deformation, CapSpec):
            absorber = deformation.values(pts)
            diag = V - 1j * absorber
            hermitian = deformation.strength == 0
        else:
            diag = V
            hermitian = True
        mat = mat + (np.diag(diag) if periodic else sp.diags(diag))
        if hermitian and periodic:
            mat = np.real(mat)
        elif not hermitian:
            mat = mat.astype(complex)
    if not periodic:
        mat = sp.csr_matrix(mat)
    return Operator(mat, grid, float(h), deformation, spec, V, absorber, hermitian,
                    {"points_per_wavelength": ppw})


# -- resonances -------------------------------------------------------------------------

@dataclass(frozen=True)
class Resonance:
    z: complex
    residual: float
    method: str
    h: float
    grid_hash: str


@dataclass(frozen=True)
class ResonanceSet:
    entries: tuple
    box: tuple
    h: float
    deformation: str = ""

    def __len__(self):
        return len(self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.z for e in self.entries], complex)

    def to_csv(self) -> str:
        lines = ["re_z,im_z,residual,method,h,theta_or_cap"]
        for e in self.entries:
            lines.append(f"{e.z.real:.15g},{e.z.imag:.15g},{e.residual:.3e},{e.method},"
                         f"{e.h:.12g},{self.deformation}")
        return "\n".join(lines) + "\n"

    def leading(self) -> Resonance | None:
        """Entry closest to the real axis."""
        if not self.entries:
            return None
        return max(self.entries, key=lambda e: e.z.imag)


def _depth_limit(deformation, E, reach=SCALING_REACH):
    if isinstance(deformation, ScalingSpec):
        return reach * deformation.theta * E
    if isinstance(deformation, CapSpec):
        return deformation.strength / 2
    return None


def _in_box(z, box, slack=0.0):
    E, delta, depth = box
    return (E - delta - slack <= z.real <= E + delta + slack) and (-depth - slack <= z.imag <= slack)


def _refine(op: Operator, z, v=None, iters=3):
    """Rayleigh-quotient iteration (complex-symmetric form); returns z, v, residual."""
    A = op.matrix
    n = A.shape[0]
    rng = np.random.default_rng(abs(hash(complex(z))) % 2 ** 32)
    if v is None:
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    scale = max(1.0, abs(z))
    res = np.inf
    for _ in range(iters):
        shift = z * (1 + 1e-14) + 1e-14 * scale
        if op.dense:
            M = A - shift * np.eye(n)
            try:
                with warnings.catch_warnings():
                    # near-singular by design
                    warnings.simplefilter("ignore", sla.LinAlgWarning)
                    v = sla.solve(M, v, check_finite=False)
            except sla.LinAlgError:
                break
        else:
            v = spla.spsolve((A - shift * sp.identity(n, format="csc")).tocsc(), v)
        v = v / np.linalg.norm(v)
        Av = A @ v
        denom = v @ v
        if abs(denom) > 1e-8:
            znew = (v @ Av) / denom
        else:
            znew = np.vdot(v, Av)
        res = np.linalg.norm(Av - znew * v) / scale
        z = znew
        if res < 1e-13:
            break
    return complex(z), v, float(res)


def eigen_resonances(op: Operator, box, h: float | None = None, *, tol_res: float = TOL_RES,
                     method: str | None = None, k: int = 12, shifts=None,
                     threads: int | None = None, reach: float = SCALING_REACH) -> ResonanceSet:
    """All eigenvalues of the deformed operator in ``[E-d, E+d] - i[0, depth]``.

    Dense operators are diagonalised outright; sparse ones are scanned with
    shift-invert Arnoldi on a lattice of shifts covering the box, each shift
    enlarging its eigenvalue count until every eigenvalue within the lattice cell
    radius has been found.  Every kept value is polished by Rayleigh-quotient
    iteration and carries its residual ||(A - z) v|| / (max(1, |z|) ||v||).
    """
    E, delta, depth = map(float, box)
    h = op.h if h is None else h
    if op.deformation is None or (isinstance(op.deformation, CapSpec) and op.deformation.strength == 0) \
            or (isinstance(op.deformation, ScalingSpec) and op.deformation.theta == 0):
        limit = 0.0
    else:
        limit = _depth_limit(op.deformation, E, reach)
    if depth > limit + 1e-15:
        raise BoxError(f"box depth {depth:g} exceeds the deformation reach {limit:g}")
    method = method or (op.deformation_tag.split(":")[0] if op.deformation else "hermitian")
    slack = 1e-9 * max(1.0, abs(E))
    cand = []
    if op.dense:
        ev = sla.eigvals(op.matrix, check_finite=False) if not op.hermitian else \
            sla.eigvalsh(op.matrix).astype(complex)
        cand = [z for z in ev if _in_box(z, (E, delta, depth), 10 * slack + 1e-12)]
    else:
        cand = _shift_invert_scan(op, (E, delta, depth), k, shifts, threads)
    entries = []
    for z in cand:
        zr, v, res = _refine(op, z)
        if not _in_box(zr, (E, delta, depth), slack):
            continue
        if res > tol_res:
            log.info("dropping eigenvalue %s with residual %.2e", zr, res)
            continue
        entries.append(Resonance(zr, res, method, float(h), op.grid.digest()))
    entries = _dedupe(entries, 1e-9 * max(1.0, abs(E)))
    entries.sort(key=lambda e: (round(e.z.real, 12), round(e.z.imag, 12)))
    return ResonanceSet(tuple(entries), (E, delta, depth), float(h), op.deformation_tag)


def _dedupe(entries, tol):
    out = []
    for e in sorted(entries, key=lambda e: e.residual):
        if all(abs(e.z - o.z) > tol for o in out):
            out.append(e)
    return out


def _shift_lattice(box, spacing):
    E, delta, depth = box
    nr = max(1, int(np.ceil(2 * delta / spacing)))
    ni = max(1, int(np.ceil(max(depth, 1e-12) / spacing)))
    re = E - delta + (np.arange(nr) + 0.5) * (2 * delta / nr)
    im = -(np.arange(ni) + 0.5) * (max(depth, 1e-12) / ni)
    radius = 0.5 * np.hypot(2 * delta / nr, max(depth, 1e-12) / ni)
    return [complex(a, b) for a in re for b in im], radius


def _one_shift(A, sigma, radius, k, kmax=200):
    n = A.shape[0]
    lu = spla.splu((A - sigma * sp.identity(n, format="csc")).tocsc())
    op = spla.LinearOperator(A.shape, matvec=lu.solve, dtype=complex)
    while True:
        kk = min(k, n - 2)
        try:
            mu = spla.eigs(op, k=kk, which="LM", return_eigenvectors=False, tol=1e-12,
                           maxiter=20000)
        except spla.ArpackNoConvergence as exc:
            if exc.eigenvalues.size == 0:
                raise EigenSolveError("shift-invert Arnoldi did not converge", sigma) from exc
            mu = exc.eigenvalues
        z = sigma + 1 / mu
        far = np.max(np.abs(z - sigma)) if z.size else 0.0
        if far > radius or kk >= min(kmax, n - 2):
            if far <= radius:
                log.warning("shift %s: %d eigenvalues all inside the cell; some may be missed",
                            sigma, kk)
            return [w for w in z if abs(w - sigma) <= radius * (1 + 1e-9)]
        k *= 2


def _shift_invert_scan(op, box, k, shifts, threads):
    E, delta, depth = box
    if shifts is None:
        spacing = max(min(2 * delta, max(depth, 1e-3)) / 2, 1e-3)
        shifts, radius = _shift_lattice(box, spacing)
    else:
        shifts = list(shifts)
        radius = np.hypot(2 * delta, depth)
    threads = threads or int(os.environ.get("RESGAP_THREADS", "1"))
    A = op.matrix.tocsc()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            found = list(pool.map(lambda s: _one_shift(A, s, radius, k), shifts))
    else:
        found = [_one_shift(A, s, radius, k) for s in shifts]
    return [z for zs in found for z in zs]


@dataclass(frozen=True)
class GapVerdict:
    ok: bool
    violators: tuple
    gamma: float
    h: float
    margin: float

    def __bool__(self):
        return self.ok


def check_gap(res: ResonanceSet, gamma: float, h: float, margin: float = 0.0) -> GapVerdict:
    """True iff no entry in [E - d, E + d] has Im z > -gamma h (1 - margin)."""
    E, delta, depth = res.box if res.box else (0.0, np.inf, np.inf)
    if res.entries and depth < gamma * h * (1 - margin) - 1e-15:
        raise BoxError(f"resonances computed to depth {depth:g} < gamma h = {gamma * h:g}")
    bound = -gamma * h * (1 - margin)
    bad = tuple(e for e in res.entries
                if E - delta <= e.z.real <= E + delta and e.z.imag > bound)
    return GapVerdict(not bad, bad, float(gamma), float(h), float(margin))


# -- resolvent ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Cutoff:
    """Radial C^2 cutoff, 1 on |x| <= radius / 2 and 0 beyond ``radius``."""
    radius: float

    def values(self, points) -> np.ndarray:
        r = np.linalg.norm(np.atleast_2d(points), axis=-1)
        return 1.0 - smoothstep((r - self.radius / 2) / (self.radius / 2))


class _Factor:
    def __init__(self, A, z):
        self.dense = isinstance(A, np.ndarray)
        n = A.shape[0]
        if self.dense:
            self.lu = sla.lu_factor(A - z * np.eye(n), check_finite=False)
            diag = np.abs(np.diag(self.lu[0]))
        else:
            self.lu = spla.splu((A - z * sp.identity(n, format="csc")).tocsc())
            diag = np.abs(self.lu.U.diagonal())
        self.cond_hint = diag.min() / max(diag.max(), 1e-300)

    def solve(self, b, adjoint=False):
        if self.dense:
            return sla.lu_solve(self.lu, b, trans=2 if adjoint else 0, check_finite=False)
        return self.lu.solve(b, trans="H" if adjoint else "N")


def resolvent_norm(op: Operator, E: float, chi: Cutoff | None = None, h: float | None = None,
                   *, tol: float = 1e-10, max_iter: int = 3000, seed: int = 0) -> float:
    """Largest singular value of chi (A - E)^{-1} chi by power iteration on A^* A."""
    if chi is None:
        if not isinstance(op.deformation, CapSpec):
            raise ValueError("default cutoff needs a CAP operator (radius R1)")
        chi = Cutoff(op.deformation.R1)
    c = chi.values(op.grid.points())
    if not np.any(c):
        return 0.0
    fac = _Factor(op.matrix, E)
    if fac.cond_hint < 1e-15:
        raise SolveError(f"(A - {E}) is numerically singular",
                         suggestion=E + 1e-3 * max(1.0, abs(E)))
    rng = np.random.default_rng(seed)
    x = c * (rng.standard_normal(c.size) + 1j * rng.standard_normal(c.size))
    x /= np.linalg.norm(x)
    sigma = 0.0
    for _ in range(max_iter):
        y = c * fac.solve(c * x)
        x_new = c * fac.solve(c * y, adjoint=True)
        nrm = np.linalg.norm(x_new)
        if not np.isfinite(nrm):
            raise SolveError("resolvent solve broke down", suggestion=E + 1e-3)
        s_new = np.sqrt(nrm)
        x = x_new / nrm
        if abs(s_new - sigma) <= tol * s_new:
            sigma = s_new
            break
        sigma = s_new
    return float(sigma)


# -- propagation ----------------------------------------------------------------------------

def coherent_state(grid: GridSpec, h: float, x0, xi0) -> np.ndarray:
    """L^2-normalised Gaussian (pi h)^{-n/4} exp(i (x - x0) xi0 / h - |x - x0|^2 / (2h))."""
    pts = grid.points()
    d = pts - np.atleast_1d(np.asarray(x0, float))
    psi = np.exp(1j * d @ np.atleast_1d(np.asarray(xi0, float)) / h - (d * d).sum(1) / (2 * h))
    return psi / np.sqrt(np.vdot(psi, psi).real * grid.cell)


def _hermitian_part(op: Operator) -> np.ndarray:
    if not op.dense:
        raise GridError("energy localisation needs a dense (periodic) operator")
    base = assemble_operator(op.spec, op.grid, op.h, None, energy_max=1e-300)
    return base.matrix


def energy_fraction(op: Operator, psi, E: float, delta0: float) -> float:
    """Fraction of ||psi||^2 carried by eigenstates of P(h) with |energy - E| <= delta0."""
    w, U = np.linalg.eigh(_hermitian_part(op))
    c = U.conj().T @ psi
    tot = np.vdot(c, c).real
    inside = np.abs(w - E) <= delta0
    return float(np.vdot(c[inside], c[inside]).real / tot)


def energy_localize(op: Operator, psi, E: float, delta0: float) -> np.ndarray:
    """Apply a smooth spectral window chi((P - E) / delta0) (1 on |.| <= 1/2)."""
    w, U = np.linalg.eigh(_hermitian_part(op))
    s = np.abs(w - E) / delta0
    f = 1.0 - smoothstep(2 * s - 1)
    out = U @ (f * (U.conj().T @ psi))
    return out / np.sqrt(np.vdot(out, out).real * op.grid.cell)


@dataclass(frozen=True)
class NormHistory:
    times: np.ndarray
    norms: np.ndarray
    max_increase: float

    def slope(self, t0: float, t1: float) -> float:
        m = (self.times >= t0) & (self.times <= t1)
        return float(np.polyfit(self.times[m], np.log(self.norms[m]), 1)[0])


def propagate_cap(op: Operator, psi0, T: float, dt: float, *, energy: float | None = None,
                  delta0: float | None = None, record_every: int = 1,
                  phase_budget: float = 0.5) -> NormHistory:
    """Strang split-step evolution of exp(-i t (P - iW) / h) psi0 on a periodic grid.

    Kinetic steps are exact in Fourier space; potential and absorber act
    multiplicatively, so each sub-step has norm at most one.  When ``energy`` and
    ``delta0`` are given the initial state must have all but 1e-8 of its norm in
    the energy window.
    """
    if op.grid.boundary != "periodic_fourier":
        raise GridError("split-step propagation needs a periodic grid")
    if op.absorber is None:
        W = np.zeros(op.grid.size)
    else:
        W = op.absorber
    h = op.h
    if dt * (np.max(np.abs(op.potential)) + np.max(W)) / h > phase_budget:
        raise ValueError(f"time step {dt} too large: potential phase per step exceeds "
                         f"{phase_budget}")
    if energy is not None and delta0 is not None:
        frac = energy_fraction(op, psi0, energy, delta0)
        if frac < 1 - 1e-8:
            raise ValueError(f"initial state not energy-localised: {1 - frac:.2e} of the "
                             "norm lies outside the window")
    g = op.grid
    k = np.fft.fftfreq(g.N, d=g.dx) * 2 * np.pi
    if g.n == 1:
        k2 = k ** 2
        shape = (g.N,)
    else:
        K1, K2 = np.meshgrid(k, k, indexing="ij")
        k2 = K1 ** 2 + K2 ** 2
        shape = (g.N, g.N)
    kin = np.exp(-1j * dt * h * k2)
    half = np.exp(-0.5j * dt * op.potential / h) * np.exp(-0.5 * dt * W / h)
    psi = np.asarray(psi0, complex).reshape(shape)
    half = half.reshape(shape)
    nsteps = int(round(T / dt))
    norm0 = np.sqrt(np.vdot(psi, psi).real * g.cell)
    times = [0.0]
    norms = [norm0]
    prev = norm0
    worst = 0.0
    for j in range(1, nsteps + 1):
        psi = half * np.fft.ifftn(kin * np.fft.fftn(psi * half))
        nrm = np.sqrt(np.vdot(psi, psi).real * g.cell)
        worst = max(worst, nrm - prev)
        prev = nrm
        if j % record_every == 0:
            times.append(j * dt)
            norms.append(nrm)
    return NormHistory(np.array(times), np.array(norms) / norm0, float(worst / norm0))


def state_on_grid(op: Operator, z: complex):
    """Eigenvector of the deformed operator at eigenvalue z, normalised on the grid."""
    zr, v, res = _refine(op, z, iters=4)
    return zr, v / np.sqrt(np.vdot(v, v).real * op.grid.cell), res
