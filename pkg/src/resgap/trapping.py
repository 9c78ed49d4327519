"""Escape times, trapped-set sampling, hyperbolic splittings and unstable Jacobians."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import (MAX_STEPS, TOL, FlowError, PhasePoint, flow_batch,
                       flow_with_jacobian, hamilton_field, symplectic_form, trajectory)
from .potentials import PotentialSpec, eval_potential, potential_on_points

log = logging.getLogger(__name__)

MIN_KINETIC = 1e-6
TOL_FRAME = 1e-6
# trapped points sit on unstable sets, so integration error sets their accuracy
SAMPLE_TOL = 1e-12
# closest approaches within this many widths of a bump centre count as visits
VISIT_WIDTHS = 3.0


class EscapeCertificateError(RuntimeError):
    """Kinetic energy too small at the escape radius for the convexity certificate."""


class FrameError(RuntimeError):
    """The hyperbolic splitting could not be extracted to tolerance."""


@dataclass(frozen=True)
class EscapeRecord:
    rho: PhasePoint
    t_forward: float
    t_backward: float
    escape_radius: float

    @property
    def trapped(self) -> bool:
        return np.isinf(self.t_forward) and np.isinf(self.t_backward)


@dataclass
class TrappedSample:
    points: np.ndarray            # (m, 2n) rows (x, xi)
    t_forward: np.ndarray
    t_backward: np.ndarray
    energy: float
    delta: float
    t_trap: float
    metadata: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.points.shape[0] == 0

    def __len__(self):
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1] // 2

    def phase_points(self) -> list[PhasePoint]:
        return [PhasePoint.from_vec(p) for p in self.points]

    def energies(self, spec: PotentialSpec) -> np.ndarray:
        n = self.dimension
        xi = self.points[:, n:]
        return np.sum(xi * xi, axis=1) + potential_on_points(spec, self.points[:, :n])

    def to_csv(self, spec: PotentialSpec) -> str:
        n = self.dimension
        cols = [f"x{i + 1}" for i in range(n)] + [f"xi{i + 1}" for i in range(n)]
        lines = [",".join(cols + ["t_fwd", "t_bwd", "energy"])]
        for p, tf, tb, e in zip(self.points, self.t_forward, self.t_backward,
                                self.energies(spec)):
            vals = [repr(float(v)) for v in p] + [repr(float(tf)), repr(float(tb)),
                                                  repr(float(e))]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


@dataclass
class HyperbolicFrame:
    rho: PhasePoint
    e_plus: np.ndarray     # (2n, k) orthonormal columns
    e_minus: np.ndarray    # (2n, k)
    h_p: np.ndarray        # (2n,)
    converged: bool
    residual: float

    @property
    def fixed_point(self) -> bool:
        return float(np.linalg.norm(self.h_p)) < _FIXED_EPS

    def weak_unstable(self) -> np.ndarray:
        """Basis of E^{+0}; at fixed points the flow direction vanishes."""
        if self.fixed_point:
            return self.e_plus
        return np.column_stack([self.e_plus, self.h_p])

    def weak_stable(self) -> np.ndarray:
        if self.fixed_point:
            return self.e_minus
        return np.column_stack([self.e_minus, self.h_p])


_FIXED_EPS = 1e-9


def default_escape_radius(spec: PotentialSpec) -> float:
    return max(3.0 * spec.effective_radius, 1.0)


# -- escape times -------------------------------------------------------------------

def _visit_r2(spec):
    """Squared radii inside which a closest approach counts as a visit to a bump."""
    if spec.dimension == 1:
        return np.empty(0)
    _, _, _, widths, _ = spec.packed
    return (VISIT_WIDTHS * widths) ** 2


def _escape_many(spec, Y0, t_max, radius, tol=TOL):
    kind, amps, centers, widths, poly = spec.packed
    Y0 = np.ascontiguousarray(Y0, float)
    m = Y0.shape[0]
    out_t = np.empty(m)
    out_s = np.empty(m, dtype=np.int64)
    out_y = np.empty_like(Y0)
    out_i = np.empty((m, 2), dtype=np.int64)
    K.escape_batch(Y0, float(t_max), spec.dimension, kind, amps, centers, widths, poly,
                   tol, tol, float(radius), MIN_KINETIC, MAX_STEPS, _visit_r2(spec),
                   out_t, out_s, out_y, out_i)
    return out_t, out_s, out_y, out_i


def escape_times(spec: PotentialSpec, points, radius: float, t_max: float,
                 direction: int = 1, tol: float = TOL):
    """Vectorised forward (direction=1) or backward escape times; inf when trapped.

    Also returns the state at escape (useful to classify the exit channel).
    """
    t, status, y, _ = _escape_many(spec, points, direction * t_max, radius, tol)
    if np.any(status == K.STATUS_LOW_KINETIC):
        raise EscapeCertificateError(
            "kinetic energy below threshold at the escape radius; escape certificate "
            "does not apply")
    bad = (status == K.STATUS_UNDERFLOW) | (status == K.STATUS_NONFINITE)
    if np.any(bad):
        raise FlowError(f"{int(bad.sum())} trajectories failed during escape search")
    t = np.abs(t)
    t[status != K.STATUS_ESCAPED] = np.inf
    return t, y


def escape_time(spec: PotentialSpec, rho: PhasePoint, escape_radius: float | None = None,
                T_max: float = 200.0, tol: float = TOL) -> EscapeRecord:
    """Forward and backward escape times of ``rho``.

    Escape is the first time ``|x(t)| > escape_radius`` with outward radial velocity;
    beyond ``3 R0`` the potential is negligible and ``|x(t)|^2`` is strictly convex,
    so the trajectory never comes back.
    """
    r0 = spec.effective_radius
    if escape_radius is None:
        escape_radius = default_escape_radius(spec)
    if escape_radius < 3 * r0 * (1 - 1e-12):
        raise ValueError(f"escape radius {escape_radius} below 3*R0 = {3 * r0}")
    v = rho.vec[None, :]
    tf, _ = escape_times(spec, v, escape_radius, T_max, 1, tol)
    tb, _ = escape_times(spec, v, escape_radius, T_max, -1, tol)
    return EscapeRecord(rho, float(tf[0]), float(tb[0]), float(escape_radius))


# -- trapped set ---------------------------------------------------------------------

def exit_classes(spec: PotentialSpec, points, radius: float, t_max: float,
                 direction: int = 1, tol: float = TOL):
    """Escape itinerary labels; -1 for trajectories still trapped at ``t_max``.

    In one dimension the label is the side through which the trajectory leaves.  In
    two dimensions it is a hash of the sequence of bumps visited (closest approaches
    within ``VISIT_WIDTHS`` widths of a centre) before escape.
    Also returns the escape times.
    """
    t, status, y, itin = _escape_many(spec, points, direction * t_max, radius, tol)
    if np.any(status == K.STATUS_LOW_KINETIC):
        raise EscapeCertificateError(
            "kinetic energy below threshold at the escape radius; escape certificate "
            "does not apply")
    esc = status == K.STATUS_ESCAPED
    if spec.dimension == 1:
        cls = (y[:, 1] > 0).astype(np.int64)
    else:
        cls = itin[:, 0].copy()
    cls[~esc] = -1
    t = np.abs(t)
    t[~esc] = np.inf
    return cls, t


def slab_seeds(spec: PotentialSpec, energy: float, delta: float, shape, slab: float = 0.0,
               span: float | None = None):
    """Seed grid on ``{x1 = slab}`` inside the energy window.

    n = 1: grid over energies in the window and both momentum signs, shape (ne,).
    n = 2: grid over (x2, direction angle) at energy ``energy``, shape (nx, nphi).
    Returns (points (..., 2n), valid mask).
    """
    n = spec.dimension
    if n == 1:
        ne = int(shape[0]) if np.ndim(shape) else int(shape)
        es = energy + delta * np.linspace(-1, 1, ne + 2)[1:-1]
        v = potential_on_points(spec, np.array([[slab]]))[0]
        kin = es - v
        valid = kin > 0
        xi = np.sqrt(np.where(valid, kin, 0.0))
        pts = np.empty((2, ne, 2))
        pts[:, :, 0] = slab
        pts[0, :, 1] = xi
        pts[1, :, 1] = -xi
        return pts, np.broadcast_to(valid, (2, ne)).copy()
    nx, nphi = shape
    if span is None:
        span = spec.effective_radius
    x2 = np.linspace(-span, span, nx)
    phi = np.linspace(-np.pi, np.pi, nphi, endpoint=False) + np.pi / nphi
    X2, PHI = np.meshgrid(x2, phi, indexing="ij")
    xs = np.stack([np.full_like(X2, slab), X2], axis=-1)
    kin = energy - potential_on_points(spec, xs)
    valid = kin > MIN_KINETIC
    speed = np.sqrt(np.where(valid, kin, 0.0))
    pts = np.concatenate([xs, np.stack([speed * np.cos(PHI), speed * np.sin(PHI)], -1)], -1)
    return pts, valid


def _bisect_classes(spec, a, b, direction, radius, t_max, energy=None, iters=55,
                    tol=TOL):
    """Bisect segments [a, b] whose ends carry different escape itineraries.

    Boundaries between itineraries lie on the forward trapped set for
    ``direction = 1`` (backward for ``-1``), apart from grazing boundaries of the
    visit radius, which stay short-lived and are removed by later filtering.  With
    ``energy`` given (one value per segment), midpoints are put back on that energy
    surface.  Returns the longer-lived end of each final segment and its escape time.
    """
    a = a.copy()
    b = b.copy()
    ca, _ = exit_classes(spec, a, radius, t_max, direction, tol)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if energy is not None:
            mid = _project_energy(spec, mid, energy)
        c, _ = exit_classes(spec, mid, radius, t_max, direction, tol)
        same = c == ca
        a[same] = mid[same]
        b[~same] = mid[~same]
        if np.all(np.abs(a - b) <= 4e-16 * np.maximum(1.0, np.abs(a))):
            break
    _, ta = exit_classes(spec, a, radius, t_max, direction, tol)
    _, tb = exit_classes(spec, b, radius, t_max, direction, tol)
    pick_b = tb > ta
    return np.where(pick_b[:, None], b, a), np.where(pick_b, tb, ta)


def _straddle(spec, a, b, direction, radius, t_max, energy=None, n_sub=5,
              width=1e-13, tol=TOL):
    """Shrink segments [a, b] around the largest escape time found inside them.

    Each pass samples ``n_sub`` (odd) interior points and keeps the two neighbours
    of the longest-lived one, which becomes the centre of the next segment.  Escape
    times blow up only on the trapped set, so the segments close in on it (a smooth
    local maximum can also attract a segment; such points stay short-lived and are
    filtered later).  Returns the best point of each final segment and its escape
    time.
    """
    a = a.copy()
    b = b.copy()
    m, dim = a.shape
    s = np.linspace(0.0, 1.0, n_sub + 2)[1:-1]
    mid = n_sub // 2
    fresh = np.array([j for j in range(n_sub) if j != mid])
    best = 0.5 * (a + b)
    if energy is not None:
        best = _project_energy(spec, best, energy)
    _, best_t = exit_classes(spec, best, radius, t_max, direction, tol)
    active = np.nonzero(np.isfinite(best_t))[0]
    while active.size:
        pa, pb = a[active], b[active]
        pts = pa[:, None, :] + s[None, :, None] * (pb - pa)[:, None, :]
        pts[:, mid] = best[active]
        new = pts[:, fresh].reshape(-1, dim)
        if energy is not None:
            new = _project_energy(spec, new, np.repeat(energy[active], fresh.size))
        _, tn = exit_classes(spec, new, radius, t_max, direction, tol)
        pts[:, fresh] = new.reshape(active.size, fresh.size, dim)
        t = np.empty((active.size, n_sub))
        t[:, fresh] = tn.reshape(active.size, fresh.size)
        t[:, mid] = best_t[active]
        t_in = np.where(np.isfinite(t), t, np.inf)
        i = np.argmax(t_in, axis=1)
        r = np.arange(active.size)
        best[active] = pts[r, i]
        best_t[active] = t[r, i]
        lo = np.where((i > 0)[:, None], pts[r, np.maximum(i - 1, 0)], pa)
        hi = np.where((i < n_sub - 1)[:, None], pts[r, np.minimum(i + 1, n_sub - 1)], pb)
        a[active], b[active] = lo, hi
        span = np.max(np.abs(hi - lo), axis=1)
        scale = np.maximum(1.0, np.max(np.abs(lo), axis=1))
        done = (span <= width * scale) | ~np.isfinite(t[r, i])
        active = active[~done]
    return best, best_t


def _project_energy(spec, pts, energies):
    """Rescale momenta so that p(pts) = energies exactly (keeps direction)."""
    n = spec.dimension
    v = potential_on_points(spec, pts[:, :n])
    kin = energies - v
    norm2 = np.sum(pts[:, n:] ** 2, axis=1)
    ok = (kin > 0) & (norm2 > 0)
    out = pts.copy()
    out[ok, n:] *= np.sqrt(kin[ok] / norm2[ok])[:, None]
    return out


def sample_trapped_set(spec: PotentialSpec, E: float, delta: float, seed_grid=None,
                       T_trap: float | None = None, *, escape_radius: float | None = None,
                       T_max: float = 150.0, slab: float | None = None, span: float | None = None,
                       orbit_stride: float | None = None, refine_rounds: int = 1,
                       max_points: int | None = None, tol: float = SAMPLE_TOL
                       ) -> TrappedSample:
    """Points of K_E (both escape times at least ``T_trap``) in the window (E, delta).

    In one dimension, neighbouring seeds on ``{x1 = slab}`` that leave through
    different sides are bisected onto the boundary, which is the forward-trapped
    set.  In two dimensions the exit state depends continuously on the seed wherever
    the escape time is finite, so the trapped set is located instead by shrinking
    grid-line segments around escape-time peaks.  Each refined point is pushed along its orbit to
    balance its forward and backward trapping times.  In two dimensions the point is
    then alternately re-bisected along its unstable direction (forward exits) and
    its stable direction (backward exits), which moves it onto both trapped sets to
    integrator accuracy.  Points may be replicated along their orbits every
    ``orbit_stride`` time units; all survivors are filtered by recomputed escape
    times.
    """
    n = spec.dimension
    if escape_radius is None:
        escape_radius = default_escape_radius(spec)
    if seed_grid is None:
        seed_grid = (64,) if n == 1 else (64, 64)
    if slab is None:
        slab = -0.25 * spec.effective_radius if n == 1 else 0.0
    meta = {"escape_radius": escape_radius, "seed_grid": list(np.atleast_1d(seed_grid)),
            "slab": slab, "T_max": T_max}
    if spec.is_free:
        meta["flag"] = "no trapping found"
        return _empty_sample(n, E, delta, T_trap or 0.0, meta)

    seeds, valid = slab_seeds(spec, E, delta, seed_grid, slab, span)
    shape = seeds.shape[:-1]
    flat = seeds.reshape(-1, 2 * n)
    vflat = valid.ravel()
    if n == 1:
        cls = np.full(flat.shape[0], -2, dtype=np.int64)
        cls[vflat], _ = exit_classes(spec, flat[vflat], escape_radius, T_max, 1, tol)
        trapped_seeds = flat[cls == -1]
        cls = cls.reshape(shape)
        # neighbouring seeds leaving through different sides
        mask = (cls[..., :-1] != cls[..., 1:]) & (cls[..., :-1] >= 0) & (cls[..., 1:] >= 0)
        pa, pb = seeds[..., :-1, :][mask], seeds[..., 1:, :][mask]
        meta["boundary_pairs"] = int(pa.shape[0])
        refined = np.empty((0, 2 * n))
        if pa.shape[0]:
            refined, _ = _bisect_classes(spec, pa, pb, 1, escape_radius, T_max, tol=tol)
    else:
        tf = np.full(flat.shape[0], -1.0)
        _, tf[vflat] = exit_classes(spec, flat[vflat], escape_radius, T_max, 1, tol)
        trapped_seeds = flat[np.isinf(tf)]
        tf = tf.reshape(shape)
        tf[np.isinf(tf)] = -1.0
        # seeds whose escape time is a strict local maximum along a grid line
        pa, pb = [], []
        for ax in (0, 1):
            t = np.moveaxis(tf, ax, 0)
            sd = np.moveaxis(seeds, ax, 0)
            peak = (t[1:-1] > t[:-2]) & (t[1:-1] > t[2:]) & (t[:-2] > 0) & (t[2:] > 0)
            pa.append(sd[:-2][peak])
            pb.append(sd[2:][peak])
        pa = np.concatenate(pa)
        pb = np.concatenate(pb)
        meta["line_peaks"] = int(pa.shape[0])
        refined = np.empty((0, 2 * n))
        if pa.shape[0]:
            refined, _ = _straddle(spec, pa, pb, 1, escape_radius, T_max,
                                   np.full(pa.shape[0], float(E)), tol=tol)
    cand = np.concatenate([refined, trapped_seeds])
    if cand.shape[0] == 0:
        meta["flag"] = "no trapping found"
        return _empty_sample(n, E, delta, T_trap or 0.0, meta)
    tf, _ = escape_times(spec, cand, escape_radius, T_max, 1, tol)
    tb, _ = escape_times(spec, cand, escape_radius, T_max, -1, tol)
    tf = np.minimum(tf, T_max)
    tb = np.minimum(tb, T_max)
    # push each point to the middle of its trapped lifetime
    shift = 0.5 * (tf - tb)
    cand = _flow_by(spec, cand, shift, tol)
    half_life = 0.5 * (tf + tb)
    energies = np.sum(cand[:, n:] ** 2, axis=1) + potential_on_points(spec, cand[:, :n])
    if n == 2 and refine_rounds > 0:
        # only points that already see the trapped set are worth refining
        lo = np.quantile(half_life, 0.5) if half_life.size > 8 else 0.0
        sel = half_life >= lo
        cand, energies = cand[sel], energies[sel]
        cand = _refine_two_sided(spec, cand, energies, escape_radius, T_max,
                                 refine_rounds, tol)
        cand, energies = _dedupe(cand, energies, 1e-9)
        tf, _ = escape_times(spec, cand, escape_radius, T_max, 1, tol)
        tb, _ = escape_times(spec, cand, escape_radius, T_max, -1, tol)
        tf = np.minimum(tf, T_max)
        tb = np.minimum(tb, T_max)
        cand = _flow_by(spec, cand, 0.5 * (tf - tb), tol)
        half_life = 0.5 * (tf + tb)
    if T_trap is None:
        T_trap = _default_t_trap(spec, cand, half_life, escape_radius, E)
    meta["T_trap"] = T_trap
    keep = half_life >= T_trap
    cand, half_life, energies = cand[keep], half_life[keep], energies[keep]
    if orbit_stride and cand.shape[0]:
        pts, ens = [cand], [energies]
        for p, hl, e in zip(cand, half_life, energies):
            m = int(np.floor((hl - T_trap) / orbit_stride))
            if m < 1:
                continue
            times = np.arange(1, m + 1) * orbit_stride
            for sign in (1, -1):
                tr = trajectory(spec, PhasePoint.from_vec(p), sign * times, tol)
                pts.append(tr)
                ens.append(np.full(m, e))
        cand = np.concatenate(pts)
        energies = np.concatenate(ens)
    cand = _project_energy(spec, cand, energies)
    cand = _polish_fixed_points(spec, cand, delta, E)
    moved, energies = _dedupe(cand, energies, 1e-12)
    if max_points is not None and moved.shape[0] > max_points:
        idx = np.unique(np.linspace(0, moved.shape[0] - 1, max_points).round().astype(int))
        moved = moved[idx]
    horizon = T_trap * 1.5 + escape_radius
    tf, _ = escape_times(spec, moved, escape_radius, horizon, 1, tol)
    tb, _ = escape_times(spec, moved, escape_radius, horizon, -1, tol)
    en = np.sum(moved[:, n:] ** 2, axis=1) + potential_on_points(spec, moved[:, :n])
    ok = (tf >= T_trap) & (tb >= T_trap) & (np.abs(en - E) < delta)
    meta["rejected"] = int((~ok).sum())
    if not np.any(ok):
        meta["flag"] = "no trapping found"
    return TrappedSample(moved[ok], tf[ok], tb[ok], E, delta, T_trap, meta)


def _empty_sample(n, E, delta, T_trap, meta):
    return TrappedSample(np.empty((0, 2 * n)), np.empty(0), np.empty(0), E, delta, T_trap, meta)


def _polish_fixed_points(spec, pts, delta, E, near=1e-4):
    """Snap candidates sitting next to a critical point of V onto it (Newton).

    A trapped candidate with |H_p| tiny is an approximation of an equilibrium,
    which is then itself the trapped set; solving dV = 0 removes the residual
    sampling error.  The snap is kept only if it stays within ``near`` and inside
    the energy window.
    """
    n = spec.dimension
    out = pts.copy()
    for i, v in enumerate(pts):
        if np.linalg.norm(hamilton_field(spec, v)) > near:
            continue
        x = v[:n].copy()
        for _ in range(20):
            step = np.linalg.lstsq(eval_potential(spec, x, 2), eval_potential(spec, x, 1),
                                   rcond=None)[0]
            x = x - step
            if np.linalg.norm(step) < 1e-15:
                break
        if (np.linalg.norm(eval_potential(spec, x, 1)) < 1e-12
                and np.linalg.norm(x - v[:n]) < near
                and abs(float(eval_potential(spec, x)) - E) < delta):
            out[i, :n] = x
            out[i, n:] = 0.0
    return out


def _dedupe(pts, energies, tol):
    """Lexicographic order and removal of near-duplicates."""
    if pts.shape[0] == 0:
        return pts, energies
    order = np.lexsort(pts.T[::-1])
    pts, energies = pts[order], energies[order]
    keep = np.ones(pts.shape[0], bool)
    # neighbours in lexicographic order are not always nearest; compare a window
    for k in range(1, min(8, pts.shape[0])):
        d = np.linalg.norm(pts[k:] - pts[:-k], axis=1)
        keep[k:] &= ~((d <= tol) & keep[:-k])
    return pts[keep], energies[keep]


def _refine_two_sided(spec, pts, energies, radius, t_max, rounds, tol):
    """Pull points onto both trapped sets by searches along E- and then E+.

    A point found on the forward-trapped set is searched along its stable
    direction for a backward escape-time spike, and then along its unstable
    direction for a forward one.  Moving along E- barely changes the distance to
    the forward-trapped set (and vice versa), so each search sharpens one side
    while spoiling the other only by the frame error times the step.
    """
    out = pts.copy()
    steps = [(-1, 1e-4), (1, 1e-6)] + [(-1, 1e-7), (1, 1e-7)] * (rounds - 1)
    for direction, u in steps:
        dirs = np.full_like(out, np.nan)
        _, tf = exit_classes(spec, out, radius, t_max, 1, tol)
        _, tb = exit_classes(spec, out, radius, t_max, -1, tol)
        life = np.minimum(np.minimum(tf, tb), t_max)
        for i, v in enumerate(out):
            try:
                # E- for a backward search, E+ for a forward one
                dirs[i] = _unstable_at(spec, v, max(0.5 * life[i], 1.0), 1, direction,
                                       i)[:, 0]
            except FlowError:
                pass
        good = np.all(np.isfinite(dirs), axis=1)
        out[good] = _search_along(spec, out[good], dirs[good], energies[good],
                                  direction, u, radius, t_max, tol)
    return out


def _search_along(spec, pts, dirs, energies, direction, u, radius, t_max, tol):
    """Move each point onto the escape-time spike within ``u`` along ``dirs``."""
    _, t0 = exit_classes(spec, pts, radius, t_max, direction, tol)
    a = _project_energy(spec, pts - u * dirs, energies)
    b = _project_energy(spec, pts + u * dirs, energies)
    ref, t = _straddle(spec, a, b, direction, radius, t_max, energies, tol=tol)
    better = t > t0
    out = pts.copy()
    out[better] = ref[better]
    return out


def _default_t_trap(spec, cand, half_life, radius, E):
    """10 / lambda_est plus the free flight time out to the escape radius."""
    i = int(np.argmax(half_life))
    lam = crude_exponent(spec, cand[i], 0.5 * float(half_life[i]))
    flight = (radius - spec.effective_radius) / (2.0 * np.sqrt(max(E, 1e-12)))
    return float(min(10.0 / max(lam, 1e-3) + max(flight, 0.0), 0.8 * half_life[i]))


def crude_exponent(spec: PotentialSpec, v, t: float) -> float:
    """Growth rate of |dPhi^t| along a trajectory started at v (rough estimate)."""
    t = max(t, 1e-3)
    _, blk = flow_with_jacobian(spec, PhasePoint.from_vec(v), t)
    s = np.linalg.svd(blk.J, compute_uv=False)
    return float(np.log(s[0]) / t)


def _flow_by(spec, pts, shifts, tol=TOL):
    """Phi^{shift_i}(pts_i) for per-point (signed) shifts."""
    out = np.empty_like(pts)
    for sign in (1, -1):
        idx = np.nonzero(np.sign(shifts) == sign)[0]
        for i in idx:
            out[i] = trajectory(spec, PhasePoint.from_vec(pts[i]), [shifts[i]], tol)[0]
    zero = shifts == 0
    out[zero] = pts[zero]
    return out


# -- hyperbolic splitting -------------------------------------------------------------

def _orthonormal(M):
    q, _ = np.linalg.qr(M)
    return q


def _shell_basis(spec, v, k, rng):
    """k random vectors tangent to the energy shell and orthogonal to H_p at v."""
    n = spec.dimension
    hp = hamilton_field(spec, v)
    # gradient of p: (dV, 2 xi)
    grad_p = np.concatenate([-hp[n:], hp[:n]])
    cons = [c for c in (grad_p, hp) if np.linalg.norm(c) > _FIXED_EPS]
    M = rng.standard_normal((2 * n, k))
    if cons:
        C = _orthonormal(np.column_stack(cons))
        M = M - C @ (C.T @ M)
    return M


def _subspace_distance(A, B):
    """sin of the largest principal angle between column spaces of A and B."""
    qa = _orthonormal(A)
    qb = _orthonormal(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.sqrt(max(0.0, 1.0 - np.min(s) ** 2)))


def _symplectic_inverse(J):
    """J^{-1} = -Omega J^T Omega for symplectic J (exact, no cancellation)."""
    n = J.shape[0] // 2
    return -symplectic_form(n) @ J.T @ symplectic_form(n)


def _unstable_at(spec, v, T, k, direction, seed, times=None):
    """E+ (direction 1) or E- (direction -1) at v from k random shell vectors.

    The vectors are taken tangent to the energy shell at Phi^{-direction T}(v) and
    mapped onto v by the inverse of the Jacobian of the opposite-time flow out of v.
    Integrating away from v (rather than re-integrating towards it) keeps the
    base trajectory through v itself even when the time span far exceeds the
    trapping accuracy of v.  With ``times`` given, one subspace per time is returned.
    """
    rng = np.random.default_rng(seed)
    m = v.size
    ts = [T] if times is None else list(times)
    rows = trajectory(spec, PhasePoint.from_vec(v), [-direction * t for t in ts],
                      with_jacobian=True)
    out = []
    for row in rows:
        J = row[m:].reshape(m, m)
        basis = _shell_basis(spec, row[:m], k, rng)
        out.append(_orthonormal(_symplectic_inverse(J) @ basis))
    return out[0] if times is None else out


def hyperbolic_frame(spec: PotentialSpec, rho: PhasePoint, T_converge: float = 24.0,
                     tol_frame: float = TOL_FRAME, seed: int = 0) -> HyperbolicFrame:
    """E+ and E- at rho by pushing shell vectors forward (resp. backward) onto rho.

    The residual is the principal-angle distance between the weak subspaces
    (E+ or E- together with the flow direction) obtained with ``T_converge`` and
    ``T_converge / 2``.
    """
    n = spec.dimension
    v = rho.vec
    hp = hamilton_field(spec, v)
    fixed = np.linalg.norm(hp) < _FIXED_EPS
    k = n if fixed else n - 1
    if k == 0:
        # n = 1 away from a fixed point: the shell is the orbit itself
        z = np.zeros((2, 0))
        return HyperbolicFrame(rho, z, z, hp, True, 0.0)
    times = [T_converge / 2, T_converge]
    try:
        ep_half, ep = _unstable_at(spec, v, T_converge, k, 1, seed, times)
        em_half, em = _unstable_at(spec, v, T_converge, k, -1, seed + 1, times)
    except FlowError as exc:
        raise FrameError(str(exc)) from exc
    # the flow direction is neutral, so convergence is measured on E^{+0} and E^{-0}
    weak = (lambda B: B) if fixed else (lambda B: np.column_stack([B, hp]))
    residual = max(_subspace_distance(weak(ep), weak(ep_half)),
                   _subspace_distance(weak(em), weak(em_half)))
    indep = _subspace_distance(ep, weak(em))
    converged = residual <= tol_frame and indep > 1e-3
    return HyperbolicFrame(rho, ep, em, hp, converged, residual)


def volume(B: np.ndarray) -> float:
    """k-volume of the parallelotope spanned by the columns of B."""
    g = B.T @ B
    return float(np.sqrt(max(np.linalg.det(g), 0.0)))


def unstable_jacobian(spec: PotentialSpec, rho: PhasePoint, t: float,
                      frame: HyperbolicFrame | None = None, *, strict: bool = True) -> float:
    """lambda^+_t(rho): log of the volume expansion of dPhi^t on E^{+0}_rho."""
    if frame is None:
        frame = hyperbolic_frame(spec, rho)
    if strict and not frame.converged:
        raise FrameError(f"frame not converged at {rho} (residual {frame.residual:.2e})")
    if t == 0:
        return 0.0
    B = frame.weak_unstable()
    _, blk = flow_with_jacobian(spec, rho, t)
    return float(np.log(volume(blk.J @ B) / volume(B)))


def unstable_jacobian_along(spec: PotentialSpec, rho: PhasePoint, times,
                            frame: HyperbolicFrame | None = None) -> np.ndarray:
    """lambda^+_t(rho) for several nonnegative times from a single integration."""
    if frame is None:
        frame = hyperbolic_frame(spec, rho)
    if not frame.converged:
        raise FrameError(f"frame not converged at {rho} (residual {frame.residual:.2e})")
    times = np.asarray(times, float)
    B = frame.weak_unstable()
    m = 2 * spec.dimension
    out = np.zeros(times.size)
    pos = times > 0
    if np.any(pos):
        traj = trajectory(spec, rho, times[pos], with_jacobian=True)
        v0 = volume(B)
        vals = []
        for row in traj:
            J = row[m:].reshape(m, m)
            vals.append(np.log(volume(J @ B) / v0))
        out[pos] = vals
    return out


def unstable_frames(spec: PotentialSpec, points, T_converge: float = 24.0, seed: int = 0,
                    tol: float = TOL):
    """Batched E^{+0} bases at many points, with the T vs T/2 residual of each.

    Returns (bases of shape (N, 2n, n), residuals (N,)).  At fixed points the basis
    spans E+ alone, elsewhere E+ together with H_p.  Points whose backward
    integration fails get NaN bases and infinite residuals.
    """
    points = np.ascontiguousarray(points, float)
    N, m = points.shape
    n = m // 2
    rng = np.random.default_rng(seed)
    kind, amps, centers, widths, poly = spec.packed
    y0 = np.ascontiguousarray(np.hstack([points, np.broadcast_to(np.eye(m).ravel(), (N, m * m))]))
    out = np.empty((N, 2, y0.shape[1]))
    status = np.empty(N, dtype=np.int64)
    K.sample_batch(y0, np.array([-0.5 * T_converge, -T_converge]), n, True, kind, amps,
                   centers, widths, poly, tol, tol, MAX_STEPS, out, status)
    bases = np.full((N, m, n), np.nan)
    res = np.full(N, np.inf)
    for i in range(N):
        if status[i] != K.STATUS_DONE:
            continue
        hp = hamilton_field(spec, points[i])
        fixed = np.linalg.norm(hp) < _FIXED_EPS
        k = n if fixed else n - 1
        subs = []
        for j in range(2):
            J = out[i, j, m:].reshape(m, m)
            B = _orthonormal(_symplectic_inverse(J) @ _shell_basis(spec, out[i, j, :m], k, rng))
            subs.append(B if fixed else np.column_stack([B, hp / np.linalg.norm(hp)]))
        res[i] = _subspace_distance(subs[0], subs[1])
        bases[i] = subs[1]
    return bases, res


def unstable_jacobians(spec: PotentialSpec, points, bases, times, tol: float = TOL):
    """lambda^+_t at each point for each time, plus the sampled states.

    ``bases`` are E^{+0} bases as returned by :func:`unstable_frames`.  Returns
    (lam of shape (N, len(times)), states of shape (N, len(times), 2n)).
    """
    points = np.ascontiguousarray(points, float)
    times = np.asarray(times, float)
    N, m = points.shape
    rows = flow_batch(spec, points, times, tol, with_jacobian=True)
    states = rows[:, :, :m]
    J = rows[:, :, m:].reshape(N, times.size, m, m)
    img = np.einsum("ntab,nbk->ntak", J, bases)
    g = np.einsum("ntak,ntal->ntkl", img, img)
    g0 = np.einsum("nak,nal->nkl", bases, bases)
    lam = 0.5 * (np.log(np.abs(np.linalg.det(g))) - np.log(np.abs(np.linalg.det(g0)))[:, None])
    return lam, states


def in_cone(frame: HyperbolicFrame, w: np.ndarray, gamma: float) -> tuple[bool, float]:
    """Is w in the gamma-cone around E^{+0}: |stable part| <= gamma |weak-unstable part|?"""
    U = frame.weak_unstable()
    S = frame.e_minus
    basis = np.column_stack([U, S])
    coef, *_ = np.linalg.lstsq(basis, w, rcond=None)
    u = U @ coef[:U.shape[1]]
    s = S @ coef[U.shape[1]:]
    ratio = float(np.linalg.norm(s) / max(np.linalg.norm(u), 1e-300))
    return ratio <= gamma, ratio


def cone_invariance(spec: PotentialSpec, rho: PhasePoint, t0: float, gamma: float = 0.5,
                    n_vectors: int = 16, seed: int = 0,
                    T_converge: float = 24.0) -> tuple[bool, float]:
    """Check dPhi^{t0} maps the gamma-cone at rho into the gamma-cone at Phi^{t0}(rho).

    Tests vectors on the cone boundary; returns (ok, worst image ratio).
    """
    rng = np.random.default_rng(seed)
    f0 = hyperbolic_frame(spec, rho, T_converge)
    img, blk = flow_with_jacobian(spec, rho, t0)
    f1 = hyperbolic_frame(spec, img, T_converge)
    U = f0.weak_unstable()
    S = f0.e_minus
    worst = 0.0
    for _ in range(n_vectors):
        u = U @ rng.standard_normal(U.shape[1])
        s = S @ rng.standard_normal(S.shape[1])
        s *= gamma * np.linalg.norm(u) / max(np.linalg.norm(s), 1e-300)
        _, r = in_cone(f1, blk.J @ (u + s), gamma)
        worst = max(worst, r)
    return worst <= gamma, worst
