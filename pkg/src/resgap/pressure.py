"""Topological pressure of the flow on the trapped set, by two routes.

``pressure_separated`` follows the definition through (eps, t)-separated sets and
the partition function sum_S exp(-s lambda^+_t).  ``pressure_cover`` uses refined
open covers with the coarse-grained unstable Jacobian.  Both work on an
:class:`OrbitBundle`, i.e. trapped points together with their trajectories and
unstable Jacobians sampled on a uniform time grid, so that several values of s,
eps and t share one set of integrations.

Pressure is measured per unit time of the Hamilton flow of ``|xi|^2 + V``.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from . import _kernels as K
from .dynamics import TOL, flow_batch, hamilton_field
from .potentials import PotentialSpec
from .trapping import (SAMPLE_TOL, TOL_FRAME, TrappedSample, default_escape_radius,
                       escape_times, sample_trapped_set, unstable_frames,
                       unstable_jacobians)

log = logging.getLogger(__name__)

TOL_PRESS = 0.05
T_CONVERGE = 24.0
# a separated set or refined cover holding more than this fraction of the sample
# has run out of distinct orbits and undercounts the growth
SATURATION = 0.25
# two fitted parameters plus at least two degrees of freedom
MIN_FIT_TIMES = 4


class PressureError(RuntimeError):
    """A pressure estimate could not be formed (empty sample, uncovered points...)."""


class DimensionError(RuntimeError):
    """The pressure has no sign change on the searched interval."""


# -- orbit bundles ---------------------------------------------------------------------

@dataclass(frozen=True)
class OrbitBundle:
    """Trapped points with states and lambda^+_t on the grid ``times = k * dt``."""
    spec: PotentialSpec
    energy: float
    delta: float
    points: np.ndarray
    times: np.ndarray
    states: np.ndarray
    lam: np.ndarray
    residuals: np.ndarray
    lam_est: float
    metadata: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    def step(self, t: float) -> int:
        """Grid index of time t (which must lie on the grid)."""
        k = int(round(t / self.dt))
        if k < 0 or k >= self.times.size or abs(k * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not on the bundle grid")
        return k

    def __len__(self):
        return self.points.shape[0]


def default_time_unit(lam_est: float) -> float:
    """t0 = 2 / lambda_est."""
    return 2.0 / max(lam_est, 1e-3)


def _flight_time(spec: PotentialSpec, radius: float, E: float) -> float:
    return max(radius - spec.effective_radius, 0.0) / (2.0 * np.sqrt(max(E, 1e-12)))


def _estimate_exponent(spec, points, t=8.0, T_converge=2 * T_CONVERGE):
    """Median growth rate of lambda^+ over time t on a few points."""
    pts = points[:: max(1, len(points) // 32)]
    bases, res = unstable_frames(spec, pts, T_converge)
    ok = res <= TOL_FRAME
    if not np.any(ok):
        raise PressureError("no converged hyperbolic frame on the sample")
    lam, _ = unstable_jacobians(spec, pts[ok], bases[ok], [t])
    return float(np.median(lam[:, 0]) / t)


def orbit_bundle(spec: PotentialSpec, E: float, delta: float,
                 sample: TrappedSample | None = None, *, horizon_units: int = 8,
                 samples_per_unit: int = 20, stride_units: float = 0.5,
                 max_points: int = 3000, T_converge: float | None = None,
                 sampler_args: dict | None = None) -> OrbitBundle:
    """Sample K_E, spread points along their orbits and tabulate them.

    The time grid runs over ``[0, horizon_units * t0]`` with ``t0 = 2 / lambda_est``
    and step ``t0 / samples_per_unit``.  Every kept point stays inside the
    interaction region over the whole grid.  Points are replicated along their
    orbits every ``stride_units * t0`` as long as that remains true.
    """
    if sample is None:
        sample = sample_trapped_set(spec, E, delta, **(sampler_args or {}))
    if sample.empty:
        raise PressureError("empty trapped sample: no trapping found in the window")
    base = sample.points
    lam_est = _estimate_exponent(spec, base)
    if T_converge is None:
        # frames settle after a fixed number of e-foldings
        T_converge = max(T_CONVERGE, 16.0 / lam_est)
    t0 = default_time_unit(lam_est)
    t_end = horizon_units * t0
    dt = t0 / samples_per_unit
    radius = sample.metadata.get("escape_radius", default_escape_radius(spec))
    flight = _flight_time(spec, radius, E)
    t_cap = 2 * (t_end + flight) + 50.0
    tf, _ = escape_times(spec, base, radius, t_cap, 1, SAMPLE_TOL)
    tb, _ = escape_times(spec, base, radius, t_cap, -1, SAMPLE_TOL)
    tf = np.minimum(tf, t_cap)
    tb = np.minimum(tb, t_cap)
    # offsets tau keep t_end of forward time and T_converge of backward time in the
    # region (the unstable frame needs the backward history)
    back = max(2 * t0, T_converge)
    hi = tf - flight - t_end
    lo = -(tb - flight - back)
    stride = stride_units * t0
    reps = []
    for p, a, b in zip(base, lo, hi):
        if b < a:
            continue
        reps.append(p[None])
        if np.linalg.norm(hamilton_field(spec, p)) == 0.0:
            continue
        taus = np.arange(np.ceil(a / stride), np.floor(b / stride) + 1) * stride
        neg = taus[taus < 0][::-1]
        pos = taus[taus > 0]
        if neg.size:
            reps.append(flow_batch(spec, p[None], neg, SAMPLE_TOL)[0])
        if pos.size:
            reps.append(flow_batch(spec, p[None], pos, SAMPLE_TOL)[0])
    if not reps:
        raise PressureError("no sample point stays trapped over the time horizon")
    pts = np.concatenate(reps)
    # deep orbits are sensitive; check each replica on its own
    tf, _ = escape_times(spec, pts, radius, t_end + flight, 1, SAMPLE_TOL)
    tb, _ = escape_times(spec, pts, radius, back + flight, -1, SAMPLE_TOL)
    pts = pts[np.isinf(tf) & np.isinf(tb)]
    if pts.shape[0] == 0:
        raise PressureError("no sample point stays trapped over the time horizon")
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    if pts.shape[0] > 1:
        gap = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        pts = pts[np.concatenate([[True], gap > 1e-10])]
    if pts.shape[0] > max_points:
        pts = pts[np.unique(np.linspace(0, pts.shape[0] - 1, max_points).round().astype(int))]
    bases, res = unstable_frames(spec, pts, T_converge)
    ok = res <= TOL_FRAME
    dropped = int((~ok).sum())
    if dropped:
        log.info("dropping %d points with unconverged frames", dropped)
    pts, bases, res = pts[ok], bases[ok], res[ok]
    if pts.shape[0] == 0:
        raise PressureError("no point with a converged hyperbolic frame")
    times = np.arange(horizon_units * samples_per_unit + 1) * dt
    lam, states = unstable_jacobians(spec, pts, bases, times, SAMPLE_TOL)
    meta = {"t0": t0, "flight_time": flight, "escape_radius": radius,
            "base_points": int(base.shape[0]), "frames_dropped": dropped,
            "T_converge": T_converge}
    return OrbitBundle(spec, float(E), float(delta), pts, times, states, lam, res,
                       lam_est, meta)


# -- separated sets --------------------------------------------------------------------

@dataclass(frozen=True)
class SeparatedSet:
    members: np.ndarray
    points: np.ndarray
    eps: float
    t: float
    lam: np.ndarray
    dt_sep: float
    order: str = "lexicographic"

    def __len__(self):
        return self.members.size


def _lex_order(points):
    return np.lexsort(np.asarray(points).T[::-1]).astype(np.int64)


def build_separated_set(bundle: OrbitBundle, eps: float, t: float) -> SeparatedSet:
    """Greedy maximal (eps, t)-separated subset of the bundle points.

    Points are admitted in lexicographic order of their coordinates when, against
    every point already admitted, their distance exceeds ``eps`` at some sampled
    time in [0, t].
    """
    if len(bundle) == 0:
        raise PressureError("empty sample")
    k = bundle.step(t)
    members = K.greedy_separated(np.ascontiguousarray(bundle.states), _lex_order(bundle.points),
                                 float(eps), k)
    members = np.sort(members)
    return SeparatedSet(members, bundle.points[members], float(eps), float(t),
                        bundle.lam[members, k], bundle.dt)


def log_partition_sum(sep: SeparatedSet, s: float) -> float:
    return float(logsumexp(-s * sep.lam))


def partition_sum(sep: SeparatedSet, s: float) -> float:
    """Z_t(eps, s) = sum over members of exp(-s lambda^+_t)."""
    return float(np.exp(log_partition_sum(sep, s)))


@dataclass(frozen=True)
class PressureEstimate:
    s: float
    P: float
    uncertainty: float
    method: str
    details: dict = field(default_factory=dict)


def default_grids(bundle: OrbitBundle):
    """t_grid = {t0, ..., 8 t0} (clipped to the bundle) and a dyadic eps_grid."""
    t0 = bundle.metadata["t0"]
    t_max = bundle.times[-1]
    t_grid = [k * t0 for k in range(1, 9) if k * t0 <= t_max + 1e-9]
    span = np.ptp(bundle.points, axis=0)
    eps0 = 0.125 * float(np.linalg.norm(span)) if np.any(span > 0) else 1.0
    return np.array(t_grid), eps0 * np.array([1.0, 0.5, 0.25])


def _fit_intercept(t, y):
    """Least-squares fit y = a + b / t; returns (a, stderr(a), rms residual)."""
    X = np.column_stack([np.ones_like(t), 1.0 / t])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ coef
    dof = max(t.size - 2, 1)
    sigma2 = float(r @ r) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    return float(coef[0]), float(np.sqrt(max(cov[0, 0], 0.0))), float(np.sqrt(np.mean(r ** 2)))


class SeparatedTable:
    """Separated sets for every (eps, t) of the grids, computed once and reused."""

    def __init__(self, bundle: OrbitBundle, eps_grid=None, t_grid=None):
        dt, de = default_grids(bundle)
        self.bundle = bundle
        self.t_grid = np.asarray(dt if t_grid is None else t_grid, float)
        self.eps_grid = np.asarray(de if eps_grid is None else eps_grid, float)
        self.sets = {(i, j): build_separated_set(bundle, e, t)
                     for i, e in enumerate(self.eps_grid) for j, t in enumerate(self.t_grid)}
        self.monotone_eps = all(
            len(self.sets[(i + 1, j)]) >= len(self.sets[(i, j)])
            for i in range(len(self.eps_grid) - 1) for j in range(len(self.t_grid))
            if self.eps_grid[i + 1] < self.eps_grid[i])

    def usable(self, i: int) -> np.ndarray:
        """Indices of t_grid where the eps_grid[i] sets are below saturation."""
        cap = SATURATION * len(self.bundle)
        return np.array([j for j in range(len(self.t_grid)) if len(self.sets[(i, j)]) <= cap
                         or len(self.sets[(i, j)]) == 1], dtype=int)

    def estimate(self, s: float) -> PressureEstimate:
        intercepts, errs, rms, used = [], [], [], []
        for i in range(len(self.eps_grid)):
            js = self.usable(i)
            if js.size < MIN_FIT_TIMES:
                continue
            t = self.t_grid[js]
            y = np.array([log_partition_sum(self.sets[(i, j)], s) for j in js]) / t
            a, se, r = _fit_intercept(t, y)
            intercepts.append(a)
            errs.append(se)
            rms.append(r)
            used.append((float(self.eps_grid[i]), t.tolist()))
        if not intercepts:
            raise PressureError("every (eps, t) separated set is saturated; sample too sparse")
        if len(intercepts) >= 2:
            # one Richardson step (error linear in eps, dyadic grid) on the two finest scales
            fine, coarse = intercepts[-1], intercepts[-2]
            P = 2 * fine - coarse
            unc = abs(P - fine) + float(np.hypot(2 * errs[-1], errs[-2]))
        else:
            P, unc = intercepts[0], errs[0]
        unc += max(rms)
        details = {"eps_grid": self.eps_grid.tolist(), "t_grid": self.t_grid.tolist(),
                   "fitted": used, "intercepts": intercepts, "intercept_stderr": errs,
                   "fit_rms": rms,
                   "set_sizes": {f"{self.eps_grid[i]:.6g},{self.t_grid[j]:.6g}": len(v)
                                 for (i, j), v in self.sets.items()},
                   "monotone_in_eps": self.monotone_eps}
        if len(intercepts) < len(self.eps_grid):
            details["flag"] = "saturated scales dropped"
        if not self.monotone_eps:
            details["flag"] = "set size not monotone in eps"
            unc += abs(P)
        return PressureEstimate(float(s), float(P), float(unc), "separated", details)


def pressure_separated(spec: PotentialSpec, E: float, delta: float, s, *, eps_grid=None,
                       t_grid=None, bundle: OrbitBundle | None = None,
                       table: SeparatedTable | None = None):
    """P_E(s) from (eps, t)-separated sets; a list when ``s`` is a sequence.

    For each eps, (1/t) log Z_t(eps, s) is fitted against 1/t and the intercept
    taken; the intercepts are then extrapolated to eps -> 0 with one Richardson step.
    The uncertainty adds the extrapolation correction, the propagated intercept
    errors and the fit residual.
    """
    if table is None:
        if bundle is None:
            bundle = orbit_bundle(spec, E, delta)
        table = SeparatedTable(bundle, eps_grid, t_grid)
    if np.ndim(s):
        return [table.estimate(float(v)) for v in s]
    return table.estimate(float(s))


# -- covers -----------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverSpec:
    """Balls of radius ``eps_cov`` around ``centers``; itineraries sampled every ``step``."""
    centers: np.ndarray
    eps_cov: float
    step: float
    depth: int
    reference: np.ndarray

    def __len__(self):
        return self.centers.shape[0]


def build_cover(bundle: OrbitBundle, eps_cov: float, step: float, depth: int) -> CoverSpec:
    """Greedy eps_cov-net of all bundle states at times 0, step, ..., (depth-1) step."""
    ks = [bundle.step(k * step) for k in range(depth)]
    pool = bundle.states[:, ks, :].reshape(-1, bundle.states.shape[2])
    order = _lex_order(pool)
    idx = K.greedy_net(np.ascontiguousarray(pool[order]), float(eps_cov))
    chosen = order[idx]
    centers = pool[chosen]
    return CoverSpec(centers, float(eps_cov), float(step), int(depth), chosen)


class _Refinement:
    """Itineraries of the sample through a cover and the refined-element memberships."""

    def __init__(self, bundle: OrbitBundle, cover: CoverSpec):
        self.bundle = bundle
        self.cover = cover
        tree = cKDTree(cover.centers)
        ks = [bundle.step(k * cover.step) for k in range(cover.depth)]
        X = bundle.states[:, ks, :]
        N = X.shape[0]
        self.it = np.empty((N, cover.depth), dtype=np.int64)
        self.balls = []
        for k in range(cover.depth):
            d, self.it[:, k] = tree.query(X[:, k])
            if np.any(d >= cover.eps_cov):
                bad = np.nonzero(d >= cover.eps_cov)[0]
                raise PressureError(f"cover misses {bad.size} sample points at step {k} "
                                    f"(first: {bundle.points[bad[0]].tolist()})")
            ptree = cKDTree(X[:, k])
            self.balls.append([np.sort(np.asarray(m, dtype=np.int64)) for m in
                               ptree.query_ball_point(cover.centers, cover.eps_cov * (1 - 1e-12))])
        self._members = {(): np.arange(N)}

    def members(self, word: tuple) -> np.ndarray:
        """Sample points in V_word (inside every ball of the itinerary)."""
        m = self._members.get(word)
        if m is None:
            m = np.intersect1d(self.members(word[:-1]), self.balls[len(word) - 1][word[-1]],
                               assume_unique=True)
            self._members[word] = m
        return m

    def log_sum(self, depth: int, s: float):
        """log of sum over a greedy minimal-weight subcover of exp(s S_T(V_beta))."""
        words = np.unique(self.it[:, :depth], axis=0)
        lamT = self.bundle.lam[:, self.bundle.step(depth * self.cover.step)]
        members = [self.members(tuple(w)) for w in words.tolist()]
        # S_T(V) = -inf over sample points in V of lambda^+_T
        logw = np.array([-s * lamT[m].min() for m in members])
        chosen = _greedy_cover(members, logw, len(self.bundle))
        return float(logsumexp(logw[chosen])), len(chosen), len(words)


def _greedy_cover(members, logw, n):
    """Greedy weighted set cover (lazy evaluation): best new-points-per-weight first."""
    uncovered = np.ones(n, dtype=bool)
    left = n
    heap = [(-(m.size * np.exp(-(lw - logw.max()))), j) for j, (m, lw) in
            enumerate(zip(members, logw))]
    heapq.heapify(heap)
    chosen = []
    while left:
        if not heap:
            raise PressureError("refined elements do not cover the sample")
        key, j = heapq.heappop(heap)
        fresh = int(uncovered[members[j]].sum())
        score = -(fresh * np.exp(-(logw[j] - logw.max())))
        if fresh == 0:
            continue
        if heap and score > heap[0][0]:
            heapq.heappush(heap, (score, j))
            continue
        chosen.append(j)
        uncovered[members[j]] = False
        left -= fresh
    return np.array(chosen, dtype=int)


def _slope(x, y):
    """Least-squares slope and its standard error."""
    if x.size < 2:
        return np.nan, np.inf
    if x.size == 2:
        return float((y[1] - y[0]) / (x[1] - x[0])), 0.0
    (b, a), cov = np.polyfit(x, y, 1, cov="unscaled")
    r = y - (a + b * x)
    return float(b), float(np.sqrt(cov[0, 0] * (r @ r) / (x.size - 2)))


def pressure_cover(spec: PotentialSpec, E: float, delta: float, s, *, eps_cov=None,
                   step=None, depth=None, bundle: OrbitBundle | None = None):
    """P_E(s) from refined covers.

    Elements are balls of an eps_cov-net; refined elements are the itineraries of
    the sample points through the balls at times 0, step, ..., (T-1) step, each
    weighted by exp(-s inf lambda^+_T) over the sample points it contains, and
    Z_T is the sum over a greedy minimal-weight subcover.  T runs up to the largest
    depth at which the subcover is not saturated by the finite sample.  P is the
    growth rate of log Z_T over [T/2, T] and the uncertainty is its change from the
    rate over [T/4, T/2], plus the fit error, plus the bias a prefactor linear in
    T would put on the slope (finitely trapped samples grow their itinerary counts
    that way even around a single orbit).
    """
    if bundle is None:
        bundle = orbit_bundle(spec, E, delta)
    t0 = bundle.metadata["t0"]
    step = t0 if step is None else float(step)
    if depth is None:
        depth = int(np.floor(bundle.times[-1] / step + 1e-9))
    if eps_cov is None:
        eps_cov = default_grids(bundle)[1][1]
    cover = build_cover(bundle, eps_cov, step, depth)
    ref = _Refinement(bundle, cover)
    cap = max(SATURATION * len(bundle), 1)
    D = 1
    for d in range(1, depth + 1):
        if ref.log_sum(d, 0.0)[1] > cap:
            break
        D = d
    if D < 2:
        raise PressureError("cover saturated at the first refinement; sample too sparse")
    depths = np.arange(1, D + 1)
    T = depths * step
    hi_half = depths >= (D + 1) // 2
    lo_half = (depths >= max((D + 3) // 4, 1)) & (depths <= (D + 1) // 2)
    Th = T[hi_half]
    prefactor = float(np.log(Th[-1] / Th[0]) / (Th[-1] - Th[0])) if Th.size > 1 else 0.0
    out = []
    for sv in np.atleast_1d(s):
        logs = [ref.log_sum(int(d), float(sv)) for d in depths]
        L = np.array([x[0] for x in logs])
        P, se = _slope(T[hi_half], L[hi_half])
        P_prev, _ = _slope(T[lo_half], L[lo_half])
        unc = se + prefactor + (abs(P - P_prev) if np.isfinite(P_prev) else abs(P))
        details = {"eps_cov": float(eps_cov), "step": step, "depth": int(D),
                   "log_sums": L.tolist(), "subcover_sizes": [x[1] for x in logs],
                   "refined_elements": [x[2] for x in logs], "cover_elements": len(cover),
                   "rate_previous": P_prev, "prefactor_bias": prefactor}
        out.append(PressureEstimate(float(sv), float(P), float(unc), "cover", details))
    return out if np.ndim(s) else out[0]


# -- curves, dimension, gap --------------------------------------------------------------

@dataclass(frozen=True)
class PressureCurve:
    s_values: np.ndarray
    P_values: np.ndarray
    uncertainties: np.ndarray
    method: str
    energy: float
    delta: float
    details: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["s,P,uncertainty,method"]
        for s, p, u in zip(self.s_values, self.P_values, self.uncertainties):
            lines.append(f"{s:.12g},{p:.12g},{u:.6g},{self.method}")
        return "\n".join(lines) + "\n"

    def is_nonincreasing(self, tol: float = TOL_PRESS) -> bool:
        return bool(np.all(np.diff(self.P_values) <= tol))

    def is_convex(self, tol: float = TOL_PRESS) -> bool:
        s, P = np.asarray(self.s_values), np.asarray(self.P_values)
        if s.size < 3:
            return True
        slopes = np.diff(P) / np.diff(s)
        return bool(np.all(np.diff(slopes) * np.diff(s)[1:] >= -tol))


def pressure_curve(spec: PotentialSpec, E: float, delta: float, s_values, *,
                   method: str = "separated", bundle: OrbitBundle | None = None,
                   **kwargs) -> PressureCurve:
    if bundle is None:
        bundle = orbit_bundle(spec, E, delta)
    if method == "separated":
        ests = pressure_separated(spec, E, delta, list(s_values), bundle=bundle, **kwargs)
    elif method == "cover":
        ests = pressure_cover(spec, E, delta, list(s_values), bundle=bundle, **kwargs)
    else:
        raise ValueError(f"unknown pressure method {method!r}")
    return PressureCurve(np.array([e.s for e in ests]), np.array([e.P for e in ests]),
                         np.array([e.uncertainty for e in ests]), method, float(E),
                         float(delta), {"estimates": [e.details for e in ests]})


@dataclass(frozen=True)
class DimensionEstimate:
    d_H: float
    bracket: tuple[float, float]
    dim_K: float
    box_count: float | None
    details: dict = field(default_factory=dict)


def dimension(spec: PotentialSpec, E: float, delta: float, *,
              bundle: OrbitBundle | None = None, table: SeparatedTable | None = None,
              s_max: float = 1.0, width: float = 1e-2, box_count: bool = True
              ) -> DimensionEstimate:
    """Root of s -> P_E(s) by bisection, with a box-counting cross-check."""
    if spec.dimension != 2:
        raise ValueError("the partial dimension is defined here for n = 2")
    if table is None:
        if bundle is None:
            bundle = orbit_bundle(spec, E, delta)
        table = SeparatedTable(bundle)
    bundle = table.bundle
    p0 = table.estimate(0.0).P
    p1 = table.estimate(s_max).P
    if p0 <= 0.0:
        # a single orbit or no topological entropy: the root sits at s = 0
        lo, hi = 0.0, 0.0
    else:
        if p1 >= 0.0:
            raise DimensionError(f"P({s_max}) = {p1:.3g} >= 0: no sign change on [0, {s_max}]")
        lo, hi = 0.0, s_max
        while hi - lo > width:
            mid = 0.5 * (lo + hi)
            if table.estimate(mid).P > 0:
                lo = mid
            else:
                hi = mid
    d = 0.5 * (lo + hi)
    box = None
    details = {"P0": p0, "P_smax": p1, "s_max": s_max}
    if box_count:
        try:
            box, bdet = box_counting_dimension(bundle)
            details["box_counting"] = bdet
        except PressureError as exc:
            details["box_counting"] = {"error": str(exc)}
    return DimensionEstimate(d, (lo, hi), 2 * d + 1, box, details)


def section_points(bundle: OrbitBundle, radius: float | None = None) -> np.ndarray:
    """Outgoing crossings of circles around the bump centres, as (bump, angle, p_t).

    Beyond ``radius`` the potential is negligible, so trajectories are straight
    and the crossing between two grid samples is found exactly.  ``p_t`` is the
    tangential momentum divided by sqrt(E).
    """
    spec = bundle.spec
    n = spec.dimension
    centers = np.array([b.center for b in spec.bumps])
    if radius is None:
        if centers.shape[0] > 1:
            dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
            radius = 0.3 * float(dist[dist > 0].min())
        else:
            radius = 3.0 * spec.bumps[0].width
    X = bundle.states[:, :, :n]
    Xi = bundle.states[:, :, n:]
    dt = bundle.dt
    out = []
    for j, c in enumerate(centers):
        r0 = np.linalg.norm(X[:, :-1] - c, axis=-1)
        r1 = np.linalg.norm(X[:, 1:] - c, axis=-1)
        i, k = np.nonzero((r0 < radius) & (r1 >= radius))
        for a, b in zip(i, k):
            x0 = X[a, b + 1] - c
            v = 2 * Xi[a, b + 1]
            # go back along the straight line to |x| = radius
            bq = x0 @ v
            cq = x0 @ x0 - radius ** 2
            aq = v @ v
            tau = (bq - np.sqrt(max(bq * bq - aq * cq, 0.0))) / aq
            tau = min(max(tau, 0.0), dt)
            y = x0 - tau * v
            ang = np.arctan2(y[1], y[0])
            pt = (y[0] * Xi[a, b + 1, 1] - y[1] * Xi[a, b + 1, 0]) / radius
            out.append((j, ang, pt / np.sqrt(bundle.energy)))
    return np.array(out).reshape(-1, 3)


def box_counting_dimension(bundle: OrbitBundle, levels=range(2, 12), min_boxes: int = 4):
    """Half the box-counting dimension of the section trace of the sample.

    Boxes are dyadic in the normalised coordinates (angle / 2 pi, (p_t + 1) / 2)
    on each bump's section.  The slope is fitted over the scales where boxes are
    neither too few nor saturated by the finite sample (fewer than a fifth of the
    distinct points).
    """
    pts = section_points(bundle)
    if pts.shape[0] < 50:
        raise PressureError(f"only {pts.shape[0]} section points; too few for box counting")
    u = (pts[:, 1] + np.pi) / (2 * np.pi)
    v = (pts[:, 2] + 1.0) / 2.0
    j = pts[:, 0].astype(int)
    uniq = np.unique(np.round(np.column_stack([j, u, v]), 8), axis=0).shape[0]
    scales, counts = [], []
    for L in levels:
        m = 2 ** L
        boxes = np.unique(np.column_stack([j, np.floor(u * m), np.floor(v * m)]), axis=0)
        scales.append(m)
        counts.append(boxes.shape[0])
    scales = np.array(scales, float)
    counts = np.array(counts, float)
    use = (counts >= min_boxes) & (counts <= uniq / 5)
    if use.sum() < 3:
        raise PressureError("not enough unsaturated scales for a box-counting fit")
    slope, icpt = np.polyfit(np.log(scales[use]), np.log(counts[use]), 1)
    return float(slope / 2), {"section_points": int(pts.shape[0]), "distinct": int(uniq),
                              "scales": scales.tolist(), "counts": counts.tolist(),
                              "fitted_scales": scales[use].tolist(),
                              "section_dimension": float(slope)}


@dataclass(frozen=True)
class GapPrediction:
    gamma: float | None
    interval: tuple[float, float] | None
    energies: list
    P_half: list
    uncertainties: list
    verdict: str


def predicted_gap(spec: PotentialSpec, E: float, delta: float, *, energies=None,
                  window: float | None = None, bundles: dict | None = None,
                  bundle_args: dict | None = None) -> GapPrediction:
    """gamma = min over sampled E' in the window of -P_{E'}(1/2), when positive.

    Each E' is sampled with its own narrow window (``window``, default delta / 4).
    An energy whose trapped set is empty contributes no constraint.
    """
    if energies is None:
        energies = [E - delta, E, E + delta]
    window = delta / 4 if window is None else window
    Ps, uncs = [], []
    for e in energies:
        b = (bundles or {}).get(e)
        try:
            if b is None:
                b = orbit_bundle(spec, e, window, **(bundle_args or {}))
            est = pressure_separated(spec, e, window, 0.5, bundle=b)
            Ps.append(est.P)
            uncs.append(est.uncertainty)
        except PressureError:
            Ps.append(-np.inf)
            uncs.append(0.0)
    finite = [(p, u) for p, u in zip(Ps, uncs) if np.isfinite(p)]
    if not finite:
        return GapPrediction(None, None, list(energies), Ps, uncs, "no trapping in window")
    worst = max(finite, key=lambda pu: pu[0])
    gamma = -worst[0]
    if gamma <= 0:
        return GapPrediction(None, None, list(energies), Ps, uncs, "no gap predicted")
    interval = (max(gamma - worst[1], 0.0), gamma + worst[1])
    return GapPrediction(gamma, interval, list(energies), Ps, uncs, "gap predicted")
