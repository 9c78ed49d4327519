"""Acceptance suite: one test (or one per config) for each criterion.

Every check records a line through ``conftest.record``; the terminal summary
prints one PASS/FAIL line per criterion with the measured values and the
tolerances pinned below.
"""

import time

import numpy as np
import pytest

from conftest import CONFIGS, record
from resgap import cli
from resgap import dynamics as D
from resgap import potentials as P
from resgap import pressure as PR
from resgap import quantum as Q
from resgap import trapping as T

# tolerances, one per criterion
C1_REL, C1_SECONDS = 1e-6, 60.0
C2_REL = 0.05
C3_MONO_CONVEX = 0.05
C4_REL, C4_BOX = 0.15, 0.05
C5_FRACTION, C5_SECONDS, C5_MAX_N = 0.8, 30 * 60.0, 160
C6_SPREAD, C6_FACTOR = 2.0, 3.0
C7_FRACTION = 0.8
C8_REL, C8_INCREASE = 0.25, 1e-10
C9_SYMP, C9_ENERGY, C9_COCYCLE, C9_THETA, C9_CAP = 1e-8, 1e-8, 1e-6, 1e-6, 1e-10
C9_CONE_GAMMA, C9_CONE_POINTS, C9_CONE_T = 0.5, 100, 4.0

SHIPPED = sorted(p.name for p in CONFIGS.glob("*.json"))


def _run(name, tmp_path_factory):
    cfg = cli.ExperimentConfig.load(CONFIGS / name)
    return cli.Run(cfg, tmp_path_factory.mktemp(name.split(".")[0]), 1, 1.0, False)


@pytest.fixture(scope="module")
def eckart_run(tmp_path_factory):
    return _run("eckart.json", tmp_path_factory)


@pytest.fixture(scope="module")
def threebump_run(tmp_path_factory):
    return _run("threebump.json", tmp_path_factory)


@pytest.fixture(scope="module")
def runs(tmp_path_factory, eckart_run, threebump_run):
    have = {"eckart.json": eckart_run, "threebump.json": threebump_run}
    return {n: have.get(n) or _run(n, tmp_path_factory) for n in SHIPPED}


@pytest.fixture(scope="module")
def threebump_curves(threebump_run):
    run = threebump_run
    c = run.cfg
    b = run.bundle()
    s = [0.0, 0.25, 0.5, 0.75, 1.0]
    sep = PR.pressure_curve(c.potential, c.E, c.delta, s, method="separated", bundle=b)
    cov = PR.pressure_curve(c.potential, c.E, c.delta, s, method="cover", bundle=b)
    return sep, cov


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_eckart_resonances_match_poles(oracle):
    ref = [complex(*z) for z in oracle["sech2_poles"]["1/16"]]
    t0 = time.perf_counter()
    op = Q.assemble_operator(P.eckart(), Q.GridSpec(1, 12.0, 2048), 1 / 16, Q.ScalingSpec(0.4),
                             energy_max=1.2)
    # the third pole sits at Im z = -0.31, below the default reach
    res = Q.eigen_resonances(op, (1.0, 0.05, 0.4), reach=1.0)
    elapsed = time.perf_counter() - t0
    got = sorted(res.values, key=lambda z: abs(z - 1))[:3]
    errs = [abs(g - r) / abs(r) for g, r in zip(got, sorted(ref, key=lambda z: abs(z - 1)))]
    ok = len(got) == 3 and max(errs) <= C1_REL and elapsed <= C1_SECONDS
    record(1, ok, f"max rel err {max(errs):.2e} (<= {C1_REL:g}), {elapsed:.1f} s (<= {C1_SECONDS:g} s)")
    assert len(got) == 3
    assert max(errs) <= C1_REL
    assert elapsed <= C1_SECONDS


# -- 2 ------------------------------------------------------------------------------

def test_criterion_2_gap_law_at_fixed_point(eckart_run):
    rows = []
    for h in eckart_run.cfg.quantum["h"]:
        lead = eckart_run.resonances(float(h)).leading()
        rows.append((h, -lead.z.imag / h))
    worst = max(abs(r - 1) for _, r in rows)
    ok = worst <= C2_REL
    record(2, ok, ", ".join(f"h={h:g}: -Im z0/h={r:.5f}" for h, r in rows)
           + f" (within {C2_REL:.0%} of 1)")
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_pressure_cross_validation(threebump_curves):
    sep, cov = threebump_curves
    parts, ok = [], True
    for s in (0.0, 0.5, 1.0):
        i = list(sep.s_values).index(s)
        d = abs(sep.P_values[i] - cov.P_values[i])
        u = float(np.hypot(sep.uncertainties[i], cov.uncertainties[i]))
        ok &= d <= u
        parts.append(f"s={s:g}: sep {sep.P_values[i]:.3f} cover {cov.P_values[i]:.3f} "
                     f"|diff| {d:.3f} <= {u:.3f}")
    shape = all(c.is_nonincreasing(C3_MONO_CONVEX) and c.is_convex(C3_MONO_CONVEX) for c in (sep, cov))
    ok &= shape
    record(3, ok, "; ".join(parts) + f"; monotone+convex (tol {C3_MONO_CONVEX}) {shape}")
    assert ok


# -- 4 ------------------------------------------------------------------------------

RATIO_SAMPLERS = {
    8: None,  # taken from the shipped threebump config
    # desk budget: 128^2 seeds did not finish in 20 CPU-minutes
    16: {"seed_grid": [64, 64], "span": 16 / np.sqrt(3) + 1, "refine_rounds": 1},
}


@pytest.mark.parametrize("ratio", sorted(RATIO_SAMPLERS))
def test_criterion_4_dimension_asymptotics(ratio, threebump_run):
    if RATIO_SAMPLERS[ratio] is None:
        spec = threebump_run.cfg.potential
        b = threebump_run.bundle()
    else:
        spec = P.three_bump_for_ratio(ratio, amp_over_energy=50.0)
        b = PR.orbit_bundle(spec, 1.0, 0.01, max_points=20000, stride_units=0.25,
                            sampler_args=RATIO_SAMPLERS[ratio])
    est = PR.dimension(spec, 1.0, 0.01, bundle=b)
    target = np.log(2) / np.log(ratio)
    rel = abs(est.d_H - target) / target
    box = est.box_count
    box_ok = box is not None and abs(box - est.d_H) <= C4_BOX
    ok = rel <= C4_REL and box_ok
    box_txt = "n/a" if box is None else f"{box:.3f}"
    record(4, ok, f"R/a={ratio}: d_H {est.d_H:.3f} vs log2/log(R/a) {target:.3f} "
                  f"({rel:.0%}, tol {C4_REL:.0%}), box {box_txt} (tol {C4_BOX})")
    assert ok


# -- 5 ------------------------------------------------------------------------------

def test_criterion_5_resonance_free_strip(threebump_run, threebump_curves):
    run = threebump_run
    q = run.cfg.quantum
    sep, _ = threebump_curves
    P_half = float(sep.P_values[list(sep.s_values).index(0.5)])
    assert P_half < 0, "no gap predicted"
    gamma = C5_FRACTION * -P_half
    assert q["grid"]["N"] <= C5_MAX_N and run.cfg.potential.dimension == 2
    parts, ok = [], True
    for h in map(float, q["h"]):
        t0 = time.perf_counter()
        res = run.resonances(h, gamma * h)
        v = Q.check_gap(res, gamma, h)
        dt = time.perf_counter() - t0
        lead = res.leading()
        lead_txt = "none" if lead is None else f"{lead.z.imag / h:.3f}"
        ok &= bool(v) and dt <= C5_SECONDS
        parts.append(f"h={h:g}: {len(res)} res, leading Im z/h {lead_txt}, verdict {bool(v)}, {dt:.0f} s")
    record(5, ok, f"P(1/2)={P_half:.3f}, gamma={gamma:.3f}; " + "; ".join(parts)
           + f" (each <= {C5_SECONDS / 60:.0f} min, N={q['grid']['N']})")
    assert ok


# -- 6 ------------------------------------------------------------------------------

def test_criterion_6_resolvent_scaling(eckart_run):
    res = cli.cmd_resolvent(eckart_run)
    spread = res["spread"]
    bound = C6_FACTOR * res["prediction"]
    ok = spread < C6_SPREAD and max(res["scaled"]) <= bound
    record(6, ok, "norm*h/log(1/h) = " + ", ".join(f"{s:.3f}" for s in res["scaled"])
           + f"; spread {spread:.2f} (< {C6_SPREAD:g}); max <= {bound:.2f} "
           f"(= {C6_FACTOR:g} x {res['prediction']:.2f})")
    assert ok


# -- 7 ------------------------------------------------------------------------------

def test_criterion_7_fbi_mass_on_outgoing_set(eckart_run):
    res = cli.cmd_husimi(eckart_run)
    frac = res["mass_fraction_near_outgoing"]
    ok = frac is not None and frac >= C7_FRACTION
    record(7, ok, f"h={res['h']:g}: mass fraction within 3 sqrt(h) of Gamma+ {frac:.4f} (>= {C7_FRACTION})")
    assert ok


# -- 8 ------------------------------------------------------------------------------

def test_criterion_8_propagator_decay():
    h = 1 / 16
    grid = Q.GridSpec(1, 12.0, 1024)
    op = Q.assemble_operator(P.eckart(), grid, h, Q.CapSpec(3.0, 6.0, 1.0), energy_max=1.2)
    psi = Q.energy_localize(op, Q.coherent_state(grid, h, 0.0, 0.0), 1.0, 0.3)
    hist = Q.propagate_cap(op, psi, 8.0, 0.005, energy=1.0, delta0=0.3, record_every=10)
    slope = hist.slope(2.0, 6.0)
    rel = abs(slope + 1)
    ok = rel <= C8_REL and hist.max_increase <= C8_INCREASE
    record(8, ok, f"log-norm slope on [2,6] {slope:.3f} (within {C8_REL:.0%} of -1), "
                  f"max step increase {hist.max_increase:.1e} (<= {C8_INCREASE:g})")
    assert ok


# -- 9 ------------------------------------------------------------------------------

def _trapped_points(run, count):
    spec = run.cfg.potential
    if spec.dimension == 1:
        # the eckart trapped set at the barrier energy is the top itself
        return np.zeros((1, 2))
    b = run.bundle()
    idx = np.unique(np.linspace(0, len(b) - 1, count).round().astype(int))
    return b.points[idx]


@pytest.mark.parametrize("name", SHIPPED)
def test_criterion_9_invariants(name, runs):
    run = runs[name]
    c = run.cfg
    spec = c.potential
    n = spec.dimension
    parts, ok = [], True

    # symplecticity and energy drift along the configured orbits
    f = c.classical["flow"]
    symp = symp_abs = drift = 0.0
    t_end = float(f["t_max"])
    for p in f["points"]:
        rho = D.PhasePoint.from_vec(np.asarray(p, float))
        for t in np.linspace(t_end / 4, t_end, 4):
            img, blk = D.flow_with_jacobian(spec, rho, t)
            symp = max(symp, D.symplectic_defect(blk.J, relative=True))
            symp_abs = max(symp_abs, D.symplectic_defect(blk.J))
            drift = max(drift, abs(D.hamiltonian(spec, img) - D.hamiltonian(spec, rho)) / (1 + t))
    ok &= symp <= C9_SYMP and drift <= C9_ENERGY
    parts.append(f"symp {symp:.1e} relative to |J|^2 ({symp_abs:.1e} absolute), drift/(1+t) {drift:.1e}")

    # cocycle and cone invariance on trapped points
    pts = _trapped_points(run, C9_CONE_POINTS)
    rho = D.PhasePoint.from_vec(pts[len(pts) // 2])
    s, t = 1.3, 2.1
    a = T.unstable_jacobian(spec, rho, s)
    b = T.unstable_jacobian(spec, D.flow(spec, rho, s), t)
    full = T.unstable_jacobian(spec, rho, s + t)
    coc = abs(a + b - full) / max(1.0, abs(full))
    ok &= coc <= C9_COCYCLE
    parts.append(f"cocycle {coc:.1e}")
    if len(pts) == 1:
        good, worst = T.cone_invariance(spec, D.PhasePoint.from_vec(pts[0]), C9_CONE_T,
                                        C9_CONE_GAMMA, n_vectors=C9_CONE_POINTS)
        where = f"{C9_CONE_POINTS} vectors at the single trapped point"
    else:
        worst = max(T.cone_invariance(spec, D.PhasePoint.from_vec(p), C9_CONE_T, C9_CONE_GAMMA)[1]
                    for p in pts)
        good = worst <= C9_CONE_GAMMA
        where = f"{len(pts)} points"
    ok &= good and len(pts) in (1, C9_CONE_POINTS)
    parts.append(f"cone ratio {worst:.3f} on {where}")

    # theta independence
    th = run.theta_check()
    ok &= th["max_relative_change"] <= C9_THETA
    parts.append(f"theta {th['max_relative_change']:.1e} ({len(th['z'])} res)")

    # CAP confinement: the numerical range bound max eig((A - A^H) / 2i) <= 0 covers every eigenvalue
    q = c.quantum
    h = float(q["h"][0])
    op = run.operator(h, run.cap())
    A = op.matrix
    if op.dense:
        top = float(np.max(np.linalg.eigvalsh((A - A.conj().T) / 2j)))
        top = max(top, float(np.max(np.linalg.eigvals(A).imag)))
    else:
        # Gershgorin rows: ARPACK stalls on the hugely degenerate top eigenvalue 0 of -W
        S = ((A - A.conj().T) / 2j).tocsr()
        diag = S.diagonal().real
        off = np.asarray(abs(S).sum(axis=1)).ravel() - np.abs(S.diagonal())
        top = float(np.max(diag + off))
    ok &= top <= C9_CAP
    parts.append(f"CAP max Im {top:.1e}")

    record(9, ok, f"{name}: " + ", ".join(parts))
    assert symp <= C9_SYMP and drift <= C9_ENERGY
    assert coc <= C9_COCYCLE
    assert good
    assert th["max_relative_change"] <= C9_THETA
    assert top <= C9_CAP


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-rA"]))
