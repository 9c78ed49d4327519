"""Command-line driver: one JSON config in, CSV/JSON/SVG artifacts out.

Every artifact carries the hash of the resolved config, and identical configs
produce byte-identical files (no timestamps, fixed float formatting, sorted keys).
Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import dynamics as dyn
from . import phase_space as ps
from . import pressure as pr
from . import quantum as qm
from . import trapping as tr
from .potentials import PotentialError, PotentialSpec

log = logging.getLogger("resgap")

SCHEMA_VERSION = 1

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_grid = {
    "type": "object",
    "properties": {"L": _pos, "N": {"type": "integer", "minimum": 8},
                   "boundary": {"enum": ["periodic_fourier", "dirichlet_fd"]}},
    "required": ["L", "N"],
    "additionalProperties": False,
}
_cap = {
    "type": "object",
    "properties": {"R1": {"type": "number", "minimum": 0}, "r1": _pos,
                   "strength": {"type": "number", "minimum": 0}},
    "required": ["R1", "r1"],
    "additionalProperties": False,
}
_deformation = {
    "type": "object",
    "properties": {"type": {"enum": ["scaling", "cap", "none"]},
                   "theta": {"type": "number", "minimum": 0},
                   "mode": {"enum": ["global", "exterior"]},
                   "profile": {"enum": ["quintic", "smooth"]},
                   "R0": {"type": "number", "minimum": 0},
                   "R1": {"type": "number", "minimum": 0}, "r1": _pos,
                   "strength": {"type": "number", "minimum": 0}},
    "required": ["type"],
    "additionalProperties": False,
}
_h_list = {"type": "array", "items": _pos, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "potential": {"anyOf": [{"type": "object"}, {"type": "string"}]},
        "energy": {
            "type": "object",
            "properties": {"E": _pos, "delta": _pos},
            "required": ["E", "delta"],
            "additionalProperties": False,
        },
        "classical": {
            "type": "object",
            "properties": {
                "flow": {
                    "type": "object",
                    "properties": {"points": {"type": "array", "items": {"type": "array", "items": _num}},
                                   "t_max": _pos, "samples": {"type": "integer", "minimum": 2}},
                    "required": ["points", "t_max"],
                    "additionalProperties": False,
                },
                "sampler": {"type": "object"},
                "bundle": {"type": "object"},
                "pressure": {
                    "type": "object",
                    "properties": {
                        "s_values": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                        "methods": {"type": "array", "items": {"enum": ["separated", "cover"]}, "minItems": 1},
                    },
                    "additionalProperties": False,
                },
                "energies": {"type": "array", "items": _pos, "minItems": 1},
                "gap_window": _pos,
            },
            "additionalProperties": False,
        },
        "quantum": {
            "type": "object",
            "properties": {
                "h": _h_list,
                "grid": _grid,
                "deformation": _deformation,
                "energy_max": _pos,
                "box": {
                    "type": "object",
                    "properties": {"delta": _pos, "depth": _pos, "depth_over_h": _pos},
                    "additionalProperties": False,
                },
                "reach": _pos,
                "k": {"type": "integer", "minimum": 2},
                "gap_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "cap": _cap,
                "theta_check": {
                    "type": "object",
                    "properties": {
                        "h": _pos, "grid": _grid, "deformation": _deformation,
                        "thetas": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                        "box": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                    },
                    "required": ["thetas", "box"],
                    "additionalProperties": False,
                },
                "resolvent": {
                    "type": "object",
                    "properties": {"h": _h_list, "grid": _grid, "cutoff_radius": _pos},
                    "additionalProperties": False,
                },
                "husimi": {
                    "type": "object",
                    "properties": {
                        "h": _pos, "grid": _grid,
                        "x": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                        "xi": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                        "shape": {"type": "array", "items": {"type": "integer", "minimum": 2},
                                  "minItems": 2, "maxItems": 2},
                        "base": {"type": "array", "items": _num},
                        "axes": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                 "minItems": 2, "maxItems": 2},
                        "neighbourhood_over_sqrt_h": _pos,
                        "shell": _pos,
                    },
                    "additionalProperties": False,
                },
            },
            "additionalProperties": False,
        },
        "outputs": {
            "type": "object",
            "properties": {"directory": {"type": "string"},
                           "formats": {"type": "array", "items": {"enum": ["csv", "json", "svg"]}},
                           "plot": {"type": "boolean"}},
            "additionalProperties": False,
        },
        "seed": {"type": "integer", "minimum": 0},
    },
    "required": ["schema_version", "potential", "energy", "seed"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    """The configuration is malformed or inconsistent."""


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    potential: PotentialSpec
    E: float
    delta: float
    seed: int
    base_dir: Path

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        base_dir = Path(base_dir)
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"schema error at {where}: {exc.message}") from exc
        pot = raw["potential"]
        if isinstance(pot, str):
            f = base_dir / pot
            if not f.is_file():
                raise ConfigError(f"potential file {f} does not exist")
            pot = json.loads(f.read_text())
        try:
            spec = PotentialSpec.from_dict(pot)
        except PotentialError as exc:
            raise ConfigError(f"schema error at potential: {exc}") from exc
        q = raw.get("quantum", {})
        for key, hs in (("quantum/h", q.get("h")), ("quantum/resolvent/h", q.get("resolvent", {}).get("h"))):
            if hs is not None and any(b >= a for a, b in zip(hs, hs[1:])):
                raise ConfigError(f"schema error at {key}: h-list must be strictly decreasing")
        resolved = dict(raw, potential=spec.to_dict())
        return cls(resolved, spec, float(raw["energy"]["E"]), float(raw["energy"]["delta"]),
                   int(raw["seed"]), base_dir)

    @property
    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.raw).encode()).hexdigest()[:16]

    @property
    def classical(self) -> dict:
        return self.raw.get("classical", {})

    @property
    def quantum(self) -> dict:
        return self.raw.get("quantum", {})

    def need_quantum(self) -> dict:
        if "quantum" not in self.raw or "h" not in self.quantum or "grid" not in self.quantum:
            raise ConfigError("this command needs a quantum section with h and grid")
        return self.quantum


# -- helpers --------------------------------------------------------------------------------

def _f(x) -> str:
    return f"{x:.12g}"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (complex, np.complexfloating)):
        return {"re": float(x.real), "im": float(x.imag)}
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def _grid(d: dict, n: int) -> qm.GridSpec:
    return qm.GridSpec(n, float(d["L"]), int(d["N"]), d.get("boundary", "periodic_fourier"))


def _deformation(d: dict | None):
    if d is None or d["type"] == "none":
        return None
    if d["type"] == "cap":
        if "R1" not in d or "r1" not in d:
            raise ConfigError("schema error at quantum/deformation: cap needs R1 and r1")
        return qm.CapSpec(float(d["R1"]), float(d["r1"]), float(d.get("strength", 1.0)))
    if "theta" not in d:
        raise ConfigError("schema error at quantum/deformation: scaling needs theta")
    return qm.ScalingSpec(float(d["theta"]), d.get("mode", "global"), float(d.get("R0", 0.0)),
                          d.get("profile", "quintic"))


def _svg_plot(series, xlabel, ylabel, size=(420, 300), scatter=False) -> str:
    """Minimal line/scatter plot; series is a list of (label, xs, ys)."""
    W, H = size
    pad = 40
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    ys = np.concatenate([np.asarray(s[2], float) for s in series])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def X(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def Y(v):
        return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" '
             'fill="none" stroke="#888"/>',
             f'<text x="{W / 2}" y="{H - 8}" font-size="12" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{H / 2}" font-size="12" transform="rotate(-90 12 {H / 2})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<text x="{pad}" y="{H - pad + 14}" font-size="10">{x0:.3g}</text>',
             f'<text x="{W - pad}" y="{H - pad + 14}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 4}" y="{H - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
             f'<text x="{pad - 4}" y="{pad + 8}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (label, sx, sy) in enumerate(series):
        c = colors[i % len(colors)]
        if scatter:
            parts += [f'<circle cx="{X(a):.2f}" cy="{Y(b):.2f}" r="2.5" fill="{c}"/>'
                      for a, b in zip(sx, sy)]
        else:
            pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(sx, sy))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{c}"/>')
        parts.append(f'<text x="{W - pad - 4}" y="{pad + 14 * (i + 1)}" font-size="11" '
                     f'text-anchor="end" fill="{c}">{label}</text>')
    parts.append("</svg>\n")
    return "".join(parts)


class Run:
    """State shared by the subcommands of one invocation."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int, tol_scale: float,
                 plot: bool):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.tol_scale = tol_scale
        self.plot = plot or bool(cfg.raw.get("outputs", {}).get("plot", False))
        self.written: list[str] = []
        self._bundle = None
        self._gap = None
        self.out.mkdir(parents=True, exist_ok=True)

    # tolerances scaled by --tol-scale
    @property
    def tol_res(self) -> float:
        return qm.TOL_RES * self.tol_scale

    @property
    def tol_flow(self) -> float:
        return dyn.TOL * self.tol_scale

    def write(self, name: str, text: str):
        path = self.out / name
        if name.endswith(".csv"):
            text = f"# config_hash={self.cfg.hash}\n" + text
        path.write_text(text)
        self.written.append(name)

    def write_json(self, name: str, obj: dict):
        obj = dict(obj, config_hash=self.cfg.hash, resgap_version=__version__)
        self.write(name, json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")

    # -- classical pieces --------------------------------------------------------
    def sampler_args(self) -> dict:
        return dict(self.cfg.classical.get("sampler", {}))

    def bundle_args(self) -> dict:
        args = dict(self.cfg.classical.get("bundle", {}))
        args["sampler_args"] = self.sampler_args()
        return args

    def bundle(self) -> pr.OrbitBundle:
        if self._bundle is None:
            c = self.cfg
            self._bundle = pr.orbit_bundle(c.potential, c.E, c.delta, **self.bundle_args())
        return self._bundle

    def gap_prediction(self) -> pr.GapPrediction:
        if self._gap is None:
            c = self.cfg
            energies = c.classical.get("energies")
            window = c.classical.get("gap_window")
            bundles = None
            if energies is not None and window is not None and float(window) == c.delta:
                # the main bundle already covers this shell
                bundles = {e: self.bundle() for e in energies if float(e) == c.E}
            self._gap = pr.predicted_gap(c.potential, c.E, c.delta, energies=energies,
                                         window=window, bundles=bundles,
                                         bundle_args=self.bundle_args())
        return self._gap

    # -- quantum pieces ----------------------------------------------------------
    def operator(self, h: float, deformation, grid_cfg=None) -> qm.Operator:
        q = self.cfg.need_quantum()
        grid = _grid(grid_cfg or q["grid"], self.cfg.potential.dimension)
        return qm.assemble_operator(self.cfg.potential, grid, h, deformation,
                                    energy_max=float(q.get("energy_max", 1.2 * self.cfg.E)))

    def box(self, h: float, min_depth: float = 0.0) -> tuple:
        q = self.cfg.quantum
        b = q.get("box", {})
        if "depth" in b:
            depth = float(b["depth"])
        else:
            depth = float(b.get("depth_over_h", 1.0)) * h
        return (self.cfg.E, float(b.get("delta", self.cfg.delta)), max(depth, min_depth))

    def resonances(self, h: float, min_depth: float = 0.0) -> qm.ResonanceSet:
        q = self.cfg.need_quantum()
        op = self.operator(h, _deformation(q.get("deformation")))
        return qm.eigen_resonances(op, self.box(h, min_depth), h, tol_res=self.tol_res,
                                   k=int(q.get("k", 12)), threads=self.threads,
                                   reach=float(q.get("reach", qm.SCALING_REACH)))

    def theta_check(self) -> dict:
        """Resonances in the ``theta_check`` box at both angles, matched by distance."""
        q = self.cfg.need_quantum()
        tc = q.get("theta_check")
        if tc is None:
            raise ConfigError("config has no quantum/theta_check section")
        h = float(tc.get("h", q["h"][0]))
        base = dict(tc.get("deformation", q.get("deformation") or {"type": "scaling"}))
        if base.get("type") != "scaling":
            raise ConfigError("schema error at quantum/theta_check: needs a scaling deformation")
        sets = []
        for th in tc["thetas"]:
            op = self.operator(h, _deformation(dict(base, theta=float(th))), tc.get("grid"))
            sets.append(qm.eigen_resonances(op, tuple(map(float, tc["box"])), h, tol_res=self.tol_res,
                                            k=int(q.get("k", 12)), threads=self.threads))
        a, b = (np.sort_complex(r.values) for r in sets)
        if a.size == 0 or a.size != b.size:
            raise qm.SolveError(f"theta check found {a.size} and {b.size} resonances in the box")
        rel = [float(np.min(np.abs(b - z)) / abs(z)) for z in a]
        return {"h": h, "thetas": list(tc["thetas"]), "z": list(a), "relative_change": rel,
                "max_relative_change": max(rel)}

    def cap(self) -> qm.CapSpec:
        q = self.cfg.need_quantum()
        d = q.get("cap")
        if d is None:
            dfm = q.get("deformation", {})
            if dfm.get("type") != "cap":
                raise ConfigError("this command needs quantum/cap (or a cap deformation)")
            d = dfm
        return qm.CapSpec(float(d["R1"]), float(d["r1"]), float(d.get("strength", 1.0)))


# -- subcommands --------------------------------------------------------------------------

def cmd_flow(run: Run) -> dict:
    c = run.cfg
    f = c.classical.get("flow")
    if f is None:
        raise ConfigError("flow needs classical/flow with points and t_max")
    n = c.potential.dimension
    times = np.linspace(0.0, float(f["t_max"]), int(f.get("samples", 101)))
    names = [f"x{i + 1}" for i in range(n)] + [f"xi{i + 1}" for i in range(n)]
    lines = ["orbit,t," + ",".join(names) + ",energy"]
    drift = 0.0
    for k, p in enumerate(f["points"]):
        if len(p) != 2 * n:
            raise ConfigError(f"schema error at classical/flow/points/{k}: need {2 * n} coordinates")
        rho = dyn.PhasePoint.from_vec(np.asarray(p, float))
        rows = np.vstack([rho.vec, dyn.trajectory(c.potential, rho, times[1:], run.tol_flow)])
        e0 = c.potential.energy(rows[0, :n], rows[0, n:])
        for t, row in zip(times, rows):
            e = c.potential.energy(row[:n], row[n:])
            drift = max(drift, abs(e - e0))
            lines.append(f"{k},{_f(t)}," + ",".join(_f(v) for v in row) + f",{_f(e)}")
    run.write("flow.csv", "\n".join(lines) + "\n")
    return {"orbits": len(f["points"]), "max_energy_drift": drift}


def cmd_trapped_set(run: Run) -> dict:
    c = run.cfg
    sample = tr.sample_trapped_set(c.potential, c.E, c.delta, **run.sampler_args())
    run.write("trapped_set.csv", sample.to_csv(c.potential))
    return {"points": len(sample), "T_trap": sample.t_trap, "metadata": sample.metadata}


def cmd_pressure(run: Run) -> dict:
    c = run.cfg
    opts = c.classical.get("pressure", {})
    s_values = opts.get("s_values", [0.0, 0.25, 0.5, 0.75, 1.0])
    methods = opts.get("methods", ["separated", "cover"])
    b = run.bundle()
    out = {"bundle_points": len(b), "lam_est": b.lam_est, "curves": {}}
    series = []
    for m in methods:
        curve = pr.pressure_curve(c.potential, c.E, c.delta, s_values, method=m, bundle=b)
        run.write(f"pressure_{m}.csv", curve.to_csv())
        out["curves"][m] = {
            "s": curve.s_values, "P": curve.P_values, "uncertainty": curve.uncertainties,
            "nonincreasing": curve.is_nonincreasing(), "convex": curve.is_convex(),
        }
        series.append((m, curve.s_values, curve.P_values))
    if run.plot:
        run.write("pressure.svg", _svg_plot(series, "s", "P(s)"))
    return out


def cmd_dimension(run: Run) -> dict:
    c = run.cfg
    d = pr.dimension(c.potential, c.E, c.delta, bundle=run.bundle())
    res = {"d_H": d.d_H, "bracket": d.bracket, "dim_K": d.dim_K, "box_count": d.box_count}
    run.write_json("dimension.json", res)
    return res


def _gap_dict(g: pr.GapPrediction) -> dict:
    return {"gamma": g.gamma, "interval": g.interval, "energies": g.energies,
            "P_half": g.P_half, "uncertainties": g.uncertainties, "verdict": g.verdict}


def cmd_gap_predict(run: Run) -> dict:
    res = _gap_dict(run.gap_prediction())
    run.write_json("gap_predict.json", res)
    return res


def _resonance_rows(sets) -> str:
    lines = []
    for k, r in enumerate(sets):
        body = r.to_csv().splitlines()
        lines += body if k == 0 else body[1:]
    if not lines:
        lines = ["re_z,im_z,residual,method,h,theta_or_cap"]
    return "\n".join(lines) + "\n"


def _resonance_manifest(run: Run, sets) -> dict:
    q = run.cfg.quantum
    return {"potential_hash": run.cfg.potential.digest(),
            "grid": q["grid"], "deformation": q.get("deformation"),
            "runs": [{"h": r.h, "box": r.box, "count": len(r), "deformation": r.deformation,
                      "grid_hash": r.entries[0].grid_hash if r.entries else None}
                     for r in sets]}


def cmd_resonances(run: Run) -> dict:
    q = run.cfg.need_quantum()
    sets = [run.resonances(float(h)) for h in q["h"]]
    run.write("resonances.csv", _resonance_rows(sets))
    man = _resonance_manifest(run, sets)
    run.write_json("resonances.json", man)
    if run.plot:
        run.write("resonances.svg", _svg_plot(
            [(f"h={r.h:g}", [e.z.real for e in r.entries], [e.z.imag / r.h for e in r.entries])
             for r in sets if r.entries] or [("none", [0], [0])], "Re z", "Im z / h", scatter=True))
    return {"counts": {str(r.h): len(r) for r in sets}}


def _gap_check(run: Run) -> tuple[dict, list]:
    q = run.cfg.need_quantum()
    g = run.gap_prediction()
    frac = float(q.get("gap_fraction", 0.9))
    rows, sets = [], []
    gamma = None if g.gamma is None else frac * g.gamma
    for h in q["h"]:
        h = float(h)
        r = run.resonances(h, 0.0 if gamma is None else gamma * h)
        sets.append(r)
        lead = r.leading()
        row = {"h": h, "box": r.box, "count": len(r),
               "leading": None if lead is None else lead.z,
               "leading_im_over_h": None if lead is None else lead.z.imag / h}
        if gamma is not None:
            v = qm.check_gap(r, gamma, h)
            row["verdict"] = bool(v)
            row["violators"] = [e.z for e in v.violators]
        rows.append(row)
    return {"predicted": _gap_dict(g), "gap_fraction": frac, "gamma_checked": gamma,
            "runs": rows, "all_pass": gamma is not None and all(r["verdict"] for r in rows)}, sets


def cmd_gap_check(run: Run) -> dict:
    res, sets = _gap_check(run)
    run.write("resonances.csv", _resonance_rows(sets))
    run.write_json("gap_check.json", res)
    return res


def cmd_resolvent(run: Run) -> dict:
    c = run.cfg
    q = c.need_quantum()
    rc = q.get("resolvent", {})
    cap = run.cap()
    hs = [float(h) for h in rc.get("h", q["h"])]
    chi = qm.Cutoff(float(rc.get("cutoff_radius", cap.R1)))
    lines = ["h,E,norm,norm_h_over_log"]
    scaled = []
    for h in hs:
        op = run.operator(h, cap, rc.get("grid"))
        nrm = qm.resolvent_norm(op, c.E, chi, h, tol=1e-10 * run.tol_scale)
        s = nrm * h / np.log(1 / h)
        scaled.append(s)
        lines.append(f"{_f(h)},{_f(c.E)},{_f(nrm)},{_f(s)}")
    run.write("resolvent.csv", "\n".join(lines) + "\n")
    res = {"h": hs, "scaled": scaled, "spread": max(scaled) / min(scaled)}
    g = run.gap_prediction()
    if g.gamma is not None:
        pred = c.potential.dimension / (2 * g.gamma)
        res["prediction"] = pred
        res["ratio_to_prediction"] = max(scaled) / pred
    run.write_json("resolvent.json", res)
    return res


def cmd_husimi(run: Run) -> dict:
    c = run.cfg
    q = c.need_quantum()
    hc = q.get("husimi", {})
    n = c.potential.dimension
    h = float(hc.get("h", q["h"][0]))
    cap = run.cap()
    op = run.operator(h, cap, hc.get("grid"))
    box = (c.E, float(q.get("box", {}).get("delta", c.delta)), min(cap.strength / 2, 4 * h))
    r = qm.eigen_resonances(op, box, h, tol_res=run.tol_res, k=int(q.get("k", 12)),
                            threads=run.threads)
    lead = r.leading()
    if lead is None:
        raise qm.SolveError("no resonance found in the box for the Husimi plot")
    z, u, _ = qm.state_on_grid(op, lead.z)
    # the state is physical only where the absorber vanishes
    u = u * (np.linalg.norm(op.grid.points(), axis=1) <= cap.R1)
    R = cap.R1
    default_xi = 1.6 * np.sqrt(c.E)
    win = ps.Window(tuple(hc.get("x", (-R, R))), tuple(hc.get("xi", (-default_xi, default_xi))),
                    tuple(hc.get("shape", (121, 121))),
                    tuple(hc["base"]) if "base" in hc else None,
                    tuple(hc.get("axes", (0, n))))
    field = ps.fbi_transform(u, op.grid, h, win)
    res = {"h": h, "z": z, "field_mass": field.mass()}
    nb = float(hc.get("neighbourhood_over_sqrt_h", 3.0)) * np.sqrt(h)
    shell = float(hc.get("shell", 0.2))
    if n == 1 and c.potential.kind == "eckart" and len(c.potential.bumps) == 1:
        S = ps.outgoing_branches_eckart(c.potential, c.E, max(abs(win.x_range[0]), abs(win.x_range[1])) + 1)
        res["mass_fraction_near_outgoing"] = ps.mass_fraction_on_set(
            field, S, nb, spec=c.potential, energy=c.E, delta=shell)
    else:
        res["mass_fraction_near_outgoing"] = None
        res["note"] = "outgoing-set fraction only evaluated for the closed-form 1D case"
    run.write("husimi.csv", field.to_csv())
    if run.plot:
        run.write("husimi.svg", field.to_svg(log_scale=True))
    run.write_json("husimi.json", res)
    return res


def cmd_report(run: Run) -> dict:
    c = run.cfg
    res, sets = _gap_check(run)
    consistent = True
    table = []
    for row, r in zip(res["runs"], sets):
        entries = [{"z": e.z, "residual": e.residual, "method": e.method} for e in r.entries]
        table.append({"h": r.h, "box": r.box, "entries": entries})
        if res["gamma_checked"] is not None:
            consistent &= bool(qm.check_gap(r, res["gamma_checked"], r.h)) == row["verdict"]
        lead = r.leading()
        if lead is not None:
            try:
                d = ps.decay_rate_check(lead.z, c.potential, c.E, r.h)
                row["decay_rate"] = {"quantum": d.quantum_rate, "classical": d.classical_rate,
                                     "ratio": d.ratio}
            except ValueError as exc:
                row["decay_rate"] = {"unavailable": str(exc)}
    report = {"name": c.raw.get("name", ""), "potential_hash": c.potential.digest(),
              "energy": {"E": c.E, "delta": c.delta}, "classical": res["predicted"],
              "quantum": res["runs"], "resonance_table": table,
              "gap_fraction": res["gap_fraction"], "gamma_checked": res["gamma_checked"],
              "all_pass": res["all_pass"], "internally_consistent": consistent}
    run.write_json("report.json", report)
    return {"all_pass": res["all_pass"], "internally_consistent": consistent}


COMMANDS = {
    "flow": cmd_flow,
    "trapped-set": cmd_trapped_set,
    "pressure": cmd_pressure,
    "dimension": cmd_dimension,
    "gap-predict": cmd_gap_predict,
    "resonances": cmd_resonances,
    "gap-check": cmd_gap_check,
    "resolvent": cmd_resolvent,
    "husimi": cmd_husimi,
    "report": cmd_report,
}

CONFIG_ERRORS = (ConfigError, PotentialError, qm.GridError, qm.BoxError)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resgap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", default=None, help="output directory (overrides outputs.directory)")
    p.add_argument("--tol-scale", type=float, default=1.0,
                   help="multiply the default numerical tolerances")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, exc: BaseException) -> int:
    err = {"status": "error", "exit_code": code, "type": type(exc).__name__, "message": str(exc)}
    for attr in ("shift", "suggestion"):
        if getattr(exc, attr, None) is not None:
            err[attr] = _jsonable(getattr(exc, attr))
    sys.stderr.write(json.dumps(_jsonable(err), sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    env = os.environ.get("RESGAP_THREADS")
    try:
        threads = int(env) if env else args.threads
        if threads < 1 or not args.tol_scale > 0:
            raise ConfigError("--threads must be >= 1 and --tol-scale > 0")
        cfg = ExperimentConfig.load(args.config)
        out = Path(args.out or cfg.raw.get("outputs", {}).get("directory", "resgap_out"))
        run = Run(cfg, out, threads, args.tol_scale, args.plot)
        summary = COMMANDS[args.command](run)
    except CONFIG_ERRORS as exc:
        return _fail(2, exc)
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(1, exc)
    sys.stdout.write(json.dumps(_jsonable({"status": "ok", "command": args.command,
                                           "config_hash": cfg.hash, "outputs": run.written,
                                           "summary": summary}), sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
