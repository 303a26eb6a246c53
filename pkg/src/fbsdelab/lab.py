"""Experiment configuration, orchestration and run reports.

A run is ``run(subcommand, config)``.  Every subcommand writes its tables
and a ``report-<subcommand>.json`` holding the config echo, the checks with
their tolerances and a sha256 manifest of the files written.  Reports carry
no timestamps or timings, so identical configs give identical files.

Config key tree (JSON; every key optional, defaults in ``DEFAULT_CONFIG``)::

    problem        fbsde-nonlinear | fbsde-linear | gauss-transfer
    seed           int, explicit
    threads        int >= 1
    output         output directory (FBSDELAB_OUT overrides it)
    hurst, horizon
    coefficients   {b, sigma, alpha, beta, gamma: coefficient, eta0: float}
                   coefficient = number | {"kind": "constant", "value"}
                               | {"kind": "polynomial", "coeffs"} | {"kind": "table", "t", "values"}
    terminal       {"name": identity|affine|zero|softplus|cubic|signed_square, parameters...}
    generator      {"name": zero|constant|linear|sine|tanh|softz|affine_y, parameters...}
    driver         {"kind": fbm|brownian|power|wiener_integral|table, parameters...}
    simulate       {kind, paths, points, csv_max_paths}
    iota           {times, tol}
    pde            {nx, nt, k, tol, max_iter, slice_times}
    linear         {probes, fd_step}
    envelope       {t, target, eps, delta, calibrate, indices, band, paths, slack, region_sd,
                    bandwidth, n_grid, g_probes, nested: {probes, outer, inner}}
    tails          {t, samples, thresholds}
    transfer       {t, nx, ns, k, paths, euler: {paths, steps, degree, control_variate}}
    represent      {t, eps, y, z, normalise, n_paths, nx, ns}
    acceptance     {quick}
"""

from __future__ import annotations

import copy
import json
import os
import traceback
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as _io
from .checks import run_all
from .coefficients import CoefficientError, CoefficientSet, TimeGrid
from .density import (calibrate, corollary_tails, emit_density_table, g_explicit, g_nested_mc, gaussian_envelope,
                      kde, kernel_smoothed, marginal_y, marginal_z, nongaussian_density_envelope, verify_envelope)
from .fbm import KINDS, iota, iota_derivative, sample_paths, stream
from .heat import LinearFbsdeSpec, linear_solve, semigroup_apply, terminal_from_dict
from .pde import NonlinearFbsdeSpec, bsde_marginals, evaluate_solution, generator_from_dict, solve_mixed_pde
from .transfer import (GaussianDriverSpec, euler_bsde_reference, general_envelope, representation_check,
                       solve_transferred)

OUT_ENV = "FBSDELAB_OUT"
PROBLEMS = ("fbsde-nonlinear", "fbsde-linear", "gauss-transfer")
SUBCOMMANDS = ("simulate", "iota", "solve-pde", "linear-solve", "envelope", "tails", "transfer", "represent",
               "verify-all")

DEFAULT_CONFIG = {
    "problem": "fbsde-nonlinear",
    "seed": 20240601,
    "threads": 1,
    "output": "fbsdelab-out",
    "hurst": 0.75,
    "horizon": 1.0,
    "coefficients": {
        "b": {"kind": "constant", "value": 0.2},
        "sigma": {"kind": "polynomial", "coeffs": [1.0, 0.5]},
        "alpha": {"kind": "polynomial", "coeffs": [0.1, 0.2]},
        "beta": {"kind": "constant", "value": 0.3},
        "gamma": {"kind": "constant", "value": 0.25},
        "eta0": 0.1,
    },
    "terminal": {"name": "signed_square", "k": 0.1},
    "generator": {"name": "sine", "a": 0.3, "c": 0.2, "d": 0.0},
    "driver": {"kind": "fbm", "hurst": 0.75},
    "simulate": {"kind": "fbm-increments", "paths": 100000, "points": 64, "csv_max_paths": 1000},
    "iota": {"times": [0.125, 0.25, 0.5, 0.75, 1.0], "tol": 1e-12},
    "pde": {"nx": 400, "nt": 400, "k": 8.0, "tol": 1e-9, "max_iter": 20, "slice_times": [0.0, 0.25, 0.5, 0.75]},
    "linear": {"probes": 1000, "fd_step": 1e-4},
    "envelope": {
        "t": 0.5, "target": "y", "eps": 0.05, "delta": 0.05, "calibrate": "auto", "indices": None, "band": 0.2,
        "paths": 100000, "slack": 3.0, "region_sd": 2.5, "bandwidth": "silverman", "n_grid": 512, "g_probes": 41,
        "nested": {"probes": 10, "outer": 10000, "inner": 1000},
    },
    "tails": {"t": 0.5, "samples": 1000000, "thresholds": [1.0, 2.0, 3.0]},
    "transfer": {
        "t": 0.5, "nx": 401, "ns": 400, "k": 8.0, "paths": 100000,
        "euler": {"paths": 100000, "steps": 25, "degree": 8, "control_variate": True},
    },
    "represent": {"t": 0.4, "eps": [0.12, 0.06, 0.03, 0.015], "y": [0.5], "z": [0.3], "normalise": "clock",
                  "n_paths": 32, "nx": 201, "ns": 200},
    "acceptance": {"quick": False},
}

# which config key reaches which library parameter
PARAMETER_PATHS = {
    "fbm.sample_paths.H": "hurst",
    "fbm.sample_paths.grid": "simulate.points",
    "fbm.sample_paths.sigma": "coefficients.sigma",
    "fbm.sample_paths.n": "simulate.paths",
    "fbm.sample_paths.seed": "seed",
    "fbm.sample_paths.kind": "simulate.kind",
    "fbm.sample_paths.threads": "threads",
    "fbm.iota.t": "iota.times",
    "fbm.iota.tol": "iota.tol",
    "heat.LinearFbsdeSpec.coefficients": "coefficients",
    "heat.LinearFbsdeSpec.terminal": "terminal",
    "heat.LinearFbsdeSpec.horizon": "horizon",
    "heat.linear_solve.t": "envelope.t",
    "pde.NonlinearFbsdeSpec.generator": "generator",
    "pde.solve_mixed_pde.nx": "pde.nx",
    "pde.solve_mixed_pde.nt": "pde.nt",
    "pde.solve_mixed_pde.k": "pde.k",
    "pde.solve_mixed_pde.tol": "pde.tol",
    "pde.solve_mixed_pde.max_iter": "pde.max_iter",
    "density.calibrate.eps": "envelope.eps",
    "density.calibrate.delta": "envelope.delta",
    "density.calibrate.band": "envelope.band",
    "density.calibrate.indices": "envelope.indices",
    "density.calibrate.target": "envelope.target",
    "density.kde.bandwidth": "envelope.bandwidth",
    "density.kde.n_grid": "envelope.n_grid",
    "density.verify_envelope.slack": "envelope.slack",
    "density.verify_envelope.region": "envelope.region_sd",
    "density.g_nested_mc.n_outer": "envelope.nested.outer",
    "density.g_nested_mc.n_inner": "envelope.nested.inner",
    "density.corollary_tails.x": "tails.thresholds",
    "transfer.GaussianDriverSpec": "driver",
    "transfer.solve_transferred.nx": "transfer.nx",
    "transfer.solve_transferred.ns": "transfer.ns",
    "transfer.solve_transferred.k": "transfer.k",
    "transfer.representation_check.eps_list": "represent.eps",
    "transfer.representation_check.normalise": "represent.normalise",
    "transfer.representation_check.n_paths": "represent.n_paths",
    "transfer.representation_check.nx": "represent.nx",
    "transfer.representation_check.ns": "represent.ns",
    "transfer.euler_bsde_reference.n_paths": "transfer.euler.paths",
    "transfer.euler_bsde_reference.n_steps": "transfer.euler.steps",
    "transfer.euler_bsde_reference.degree": "transfer.euler.degree",
    "transfer.euler_bsde_reference.control_variate": "transfer.euler.control_variate",
}

# keys whose values are free-form mappings checked by their own constructors
_OPEN = {"coefficients.b", "coefficients.sigma", "coefficients.alpha", "coefficients.beta", "coefficients.gamma",
         "terminal", "generator", "driver", "envelope.indices"}


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def lookup(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(path)
        node = node[part]
    return node


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[k], dict) and path not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(path, "expected a mapping")
            out[k] = _merge(base[k], v, path + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _num(cfg, path, lo=None, hi=None, integer=False, open_lo=False):
    v = lookup(cfg, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if lo is not None and (v <= lo if open_lo else v < lo):
        raise ConfigError(path, f"must be {'>' if open_lo else '>='} {lo}")
    if hi is not None and v > hi:
        raise ConfigError(path, f"must be <= {hi}")
    return v


def _numlist(cfg, path, lo=None):
    v = lookup(cfg, path)
    if not isinstance(v, list) or not v or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v):
        raise ConfigError(path, "expected a non-empty list of numbers")
    if lo is not None and min(v) < lo:
        raise ConfigError(path, f"entries must be >= {lo}")
    return v


def _choice(cfg, path, options):
    v = lookup(cfg, path)
    if v not in options:
        raise ConfigError(path, f"must be one of {list(options)}, got {v!r}")
    return v


@dataclass
class ExperimentConfig:
    data: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "ExperimentConfig":
        if d is not None and not isinstance(d, dict):
            raise ConfigError("", "config must be a JSON object")
        cfg = cls(_merge(DEFAULT_CONFIG, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError("", f"{path}: not valid JSON ({e})") from None
        return cls.from_dict(d)

    def __getitem__(self, path: str):
        return lookup(self.data, path)

    def with_overrides(self, seed=None, threads=None, output=None) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        if seed is not None:
            d["seed"] = int(seed)
        if threads is not None:
            d["threads"] = int(threads)
        if output is not None:
            d["output"] = str(output)
        return ExperimentConfig.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    # ---------------------------------------------------------- validation
    def validate(self) -> None:
        d = self.data
        _choice(d, "problem", PROBLEMS)
        if isinstance(d["seed"], bool) or not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed", "must be an explicit nonnegative integer")
        _num(d, "threads", 1, integer=True)
        if not isinstance(d["output"], str) or not d["output"]:
            raise ConfigError("output", "must be a non-empty path string")
        _num(d, "hurst", 0.0, 1.0, open_lo=True)
        T = _num(d, "horizon", 0.0, open_lo=True)
        for k in ("nx", "nt", "max_iter"):
            _num(d, f"pde.{k}", 1, integer=True)
        _num(d, "pde.k", 0.0, open_lo=True)
        _num(d, "pde.tol", 0.0, open_lo=True)
        _numlist(d, "pde.slice_times", 0.0)
        _num(d, "simulate.paths", 1, integer=True)
        _num(d, "simulate.points", 1, integer=True)
        _num(d, "simulate.csv_max_paths", 0, integer=True)
        _choice(d, "simulate.kind", KINDS)
        _numlist(d, "iota.times", 0.0)
        _num(d, "iota.tol", 0.0, open_lo=True)
        _num(d, "linear.probes", 1, integer=True)
        _num(d, "linear.fd_step", 0.0, open_lo=True)
        _num(d, "envelope.t", 0.0, T, open_lo=True)
        _choice(d, "envelope.target", ("y", "z"))
        _num(d, "envelope.eps", 0.0, open_lo=True)
        _num(d, "envelope.delta", 0.0, open_lo=True)
        cal = _choice(d, "envelope.calibrate", ("auto", "fixed"))
        idx = d["envelope"]["indices"]
        if cal == "fixed":
            if not isinstance(idx, dict) or not {"eps_bar", "delta_bar", "lam"} <= set(idx):
                raise ConfigError("envelope.indices", "calibrate=fixed needs eps_bar, delta_bar and lam")
            for k in ("eps_bar", "delta_bar", "lam"):
                _num(d, f"envelope.indices.{k}", 0.0, open_lo=True)
        elif idx is not None and not isinstance(idx, dict):
            raise ConfigError("envelope.indices", "expected a mapping or null")
        _num(d, "envelope.band", 0.0, 0.5, open_lo=True)
        for k in ("paths", "n_grid", "g_probes", "nested.probes", "nested.outer", "nested.inner"):
            _num(d, f"envelope.{k}", 2, integer=True)
        _num(d, "envelope.slack", 0.0)
        _num(d, "envelope.region_sd", 0.0, open_lo=True)
        bw = d["envelope"]["bandwidth"]
        if bw != "silverman":
            _num(d, "envelope.bandwidth", 0.0, open_lo=True)
        _num(d, "tails.t", 0.0, T, open_lo=True)
        _num(d, "tails.samples", 100, integer=True)
        _numlist(d, "tails.thresholds", 0.0)
        _num(d, "transfer.t", 0.0, T, open_lo=True)
        for k in ("nx", "ns", "paths", "euler.paths", "euler.steps", "euler.degree"):
            _num(d, f"transfer.{k}", 1, integer=True)
        _num(d, "transfer.k", 0.0, open_lo=True)
        if not isinstance(d["transfer"]["euler"]["control_variate"], bool):
            raise ConfigError("transfer.euler.control_variate", "expected true or false")
        t_rep = _num(d, "represent.t", 0.0, T)
        eps = _numlist(d, "represent.eps")
        if min(eps) <= 0 or t_rep + max(eps) >= T:
            raise ConfigError("represent.eps", "need 0 < eps < horizon - t")
        ys, zs = _numlist(d, "represent.y"), _numlist(d, "represent.z")
        if len(ys) != len(zs):
            raise ConfigError("represent.z", "must have the same length as represent.y")
        _choice(d, "represent.normalise", ("clock", "time"))
        for k in ("n_paths", "nx", "ns"):
            _num(d, f"represent.{k}", 1, integer=True)
        if not isinstance(d["acceptance"]["quick"], bool):
            raise ConfigError("acceptance.quick", "expected true or false")
        # resolve every referenced object once so errors surface with their path
        self.coefficient_set()
        self.terminal()
        self.generator()
        self.driver()

    # ---------------------------------------------------------- resolved objects
    def coefficient_set(self) -> CoefficientSet:
        d = self.data["coefficients"]
        for k in d:
            if k not in ("b", "sigma", "alpha", "beta", "gamma", "eta0"):
                raise ConfigError(f"coefficients.{k}", "unknown coefficient")
        try:
            cs = CoefficientSet.from_dict(d)
        except (CoefficientError, KeyError, TypeError, ValueError) as e:
            bad = next((f"coefficients.{k}" for k, v in d.items() if not _coef_ok(v)), "coefficients")
            raise ConfigError(bad, str(e)) from None
        try:
            cs.validate(self.data["horizon"])
        except CoefficientError as e:
            raise ConfigError("coefficients.sigma", str(e)) from None
        return cs

    def terminal(self):
        return _resolve("terminal", terminal_from_dict, self.data["terminal"])

    def generator(self):
        return _resolve("generator", generator_from_dict, self.data["generator"])

    def driver(self) -> GaussianDriverSpec:
        d = dict(self.data["driver"])
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError("driver.kind", "missing")
        kind = d.pop("kind")
        T = self.data["horizon"]
        makers = {
            "fbm": lambda hurst: GaussianDriverSpec.fbm(hurst, T),
            "brownian": lambda: GaussianDriverSpec.brownian(T),
            "power": lambda scale, exponent: GaussianDriverSpec.power(scale, exponent, T),
            "wiener_integral": lambda hurst, sigma=None: GaussianDriverSpec.wiener_integral(
                self.coefficient_set().sigma if sigma is None else sigma, hurst, T),
            "table": lambda times, values: GaussianDriverSpec.table(times, values, T),
        }
        if kind not in makers:
            raise ConfigError("driver.kind", f"must be one of {sorted(makers)}, got {kind!r}")
        try:
            return makers[kind](**d)
        except (TypeError, ValueError, CoefficientError) as e:
            raise ConfigError("driver", str(e)) from None

    def linear_spec(self, check_h2: bool = True) -> LinearFbsdeSpec:
        return LinearFbsdeSpec(self.coefficient_set(), self.terminal(), self.data["hurst"], self.data["horizon"],
                               check_h2=check_h2)

    def nonlinear_spec(self) -> NonlinearFbsdeSpec:
        if self.data["problem"] == "fbsde-linear":
            return NonlinearFbsdeSpec.from_linear(self.linear_spec(check_h2=False))
        cs = self.coefficient_set()
        lin = CoefficientSet(b=cs.b, sigma=cs.sigma, eta0=cs.eta0)
        return NonlinearFbsdeSpec(lin, self.generator(), self.terminal(), self.data["hurst"], self.data["horizon"])


def _coef_ok(v) -> bool:
    try:
        CoefficientSet.from_dict({"b": v})
        return True
    except Exception:
        return False


def _resolve(path, maker, d):
    if not isinstance(d, dict) or "name" not in d:
        raise ConfigError(f"{path}.name", "missing")
    try:
        return maker(d)
    except KeyError as e:
        raise ConfigError(f"{path}.name", str(e).strip('"')) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def output_dir(cfg: ExperimentConfig, out=None) -> Path:
    """--out wins, then the FBSDELAB_OUT environment variable, then the config."""
    return Path(out or os.environ.get(OUT_ENV) or cfg["output"])


# ------------------------------------------------------------------ reports

@dataclass
class RunReport:
    subcommand: str
    config: dict
    checks: list = field(default_factory=list)
    files: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.errors and all(c["passed"] for c in self.checks)

    def check(self, name: str, value: float, tolerance: float, passed: bool, **detail):
        self.checks.append({"name": name, "value": float(value), "tolerance": float(tolerance),
                            "passed": bool(passed), "detail": detail})

    def add_file(self, path: Path):
        self.files[Path(path).name] = _io.digest(path)

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, "passed": self.passed, "config": self.config, "checks": self.checks,
                "files": dict(sorted(self.files.items())), "errors": self.errors}

    def write(self, out: Path) -> Path:
        return _io.dump_json(Path(out) / f"report-{self.subcommand}.json", self.to_dict())

    def lines(self) -> list[str]:
        out = [f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}: value={c['value']:.6g} "
               f"tol={c['tolerance']:.3g}" for c in self.checks]
        out += [f"[ERROR] {e['step']}: {e['message']}" for e in self.errors]
        return out


class _Step:
    """Context manager recording an exception as a report error instead of aborting the run."""

    def __init__(self, report: RunReport, step: str):
        self.report, self.step = report, step

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if exc is None:
            return False
        if isinstance(exc, KeyboardInterrupt):
            return False
        self.report.errors.append({"step": self.step, "type": tp.__name__, "message": str(exc),
                                   "where": traceback.format_tb(tb)[-1].strip().splitlines()[0]})
        return True


# ------------------------------------------------------------------ subcommands

def _sim_grid(cfg) -> TimeGrid:
    n = cfg["simulate.points"]
    return TimeGrid(cfg["horizon"] * np.arange(1, n + 1) / n)


def _simulate(cfg, out, rep):
    kind = cfg["simulate.kind"]
    sigma = cfg.coefficient_set().sigma if kind == KINDS[1] else None
    ens = sample_paths(cfg["hurst"], _sim_grid(cfg), sigma, cfg["simulate.paths"], cfg["seed"], kind,
                       cfg["threads"])
    rep.add_file(ens.to_binary(out / "ensemble.bin"))
    if ens.n <= cfg["simulate.csv_max_paths"]:
        rep.add_file(ens.to_csv(out / "ensemble.csv"))
    emp, se = ens.empirical_gram(), ens.gram_standard_errors()
    t = ens.grid.points
    rows = ((t[i], t[j], ens.gram[i, j], emp[i, j], se[i, j]) for i in range(t.size) for j in range(i, t.size))
    rep.add_file(_io.write_csv(out / "gram.csv", ["t_i", "t_j", "analytic", "empirical", "mc_se"], rows,
                               [f"hurst={cfg['hurst']}", f"kind={kind}", f"paths={ens.n}", f"seed={cfg['seed']}"]))
    frac = float(np.mean(np.abs(emp - ens.gram) <= 3 * se))
    rep.check("empirical Gram within 3 SE", frac, 0.99, frac >= 0.99)


def _iota(cfg, out, rep):
    sig, H = cfg.coefficient_set().sigma, cfg["hurst"]
    ts = np.asarray(cfg["iota.times"], dtype=float)
    tol = cfg["iota.tol"]
    vals = np.asarray(iota(sig, ts, H, tol), dtype=float)
    ders = np.asarray(iota_derivative(sig, ts, H, tol), dtype=float)
    rep.add_file(_io.write_csv(out / "iota.csv", ["t", "iota", "iota_derivative"], zip(ts, vals, ders),
                               [f"hurst={H}", f"sigma={json.dumps(sig.to_dict(), sort_keys=True)}"]))
    h = 1e-5
    worst = 0.0
    for t, d in zip(ts, ders):
        if t > 2 * h and d != 0:
            fd = (iota(sig, t + h, H, tol) - iota(sig, t - h, H, tol)) / (2 * h)
            worst = max(worst, abs(fd - d) / abs(d))
    rep.check("iota derivative vs finite differences (relative)", worst, 1e-5, worst < 1e-5)
    rep.check("iota nondecreasing in t", float(np.min(np.diff(vals))) if vals.size > 1 else 0.0, 0.0,
              bool(np.all(np.diff(vals[np.argsort(ts)]) >= 0)))


def _pde_solution(cfg):
    if cfg["problem"] == "gauss-transfer":
        return None, solve_transferred(cfg.driver(), cfg.generator(), cfg.terminal(), cfg["transfer.nx"],
                                       cfg["transfer.ns"], cfg["transfer.k"])
    spec = cfg.nonlinear_spec()
    return spec, solve_mixed_pde(spec, cfg["pde.nx"], cfg["pde.nt"], cfg["pde.k"], cfg["pde.tol"],
                                 cfg["pde.max_iter"])


def _solve_pde(cfg, out, rep):
    spec, sol = _pde_solution(cfg)
    rep.add_file(sol.to_binary(out / "pde.bin"))
    for t in cfg["pde.slice_times"]:
        tt = float(t) if spec is not None else float(sol.driver(t))
        rep.add_file(sol.to_csv(out / f"pde-slice-t{_io.fmt(t)}.csv", tt))
    rep.add_file(_io.dump_json(out / "pde-info.json", sol.meta))
    terminal = cfg.terminal().h(sol.x)
    err = float(np.max(np.abs(sol.u[-1] - terminal)))
    rep.check("terminal row equals h", err, 1e-12, err <= 1e-12)
    slopes = sol.u_x[:, 2:-2]
    rep.check("u_x > 0 on the grid", float(slopes.min()), 0.0, bool(slopes.min() > 0))
    if cfg["problem"] == "fbsde-linear":
        lin = cfg.linear_spec(check_h2=False)
        rng = np.random.default_rng(cfg["seed"])
        n = cfg["linear.probes"]
        ts = rng.uniform(0.0, lin.horizon, n)
        ws = rng.standard_normal(n) * np.sqrt(np.asarray(lin.iota(ts), dtype=float))
        y, z = linear_solve(lin, ts, ws)
        e = 0.0
        for ti, wi, yi, zi in zip(ts, ws, y, z):
            u, ux, _ = evaluate_solution(sol, ti, spec.mean_eta(ti) + wi)
            e = max(e, abs(float(u) - yi), abs(zi + float(lin.coefficients.sigma(ti)) * float(ux)))
        rep.check("PDE vs closed form (z_linear = -sigma u_x)", e, 1e-3, e <= 1e-3)
    elif cfg["problem"] == "fbsde-nonlinear" and cfg.generator().name == "zero":
        x = sol.x[sol.x.size // 10: -sol.x.size // 10]
        e = 0.0
        for t in cfg["pde.slice_times"]:
            exact = semigroup_apply(spec.iota_T - float(spec.iota(t)), spec.terminal.h,
                                    x + spec.coefficients.b.integral(t, spec.horizon))
            e = max(e, float(np.max(np.abs(evaluate_solution(sol, t, x)[0] - exact))))
        rep.check("PDE vs heat semigroup (f=0)", e, 5e-4, e <= 5e-4)


def _linear_solve(cfg, out, rep):
    lin = cfg.linear_spec(check_h2=False)
    rng = np.random.default_rng(cfg["seed"])
    n = cfg["linear.probes"]
    ts = np.sort(rng.uniform(0.0, lin.horizon, n))
    ws = rng.standard_normal(n) * np.sqrt(np.asarray(lin.iota(ts), dtype=float))
    y, z = linear_solve(lin, ts, ws)
    rep.add_file(_io.write_csv(out / "linear.csv", ["t", "w", "y", "z"], zip(ts, ws, y, z),
                               [f"hurst={cfg['hurst']}", f"terminal={cfg['terminal.name']}"]))
    h = cfg["linear.fd_step"]
    yp, _ = linear_solve(lin, ts, ws + h)
    ym, _ = linear_solve(lin, ts, ws - h)
    sig = np.asarray(lin.coefficients.sigma(ts), dtype=float)
    err = float(np.max(np.abs(z + sig * (yp - ym) / (2 * h))))
    rep.check("z = -sigma dy/dw (central difference)", err, 1e-5, err <= 1e-5)


def _samples_and_envelope(cfg, t, target, n, seed):
    """Samples of y_t or z_t for the configured problem with the matching envelope."""
    problem = cfg["problem"]
    info = {}
    if problem == "fbsde-linear":
        lin = cfg.linear_spec()
        ens = sample_paths(lin.hurst, TimeGrid(np.array([0.5 * t, t])), lin.coefficients.sigma, n, seed,
                           threads=cfg["threads"])
        y, z = linear_solve(lin, t, ens.column(t))
        return (y if target == "y" else z), gaussian_envelope(lin, t, target), info
    if problem == "gauss-transfer":
        driver = cfg.driver()
        sol = solve_transferred(driver, cfg.generator(), cfg.terminal(), cfg["transfer.nx"], cfg["transfer.ns"],
                                cfg["transfer.k"])
        X = stream(seed, 0).standard_normal(n) * np.sqrt(float(driver(t)))
        y, z = sol.solution_at(t, X)
        env = general_envelope(sol, t, target, generator=cfg.generator())
        return (y if target == "y" else z), env, info
    spec, sol = _pde_solution(cfg)
    ens = sample_paths(spec.hurst, TimeGrid(np.array([0.5 * t, t])), spec.coefficients.sigma, n, seed,
                       threads=cfg["threads"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        y, z = bsde_marginals(sol, spec, t, ens)
    mg = marginal_y(sol, spec, t) if target == "y" else marginal_z(sol, spec, t)
    m, mu = mg.moments()
    idx = calibrate(mg.sl, mg.center, mg.var, cfg["envelope.eps"], cfg["envelope.delta"], cfg["envelope.band"],
                    target, cfg["envelope.indices"] if cfg["envelope.calibrate"] == "fixed" else None)
    info.update({"marginal": mg, "m": m, "mu": mu, "indices": idx, "spec": spec})
    return (y if target == "y" else z), nongaussian_density_envelope(idx, m, mu, mg.var), info


def _envelope(cfg, out, rep):
    t, target = cfg["envelope.t"], cfg["envelope.target"]
    samples, env, info = _samples_and_envelope(cfg, t, target, cfg["envelope.paths"], cfg["seed"])
    bw = cfg["envelope.bandwidth"]
    emp = kde(samples, bw, n_grid=cfg["envelope.n_grid"])
    sd = float(np.std(samples))
    k = cfg["envelope.region_sd"]
    report = verify_envelope(emp, env, (emp.mean - k * sd, emp.mean + k * sd), cfg["envelope.slack"])
    rep.add_file(emit_density_table(out / f"envelope-{target}.csv", report))
    params = {kk: v for kk, v in env.params.items() if isinstance(v, (int, float, str))}
    rep.add_file(_io.dump_json(out / f"envelope-{target}.json",
                               {"kind": env.kind, "m": env.m, "mu": env.mu, "params": params,
                                "kde_bandwidth": emp.bandwidth, "seed": cfg["seed"], "paths": cfg["envelope.paths"],
                                "summary": report.summary()}))
    rep.check(f"{env.kind} envelope brackets the KDE", report.pass_fraction, 0.99, report.pass_fraction >= 0.99)
    if "indices" in info:
        mg, m, idx = info["marginal"], info["m"], info["indices"]
        sdg = info["mu"] * np.sqrt(np.pi / 2)
        ys = np.linspace(-3 * sdg, 3 * sdg, cfg["envelope.g_probes"])
        g = np.asarray(g_explicit(mg, ys, m), dtype=float)
        lo, hi = idx.g_bounds(ys, m, mg.var)
        rows = []
        zs = []
        probes = set(np.linspace(0, ys.size - 1, min(cfg["envelope.nested.probes"], ys.size)).round().astype(int))
        spec = info["spec"]
        sampler = lambda n, s: sample_paths(spec.hurst, TimeGrid(np.array([0.5 * t, t])), spec.coefficients.sigma,
                                            n, s, threads=cfg["threads"]).column(t)
        for i, yv in enumerate(ys):
            est = se = float("nan")
            if i in probes and abs(yv) <= 2 * sdg:
                est, se = g_nested_mc(mg, float(yv), m, cfg["envelope.nested.outer"], cfg["envelope.nested.inner"],
                                      cfg["seed"] + i, sampler)
                zs.append(abs(est - g[i]) / se)
            rows.append((yv, lo[i], g[i], hi[i], est, se))
        rep.add_file(_io.write_csv(out / f"g-{target}.csv", ["y", "g_lower", "g_explicit", "g_upper", "g_mc", "mc_se"],
                                   rows, [f"label={idx.label}"]))
        rep.add_file(_io.dump_json(out / f"indices-{target}.json", idx.to_dict()))
        inside = float(np.mean((lo <= g) & (g <= hi)))
        rep.check("g inside calibrated bounds", inside, 1.0, inside == 1.0)
        if zs:
            rep.check("g explicit vs nested MC (in SE)", max(zs), 3.0, max(zs) <= 3.0)


def _tails(cfg, out, rep):
    t = cfg["tails.t"]
    rows = []
    worst = -np.inf
    if cfg["problem"] == "fbsde-linear":
        lin = cfg.linear_spec()
        ens = sample_paths(lin.hurst, TimeGrid(np.array([0.5 * t, t])), lin.coefficients.sigma,
                           cfg["tails.samples"], cfg["seed"], threads=cfg["threads"])
        y, z = linear_solve(lin, t, ens.column(t))
        for name, F in (("y", y), ("z", z)):
            d = F - F.mean()
            for k in cfg["tails.thresholds"]:
                x = k * d.std()
                b = corollary_tails(lin, t, x)
                up, down = float(np.mean(d >= x)), float(np.mean(d <= -x))
                rows.append((name, k, x, up, b[f"{name}_up"], down, b[f"{name}_down"]))
                worst = max(worst, up - b[f"{name}_up"], down - b[f"{name}_down"])
    else:
        target = cfg["envelope.target"]
        F, env, _ = _samples_and_envelope(cfg, t, target, cfg["tails.samples"], cfg["seed"])
        d = F - env.m
        for k in cfg["tails.thresholds"]:
            x = k * d.std()
            bu, bd = float(env.tail_up(x)), float(env.tail_down(x))
            up, down = float(np.mean(d >= x)), float(np.mean(d <= -x))
            rows.append((target, k, x, up, bu, down, bd))
            worst = max(worst, up - bu, down - bd)
    rep.add_file(_io.write_csv(out / "tails.csv",
                               ["target", "k_sd", "x", "emp_up", "bound_up", "emp_down", "bound_down"], rows,
                               [f"t={_io.fmt(t)}", f"samples={cfg['tails.samples']}"]))
    rep.check("tail bounds dominate empirical frequencies", worst, 0.0, worst <= 0)


def _transfer(cfg, out, rep):
    driver, f, h = cfg.driver(), cfg.generator(), cfg.terminal()
    sol = solve_transferred(driver, f, h, cfg["transfer.nx"], cfg["transfer.ns"], cfg["transfer.k"])
    rep.add_file(sol.to_binary(out / "transfer.bin"))
    t = cfg["transfer.t"]
    Vt = float(driver(t))
    rep.add_file(sol.to_csv(out / f"transfer-slice-t{_io.fmt(t)}.csv", Vt))
    X = stream(cfg["seed"], 0).standard_normal(cfg["transfer.paths"]) * np.sqrt(Vt)
    y, _ = sol.solution_at(t, X)
    emp = kde(y)
    mg = sol.marginal(t, "y")
    smooth = kernel_smoothed(mg, emp.grid, emp.bandwidth)
    live = emp.values > 1e-3 * emp.values.max()
    dist = float(np.max(np.abs(emp.values - smooth)[live] / emp.local_se[live]))
    rep.add_file(_io.write_csv(out / "transfer-law.csv", ["y", "kde", "smoothed_pushforward", "local_se"],
                               zip(emp.grid, emp.values, smooth, emp.local_se)))
    rep.check("KDE of phi(V(t), X_t) vs smoothed pushforward (local SE)", dist, 3.0, dist < 3.0)
    if f.name == "zero":
        xs = sol.x[sol.x.size // 10: -sol.x.size // 10]
        exact_u = semigroup_apply(driver.VT - Vt, h.h, xs)
        err = float(np.max(np.abs(sol.clock_slice(t).value(xs) - exact_u)))
        rep.check("f=0 transfer vs heat semigroup", err, 5e-4, err <= 5e-4)
    if driver.label == "brownian" and not f.uses_x:
        e = cfg["transfer.euler"]
        y0, se = euler_bsde_reference(f, h, driver.horizon, e["paths"], e["steps"], cfg["seed"], e["degree"],
                                      e["control_variate"])
        phi0 = float(sol.slice(0.0).value(0.0))
        rep.check("Brownian reduction vs Euler BSDE", abs(phi0 - y0), 1e-3, abs(phi0 - y0) <= 1e-3,
                  phi0=phi0, euler=float(y0), euler_se=float(se))


def _represent(cfg, out, rep):
    driver = cfg.driver() if cfg["problem"] == "gauss-transfer" else GaussianDriverSpec.brownian(cfg["horizon"])
    res = representation_check(cfg.generator(), cfg["represent.t"], cfg["represent.y"], cfg["represent.z"],
                               cfg["represent.eps"], driver, cfg["represent.n_paths"], cfg["seed"],
                               cfg["represent.normalise"], cfg["represent.nx"], cfg["represent.ns"])
    rep.add_file(_io.write_csv(out / "represent.csv", ["eps", "error"], zip(res.eps, res.errors),
                               [f"normalise={res.normalise}", f"driver={driver.label}"]))
    rep.check("e(eps) decreases monotonically", float(res.monotone), 1.0, res.monotone)
    rep.check("e(eps_min) < e(eps_max)/3", res.reduction, 3.0, res.reduction > 3, slope=res.slope)


def _verify_all(cfg, out, rep):
    results = run_all(cfg["threads"], cfg["acceptance.quick"])
    rep.add_file(_io.dump_json(out / "acceptance.json", [r.to_dict() for r in results]))
    for r in results:
        rep.check(f"{r.number}. {r.name}", r.value, r.tolerance, r.passed)


_RUNNERS = {
    "simulate": _simulate, "iota": _iota, "solve-pde": _solve_pde, "linear-solve": _linear_solve,
    "envelope": _envelope, "tails": _tails, "transfer": _transfer, "represent": _represent,
    "verify-all": _verify_all,
}


def run(subcommand: str, config: ExperimentConfig | dict | str | Path | None = None, out=None) -> RunReport:
    """Run one subcommand and write its outputs plus ``report-<subcommand>.json``."""
    if subcommand not in _RUNNERS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from {list(SUBCOMMANDS)}")
    if isinstance(config, (str, Path)):
        cfg = ExperimentConfig.from_file(config)
    elif isinstance(config, ExperimentConfig):
        cfg = config
    else:
        cfg = ExperimentConfig.from_dict(config)
    outdir = output_dir(cfg, out)
    outdir.mkdir(parents=True, exist_ok=True)
    rep = RunReport(subcommand, copy.deepcopy(cfg.data))
    with _Step(rep, subcommand):
        _RUNNERS[subcommand](cfg, outdir, rep)
    rep.write(outdir)
    return rep
