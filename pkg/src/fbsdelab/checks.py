"""The acceptance battery: eleven numerical checks at fixed tolerances.

Each check returns a :class:`CheckResult`; sizes default to the full battery
and can be reduced through keyword arguments for quick runs.
"""

from __future__ import annotations

import functools
import inspect
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .coefficients import Coefficient, CoefficientSet, TimeGrid
from .density import (calibrate, chi, corollary_tails, g_explicit, g_nested_mc, gaussian_envelope, kde,
                      marginal_y, nongaussian_density_envelope, verify_envelope)
from .fbm import iota, iota_derivative, sample_paths
from .heat import LinearFbsdeSpec, identity_map, linear_solve, semigroup_apply, signed_square_map, softplus_map
from .pde import (NonlinearFbsdeSpec, affine_y_generator, bsde_marginals, evaluate_solution, sine_generator,
                  softz_generator, solve_mixed_pde, tanh_generator, zero_generator)
from .transfer import GaussianDriverSpec, euler_bsde_reference, representation_check, solve_transferred


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.number:2d} {self.name}: value={self.value:.6g} tol={self.tolerance:.3g} "
                f"({self.seconds:.1f}s)")

    def to_dict(self, timing: bool = False) -> dict:
        d = {"number": self.number, "name": self.name, "passed": bool(self.passed), "value": float(self.value),
             "tolerance": float(self.tolerance), "detail": self.detail}
        if timing:
            d["seconds"] = self.seconds
        return d


def _timed(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    return wrapper


# ------------------------------------------------------------------ standard problems

HURST = 0.75


def standard_coefficients(**extra) -> CoefficientSet:
    kw = dict(b=Coefficient.constant(0.2), sigma=Coefficient.polynomial([1.0, 0.5]), eta0=0.1)
    kw.update(extra)
    return CoefficientSet(**kw)


def standard_linear_spec() -> LinearFbsdeSpec:
    cs = standard_coefficients(alpha=Coefficient.polynomial([0.1, 0.2]), beta=Coefficient.constant(0.3),
                               gamma=Coefficient.constant(0.25))
    return LinearFbsdeSpec(cs, softplus_map(0.5, 2.0, 0.5), HURST)


def standard_nonlinear_spec() -> NonlinearFbsdeSpec:
    return NonlinearFbsdeSpec(standard_coefficients(), sine_generator(0.3, 0.2), signed_square_map(0.1), HURST)


def convex_linear_spec() -> LinearFbsdeSpec:
    """Strictly convex terminal map with c = 1/2, C = 2 and no linear generator terms."""
    return LinearFbsdeSpec(standard_coefficients(), softplus_map(0.5, 2.0, 0.5), HURST)


def wiener_samples(spec, t: float, n: int, seed: int, threads: int = 1) -> np.ndarray:
    grid = TimeGrid(np.array([0.5 * t, t]))
    return sample_paths(spec.hurst, grid, spec.coefficients.sigma, n, seed, threads=threads).column(t)


# ------------------------------------------------------------------ 1. fBM law

@_timed
def check_fbm_law(hursts=(0.6, 0.75, 0.9), n_paths: int = 100_000, n_points: int = 64, seed: int = 1,
                  threads: int = 1) -> CheckResult:
    grid = TimeGrid(np.arange(1, n_points + 1) / n_points)
    fractions = {}
    for k, H in enumerate(hursts):
        ens = sample_paths(H, grid, n=n_paths, seed=seed + k, threads=threads)
        emp = ens.empirical_gram()
        se = ens.gram_standard_errors()
        fractions[str(H)] = float(np.mean(np.abs(emp - ens.gram) <= 3 * se))
    worst = min(fractions.values())
    return CheckResult(1, "fBM empirical Gram within 3 SE", worst >= 0.99, worst, 0.99,
                       {"fraction_within_3se": fractions, "paths": n_paths, "points": n_points})


# ------------------------------------------------------------------ 2. iota

@_timed
def check_iota(hursts=(0.6, 0.75, 0.9), times=(0.25, 1.0, 2.0), step: float = 1e-5) -> CheckResult:
    rel = 0.0
    for H in hursts:
        for t in times:
            exact = t ** (2 * H)
            # a table coefficient forces the general quadrature path
            unit = Coefficient.table([0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
            rel = max(rel, abs(iota(unit, t, H) - exact) / exact)
    fd = 0.0
    for sig in (Coefficient.polynomial([0.0, 1.0]), Coefficient.polynomial([1.0, 0.5])):
        for t in (0.25, 0.5, 1.0):
            num = (iota(sig, t + step, HURST) - iota(sig, t - step, HURST)) / (2 * step)
            ana = iota_derivative(sig, t, HURST)
            fd = max(fd, abs(num - ana) / abs(ana))
    ok = rel < 1e-6 and fd < 1e-5
    return CheckResult(2, "iota identity and derivative", ok, max(rel / 1e-6, fd / 1e-5), 1.0,
                       {"max_rel_error_unit_sigma": rel, "max_rel_fd_error": fd})


# ------------------------------------------------------------------ 3. Gaussian sandwich

@_timed
def check_gaussian_sandwich(t: float = 0.5) -> CheckResult:
    spec = LinearFbsdeSpec(standard_coefficients(), identity_map(), HURST, check_h2=False,
                           bounds={"c": 1.0, "C": 1.0, "c2": 1.0, "C2": 1.0})
    io = float(spec.iota(t))
    m = float(spec.argument(t, 0.0))
    env = gaussian_envelope(spec, t, "y", mu=np.sqrt(2 * io / np.pi), m=m)
    x = m + np.sqrt(io) * np.linspace(-5, 5, 1001)
    lo, up = env.curves(x)
    normal = np.exp(-(x - m) ** 2 / (2 * io)) / np.sqrt(2 * np.pi * io)
    err = float(max(np.max(np.abs(lo - up)), np.max(np.abs(lo - normal)), np.max(np.abs(up - normal))))
    return CheckResult(3, "exact Gaussian sandwich", err <= 1e-10, err, 1e-10, {"t": t, "iota_t": io})


# ------------------------------------------------------------------ 4. PDE vs semigroup

def pde_oracle_spec() -> NonlinearFbsdeSpec:
    return NonlinearFbsdeSpec(standard_coefficients(), zero_generator(), softplus_map(0.5, 2.0, 0.5), HURST)


def pde_semigroup_error(spec: NonlinearFbsdeSpec, n: int, times=(0.0, 0.25, 0.5, 0.75)) -> float:
    sol = solve_mixed_pde(spec, n, n)
    lo, hi = sol.x[0], sol.x[-1]
    w = hi - lo
    xs = np.linspace(lo + 0.1 * w, hi - 0.1 * w, 401)
    err = 0.0
    cs = spec.coefficients
    for t in times:
        exact = semigroup_apply(spec.iota_T - float(spec.iota(t)), spec.terminal.h, xs + cs.b.integral(t, spec.horizon))
        err = max(err, float(np.max(np.abs(evaluate_solution(sol, t, xs)[0] - exact))))
    return err


@_timed
def check_pde_semigroup(levels=(100, 200, 400)) -> CheckResult:
    spec = pde_oracle_spec()
    errs = [pde_semigroup_error(spec, n) for n in levels]
    orders = [float(np.log2(errs[i] / errs[i + 1])) for i in range(len(errs) - 1)]
    ok = errs[-1] <= 5e-4 and min(orders) >= 1.8
    return CheckResult(4, "PDE vs heat semigroup (f=0)", ok, errs[-1], 5e-4,
                       {"errors": dict(zip(map(str, levels), errs)), "observed_orders": orders})


# ------------------------------------------------------------------ 5. linear cross-check

@_timed
def check_linear_crosscheck(n_probe: int = 1000, n: int = 400, seed: int = 5) -> CheckResult:
    lin = standard_linear_spec()
    spec = NonlinearFbsdeSpec.from_linear(lin)
    sol = solve_mixed_pde(spec, n, n)
    rng = np.random.default_rng(seed)
    ts = rng.uniform(0.0, lin.horizon, n_probe)
    ws = rng.standard_normal(n_probe) * np.sqrt(np.asarray(spec.iota(ts), dtype=float))
    y, z = linear_solve(lin, ts, ws)
    ey = ez = 0.0
    for ti, wi, yi, zi in zip(ts, ws, y, z):
        u, ux, _ = evaluate_solution(sol, ti, spec.mean_eta(ti) + wi)
        ey = max(ey, abs(float(u) - yi))
        # z_linear = -z_pde = -sigma u_x
        ez = max(ez, abs(zi + float(lin.coefficients.sigma(ti)) * float(ux)))
    err = max(ey, ez)
    return CheckResult(5, "PDE linear generator vs closed form", err <= 1e-3, err, 1e-3,
                       {"max_y_error": ey, "max_z_error": ez, "probes": n_probe})


# ------------------------------------------------------------------ 6. chi

def chi_grid():
    zs = (-2.0, -0.7, 0.0, 1.5, 3.0)
    ms = (-1.0, -0.3, 0.0, 0.2, 1.2)
    lams = (0.1, 0.5, 1.0)
    dbs = (0.3, 1.0, 1.5)
    for z in zs:
        for m in ms:
            for lam in lams:
                for db in dbs:
                    yield z, m, lam, db


def chi_quadrature(z, m, lam, db):
    k = 2 * lam * db
    pts = [-m] if min(0.0, z - m) < -m < max(0.0, z - m) else None
    return quad(lambda u: u * (1 + abs(u + m) ** k), 0.0, z - m, points=pts, epsabs=1e-13, epsrel=1e-13,
                limit=200)[0]


@_timed
def check_chi() -> CheckResult:
    err = 0.0
    for z, m, lam, db in chi_grid():
        ref = chi_quadrature(z, m, lam, db)
        err = max(err, abs(chi(z, m, lam, db) - ref) / max(1.0, abs(ref)))
    return CheckResult(6, "chi closed form vs quadrature", err <= 1e-8, err, 1e-8, {"points": 225})


# ------------------------------------------------------------------ 7. g sandwich

def nonlinear_setup(t: float = 0.5, n: int = 400):
    spec = standard_nonlinear_spec()
    sol = solve_mixed_pde(spec, n, n)
    mg = marginal_y(sol, spec, t)
    m, mu = mg.moments()
    idx = calibrate(mg.sl, mg.center, mg.var)
    return spec, sol, mg, m, mu, idx


@_timed
def check_g_sandwich(t: float = 0.5, n_probe: int = 41, n_mc_probe: int = 10, n_outer: int = 10_000,
                     n_inner: int = 1_000, seed: int = 7) -> CheckResult:
    spec, sol, mg, m, mu, idx = nonlinear_setup(t)
    # mean absolute deviation -> standard deviation under a Gaussian shape
    sd = mu * np.sqrt(np.pi / 2)
    ys = np.linspace(-3 * sd, 3 * sd, n_probe)
    g = g_explicit(mg, ys, m)
    lo, hi = idx.g_bounds(ys, m, mg.var)
    inside = float(np.mean((lo <= g) & (g <= hi)))

    def sampler(k, s):
        return wiener_samples(spec, t, k, s)

    probes = np.linspace(-2 * sd, 2 * sd, n_mc_probe)
    zscores = []
    for j, y in enumerate(probes):
        est, se = g_nested_mc(mg, float(y), m, n_outer, n_inner, seed + j, sampler)
        zscores.append(abs(est - float(g_explicit(mg, float(y), m))) / se)
    mc_ok = bool(np.all(np.array(zscores) <= 3))
    ok = inside == 1.0 and mc_ok
    return CheckResult(7, "g sandwich and nested Monte Carlo", ok, max(zscores), 3.0,
                       {"inside_fraction": inside, "max_mc_zscore": max(zscores), "indices": idx.to_dict(),
                        "m": m, "mu": mu})


# ------------------------------------------------------------------ 8. envelopes vs KDE

@_timed
def check_envelopes(t: float = 0.5, n_paths: int = 100_000, seed: int = 11, slack: float = 3.0,
                    threads: int = 1) -> CheckResult:
    spec, sol, mg, m, mu, idx = nonlinear_setup(t)
    ens = sample_paths(spec.hurst, TimeGrid(np.array([0.5 * t, t])), spec.coefficients.sigma, n_paths, seed,
                       threads=threads)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        y, _ = bsde_marginals(sol, spec, t, ens)
    emp = kde(y)
    sd = float(np.std(y))
    env = nongaussian_density_envelope(idx, m, mu, mg.var)
    rep_ng = verify_envelope(emp, env, (emp.mean - 2.5 * sd, emp.mean + 2.5 * sd), slack)

    lin = convex_linear_spec()
    w = wiener_samples(lin, t, n_paths, seed + 1, threads)
    yl, _ = linear_solve(lin, t, w)
    emp_l = kde(yl)
    env_l = gaussian_envelope(lin, t, "y")
    sdl = float(np.std(yl))
    rep_g = verify_envelope(emp_l, env_l, (emp_l.mean - 2.5 * sdl, emp_l.mean + 2.5 * sdl), slack)
    worst = min(rep_ng.pass_fraction, rep_g.pass_fraction)
    return CheckResult(8, "envelopes bracket the KDE", worst >= 0.99, worst, 0.99,
                       {"nongaussian": rep_ng.summary(), "gaussian": rep_g.summary()})


# ------------------------------------------------------------------ 9. tails

@_timed
def check_tails(t: float = 0.5, n_samples: int = 1_000_000, seed: int = 13, threads: int = 1) -> CheckResult:
    lin = convex_linear_spec()
    w = wiener_samples(lin, t, n_samples, seed, threads)
    y, z = linear_solve(lin, t, w)
    worst = -np.inf
    detail = {}
    for name, F in (("y", y), ("z", z)):
        d = F - F.mean()
        sd = d.std()
        for k in (1, 2, 3):
            x = k * sd
            bounds = corollary_tails(lin, t, x)
            up, down = float(np.mean(d >= x)), float(np.mean(d <= -x))
            bu, bd = bounds[f"{name}_up"], bounds[f"{name}_down"]
            detail[f"{name}@{k}sd"] = {"emp_up": up, "bound_up": bu, "emp_down": down, "bound_down": bd}
            worst = max(worst, up - bu, down - bd)
    return CheckResult(9, "corollary tail bounds dominate", worst <= 0, worst, 0.0, detail)


# ------------------------------------------------------------------ 10. transfer

@_timed
def check_transfer(t: float = 0.5, n_paths: int = 100_000, seed: int = 17, threads: int = 1,
                   euler_paths: int = 100_000) -> CheckResult:
    h = softplus_map(0.5, 2.0, 0.5)
    driver = GaussianDriverSpec.fbm(HURST)
    sol = solve_transferred(driver, zero_generator(), h)
    ens = sample_paths(HURST, TimeGrid(np.array([0.5 * t, t])), n=n_paths, seed=seed, threads=threads)
    X = ens.column(t)
    y_transfer, _ = sol.solution_at(t, X)
    lin = LinearFbsdeSpec(CoefficientSet(), h, HURST)
    y_closed, _ = linear_solve(lin, t, X)
    ref = kde(y_closed)
    other = kde(y_transfer, bandwidth=ref.bandwidth, grid=ref.grid)
    se = np.maximum(ref.local_se, 1e-300)
    central = ref.values > 1e-3 * ref.values.max()
    sup = float(np.max(np.abs(other.values - ref.values)[central] / se[central]))

    f = tanh_generator(0.3)
    bm = solve_transferred(GaussianDriverSpec.brownian(), f, h)
    phi0 = float(bm.slice(0.0).value(0.0))
    y_euler, se_euler = euler_bsde_reference(f, h, n_paths=euler_paths, seed=seed + 1)
    diff = abs(phi0 - y_euler)
    ok = sup < 3 and diff <= 1e-3
    return CheckResult(10, "transfer law and Brownian reduction", ok, max(sup / 3, diff / 1e-3), 1.0,
                       {"kde_sup_in_local_se": sup, "brownian_phi0": phi0, "euler_y0": y_euler,
                        "euler_se": se_euler, "abs_diff": diff})


# ------------------------------------------------------------------ 11. representation

def representation_battery():
    return [
        ("affine_y/brownian", affine_y_generator(1.0), 1.0, 0.0, GaussianDriverSpec.brownian()),
        ("sine/fbm0.75", sine_generator(0.3, 0.2), 0.5, 0.3, GaussianDriverSpec.fbm(0.75)),
        ("softz/fbm0.3", softz_generator(0.2, 0.3), 0.5, 0.4, GaussianDriverSpec.fbm(0.3)),
        ("tanh/power", tanh_generator(0.4, 0.2), -0.3, 0.6, GaussianDriverSpec.power(2.0, 1.2)),
    ]


@_timed
def check_representation(t: float = 0.4, fractions=(0.2, 0.1, 0.05, 0.025), seed: int = 19) -> CheckResult:
    detail = {}
    ok = True
    worst = np.inf
    for name, f, y, z, driver in representation_battery():
        eps = np.asarray(fractions) * (driver.horizon - t)
        res = representation_check(f, t, y, z, eps, driver, seed=seed)
        good = res.monotone and res.reduction > 3
        ok &= good
        worst = min(worst, res.reduction)
        detail[name] = {"eps": res.eps.tolist(), "errors": res.errors.tolist(), "slope": res.slope,
                        "monotone": res.monotone, "reduction": res.reduction}
    return CheckResult(11, "representation limit e(eps)", bool(ok), worst, 3.0, detail)


ALL_CHECKS = (check_fbm_law, check_iota, check_gaussian_sandwich, check_pde_semigroup, check_linear_crosscheck,
              check_chi, check_g_sandwich, check_envelopes, check_tails, check_transfer, check_representation)


def run_all(threads: int = 1, quick: bool = False) -> list[CheckResult]:
    """Run the battery in order.  ``quick`` shrinks sample counts for smoke runs."""
    out = []
    for fn in ALL_CHECKS:
        kw = _quick(fn.__name__, quick)
        if "threads" in inspect.signature(fn).parameters:
            kw["threads"] = threads
        out.append(fn(**kw))
    return out


def _quick(name: str, quick: bool) -> dict:
    if not quick:
        return {}
    return {
        "check_fbm_law": {"n_paths": 20_000},
        "check_g_sandwich": {"n_outer": 2_000, "n_inner": 500, "n_mc_probe": 4},
        "check_envelopes": {"n_paths": 20_000},
        "check_tails": {"n_samples": 100_000},
        "check_transfer": {"n_paths": 20_000, "euler_paths": 100_000},
    }.get(name, {})
