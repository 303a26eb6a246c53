"""Density and tail envelopes for BSDE marginals, the explicit g-functional and
Monte Carlo verification.

A marginal F = v(eta) with eta ~ N(c, s2) and v increasing is described by a
:class:`~fbsdelab.pde.SolutionSlice` of v (with v', v'') together with the
Gaussian centre c and variance s2.  For y_t of the nonlinear fBSDE v = u(t, .);
for z_t it is sigma_t u_x(t, .); in the Gaussian-driver route v = phi(V(t), .)
with c = 0 and s2 = V(t).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn
from scipy.special import roots_hermitenorm, roots_legendre

from . import io as _io
from .heat import LinearFbsdeSpec, semigroup_apply
from .pde import NonlinearFbsdeSpec, PdeSolution, SolutionSlice, slice_growth

PROBE_LABEL = "probe-calibrated, not proven global"


class DensityUndefinedError(ValueError):
    pass


# ------------------------------------------------------------------ Nourdin-Viens

def nv_density(g: Callable, m: float, mu: float, x, tol: float = 1e-8):
    """mu / (2 g(x - m)) * exp(-int_0^{x-m} u / g(u) du)."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty_like(xs)

    def ratio(u):
        gu = float(g(u))
        if not gu > 0:
            raise DensityUndefinedError(f"g({u:.6g}) = {gu:.6g} is not positive")
        return u / gu

    for i, xi in enumerate(xs):
        d = xi - m
        g0 = float(g(d))
        if not g0 > 0:
            raise DensityUndefinedError(f"g({d:.6g}) = {g0:.6g} is not positive")
        integral = quad(ratio, 0.0, d, epsabs=tol, epsrel=tol, limit=200)[0] if d != 0 else 0.0
        out[i] = mu / (2 * g0) * np.exp(-integral)
    return float(out[0]) if np.ndim(x) == 0 else out


def tail_bound(a1: float, a2: float, x):
    """(P(F >= x), P(F <= -x)) bounds for centred F with 0 < g_F <= a1 x + a2."""
    if a1 < 0 or a2 <= 0:
        raise ValueError("need a1 >= 0 and a2 > 0")
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("tail bounds need x > 0")
    up = np.exp(-x ** 2 / (2 * a1 * x + 2 * a2))
    down = np.exp(-x ** 2 / (2 * a2))
    if up.ndim == 0:
        return float(up), float(down)
    return up, down


# ------------------------------------------------------------------ envelopes

@dataclass
class DensityEnvelope:
    m: float
    mu: float
    lower: Callable
    upper: Callable
    kind: str
    tail_up: Callable | None = None
    tail_down: Callable | None = None
    params: dict = field(default_factory=dict)

    def curves(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.lower(x), dtype=float), np.asarray(self.upper(x), dtype=float)


def _theta(spec: LinearFbsdeSpec, t):
    lo, hi = spec.coefficients.beta.bounds(spec.horizon)
    io = float(spec.iota(t))
    T = spec.horizon
    return io * np.exp(2 * (T - t) * lo), io * np.exp(2 * (T - t) * hi)


def linear_moments(spec: LinearFbsdeSpec, t: float, target: str = "y") -> tuple[float, float]:
    """Exact (E F, E|F - E F|) for F = y_t or z_t of the linear fBSDE."""
    io = float(spec.iota(t))
    arg0 = float(spec.argument(t, 0.0))
    tau = float(spec.remaining_variance(t))
    disc = float(spec.discount(t))
    if target == "y":
        scale, shift, g = disc, float(spec.running_alpha(t)), spec.terminal.h
    elif target == "z":
        scale, shift, g = -float(spec.coefficients.sigma(t)) * disc, 0.0, spec.terminal.dh
    else:
        raise ValueError("target must be 'y' or 'z'")

    def F(w):
        return scale * semigroup_apply(tau, g, arg0 + np.asarray(w, dtype=float)) + shift

    if io == 0:
        return float(F(0.0)), 0.0
    m = float(_gauss_mean(F, 0.0, io))
    mu = _abs_moment(F, 0.0, io, m)
    return m, mu


def _gauss_mean(F, c, s2, n: int = 96):
    x, w = roots_hermitenorm(n)
    return float(np.dot(w, F(c + np.sqrt(s2) * x)) / np.sqrt(2 * np.pi))


def _abs_moment(F, c, s2, m, split=None):
    sd = np.sqrt(s2)
    pdf = stats.norm(c, sd).pdf
    pts = None
    if split is not None and c - 12 * sd < split < c + 12 * sd:
        pts = [split]
    return float(quad(lambda x: abs(float(F(x)) - m) * pdf(x), c - 12 * sd, c + 12 * sd,
                      points=pts, limit=400, epsabs=1e-12, epsrel=1e-10)[0])


def gaussian_envelope(spec: LinearFbsdeSpec, t: float, target: str = "y", mu: float | None = None,
                      m: float | None = None) -> DensityEnvelope:
    """Gaussian two-sided density bounds for y_t or z_t of the linear fBSDE."""
    if not 0 < t <= spec.horizon:
        raise ValueError("t must lie in (0, T]")
    th1, th2 = _theta(spec, t)
    if target == "y":
        lo_c, hi_c, s2 = spec.c, spec.C, 1.0
    elif target == "z":
        lo_c, hi_c, s2 = spec.c2, spec.C2, float(spec.coefficients.sigma(t)) ** 2
    else:
        raise ValueError("target must be 'y' or 'z'")
    if m is None or mu is None:
        m0, mu0 = linear_moments(spec, t, target)
        m = m0 if m is None else m
        mu = mu0 if mu is None else mu
    g1 = lo_c ** 2 * th1 * s2
    g2 = hi_c ** 2 * th2 * s2

    def lower(x):
        return mu / (2 * g2) * np.exp(-(np.asarray(x, dtype=float) - m) ** 2 / (2 * g1))

    def upper(x):
        return mu / (2 * g1) * np.exp(-(np.asarray(x, dtype=float) - m) ** 2 / (2 * g2))

    return DensityEnvelope(float(m), float(mu), lower, upper, "gaussian-linear",
                           lambda x: tail_bound(0.0, g2, x)[0], lambda x: tail_bound(0.0, g2, x)[1],
                           {"t": t, "target": target, "theta1": th1, "theta2": th2, "g_lower": g1, "g_upper": g2})


def corollary_tails(spec: LinearFbsdeSpec, t: float, x) -> dict:
    """Sub-Gaussian tail bounds for y_t - E y_t and z_t - E z_t."""
    _, th2 = _theta(spec, t)
    a_y = spec.C ** 2 * th2
    a_z = spec.C2 ** 2 * th2 * float(spec.coefficients.sigma(t)) ** 2
    yu, yd = tail_bound(0.0, a_y, x)
    zu, zd = tail_bound(0.0, a_z, x)
    return {"y_up": yu, "y_down": yd, "z_up": zu, "z_down": zd, "a_y": a_y, "a_z": a_z}


def chi(z, m: float, lam: float, delta_bar: float):
    """int_0^{z-m} u (1 + |u + m|^(2 lam delta_bar)) du in closed form."""
    z = np.asarray(z, dtype=float)
    k = lam * delta_bar
    am = abs(m)
    out = (0.5 * (z - m) ** 2
           + (np.abs(z) ** (2 + 2 * k) - am ** (2 + 2 * k)) / (2 * (1 + k))
           - am * (np.sign(z * m) * np.abs(z) ** (1 + 2 * k) - am ** (1 + 2 * k)) / (1 + 2 * k))
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ growth constants

@dataclass
class GrowthIndices:
    eps_bar: float
    delta_bar: float
    lam: float
    L: float
    C_ed: float
    C_tilde: float
    C_eps: float = float("nan")
    C_delta: float = float("nan")
    label: str = PROBE_LABEL
    target: str = "y"

    def __post_init__(self):
        bad = [k for k in ("eps_bar", "delta_bar", "lam", "L", "C_ed", "C_tilde") if not getattr(self, k) > 0]
        if bad:
            raise ValueError(f"growth indices must be strictly positive: {bad}")

    @property
    def a(self) -> float:
        return self.eps_bar * self.delta_bar

    @property
    def corollary_ok(self) -> bool:
        return self.a < 1

    def g_bounds(self, y, m: float, iota_t: float):
        """(lower, upper) bounds on g(y) implied by the constants."""
        z = np.abs(np.asarray(y, dtype=float) + m)
        lo = self.C_tilde * iota_t / (1 + z ** (2 * self.lam * self.delta_bar))
        za = z ** self.a
        hi = self.C_ed * iota_t * (1 + za) * (1 + za + iota_t ** (self.eps_bar / 2))
        return lo, hi

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("eps_bar", "delta_bar", "lam", "L", "C_ed", "C_tilde",
                                              "C_eps", "C_delta", "label", "target")}


def c_eps_delta(C_eps: float, C_delta: float, eps_bar: float, center: float) -> float:
    e = eps_bar
    p = max(e - 1.0, 0.0)
    first = 1 + 3 ** p * abs(center) ** e + C_delta ** e * 6 ** p / (1 + e)
    # the Gaussian moment term carries the same 3^((e-1)+) factor as the others
    gauss = 3 ** p * gamma_fn((1 + e) / 2) * 2 ** (e / 2) / np.sqrt(np.pi)
    return C_eps ** 2 * (1 + C_delta ** e * 2 ** p) * max(first, gauss)


def c_tilde_delta(L: float, lam: float, C_delta: float, center: float, iota_t: float) -> float:
    sd = np.sqrt(iota_t)
    integ = quad(lambda z: stats.norm.pdf(z, scale=sd) / (1 + abs(center) ** lam + abs(z) ** lam),
                 -40 * sd, 40 * sd, points=[0.0], limit=200)[0]
    return integ / (3 ** max(lam - 1, 0.0) * 2 * L ** 2 * (1 + 2 ** max(2 * lam - 1, 0.0) * C_delta ** (2 * lam)))


def calibrate(sl: SolutionSlice, center: float, iota_t: float, eps: float = 0.05, delta: float = 0.05,
              band: float = 0.2, target: str = "y", indices: dict | None = None) -> GrowthIndices:
    """Fit the growth constants on the grid of ``sl`` and assemble C(eps, delta), C~(delta).

    Indices come from the tail regressions unless ``indices`` supplies any of
    ``eps_bar, delta_bar, lam``; C_eps, C_delta and L are then the smallest
    constants making the pointwise inequalities hold on the grid.
    """
    s = slice_growth(sl, band=band).suggest(eps, delta)
    s.update(indices or {})
    eb, db, lam = float(s["eps_bar"]), float(s["delta_bar"]), float(s["lam"])
    x, v, dv = sl.x, sl.u, sl.ux
    if np.any(dv <= 0):
        raise ValueError("calibration needs a strictly increasing field")
    C_eps = float(np.max(dv / (1 + np.abs(x) ** eb)))
    C_delta = float(np.max(np.abs(x) / (1 + np.abs(v) ** db)))
    L = float(np.max(1.0 / (dv * (1 + np.abs(x) ** lam))))
    C = c_eps_delta(C_eps, C_delta, eb, center)
    Ct = c_tilde_delta(L, lam, C_delta, center, iota_t)
    return GrowthIndices(eb, db, lam, L, C, Ct, C_eps, C_delta, PROBE_LABEL, target)


# ------------------------------------------------------------------ marginal fields

@dataclass
class Marginal:
    """F = v(eta), eta ~ N(center, var), with v described by a spatial slice."""

    sl: SolutionSlice
    center: float
    var: float
    label: str = "y"

    def sample(self, eta):
        return self.sl.value(eta, extrapolate=True)

    def moments(self) -> tuple[float, float]:
        F = lambda x: self.sl.value(x, extrapolate=True)
        m = _gauss_mean(F, self.center, self.var, 128)
        lo, hi = self.sl.range
        split = self.sl.inverse(m) if lo < m < hi else None
        return m, _abs_moment(F, self.center, self.var, m, split)

    def density(self, y):
        """Exact density of F by change of variables."""
        x = self.sl.inverse(y)
        return stats.norm.pdf(x, self.center, np.sqrt(self.var)) / self.sl.derivative(x)


def marginal_y(sol: PdeSolution, spec: NonlinearFbsdeSpec, t: float) -> Marginal:
    return Marginal(sol.slice(t), float(spec.mean_eta(t)), float(spec.iota(t)), "y")


def marginal_z(sol: PdeSolution, spec: NonlinearFbsdeSpec, t: float) -> Marginal:
    sl = sol.slice(t)
    s = float(spec.coefficients.sigma(t))
    from ._cn import d1
    uxxx = d1(sl.uxx, float(sl.x[1] - sl.x[0]))
    if s < 0:
        # keep the field increasing; the law of z is the mirror image
        raise ValueError("z-marginal helper expects sigma_t > 0")
    return Marginal(SolutionSlice(sl.x, s * sl.ux, s * sl.uxx, s * uxxx), float(spec.mean_eta(t)),
                    float(spec.iota(t)), "z")


def _g_explicit(mg: Marginal, y, m: float, tol: float = 1e-6, max_nodes: int = 512):
    """iota v'(x*) int_0^1 E v'((1-r) c + r x* + sqrt(1-r^2) Z) dr,  x* = v^{-1}(y + m).

    r = e^{-theta}; the r-integral is taken in r = sin(phi) so that the
    square-root endpoint behaviour is absorbed.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    xs = mg.sl.inverse(y + m)
    c, sd = mg.center, np.sqrt(mg.var)
    dv = lambda q: mg.sl.derivative(q, extrapolate=True)

    def est(n_phi, n_z):
        ph, wp = roots_legendre(n_phi)
        ph = 0.25 * np.pi * (ph + 1)
        wp = 0.25 * np.pi * wp
        zn, wz = roots_hermitenorm(n_z)
        wz = wz / np.sqrt(2 * np.pi)
        r, q = np.sin(ph), np.cos(ph)
        pts = ((1 - r)[None, :, None] * c + r[None, :, None] * xs[:, None, None]
               + (q * sd)[None, :, None] * zn[None, None, :])
        inner = (dv(pts.reshape(-1)).reshape(pts.shape) * wz).sum(-1)
        return (inner * (q * wp)).sum(-1)

    n_phi, n_z = 16, 32
    prev = est(n_phi, n_z)
    while True:
        n_phi, n_z = 2 * n_phi, 2 * n_z
        cur = est(n_phi, n_z)
        err = float(np.max(np.abs(cur - prev) / np.maximum(np.abs(cur), 1e-300)))
        if err <= tol or n_z >= max_nodes:
            if err > tol:
                warnings.warn(f"g quadrature not converged: relative change {err:.3e}", RuntimeWarning,
                              stacklevel=3)
            break
        prev = cur
    return mg.var * dv(xs) * cur


def g_explicit(mg: Marginal, y, m: float, tol: float = 1e-6):
    out = _g_explicit(mg, y, m, tol)
    return float(out[0]) if np.ndim(y) == 0 else out


def g_y_explicit(sol: PdeSolution, spec: NonlinearFbsdeSpec, t: float, y, m: float, tol: float = 1e-6):
    return g_explicit(marginal_y(sol, spec, t), y, m, tol)


def g_z_explicit(sol: PdeSolution, spec: NonlinearFbsdeSpec, t: float, y, m: float, tol: float = 1e-6):
    return g_explicit(marginal_z(sol, spec, t), y, m, tol)


def g_nested_mc(mg: Marginal, y: float, m: float, n_outer: int = 10_000, n_inner: int = 1_000,
                seed: int = 0, sampler: Callable | None = None) -> tuple[float, float]:
    """Nested Monte Carlo estimate of g at y, with its standard error.

    Outer draws are theta ~ Exp(1); inner draws come from an independent
    copy of the driver, via ``sampler(n, seed) -> samples of int_0^t sigma dB'^H``
    (default: exact N(0, var) draws).
    """
    from .fbm import stream
    xs = float(mg.sl.inverse(y + m))
    rng = stream(seed, 0)
    theta = rng.exponential(size=n_outer)
    means = np.empty(n_outer)
    chunk = max(1, 2_000_000 // n_inner)
    for k, a in enumerate(range(0, n_outer, chunk)):
        b = min(a + chunk, n_outer)
        if sampler is None:
            w = stream(seed, k + 1).standard_normal((b - a, n_inner)) * np.sqrt(mg.var)
        else:
            w = np.asarray(sampler((b - a) * n_inner, seed * 1_000_003 + k + 1), dtype=float).reshape(b - a, n_inner)
        r = np.exp(-theta[a:b])[:, None]
        pts = (1 - r) * mg.center + r * xs + np.sqrt(1 - r ** 2) * w
        means[a:b] = mg.sl.derivative(pts.ravel(), extrapolate=True).reshape(pts.shape).mean(-1)
    pref = mg.var * float(mg.sl.derivative(xs, extrapolate=True))
    return pref * float(means.mean()), pref * float(means.std(ddof=1) / np.sqrt(n_outer))


# ------------------------------------------------------------------ non-Gaussian envelope

def _upper_integral(idx: GrowthIndices, m: float, iota_t: float, d: float) -> float:
    a = idx.a
    k = iota_t ** (idx.eps_bar / 2)

    def integrand(u):
        s = abs(u + m) ** a
        return u / ((1 + s) * (1 + s + k))

    if d == 0:
        return 0.0
    pts = [-m] if min(0, d) < -m < max(0, d) else None
    return quad(integrand, 0.0, d, points=pts, limit=400, epsabs=1e-13, epsrel=1e-10)[0]


def nongaussian_envelope(idx: GrowthIndices, m: float, mu: float, iota_t: float, x):
    """(lower, upper) density bounds for the marginal with growth constants ``idx``."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    a = idx.a
    ax = np.abs(xs) ** a
    pre_lo = mu / (2 * idx.C_ed * iota_t * (1 + ax) * (1 + ax + iota_t ** (idx.eps_bar / 2)))
    lower = pre_lo * np.exp(-chi(xs, m, idx.lam, idx.delta_bar) / (idx.C_tilde * iota_t))
    pre_up = mu * (1 + np.abs(xs) ** (2 * idx.lam * idx.delta_bar)) / (2 * idx.C_tilde * iota_t)
    I = np.array([_upper_integral(idx, m, iota_t, xi - m) for xi in xs])
    upper = pre_up * np.exp(-I / (idx.C_ed * iota_t))
    if np.any(lower > upper * (1 + 1e-12)):
        raise ValueError("non-Gaussian envelope: lower bound exceeds upper bound")
    if np.ndim(x) == 0:
        return float(lower[0]), float(upper[0])
    return lower, upper


def nongaussian_density_envelope(idx: GrowthIndices, m: float, mu: float, iota_t: float,
                                 scale2: float = 1.0) -> DensityEnvelope:
    """Wrap :func:`nongaussian_envelope` as a :class:`DensityEnvelope`."""
    io = iota_t * scale2

    def upper(x):
        return nongaussian_envelope(idx, m, mu, io, x)[1]

    # tails are measured from the mean, like every other envelope
    def tail_up(x):
        return min(1.0, quad(lambda s: float(upper(s)), m + x, np.inf, limit=200)[0])

    def tail_down(x):
        return min(1.0, quad(lambda s: float(upper(s)), -np.inf, m - x, limit=200)[0])

    return DensityEnvelope(m, mu, lambda x: nongaussian_envelope(idx, m, mu, io, x)[0], upper,
                           "nongaussian", tail_up, tail_down, {"iota_t": io, **idx.to_dict()})


def find_z0(idx: GrowthIndices, m: float, iota_t: float, ratio: float = 1.005, z_max: float = 1e300):
    """Smallest geometric-grid z0 > |m| beyond which the pointwise comparison
    2|u|^(2a) >= (1 + |u+m|^a)(1 + |u+m|^a + iota^(eps_bar/2)) holds on both tails."""
    if not idx.corollary_ok:
        raise ValueError("the corollary bound needs eps_bar * delta_bar < 1")
    a = idx.a
    k = iota_t ** (idx.eps_bar / 2)
    start = max(abs(m), 1e-6)
    n = int(np.ceil(np.log(z_max / start) / np.log(ratio)))
    z = start * ratio ** np.arange(1, n + 1)
    z = z[np.isfinite(z)]

    def holds(u):
        s = np.abs(u + m) ** a
        return 2 * np.abs(u) ** (2 * a) >= (1 + s) * (1 + s + k)

    ok = holds(z - m) & holds(-z - m)
    if not ok[-1]:
        raise ValueError(f"no z0 found on the probe range ({start:.3g}, {z_max:.3g}]")
    bad = np.nonzero(~ok)[0]
    i = 0 if bad.size == 0 else bad[-1] + 1
    return float(z[i])


def corollary_upper(idx: GrowthIndices, m: float, mu: float, iota_t: float, z0: float, x):
    if not idx.corollary_ok:
        raise ValueError("the corollary bound needs eps_bar * delta_bar < 1")
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) <= z0):
        raise ValueError("the corollary bound holds only for |x| > z0")
    a = idx.a
    e = 2 * (1 - a)
    expo = (np.abs(x - m) ** e - np.abs(np.sign(x) * z0 - m) ** e) / (4 * (1 - a) * idx.C_ed * iota_t)
    out = mu / (2 * idx.C_tilde * iota_t) * (1 + np.abs(x) ** (2 * idx.lam * idx.delta_bar)) * np.exp(-expo)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ empirical side

RK_GAUSS = 1.0 / (2.0 * np.sqrt(np.pi))


@dataclass
class EmpiricalDensity:
    n: int
    bandwidth: float
    grid: np.ndarray
    values: np.ndarray
    mean: float
    abs_moment: float
    tails: dict = field(default_factory=dict)
    quantiles: tuple[float, float] = (float("nan"), float("nan"))

    @property
    def local_se(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.values, 0.0) * RK_GAUSS / (self.n * self.bandwidth))

    def normalisation(self) -> float:
        return float(np.sum(0.5 * (self.values[1:] + self.values[:-1]) * np.diff(self.grid)))


def kde(samples, bandwidth="silverman", grid=None, n_grid: int = 512, thresholds=(),
        tail_fraction: float = 0.01) -> EmpiricalDensity:
    """Gaussian kernel density estimate with its pointwise standard error."""
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 100:
        raise ValueError("kde needs at least 100 samples")
    sd = float(s.std(ddof=1))
    if not sd > 0:
        raise ValueError("zero-variance sample set")
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        est = stats.gaussian_kde(s, bw_method="silverman")
    else:
        est = stats.gaussian_kde(s, bw_method=float(bandwidth) / sd)
    h = float(np.sqrt(est.covariance[0, 0]))
    if grid is None:
        grid = np.linspace(s.min() - 4 * h, s.max() + 4 * h, n_grid)
    grid = np.asarray(grid, dtype=float)
    vals = _kde_eval(s, h, grid)
    m = float(s.mean())
    tails = {float(x): (float(np.mean(s - m >= x)), float(np.mean(s - m <= -x))) for x in thresholds}
    q = np.quantile(s, [0.5 * tail_fraction, 1 - 0.5 * tail_fraction])
    return EmpiricalDensity(s.size, h, grid, vals, m, float(np.mean(np.abs(s - m))), tails, (float(q[0]), float(q[1])))


def kernel_smoothed(mg: Marginal, grid, h: float, n: int = 4001, width: float = 8.0) -> np.ndarray:
    """E K_h(x - F) for F = v(eta): the mean of a Gaussian KDE with bandwidth h.

    Comparing a KDE with this curve instead of the density itself removes
    the smoothing bias, leaving only Monte Carlo error.
    """
    z = np.linspace(-width, width, n)
    w = stats.norm.pdf(z)
    w /= w.sum()
    F = np.asarray(mg.sl.value(mg.center + np.sqrt(mg.var) * z, extrapolate=True), dtype=float)
    grid = np.asarray(grid, dtype=float)
    out = np.empty(grid.size)
    for a in range(0, grid.size, 64):
        d = (grid[a:a + 64, None] - F[None, :]) / h
        out[a:a + 64] = (np.exp(-0.5 * d * d) * w).sum(1) / (h * np.sqrt(2 * np.pi))
    return out


def _kde_eval(s, h, grid):
    out = np.empty(grid.size)
    s = np.sort(s)
    c = 1.0 / (s.size * h * np.sqrt(2 * np.pi))
    for a in range(0, grid.size, 64):
        g = grid[a:a + 64]
        # only samples within 9 bandwidths contribute at double precision
        lo = np.searchsorted(s, g.min() - 9 * h)
        hi = np.searchsorted(s, g.max() + 9 * h)
        d = (g[:, None] - s[None, lo:hi]) / h
        out[a:a + 64] = c * np.exp(-0.5 * d * d).sum(1)
    return out


@dataclass
class VerificationReport:
    x: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    kde: np.ndarray
    local_se: np.ndarray
    passed: np.ndarray
    slack: float
    region: tuple[float, float]

    @property
    def pass_fraction(self) -> float:
        return float(self.passed.mean()) if self.passed.size else 1.0

    def violations(self) -> list[dict]:
        return [{"x": float(x), "kde": float(k), "lower": float(lo), "upper": float(up), "local_se": float(se)}
                for x, k, lo, up, se, p in zip(self.x, self.kde, self.lower, self.upper, self.local_se, self.passed)
                if not p]

    def summary(self) -> dict:
        return {"pass_fraction": self.pass_fraction, "points": int(self.x.size), "slack_se": self.slack,
                "region": list(self.region), "violations": len(self.violations())}


def verify_envelope(emp: EmpiricalDensity, env: DensityEnvelope, region: tuple[float, float],
                    slack: float = 3.0, exclude_tails: bool = True) -> VerificationReport:
    """Check lower - slack*se <= kde <= upper + slack*se on the grid points inside ``region``.

    With ``exclude_tails`` the outer 1% of the sample mass is left out, since
    kernel bias dominates there.
    """
    lo, hi = region
    if exclude_tails and np.all(np.isfinite(emp.quantiles)):
        lo, hi = max(lo, emp.quantiles[0]), min(hi, emp.quantiles[1])
    sel = (emp.grid >= lo) & (emp.grid <= hi)
    x = emp.grid[sel]
    k = emp.values[sel]
    se = emp.local_se[sel]
    low, up = env.curves(x) if x.size else (np.empty(0), np.empty(0))
    ok = (low - slack * se <= k) & (k <= up + slack * se)
    return VerificationReport(x, low, up, k, se, ok, slack, (float(lo), float(hi)))


def emit_density_table(path, report: VerificationReport):
    """CSV with columns x, lower, upper, kde, local_se, pass."""
    rows = ([x, lo, up, k, se, "1" if p else "0"] for x, lo, up, k, se, p in
            zip(report.x, report.lower, report.upper, report.kde, report.local_se, report.passed))
    return _io.write_csv(path, ["x", "lower", "upper", "kde", "local_se", "pass"], rows)


def read_density_table(path) -> dict:
    _, header, rows = _io.read_csv(path)
    cols = {h: [] for h in header}
    for r in rows:
        for h, v in zip(header, r):
            cols[h].append(float(v))
    return {h: np.array(v) for h, v in cols.items()}
