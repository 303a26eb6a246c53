"""Mixed-type quasilinear PDE behind the nonlinear fractional BSDE.

    u_t + 1/2 iota'_t u_xx + b(t) u_x + f(t, x, u, sigma_t u_x) = 0,   u(T, .) = h,

with y_t = u(t, eta_t) and z_t = sigma_t u_x(t, eta_t).  In this convention
z is the coefficient of +dB^H in dy; the closed-form linear solver in
:mod:`fbsdelab.heat` uses the opposite sign, so z_linear = -z_pde and the
linear generator alpha + beta y + gamma z_linear reads alpha + beta y - gamma z_pde
here (see :func:`linear_generator`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline

from . import io as _io
from ._cn import PdeConvergenceError, d1, d2, march
from .coefficients import Coefficient, CoefficientSet
from .fbm import FbmEnsemble, iota
from .heat import LinearFbsdeSpec, TerminalMap

__all__ = [
    "Generator", "NonlinearFbsdeSpec", "PdeSolution", "PdeConvergenceError", "solve_mixed_pde",
    "evaluate_solution", "bsde_marginals", "inverse_u", "growth_indices", "GrowthEstimate", "slice_growth",
    "SolutionSlice", "DomainError", "DomainWarning", "MonotonicityError", "time_grid", "GENERATORS",
    "generator_from_dict", "zero_generator", "constant_generator", "linear_generator", "linear_generator_from",
    "sine_generator", "tanh_generator", "softz_generator", "affine_y_generator",
]


class DomainError(ValueError):
    pass


class MonotonicityError(ValueError):
    pass


class DomainWarning(UserWarning):
    pass


# ------------------------------------------------------------------ generators

@dataclass(frozen=True)
class Generator:
    """f(t, x, y, z), vectorised in x, y, z.

    ``z_linear`` records whether f is affine in z; ``uses_x`` whether it reads x.
    """

    func: Callable
    lipschitz: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    z_linear: bool = True
    uses_x: bool = True
    uses_z: bool = True

    def __call__(self, t, x, y, z):
        return self.func(t, x, y, z)

    def dy(self, t, x, y, z, h: float = 1e-6):
        return (self.func(t, x, y + h, z) - self.func(t, x, y - h, z)) / (2 * h)

    def check_lipschitz(self, horizon: float = 1.0, box: float = 5.0, n: int = 4000, seed: int = 0) -> float:
        """Largest observed ratio for (H1)(i) on random probe pairs; raises if it exceeds K."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, horizon, n)
        x = rng.uniform(-box, box, n)
        y1, y2, z1, z2 = rng.uniform(-box, box, (4, n))
        num = (np.abs(self.func(t, x, y1, z1) - self.func(t, x, y2, z2))
               + np.abs(self.dy(t, x, y1, z1) - self.dy(t, x, y2, z2)))
        ratio = float(np.max(num / (np.abs(y1 - y2) + np.abs(z1 - z2))))
        if ratio > self.lipschitz * (1 + 1e-6) + 1e-9:
            raise ValueError(f"generator {self.name}: probed Lipschitz ratio {ratio:.4g} exceeds K={self.lipschitz}")
        return ratio

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}


def zero_generator() -> Generator:
    return Generator(lambda t, x, y, z: 0.0 * np.asarray(y, dtype=float), 0.0, "zero", {}, True, False, False)


def constant_generator(kappa: float) -> Generator:
    return Generator(lambda t, x, y, z: kappa + 0.0 * np.asarray(y, dtype=float), 0.0, "constant",
                     {"kappa": kappa}, True, False, False)


def linear_generator(alpha=0.0, beta=0.0, gamma=0.0) -> Generator:
    """alpha(t) + beta(t) y - gamma(t) z  (PDE sign convention for z)."""
    a, b, g = (Coefficient.coerce(c) for c in (alpha, beta, gamma))

    def f(t, x, y, z):
        return a(t) + b(t) * np.asarray(y, dtype=float) - g(t) * np.asarray(z, dtype=float)

    K = max(abs(b.bounds(1.0)[0]), abs(b.bounds(1.0)[1])) + max(abs(g.bounds(1.0)[0]), abs(g.bounds(1.0)[1]))
    params = {}
    try:
        params = {"alpha": a.to_dict(), "beta": b.to_dict(), "gamma": g.to_dict()}
    except Exception:
        pass
    return Generator(f, K, "linear", params, True, False, True)


def linear_generator_from(spec: LinearFbsdeSpec) -> Generator:
    cs = spec.coefficients
    return linear_generator(cs.alpha, cs.beta, cs.gamma)


def sine_generator(a: float = 0.3, c: float = 0.2, d: float = 0.0) -> Generator:
    """a sin(y) + c z + d."""
    return Generator(lambda t, x, y, z: a * np.sin(y) + c * np.asarray(z, dtype=float) + d,
                     abs(a) + abs(c) + abs(a), "sine", {"a": a, "c": c, "d": d}, True, False, True)


def tanh_generator(a: float = 0.3, c: float = 0.0, d: float = 0.0) -> Generator:
    """a tanh(y) + c z + d: C^2_b with nonnegative derivatives when a, c >= 0."""
    K = abs(a) + abs(c) + abs(a) * 4 / (3 * np.sqrt(3))
    return Generator(lambda t, x, y, z: a * np.tanh(y) + c * np.asarray(z, dtype=float) + d, K, "tanh",
                     {"a": a, "c": c, "d": d}, True, False, c != 0.0)


def softz_generator(a: float = 0.2, c: float = 0.3) -> Generator:
    """a sin(y) + c z / sqrt(1 + z^2): nonlinear in z."""
    return Generator(lambda t, x, y, z: a * np.sin(y) + c * z / np.sqrt(1 + np.asarray(z, dtype=float) ** 2),
                     2 * abs(a) + abs(c), "softz", {"a": a, "c": c}, False, False, True)


def affine_y_generator(k: float = 1.0) -> Generator:
    """k y."""
    return Generator(lambda t, x, y, z: k * np.asarray(y, dtype=float), abs(k), "affine_y", {"k": k},
                     True, False, False)


GENERATORS = {
    "zero": lambda **kw: zero_generator(),
    "constant": constant_generator,
    "linear": linear_generator,
    "sine": sine_generator,
    "tanh": tanh_generator,
    "softz": softz_generator,
    "affine_y": affine_y_generator,
}


def generator_from_dict(d: dict) -> Generator:
    d = dict(d)
    name = d.pop("name")
    if name not in GENERATORS:
        raise KeyError(f"unknown generator {name!r}; known: {sorted(GENERATORS)}")
    if name == "linear":
        d = {k: Coefficient.coerce(v) for k, v in d.items()}
    return GENERATORS[name](**d)


# ------------------------------------------------------------------ problem

@dataclass
class NonlinearFbsdeSpec:
    coefficients: CoefficientSet
    generator: Generator
    terminal: TerminalMap
    hurst: float
    horizon: float = 1.0
    check_h1: bool = True

    def __post_init__(self):
        if not 0.5 < self.hurst < 1.0:
            raise ValueError("the mixed-type PDE route needs H in (1/2, 1)")
        self.coefficients.validate(self.horizon)
        if self.check_h1:
            self.generator.check_lipschitz(self.horizon)
            self.terminal.check_growth()
        self.iota_T = float(iota(self.coefficients.sigma, self.horizon, self.hurst))

    @classmethod
    def from_linear(cls, spec: LinearFbsdeSpec) -> "NonlinearFbsdeSpec":
        return cls(spec.coefficients, linear_generator_from(spec), spec.terminal, spec.hurst, spec.horizon)

    def iota(self, t):
        return iota(self.coefficients.sigma, t, self.hurst)

    def mean_eta(self, t):
        cs = self.coefficients
        return cs.eta0 + cs.b.integral(0.0, t)

    def domain(self, k: float = 8.0) -> tuple[float, float]:
        cs = self.coefficients
        b = cs.b
        if b.is_constant:
            lo_b, hi_b = min(b.value, 0) * self.horizon, max(b.value, 0) * self.horizon
        else:
            lo_b = quad(lambda s: min(float(b(s)), 0.0), 0, self.horizon, limit=200)[0]
            hi_b = quad(lambda s: max(float(b(s)), 0.0), 0, self.horizon, limit=200)[0]
        r = k * np.sqrt(self.iota_T)
        return cs.eta0 + lo_b - r, cs.eta0 + hi_b + r


def time_grid(spec: NonlinearFbsdeSpec, nt: int) -> np.ndarray:
    """Grid uniform in the blended clock (t/T + iota_t/iota_T) / 2.

    Steps shrink toward t = 0 where iota'_t degenerates, while the real-time
    step used by b and f stays bounded by 2T/nt.
    """
    T = spec.horizon
    fine = T * np.linspace(0.0, 1.0, 8193) ** 4
    clock = 0.5 * (fine / T + np.asarray(spec.iota(fine), dtype=float) / spec.iota_T)
    s = np.linspace(0.0, 1.0, nt + 1)
    t = np.interp(s, clock, fine)
    t[0], t[-1] = 0.0, T
    return t


# ------------------------------------------------------------------ solution

@dataclass
class SolutionSlice:
    """Spatial interpolants of a solution at a fixed time."""

    x: np.ndarray
    u: np.ndarray
    ux: np.ndarray
    uxx: np.ndarray

    @cached_property
    def _su(self):
        return CubicHermiteSpline(self.x, self.u, self.ux, extrapolate=False)

    @cached_property
    def _sux(self):
        return CubicHermiteSpline(self.x, self.ux, self.uxx, extrapolate=False)

    def _split(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.x[0], self.x[-1]
        xc = np.clip(x, lo, hi)
        return x, xc, x - xc

    def value(self, x, extrapolate: bool = False):
        x, xc, ex = self._split(x)
        if not extrapolate and np.any(ex != 0):
            raise DomainError("evaluation outside the PDE domain")
        out = self._su(xc)
        if extrapolate:
            out = out + np.where(ex < 0, self.ux[0], self.ux[-1]) * ex
        return out

    def derivative(self, x, extrapolate: bool = False):
        x, xc, ex = self._split(x)
        if not extrapolate and np.any(ex != 0):
            raise DomainError("evaluation outside the PDE domain")
        out = self._su(xc, 1)
        if extrapolate:
            out = np.where(ex != 0, np.where(ex < 0, self.ux[0], self.ux[-1]), out)
        return out

    def second_derivative(self, x, extrapolate: bool = False):
        x, xc, ex = self._split(x)
        if not extrapolate and np.any(ex != 0):
            raise DomainError("evaluation outside the PDE domain")
        out = self._sux(xc, 1)
        if extrapolate:
            out = np.where(ex != 0, 0.0, out)
        return out

    def check_monotone(self):
        if np.any(np.diff(self.u) <= 0) or np.any(self.ux <= 0):
            i = int(np.argmax((np.diff(self.u) <= 0) | (self.ux[:-1] <= 0)))
            raise MonotonicityError(f"u(t, .) is not strictly increasing near x={self.x[i]:.6g}")

    @property
    def range(self) -> tuple[float, float]:
        return float(self.u[0]), float(self.u[-1])

    def inverse(self, y, tol: float = 1e-10):
        """x with u(x) = y; bracketing on node values, bisection then Newton."""
        self.check_monotone()
        y = np.asarray(y, dtype=float)
        lo, hi = self.range
        if np.any(y < lo) or np.any(y > hi):
            raise DomainError(f"value outside the range [{lo:.6g}, {hi:.6g}] of u(t, .) on the domain")
        yf = y.ravel()
        i = np.clip(np.searchsorted(self.u, yf) - 1, 0, self.x.size - 2)
        a, b = self.x[i].copy(), self.x[i + 1].copy()
        for _ in range(30):
            mid = 0.5 * (a + b)
            left = self._su(mid) < yf
            a = np.where(left, mid, a)
            b = np.where(left, b, mid)
        xs = 0.5 * (a + b)
        for _ in range(6):
            r = self._su(xs) - yf
            d = self._su(xs, 1)
            step = np.where(d > 0, r / np.where(d > 0, d, 1.0), 0.0)
            xs = np.clip(xs - step, self.x[i], self.x[i + 1])
        resid = np.abs(self._su(xs) - yf)
        if np.any(resid > tol * (1 + np.abs(yf))):
            # polish did not reach tolerance: fall back to more bisection on the cell
            a, b = self.x[i].copy(), self.x[i + 1].copy()
            for _ in range(80):
                mid = 0.5 * (a + b)
                left = self._su(mid) < yf
                a = np.where(left, mid, a)
                b = np.where(left, b, mid)
            xs = 0.5 * (a + b)
        return float(xs[0]) if y.ndim == 0 else xs.reshape(y.shape)


@dataclass
class PdeSolution:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)
    spec: NonlinearFbsdeSpec | None = field(default=None, repr=False)
    scale: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self._slices = {}

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @cached_property
    def u_x(self) -> np.ndarray:
        return d1(self.u, self.dx)

    @cached_property
    def u_xx(self) -> np.ndarray:
        return d2(self.u, self.dx)

    @property
    def horizon(self) -> float:
        return float(self.t[-1])

    def slice(self, t: float) -> SolutionSlice:
        t = float(t)
        if t < self.t[0] - 1e-12 or t > self.t[-1] + 1e-12:
            raise DomainError(f"t={t} outside [{self.t[0]}, {self.t[-1]}]")
        if t in self._slices:
            return self._slices[t]
        k = int(np.clip(np.searchsorted(self.t, t) - 1, 0, self.t.size - 2))
        w = (t - self.t[k]) / (self.t[k + 1] - self.t[k])
        w = min(max(w, 0.0), 1.0)

        def blend(a):
            return (1 - w) * a[k] + w * a[k + 1]

        sl = SolutionSlice(self.x, blend(self.u), blend(self.u_x), blend(self.u_xx))
        if len(self._slices) > 256:
            self._slices.clear()
        self._slices[t] = sl
        return sl

    # serialisation
    def to_binary(self, path) -> Path:
        meta = {"type": "pde-solution", **{k: v for k, v in self.meta.items() if _jsonable(v)}}
        return _io.write_container(path, {"t": self.t, "x": self.x, "u": self.u}, meta)

    @classmethod
    def from_binary(cls, path) -> "PdeSolution":
        meta, arr = _io.read_container(path)
        if meta.pop("type", None) != "pde-solution":
            raise _io.ContainerError("container does not hold a PDE solution")
        return cls(arr["t"], arr["x"], arr["u"].reshape(arr["t"].size, arr["x"].size), meta)

    def to_csv(self, path, t: float) -> Path:
        sl = self.slice(t)
        rows = zip(sl.x, sl.u, sl.ux, sl.uxx)
        return _io.write_csv(path, ["x", "u", "u_x", "u_xx"], rows, [f"t={_io.fmt(t)}"])


def _jsonable(v) -> bool:
    return isinstance(v, (int, float, str, bool, list, dict, type(None)))


def solve_mixed_pde(spec: NonlinearFbsdeSpec, nx: int = 400, nt: int = 400, k: float = 8.0,
                    tol: float = 1e-9, max_iter: int = 20, times: np.ndarray | None = None) -> PdeSolution:
    """Backward march of the mixed-type PDE from t = T to t = 0."""
    if nx < 50 or nt < 50:
        raise ValueError("need nx >= 50 and nt >= 50")
    cs = spec.coefficients
    lo, hi = spec.domain(k)
    x = np.linspace(lo, hi, nx)
    t = time_grid(spec, nt) if times is None else np.asarray(times, dtype=float)
    io_t = np.asarray(spec.iota(t), dtype=float)
    V = np.diff(io_t)
    B = np.asarray(cs.b.integral(t[:-1], t[1:]), dtype=float)
    W = np.diff(t)
    sig = np.asarray(cs.sigma(t), dtype=float) * np.ones_like(t)
    f = None if spec.generator.name == "zero" else spec.generator.func
    u, info = march(x, t, V, B, W, sig, np.asarray(spec.terminal.h(x), dtype=float), f, tol, max_iter)
    # iota' -> 0 at t = 0 when H > 1/2: record how degenerate the first steps are
    rate = V / W
    info.update({
        "scheme": "crank-nicolson/picard", "nx": nx, "nt": nt, "k": k, "x_min": lo, "x_max": hi,
        "boundary": "u_xx=0", "degenerate_diffusion": bool(rate[0] < 1e-2 * rate.max()),
        "min_diffusion_rate": float(rate.min()), "tol": tol,
    })
    sol = PdeSolution(t, x, u, info, spec, sig)
    sol.meta["max_abs_uxx"] = float(np.max(np.abs(sol.u_xx[:-1]))) if nt > 0 else 0.0
    return sol


def evaluate_solution(sol: PdeSolution, t: float, x):
    """(u, u_x, u_xx) at time t and points x inside the domain."""
    sl = sol.slice(t)
    return sl.value(x), sl.derivative(x), sl.second_derivative(x)


def inverse_u(sol: PdeSolution, t: float, y):
    return sol.slice(t).inverse(y)


def bsde_marginals(sol: PdeSolution, spec: NonlinearFbsdeSpec, t: float, ensemble: FbmEnsemble):
    """Samples of (y_t, z_t) = (u(t, eta_t), sigma_t u_x(t, eta_t)) along ensemble paths."""
    if ensemble.kind != "wiener-integral-of-sigma":
        raise ValueError("bsde_marginals needs a wiener-integral-of-sigma ensemble")
    w = ensemble.column(t)
    eta = spec.mean_eta(t) + w
    sl = sol.slice(t)
    outside = (eta < sol.x[0]) | (eta > sol.x[-1])
    if outside.mean() > 1e-3:
        warnings.warn(f"{outside.mean():.2%} of eta_t samples fall outside the PDE domain; "
                      f"increase the domain width k", DomainWarning, stacklevel=2)
    y = sl.value(eta, extrapolate=True)
    z = float(spec.coefficients.sigma(t)) * sl.derivative(eta, extrapolate=True)
    return y, z


# ------------------------------------------------------------------ growth indices

@dataclass
class IndexFit:
    index: float
    ci: tuple[float, float]
    flag: str = ""


@dataclass
class GrowthEstimate:
    t: float
    u: IndexFit
    u_x: IndexFit
    u_inv: IndexFit
    u_x_lower: IndexFit

    def suggest(self, eps: float = 0.05, delta: float = 0.05) -> dict:
        """(eps_bar, delta_bar, lambda) suggestions for the non-Gaussian envelope."""
        return {
            "eps_bar": max(self.u_x.index, 0.0) + eps,
            "delta_bar": max(self.u_inv.index, 0.0) + delta,
            "lam": max(-self.u_x_lower.index, 0.0) + eps,
        }


def _loglog(xv, yv) -> IndexFit:
    xv, yv = np.abs(np.asarray(xv, dtype=float)), np.abs(np.asarray(yv, dtype=float))
    ok = (xv > 1e-8) & (yv > 1e-300) & np.isfinite(yv)
    xv, yv = xv[ok], yv[ok]
    if xv.size < 3 or np.ptp(np.log(xv)) < 1e-12:
        return IndexFit(0.0, (0.0, 0.0), "degenerate")
    ly = np.log(yv)
    if np.ptp(ly) < 1e-12:
        return IndexFit(0.0, (0.0, 0.0), "flat")
    fit = stats.linregress(np.log(xv), ly)
    q = stats.t.ppf(0.975, xv.size - 2) * fit.stderr
    return IndexFit(float(fit.slope), (float(fit.slope - q), float(fit.slope + q)))


def slice_growth(sl: SolutionSlice, t: float = float("nan"), band: float = 0.2,
                 margin: float = 0.1) -> GrowthEstimate:
    """Log-log tail regressions of |u|, |u_x| and |u^{-1}| on the outer ``band`` of the domain.

    The last ``margin`` of the width on each side is skipped: the u_xx = 0 closure
    distorts the solution there and would bias the indices toward 1.
    """
    x = sl.x
    width = x[-1] - x[0]
    lo, hi = x[0] + margin * width, x[-1] - margin * width
    sel = (((x >= lo) & (x <= lo + 0.5 * band * width)) | ((x <= hi) & (x >= hi - 0.5 * band * width)))
    if band <= 0 or sel.sum() < 3:
        empty = IndexFit(0.0, (0.0, 0.0), "degenerate")
        return GrowthEstimate(t, empty, empty, empty, empty)
    xs, us, uxs = x[sel], sl.u[sel], sl.ux[sel]
    ux_fit = _loglog(xs, uxs)
    # the lower growth of u_x is its most negative tail slope
    left, right = xs < 0.5 * (x[0] + x[-1]), xs >= 0.5 * (x[0] + x[-1])
    tails = [_loglog(xs[m], uxs[m]) for m in (left, right) if m.sum() >= 3]
    lower = min(tails, key=lambda f: f.index) if tails else ux_fit
    return GrowthEstimate(t, _loglog(xs, us), ux_fit, _loglog(us, xs), lower)


def growth_indices(sol: PdeSolution, t: float, band: float = 0.2, margin: float = 0.1) -> GrowthEstimate:
    return slice_growth(sol.slice(t), t, band, margin)
