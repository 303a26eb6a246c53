"""BSDEs driven by a general centred Gaussian process X with variance clock V.

    dy = -f(t, X_t, y, z) dV(t) + z d X_t   (Wick-Ito),   y_T = h(X_T)

is solved through the Brownian problem on the clock interval [0, V(T)]:

    phi_s + 1/2 phi_xx + f(U(s), x, phi, phi_x) = 0,   phi(V(T), .) = h,

and y_t = phi(V(t), X_t), z_t = psi(V(t), X_t) with psi = phi_x.  The integral
against dV is read as Lebesgue-Stieltjes, which is what turns it into plain
ds on the clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats
from scipy.interpolate import PchipInterpolator

from ._cn import march
from .coefficients import Coefficient
from .density import DensityEnvelope, Marginal, g_explicit
from .fbm import iota, stream
from .heat import TerminalMap, semigroup_apply
from .pde import Generator, MonotonicityError, PdeSolution, SolutionSlice


class H3Violation(ValueError):
    pass


# ------------------------------------------------------------------ drivers

@dataclass
class GaussianDriverSpec:
    """Variance clock V on [0, T] (strictly increasing, V(0) = 0) and its inverse U."""

    V: Callable
    horizon: float = 1.0
    label: str = "custom"
    U_exact: Callable | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.linspace(0.0, self.horizon, 4001)
        v = np.asarray(self.V(t), dtype=float)
        if abs(v[0]) > 1e-14:
            raise ValueError("variance clock must start at V(0) = 0")
        if np.any(np.diff(v) <= 0):
            raise ValueError("variance clock must be strictly increasing")
        self.VT = float(v[-1])

    def __call__(self, t):
        return self.V(t)

    def U(self, s):
        return inverse_variance(self, s)

    def to_dict(self) -> dict:
        return {"kind": self.label, "horizon": self.horizon, **self.params}

    # factories
    @classmethod
    def fbm(cls, H: float, horizon: float = 1.0) -> "GaussianDriverSpec":
        if not 0 < H < 1:
            raise ValueError("Hurst index must lie in (0, 1)")
        return cls(lambda t: np.asarray(t, dtype=float) ** (2 * H), horizon, "fbm",
                   lambda s: np.asarray(s, dtype=float) ** (1 / (2 * H)), {"hurst": H})

    @classmethod
    def brownian(cls, horizon: float = 1.0) -> "GaussianDriverSpec":
        return cls(lambda t: np.asarray(t, dtype=float) * 1.0, horizon, "brownian",
                   lambda s: np.asarray(s, dtype=float) * 1.0)

    @classmethod
    def power(cls, scale: float, exponent: float, horizon: float = 1.0) -> "GaussianDriverSpec":
        return cls(lambda t: scale * np.asarray(t, dtype=float) ** exponent, horizon, "power",
                   lambda s: (np.asarray(s, dtype=float) / scale) ** (1 / exponent),
                   {"scale": scale, "exponent": exponent})

    @classmethod
    def wiener_integral(cls, sigma, H: float, horizon: float = 1.0, n: int = 513) -> "GaussianDriverSpec":
        """V = iota for int_0^t sigma dB^H, tabulated and interpolated monotonically."""
        sig = Coefficient.coerce(sigma)
        t = horizon * np.linspace(0.0, 1.0, n) ** 2
        v = np.asarray(iota(sig, t, H), dtype=float)
        d = cls.table(t, v, horizon)
        d.label, d.params = "wiener_integral", {"hurst": H, "sigma": sig.to_dict() if sig.kind != "function" else None}
        return d

    @classmethod
    def table(cls, times, values, horizon: float | None = None) -> "GaussianDriverSpec":
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("clock table times must be strictly increasing")
        interp = PchipInterpolator(t, v, extrapolate=False)
        return cls(lambda s: interp(np.asarray(s, dtype=float)), float(t[-1] if horizon is None else horizon),
                   "table", None, {"times": t.tolist(), "values": v.tolist()})


def inverse_variance(driver: GaussianDriverSpec, s):
    """U(s) = inf{t >= 0 : V(t) >= s} for s in [0, V(T)]."""
    s = np.asarray(s, dtype=float)
    if np.any(s < -1e-15) or np.any(s > driver.VT * (1 + 1e-12) + 1e-15):
        raise ValueError(f"clock value outside [0, {driver.VT}]")
    s = np.clip(s, 0.0, driver.VT)
    if driver.U_exact is not None:
        out = np.minimum(np.asarray(driver.U_exact(s), dtype=float), driver.horizon)
    else:
        lo = np.zeros_like(s)
        hi = np.full_like(s, driver.horizon)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = np.asarray(driver.V(mid), dtype=float) < s
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-15 * max(driver.horizon, 1.0)):
                break
        out = hi
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ solution

@dataclass
class TransferSolution(PdeSolution):
    """phi on the clock grid [0, V(T)] (stored as ``t``); psi = phi_x."""

    driver: GaussianDriverSpec | None = field(default=None, repr=False)

    @property
    def phi(self) -> np.ndarray:
        return self.u

    @property
    def psi(self) -> np.ndarray:
        return self.u_x

    def clock_slice(self, t: float) -> SolutionSlice:
        return self.slice(float(self.driver(t)))

    def marginal(self, t: float, target: str = "y") -> Marginal:
        Vt = float(self.driver(t))
        sl = self.slice(Vt)
        if target == "y":
            return Marginal(sl, 0.0, Vt, "y")
        if target == "z":
            from ._cn import d1
            zs = _increasing_core(SolutionSlice(sl.x, sl.ux, sl.uxx, d1(sl.uxx, float(sl.x[1] - sl.x[0]))),
                                  6 * np.sqrt(Vt))
            return Marginal(zs, 0.0, Vt, "z")
        raise ValueError("target must be 'y' or 'z'")

    def solution_at(self, t: float, X):
        """(y_t, z_t) = (phi(V(t), X_t), psi(V(t), X_t)) for driver values X_t."""
        sl = self.clock_slice(t)
        return sl.value(X, extrapolate=True), sl.derivative(X, extrapolate=True)


def _increasing_core(sl: SolutionSlice, half: float) -> SolutionSlice:
    """Largest window around x = 0 where sl is strictly increasing.

    psi = phi_x flattens in the far field, where h'' has decayed to round-off;
    the window must still cover [-half, half], beyond which the Gaussian mass
    is negligible.
    """
    good = np.ones(sl.x.size, dtype=bool)
    good[1:] &= np.diff(sl.u) > 0
    good &= sl.ux > 0
    c = int(np.argmin(np.abs(sl.x)))
    if not good[c]:
        raise MonotonicityError("psi is not increasing at the origin")
    a = c
    while a > 0 and good[a - 1] and good[a]:
        a -= 1
    b = c
    while b < sl.x.size - 1 and good[b + 1]:
        b += 1
    if sl.x[a] > -half or sl.x[b] < half:
        raise MonotonicityError(f"psi is increasing only on [{sl.x[a]:.4g}, {sl.x[b]:.4g}]")
    if a == 0 and b == sl.x.size - 1:
        return sl
    return SolutionSlice(sl.x[a:b + 1], sl.u[a:b + 1], sl.ux[a:b + 1], sl.uxx[a:b + 1])


def check_h3(f: Generator, h: TerminalMap, radius: float, horizon: float, n: int = 1000, seed: int = 0) -> dict:
    """Probe (H3): h'' > 0 on [-radius, radius]; f_y, f_z >= 0 on a box."""
    x = np.linspace(-radius, radius, n)
    d2 = np.asarray(h.d2h(x), dtype=float) if h.d2h is not None else np.gradient(np.asarray(h.dh(x)), x)
    if not np.min(d2) > 0:
        raise H3Violation(f"(H3)(i): inf h'' = {np.min(d2):.4g} is not positive on the probe grid")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, horizon, n)
    xs, y, z = rng.uniform(-radius, radius, (3, n))
    e = 1e-6
    fy = (f(t, xs, y + e, z) - f(t, xs, y - e, z)) / (2 * e)
    fz = (f(t, xs, y, z + e) - f(t, xs, y, z - e)) / (2 * e)
    fx = (f(t, xs + e, y, z) - f(t, xs - e, y, z)) / (2 * e)
    worst = float(min(np.min(fy), np.min(fz), np.min(fx)))
    if worst < -1e-8:
        raise H3Violation(f"(H3)(ii): generator derivative {worst:.4g} is negative on the probe box")
    return {"inf_h2": float(np.min(d2)), "min_f_derivative": worst}


def solve_transferred(driver: GaussianDriverSpec, f: Generator, h: TerminalMap, nx: int = 401, ns: int = 400,
                      k: float = 8.0, check: bool = True, tol: float = 1e-9, max_iter: int = 20) -> TransferSolution:
    """Backward march of the clock-time semilinear heat equation."""
    VT = driver.VT
    r = k * np.sqrt(VT)
    info = check_h3(f, h, 6 * np.sqrt(VT), driver.horizon) if check else {}
    x = np.linspace(-r, r, nx)
    s = np.linspace(0.0, VT, ns + 1)
    labels = np.asarray(driver.U(s), dtype=float)
    ds = np.diff(s)
    fn = None if f.name == "zero" else f.func
    phi, meta = march(x, labels, ds, np.zeros_like(ds), ds, np.ones_like(s),
                      np.asarray(h.h(x), dtype=float), fn, tol, max_iter)
    meta.update({"scheme": "crank-nicolson/picard", "nx": nx, "ns": ns, "k": k, "clock_end": VT,
                 "boundary": "u_xx=0", "driver": driver.label, **info})
    return TransferSolution(s, x, phi, meta, None, None, driver)


def pushforward_density(sol: TransferSolution, t: float, y, target: str = "y"):
    """Density of y_t (or z_t) as the image of N(0, V(t)) under phi(V(t), .)."""
    return sol.marginal(t, target).density(y)


# ------------------------------------------------------------------ envelopes

def clock_envelope(m: float, mu: float, c1: float, c2: float, Vt: float, kind: str = "gaussian-clock",
                   params: dict | None = None) -> DensityEnvelope:
    """mu/(c2 V) exp(-(x-m)^2/(c1 V)) <= rho <= mu/(c1 V) exp(-(x-m)^2/(c2 V))."""
    if not 0 < c1 <= c2:
        raise ValueError("need 0 < c1 <= c2")

    def lower(x):
        return mu / (c2 * Vt) * np.exp(-(np.asarray(x, dtype=float) - m) ** 2 / (c1 * Vt))

    def upper(x):
        return mu / (c1 * Vt) * np.exp(-(np.asarray(x, dtype=float) - m) ** 2 / (c2 * Vt))

    def tail(x):
        # integral of the upper curve beyond m + x
        x = np.asarray(x, dtype=float)
        a = c2 * Vt
        return np.minimum(1.0, mu / (c1 * Vt) * np.sqrt(np.pi * a) * stats.norm.sf(x * np.sqrt(2 / a)))

    p = {"c1": c1, "c2": c2, "V": Vt}
    p.update(params or {})
    return DensityEnvelope(m, mu, lower, upper, kind, tail, tail, p)


def calibrate_clock_constants(mg: Marginal, m: float, n_probe: int = 41, width: float = 4.0) -> tuple[float, float]:
    """c1 = 2 min g / V and c2 = 2 max g / V over probe points within +-width SD of the mean.

    Probe-calibrated: the values are not global constants.
    """
    lo, hi = mg.sl.range
    sd = np.sqrt(mg.var)
    ys = np.linspace(-width * sd, width * sd, n_probe)
    ys = ys[(ys + m > lo) & (ys + m < hi)]
    g = np.asarray(g_explicit(mg, ys, m), dtype=float)
    return 2 * float(g.min()) / mg.var, 2 * float(g.max()) / mg.var


def general_envelope(sol: TransferSolution, t: float, target: str = "y", constants=None, mu=None,
                     generator: Generator | None = None) -> DensityEnvelope:
    """Clock-scaled Gaussian envelope for y_t or z_t."""
    if target == "z" and generator is not None and not generator.z_linear:
        raise ValueError("z-envelope needs a generator that is linear in z")
    mg = sol.marginal(t, target)
    m, mu0 = mg.moments()
    mu = mu0 if mu is None else mu
    if constants is None:
        c1, c2 = calibrate_clock_constants(mg, m)
        label = "probe-calibrated, not proven global"
    else:
        c1, c2 = constants
        label = "supplied"
    return clock_envelope(m, mu, c1, c2, mg.var, params={"t": t, "target": target, "constants": label})


# ------------------------------------------------------------------ representation limit

@dataclass
class RepresentationResult:
    eps: np.ndarray
    errors: np.ndarray
    normalise: str

    @property
    def monotone(self) -> bool:
        """Strictly decreasing as eps shrinks; errors at round-off level count as converged."""
        e = self.errors[np.argsort(-self.eps)]
        return bool(np.all((np.diff(e) < 0) | (e[1:] <= 1e-13)))

    @property
    def slope(self) -> float:
        ok = self.errors > 0
        if ok.sum() < 2:
            return float("inf")
        return float(np.polyfit(np.log(self.eps[ok]), np.log(self.errors[ok]), 1)[0])

    @property
    def reduction(self) -> float:
        i, j = np.argmin(self.eps), np.argmax(self.eps)
        return float(self.errors[j] / self.errors[i]) if self.errors[i] > 0 else float("inf")

    def rows(self):
        return [(float(e), float(r)) for e, r in zip(self.eps, self.errors)]


def short_horizon_value(f: Generator, driver: GaussianDriverSpec, t: float, eps: float, y: float, z: float,
                        nx: int = 201, ns: int = 200, k: float = 8.0) -> float:
    """y^eps_t: solution at time t of the BSDE on [t, t+eps] with terminal y + z (X_{t+eps} - X_t)."""
    s0, s1 = float(driver(t)), float(driver(t + eps))
    dV = s1 - s0
    r = k * np.sqrt(dV)
    x = np.linspace(-r, r, nx | 1)
    s = np.linspace(s0, s1, ns + 1)
    labels = np.asarray(driver.U(s), dtype=float)
    ds = np.diff(s)
    fn = None if f.name == "zero" else f.func
    phi, _ = march(x, labels, ds, np.zeros_like(ds), ds, np.ones_like(s), y + z * x, fn)
    return float(phi[0, x.size // 2])


def representation_check(f: Generator, t: float, y, z, eps_list, driver: GaussianDriverSpec | None = None,
                         n_paths: int = 32, seed: int = 0, normalise: str = "clock", nx: int = 201,
                         ns: int = 200) -> RepresentationResult:
    """e(eps) = L2 norm of (y^eps_t - y) / dV - f(t, y, z) over the given (y, z).

    ``normalise="clock"`` divides by V(t+eps) - V(t); ``"time"`` divides by
    eps, whose limit is f V'(t) rather than f.  Array-valued (y, z) are
    subsampled to ``n_paths`` pairs with ``seed``; the same pairs are used for
    every eps.
    """
    driver = GaussianDriverSpec.brownian(1.0) if driver is None else driver
    if f.uses_x:
        raise ValueError("the representation check needs an x-free generator")
    if normalise not in ("clock", "time"):
        raise ValueError("normalise must be 'clock' or 'time'")
    eps_list = np.asarray(eps_list, dtype=float)
    if np.any(eps_list <= 0) or np.any(t + eps_list >= driver.horizon):
        raise ValueError("need 0 < eps < T - t")
    y, z = np.broadcast_arrays(np.atleast_1d(np.asarray(y, dtype=float)), np.atleast_1d(np.asarray(z, dtype=float)))
    if y.size > n_paths:
        pick = stream(seed, 0).choice(y.size, n_paths, replace=False)
        y, z = y[pick], z[pick]
    errs = []
    for eps in eps_list:
        norm = float(driver(t + eps) - driver(t)) if normalise == "clock" else float(eps)
        target = np.asarray(f(t, 0.0, y, z), dtype=float) * np.ones_like(y)
        ye = np.array([short_horizon_value(f, driver, t, eps, yi, zi, nx, ns) for yi, zi in zip(y, z)])
        errs.append(float(np.sqrt(np.mean(((ye - y) / norm - target) ** 2))))
    return RepresentationResult(eps_list, np.array(errs), normalise)


# ------------------------------------------------------------------ Brownian reference

def _basis(x, degree):
    out = np.empty((x.size, degree + 1))
    out[:, 0] = 1.0
    if degree:
        out[:, 1] = x
    for k in range(2, degree + 1):
        # probabilists' Hermite recursion keeps the columns well conditioned
        out[:, k] = x * out[:, k - 1] - (k - 1) * out[:, k - 2]
    return out


def euler_bsde_reference(f: Generator, h: TerminalMap, horizon: float = 1.0, n_paths: int = 100_000,
                         n_steps: int = 25, seed: int = 0, degree: int = 8, control_variate: bool = True):
    """y_0 of the Brownian BSDE dy = -f dt + z dW, y_T = h(W_T), by least-squares Monte Carlo.

    Trapezoidal (theta = 1/2) time stepping for the generator, regression on
    Hermite polynomials of W_n / sqrt(t_n).  With ``control_variate`` the
    same scheme is also run on the same paths with the generator linearised
    at (P_T h(0), 0), whose exact y_0 is known, and the difference is used.
    Returns (y0, standard error estimate).
    """
    dt = horizon / n_steps
    dW = stream(seed, 0).standard_normal((n_paths, n_steps)) * np.sqrt(dt)
    W = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dW, axis=1)], axis=1)
    t = np.linspace(0.0, horizon, n_steps + 1)

    def run(gen):
        """Scheme output y_0 and the per-path pathwise estimates of it."""
        Y = np.asarray(h.h(W[:, -1]), dtype=float)
        Z = np.asarray(h.dh(W[:, -1]), dtype=float)
        fY = np.asarray(gen(t[-1], W[:, -1], Y, Z), dtype=float) * np.ones(n_paths)
        acc = 0.5 * dt * fY
        for n in range(n_steps - 1, 0, -1):
            B = _basis(W[:, n] / np.sqrt(t[n]), degree)
            coef = np.linalg.lstsq(B, np.column_stack([Y + 0.5 * dt * fY, Y * dW[:, n] / dt]), rcond=None)[0]
            base, Z = (B @ coef).T
            Yn = base.copy()
            for _ in range(4):
                Yn = base + 0.5 * dt * np.asarray(gen(t[n], W[:, n], Yn, Z), dtype=float)
            fY = np.asarray(gen(t[n], W[:, n], Yn, Z), dtype=float) * np.ones(n_paths)
            acc += dt * fY
            Y = Yn
        base = float(np.mean(Y + 0.5 * dt * fY))
        Z0 = float(np.mean(Y * dW[:, 0]) / dt)
        y0 = base
        for _ in range(30):
            y0 = base + 0.5 * dt * float(np.asarray(gen(0.0, 0.0, y0, Z0), dtype=float))
        f0 = float(np.asarray(gen(0.0, 0.0, y0, Z0), dtype=float))
        return y0, np.asarray(h.h(W[:, -1]), dtype=float) + acc + 0.5 * dt * f0

    y_f, path_f = run(f.func)
    if not control_variate:
        return y_f, float(np.std(path_f) / np.sqrt(n_paths))
    ybar = float(semigroup_apply(horizon, h.h, 0.0))
    e = 1e-6
    b = float((f(0.5 * horizon, 0.0, ybar + e, 0.0) - f(0.5 * horizon, 0.0, ybar - e, 0.0)) / (2 * e))
    c = float((f(0.5 * horizon, 0.0, ybar, e) - f(0.5 * horizon, 0.0, ybar, -e)) / (2 * e))
    a = float(f(0.5 * horizon, 0.0, ybar, 0.0)) - b * ybar
    lin = lambda tt, x, y, z: a + b * np.asarray(y, dtype=float) + c * np.asarray(z, dtype=float)
    y_l, path_l = run(lin)
    growth = np.exp(b * horizon)
    exact = growth * float(semigroup_apply(horizon, h.h, c * horizon)) + (a * (growth - 1) / b if b else a * horizon)
    return y_f - y_l + exact, float(np.std(path_f - path_l) / np.sqrt(n_paths))
