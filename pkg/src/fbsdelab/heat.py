"""Heat kernel, heat semigroup and the closed-form linear fractional BSDE.

The linear equation handled here is

    dy_t = -(alpha_t + beta_t y_t + gamma_t z_t) dt - z_t dB^H_t,   y_T = h(eta_T),

with deterministic coefficients.  Its solution is expressed through the
quasi-conditional expectation, which for a function of eta_T reduces to a
heat semigroup evaluated at variance iota_T - iota_t.  Note the sign of the
martingale term: with h = identity the solution is y = eta, z = -sigma.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import quad
from scipy.special import expit

from .coefficients import CoefficientSet
from .fbm import QuadratureWarning, iota

SQRT2PI = np.sqrt(2.0 * np.pi)
_CHUNK = 1 << 15


class H2Violation(ValueError):
    """Terminal map fails the derivative bounds 0 < c <= h' <= C, 0 < c~ <= h'' <= C~."""


def heat_kernel(t, x):
    """p_t(x) = (2 pi t)^(-1/2) exp(-x^2 / (2t))."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat kernel needs t > 0")
    x = np.asarray(x, dtype=float)
    out = np.exp(-x * x / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)
    return float(out) if out.ndim == 0 else out


def _gh(n: int):
    z, w = hermegauss(n)
    return z, w / SQRT2PI


def _apply_fixed(t, g, x, n):
    z, w = _gh(n)
    sd = np.sqrt(t)[..., None]
    return (np.asarray(g(x[..., None] + sd * z), dtype=float) * w).sum(axis=-1)


def semigroup_apply(t, g: Callable, x, nodes: int = 64, tol: float = 1e-8, max_nodes: int = 256):
    """P_t g(x) = E g(x + sqrt(t) N) by Gauss-Hermite, doubling the node count
    until successive estimates agree to ``tol`` relative (floor 1).

    ``t`` and ``x`` broadcast; ``g`` must be vectorised.
    """
    t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
    if np.any(t < 0):
        raise ValueError("semigroup time must be nonnegative")
    scalar = x.ndim == 0
    tf, xf = t.ravel(), x.ravel()
    out = np.empty(xf.size)
    worst = 0.0
    for a in range(0, xf.size, _CHUNK):
        tt, xx = tf[a:a + _CHUNK], xf[a:a + _CHUNK]
        n = nodes
        prev = _apply_fixed(tt, g, xx, n)
        while True:
            n2 = min(2 * n, max_nodes)
            cur = _apply_fixed(tt, g, xx, n2)
            err = float(np.max(np.abs(cur - prev)))
            scale = max(1.0, float(np.max(np.abs(cur))))
            if err <= tol * scale or n2 == max_nodes:
                if err > tol * scale:
                    worst = max(worst, err / scale)
                break
            n, prev = n2, cur
        out[a:a + _CHUNK] = cur
    if worst:
        warnings.warn(f"semigroup quadrature not converged: relative change {worst:.3e} at {max_nodes} nodes",
                      QuadratureWarning, stacklevel=2)
    zero = tf == 0
    if zero.any():
        out[zero] = np.asarray(g(xf[zero]), dtype=float)
    return float(out[0]) if scalar else out.reshape(x.shape)


# ---------------------------------------------------------------- terminal maps

@dataclass(frozen=True)
class TerminalMap:
    """h together with h' and h''.

    ``global_bounds`` may carry analytically known global values for any of
    ``c, C, c2, C2`` (bounds of h' and h''); these take precedence over probes.
    """

    h: Callable
    dh: Callable
    d2h: Callable | None = None
    name: str = "custom"
    params: dict = field(default_factory=dict)
    growth: float = 1.0
    global_bounds: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.h(x)

    def check_growth(self, p: float | None = None, radius: float = 1e3) -> float:
        """Largest |h(x)| / (1 + |x|^p) on a probe grid; raises if it keeps growing."""
        p = self.growth if p is None else p
        r = np.geomspace(1e-3, radius, 400)
        x = np.concatenate([-r[::-1], [0.0], r])
        ratio = np.abs(np.asarray(self.h(x), dtype=float)) / (1.0 + np.abs(x) ** p)
        if not np.all(np.isfinite(ratio)):
            raise ValueError(f"{self.name}: h is not finite on the probe grid")
        outer = ratio[np.abs(x) > radius / 2].max()
        mid = ratio[(np.abs(x) > radius / 4) & (np.abs(x) <= radius / 2)].max()
        if outer > 4.0 * max(mid, 1e-12) and outer > 1e-6:
            raise ValueError(f"{self.name}: |h| grows faster than |x|^{p}")
        return float(ratio.max())

    def to_dict(self) -> dict:
        return {"name": self.name, **self.params}


def identity_map() -> TerminalMap:
    return affine_map(0.0, 1.0)


def affine_map(a: float, b: float) -> TerminalMap:
    return TerminalMap(lambda x: a + b * np.asarray(x, dtype=float),
                       lambda x: b + 0.0 * np.asarray(x, dtype=float),
                       lambda x: 0.0 * np.asarray(x, dtype=float),
                       "affine", {"a": a, "b": b}, 1.0, {"c": b, "C": b})


def zero_map() -> TerminalMap:
    return affine_map(0.0, 0.0)


def softplus_map(c: float = 0.5, C: float = 2.0, a: float = 1.0) -> TerminalMap:
    """Strictly convex map with c < h' < C:  h = c x + (C - c) a log(1 + e^(x/a))."""
    k = C - c

    def h(x):
        x = np.asarray(x, dtype=float)
        return c * x + k * a * np.logaddexp(0.0, x / a)

    def dh(x):
        return c + k * expit(np.asarray(x, dtype=float) / a)

    def d2h(x):
        s = expit(np.asarray(x, dtype=float) / a)
        return k / a * s * (1.0 - s)

    return TerminalMap(h, dh, d2h, "softplus", {"c": c, "C": C, "a": a}, 1.0,
                       {"c": c, "C": C, "C2": k / (4.0 * a)})


def cubic_map(k: float = 1.0 / 3.0) -> TerminalMap:
    """h(x) = x + k x^3."""
    return TerminalMap(lambda x: np.asarray(x, dtype=float) + k * np.asarray(x, dtype=float) ** 3,
                       lambda x: 1.0 + 3 * k * np.asarray(x, dtype=float) ** 2,
                       lambda x: 6 * k * np.asarray(x, dtype=float),
                       "cubic", {"k": k}, 3.0)


def signed_square_map(k: float = 0.1) -> TerminalMap:
    """h(x) = x + k x|x|: C^1, increasing, quadratic growth."""
    def h(x):
        x = np.asarray(x, dtype=float)
        return x + k * x * np.abs(x)

    return TerminalMap(h, lambda x: 1.0 + 2 * k * np.abs(np.asarray(x, dtype=float)),
                       lambda x: 2 * k * np.sign(np.asarray(x, dtype=float)),
                       "signed_square", {"k": k}, 2.0)


TERMINAL_MAPS = {
    "identity": lambda **kw: identity_map(),
    "affine": affine_map,
    "zero": lambda **kw: zero_map(),
    "softplus": softplus_map,
    "cubic": cubic_map,
    "signed_square": signed_square_map,
}


def terminal_from_dict(d: dict) -> TerminalMap:
    d = dict(d)
    name = d.pop("name")
    if name not in TERMINAL_MAPS:
        raise KeyError(f"unknown terminal map {name!r}; known: {sorted(TERMINAL_MAPS)}")
    return TERMINAL_MAPS[name](**d)


# ---------------------------------------------------------------- linear fBSDE

@dataclass
class LinearFbsdeSpec:
    coefficients: CoefficientSet
    terminal: TerminalMap
    hurst: float
    horizon: float = 1.0
    check_h2: bool = True
    n_probe: int = 1000
    bounds: dict = field(default=None)

    def __post_init__(self):
        self.coefficients.validate(self.horizon)
        self.iota_T = float(iota(self.coefficients.sigma, self.horizon, self.hurst))
        probed = self.probe_bounds()
        merged = dict(probed)
        merged.update({k: v for k, v in self.terminal.global_bounds.items() if k in merged})
        if self.bounds:
            merged.update(self.bounds)
        self.bounds = merged
        if self.check_h2:
            bad = [k for k in ("c", "c2") if not merged[k] > 0]
            if bad or merged["C"] < merged["c"] or merged["C2"] < merged["c2"]:
                raise H2Violation(
                    f"(H2) fails on the probe grid for {self.terminal.name}: "
                    f"h' in [{merged['c']:.4g}, {merged['C']:.4g}], h'' in [{merged['c2']:.4g}, {merged['C2']:.4g}]")

    def probe_grid(self) -> np.ndarray:
        r = 6.0 * np.sqrt(self.iota_T)
        e0 = self.coefficients.eta0
        return np.linspace(e0 - r, e0 + r, self.n_probe)

    def probe_bounds(self) -> dict:
        x = self.probe_grid()
        d1 = np.asarray(self.terminal.dh(x), dtype=float)
        d2 = (np.asarray(self.terminal.d2h(x), dtype=float) if self.terminal.d2h is not None
              else np.gradient(d1, x))
        return {"c": float(d1.min()), "C": float(d1.max()), "c2": float(d2.min()), "C2": float(d2.max())}

    @property
    def c(self):
        return self.bounds["c"]

    @property
    def C(self):
        return self.bounds["C"]

    @property
    def c2(self):
        return self.bounds["c2"]

    @property
    def C2(self):
        return self.bounds["C2"]

    # deterministic pieces
    def iota(self, t):
        return iota(self.coefficients.sigma, t, self.hurst)

    def remaining_variance(self, t):
        return np.maximum(self.iota_T - np.asarray(self.iota(t), dtype=float), 0.0)

    def drift_total(self) -> float:
        cs = self.coefficients
        return cs.eta0 + cs.b.integral(0.0, self.horizon)

    def mean_eta(self, t):
        cs = self.coefficients
        return cs.eta0 + cs.b.integral(0.0, t)

    def discount(self, t):
        """exp(int_t^T beta)."""
        return np.exp(self.coefficients.beta.integral(t, self.horizon))

    def girsanov_shift(self, t):
        """int_t^T sigma_s gamma_s ds."""
        cs = self.coefficients
        if cs.gamma.is_constant and cs.gamma.value == 0.0:
            return 0.0 * np.asarray(t, dtype=float)
        return _vquad(lambda s: cs.sigma(s) * cs.gamma(s), t, self.horizon)

    def running_alpha(self, t):
        """int_t^T alpha_s exp(int_t^s beta) ds."""
        cs = self.coefficients
        if cs.alpha.is_constant and cs.alpha.value == 0.0:
            return 0.0 * np.asarray(t, dtype=float)
        if cs.beta.is_constant:
            b = cs.beta.value
            return _vquad(lambda s, t0=None: cs.alpha(s) * np.exp(b * (s - t0)), t, self.horizon, pass_t=True)
        return _vquad(lambda s, t0=None: cs.alpha(s) * np.exp(cs.beta.integral(t0, s)), t, self.horizon,
                      pass_t=True)

    def argument(self, t, w):
        """eta_0 + int_0^T b - int_t^T sigma gamma + w."""
        return self.drift_total() - self.girsanov_shift(t) + np.asarray(w, dtype=float)


def _vquad(fn, t, T, pass_t=False):
    t = np.asarray(t, dtype=float)
    uniq, inv = np.unique(t.ravel(), return_inverse=True)
    vals = np.array([quad((lambda s, a=a: float(fn(s, a))) if pass_t else (lambda s: float(fn(s))),
                          a, T, epsabs=1e-13, epsrel=1e-12, limit=200)[0] for a in uniq])
    out = vals[inv].reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def quasi_conditional_expectation(spec: LinearFbsdeSpec, g: Callable, t, w):
    """Quasi-conditional expectation of g(eta_T) given F_t, where w is the
    realised value of int_0^t sigma dB^H."""
    return semigroup_apply(spec.remaining_variance(t), g, spec.drift_total() + np.asarray(w, dtype=float))


def linear_solve(spec: LinearFbsdeSpec, t, w):
    """Closed-form (y_t, z_t) of the linear fBSDE given w = int_0^t sigma dB^H.

    ``t`` and ``w`` broadcast.
    """
    t, w = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(w, dtype=float))
    if np.any(t < 0) or np.any(t > spec.horizon * (1 + 1e-12)):
        raise ValueError("t must lie in [0, T]")
    uniq, inv = np.unique(t.ravel(), return_inverse=True)
    tau = spec.remaining_variance(uniq)[inv].reshape(t.shape)
    disc = np.atleast_1d(spec.discount(uniq))[inv].reshape(t.shape)
    run = np.atleast_1d(spec.running_alpha(uniq))[inv].reshape(t.shape)
    shift = np.atleast_1d(spec.girsanov_shift(uniq))[inv].reshape(t.shape)
    sig = np.atleast_1d(spec.coefficients.sigma(uniq))[inv].reshape(t.shape)
    arg = spec.drift_total() - shift + w
    y = disc * semigroup_apply(tau, spec.terminal.h, arg) + run
    z = -sig * disc * semigroup_apply(tau, spec.terminal.dh, arg)
    if y.ndim == 0:
        return float(y), float(z)
    return y, z
