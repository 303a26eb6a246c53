"""Deterministic time coefficients and time grids.

A :class:`Coefficient` is a scalar function of time in one of three closed
forms (constant, polynomial, table) or an arbitrary vectorised callable.
Tables use monotone cubic (PCHIP) interpolation so that the PDE module sees
a C^1 coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.integrate import quad
from scipy.interpolate import PchipInterpolator


class CoefficientError(ValueError):
    """Invalid coefficient definition or violated coefficient invariant."""


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("time grid needs at least 2 points")
        if pts[0] < 0:
            raise ValueError("time grid must start at t >= 0")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, horizon: float, n: int, start: float = 0.0) -> "TimeGrid":
        return cls(np.linspace(start, horizon, n))

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    def __len__(self) -> int:
        return self.points.size

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        i = int(np.argmin(np.abs(self.points - t)))
        if abs(self.points[i] - t) > atol * max(1.0, abs(t)):
            raise KeyError(f"t={t} is not a grid time")
        return i


@dataclass(frozen=True)
class Coefficient:
    """Scalar deterministic function of time.

    ``kind`` is one of ``constant``, ``polynomial``, ``table`` or ``function``.
    Polynomial coefficients are in increasing degree order.
    """

    kind: str
    value: float = 0.0
    coeffs: tuple = ()
    times: tuple = ()
    values: tuple = ()
    func: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind == "table":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or t.size < 2 or t.size != v.size:
                raise CoefficientError("table needs matching 1-d times/values with >= 2 entries")
            if np.any(np.diff(t) <= 0):
                raise CoefficientError("table times must be strictly increasing")
            if not np.all(np.isfinite(v)):
                raise CoefficientError("table values must be finite")
            object.__setattr__(self, "_interp", PchipInterpolator(t, v, extrapolate=True))
        elif self.kind == "function":
            if self.func is None:
                raise CoefficientError("function coefficient needs a callable")
        elif self.kind not in ("constant", "polynomial"):
            raise CoefficientError(f"unknown coefficient kind {self.kind!r}")

    # constructors
    @classmethod
    def constant(cls, value: float) -> "Coefficient":
        return cls("constant", value=float(value))

    @classmethod
    def polynomial(cls, coeffs: Sequence[float]) -> "Coefficient":
        return cls("polynomial", coeffs=tuple(float(c) for c in coeffs))

    @classmethod
    def table(cls, times: Sequence[float], values: Sequence[float]) -> "Coefficient":
        return cls("table", times=tuple(map(float, times)), values=tuple(map(float, values)))

    @classmethod
    def function(cls, func: Callable) -> "Coefficient":
        return cls("function", func=func)

    @classmethod
    def coerce(cls, obj) -> "Coefficient":
        """Accept a Coefficient, a number, a callable or a config mapping."""
        if isinstance(obj, Coefficient):
            return obj
        if isinstance(obj, (int, float, np.floating)):
            return cls.constant(float(obj))
        if isinstance(obj, dict):
            return cls.from_dict(obj)
        if callable(obj):
            return cls.function(obj)
        raise CoefficientError(f"cannot interpret {obj!r} as a coefficient")

    @classmethod
    def from_dict(cls, d: dict) -> "Coefficient":
        kind = d.get("kind")
        if kind == "constant":
            return cls.constant(d["value"])
        if kind == "polynomial":
            return cls.polynomial(d["coeffs"])
        if kind == "table":
            return cls.table(d["t"], d["values"])
        raise CoefficientError(f"unknown coefficient kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "coeffs": list(self.coeffs)}
        if self.kind == "table":
            return {"kind": "table", "t": list(self.times), "values": list(self.values)}
        raise CoefficientError("function coefficients are not serialisable")

    # evaluation
    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.value) if t.ndim else float(self.value)
        if self.kind == "polynomial":
            out = P.polyval(t, self.coeffs)
        elif self.kind == "table":
            out = self._interp(t)
        else:
            out = np.asarray(self.func(t), dtype=float)
            if out.shape != t.shape:
                out = np.broadcast_to(out, t.shape).copy()
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.zeros_like(t) if t.ndim else 0.0
        if self.kind == "polynomial":
            return P.polyval(t, P.polyder(self.coeffs)) if len(self.coeffs) > 1 else 0.0 * t
        if self.kind == "table":
            return self._interp.derivative()(t)
        h = 1e-6 * np.maximum(1.0, np.abs(t))
        return (np.asarray(self.func(t + h)) - np.asarray(self.func(t - h))) / (2 * h)

    def integral(self, a, b):
        """Integral over [a, b]; vectorised in either endpoint."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "constant":
            out = self.value * (b - a)
        elif self.kind == "polynomial":
            anti = P.polyint(self.coeffs)
            out = P.polyval(b, anti) - P.polyval(a, anti)
        elif self.kind == "table":
            anti = self._interp.antiderivative()
            out = anti(b) - anti(a)
        else:
            aa, bb = np.broadcast_arrays(a, b)
            out = np.array([quad(lambda s: float(self.func(s)), x, y, epsabs=1e-12)[0]
                            for x, y in zip(aa.ravel(), bb.ravel())]).reshape(aa.shape)
        return float(out) if np.ndim(out) == 0 else out

    def bounds(self, horizon: float, n: int = 2001) -> tuple[float, float]:
        """(inf, sup) over a dense probe of [0, horizon]."""
        v = np.asarray(self(np.linspace(0.0, horizon, n)), dtype=float)
        return float(v.min()), float(v.max())

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"


def _zero() -> Coefficient:
    return Coefficient.constant(0.0)


def _one() -> Coefficient:
    return Coefficient.constant(1.0)


@dataclass(frozen=True)
class CoefficientSet:
    """The deterministic data b, sigma, alpha, beta, gamma and eta_0."""

    b: Coefficient = field(default_factory=_zero)
    sigma: Coefficient = field(default_factory=_one)
    alpha: Coefficient = field(default_factory=_zero)
    beta: Coefficient = field(default_factory=_zero)
    gamma: Coefficient = field(default_factory=_zero)
    eta0: float = 0.0

    def __post_init__(self):
        for name in ("b", "sigma", "alpha", "beta", "gamma"):
            object.__setattr__(self, name, Coefficient.coerce(getattr(self, name)))
        object.__setattr__(self, "eta0", float(self.eta0))

    def validate(self, horizon: float, grid: TimeGrid | None = None, n_probe: int = 2001) -> None:
        """Check sigma(t) != 0 at every grid time and boundedness on [0, T]."""
        probe = np.linspace(0.0, horizon, n_probe)
        if grid is not None:
            probe = np.union1d(probe, grid.points)
        s = np.asarray(self.sigma(probe), dtype=float)
        if np.any(s == 0.0) or np.any(np.sign(s) != np.sign(s[0])):
            bad = probe[np.argmax((s == 0.0) | (np.sign(s) != np.sign(s[0])))]
            raise CoefficientError(f"invariant σ(t) ≠ 0 (sigma(t) != 0) violated near t={bad:.6g}")
        for name in ("b", "sigma", "alpha", "beta", "gamma"):
            v = np.asarray(getattr(self, name)(probe), dtype=float)
            if not np.all(np.isfinite(v)):
                raise CoefficientError(f"coefficient {name} is not bounded on [0, {horizon}]")

    def drift_integral(self, a, b):
        return self.b.integral(a, b)

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientSet":
        kw = {k: Coefficient.coerce(v) for k, v in d.items() if k in ("b", "sigma", "alpha", "beta", "gamma")}
        return cls(eta0=float(d.get("eta0", 0.0)), **kw)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).to_dict() for k in ("b", "sigma", "alpha", "beta", "gamma")}
        out["eta0"] = self.eta0
        return out
