"""Fractional Brownian motion, Wiener integrals of deterministic integrands and
the variance functional iota.

For H > 1/2 the variance of the Wiener integral of sigma over [0, t] is

    iota_t = C_H * int_0^t int_0^t sigma_u sigma_v |u - v|^(2H-2) du dv,
    C_H = H (2H - 1).

Both the endpoint singularity of the kernel and the u^(2H-1) behaviour of
the outer integrand are absorbed into Gauss-Jacobi weights, so that for
smooth sigma the remaining integrand is smooth on [0, 1]^2:

    iota = 2 C_H l^(2H) int_0^1 int_0^1 sigma(s + l y) sigma(s + l x y)
                                     y^(2H-1) (1-x)^(2H-2) dx dy

for the interval [s, s + l].  Node counts are doubled until the estimate is
stable.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cholesky
from scipy.special import roots_jacobi

from . import io as _io
from .coefficients import Coefficient, TimeGrid

KINDS = ("fbm-increments", "wiener-integral-of-sigma")
BLOCK = 8192


class UnsupportedHurstError(ValueError):
    pass


class ConditioningError(RuntimeError):
    pass


class QuadratureWarning(RuntimeWarning):
    pass


def _check_hurst(H: float) -> float:
    H = float(H)
    if not 0.0 < H < 1.0:
        raise ValueError(f"Hurst index must lie in (0, 1), got {H}")
    return H


def _check_long_memory(H: float) -> float:
    H = _check_hurst(H)
    if H <= 0.5:
        raise UnsupportedHurstError("the Wiener-integral inner product needs H > 1/2")
    return H


def c_hurst(H: float) -> float:
    return H * (2.0 * H - 1.0)


def covariance(H: float, s, t):
    """E[B^H_s B^H_t] = (t^2H + s^2H - |t - s|^2H) / 2."""
    H = _check_hurst(H)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise ValueError("times must be nonnegative")
    out = 0.5 * (t ** (2 * H) + s ** (2 * H) - np.abs(t - s) ** (2 * H))
    return float(out) if out.ndim == 0 else out


def covariance_matrix(H: float, times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    return covariance(H, t[:, None], t[None, :])


@lru_cache(maxsize=64)
def _jacobi01(n: int, a: float, b: float):
    """Nodes/weights on [0, 1] for weight (1 - x)^a x^b."""
    x, w = roots_jacobi(n, a, b)
    return 0.5 * (x + 1.0), w / 2.0 ** (a + b + 1.0)


def _coef(sigma) -> Coefficient:
    return Coefficient.constant(1.0) if sigma is None else Coefficient.coerce(sigma)


def _iota_nodes(sig: Coefficient, s, ell, H: float, n: int):
    y, wy = _jacobi01(n, 0.0, 2 * H - 1)
    x, wx = _jacobi01(n, 2 * H - 2, 0.0)
    s = np.asarray(s, dtype=float)[..., None, None]
    ell = np.asarray(ell, dtype=float)[..., None, None]
    yy = y[:, None]
    outer = np.asarray(sig(s + ell * yy), dtype=float)
    inner = np.asarray(sig(s + ell * yy * x[None, :]), dtype=float)
    integ = (outer * inner * wy[:, None] * wx[None, :]).sum(axis=(-1, -2))
    return 2.0 * c_hurst(H) * ell[..., 0, 0] ** (2 * H) * integ


def _adaptive(fn, tol: float, n0: int = 8, nmax: int = 1024, what: str = "quadrature"):
    n = n0
    prev = fn(n)
    while True:
        n *= 2
        cur = fn(n)
        err = float(np.max(np.abs(cur - prev))) if np.size(cur) else 0.0
        if err <= tol:
            return cur, err
        if n >= nmax:
            warnings.warn(f"{what} not converged: achieved error estimate {err:.3e} at {n} nodes",
                          QuadratureWarning, stacklevel=3)
            return cur, err
        prev = cur


def iota_interval(sigma, s, t, H: float, tol: float = 1e-12):
    """Variance of int_s^t sigma dB^H (vectorised over s, t)."""
    H = _check_long_memory(H)
    sig = _coef(sigma)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < s):
        raise ValueError("need s <= t")
    ell = t - s
    if sig.is_constant:
        out = sig.value ** 2 * ell ** (2 * H)
    else:
        out, _ = _adaptive(lambda n: _iota_nodes(sig, s, ell, H, n), tol, what="iota")
    return float(out) if np.ndim(out) == 0 else out


def iota(sigma, t, H: float, tol: float = 1e-12):
    """iota_t = Var(int_0^t sigma dB^H) for H in (1/2, 1)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    return iota_interval(sigma, np.zeros_like(t), t, H, tol)


def iota_derivative(sigma, t, H: float, tol: float = 1e-12):
    """d iota / dt = 2 C_H sigma(t) int_0^t sigma_v (t - v)^(2H-2) dv."""
    H = _check_long_memory(H)
    sig = _coef(sigma)
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("iota_derivative needs t > 0")
    if sig.is_constant:
        out = sig.value ** 2 * 2 * H * t ** (2 * H - 1)
        return float(out) if out.ndim == 0 else out

    def fn(n):
        x, wx = _jacobi01(n, 2 * H - 2, 0.0)
        tt = t[..., None]
        return (np.asarray(sig(tt * x), dtype=float) * wx).sum(axis=-1)

    integ, _ = _adaptive(fn, tol, what="iota_derivative")
    out = 2 * c_hurst(H) * np.asarray(sig(t), dtype=float) * t ** (2 * H - 1) * integ
    return float(out) if np.ndim(out) == 0 else out


def wiener_gram(sigma, times, H: float) -> np.ndarray:
    """Gram matrix of (int_0^{t_i} sigma dB^H)_i via polarisation."""
    t = np.asarray(times, dtype=float)
    var = iota(sigma, t, H)
    lo = np.minimum(t[:, None], t[None, :])
    hi = np.maximum(t[:, None], t[None, :])
    iu = np.triu_indices(t.size, 1)
    cross = np.zeros((t.size, t.size))
    if iu[0].size:
        cross[iu] = iota_interval(sigma, lo[iu], hi[iu], H)
        cross = cross + cross.T
    return 0.5 * (var[:, None] + var[None, :] - cross)


def factorize(gram: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; one jitter retry of 1e-12 * trace / n."""
    try:
        return cholesky(gram, lower=True)
    except LinAlgError:
        n = gram.shape[0]
        jitter = 1e-12 * np.trace(gram) / n
        try:
            return cholesky(gram + jitter * np.eye(n), lower=True)
        except LinAlgError as exc:
            w = np.linalg.eigvalsh(gram)
            raise ConditioningError(
                f"Gram matrix not positive definite after jitter {jitter:.3e}; "
                f"min eigenvalue {w[0]:.3e}, condition ~ {w[-1] / max(abs(w[0]), 1e-300):.3e}") from exc


def stream(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),)))


def standard_normals(n: int, dim: int, seed: int, threads: int = 1) -> np.ndarray:
    """n x dim standard normals drawn in fixed blocks, one stream per block.

    The output does not depend on ``threads``.
    """
    out = np.empty((n, dim))
    starts = list(range(0, n, BLOCK))

    def fill(k):
        a = starts[k]
        b = min(a + BLOCK, n)
        out[a:b] = stream(seed, k).standard_normal((b - a, dim))

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(fill, range(len(starts))))
    else:
        for k in range(len(starts)):
            fill(k)
    return out


@dataclass
class FbmEnsemble:
    hurst: float
    grid: TimeGrid
    paths: np.ndarray
    seed: int
    kind: str = "fbm-increments"
    gram: np.ndarray | None = field(default=None, repr=False)
    sigma: Coefficient | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    def column(self, t: float) -> np.ndarray:
        return self.paths[:, self.grid.index_of(t)]

    def empirical_gram(self) -> np.ndarray:
        # mean is known to be zero
        return self.paths.T @ self.paths / max(self.n, 1)

    def gram_standard_errors(self) -> np.ndarray:
        d = np.diag(self.gram)
        return np.sqrt((d[:, None] * d[None, :] + self.gram ** 2) / max(self.n, 1))

    # serialisation
    def _meta(self) -> dict:
        return {"type": "ensemble", "hurst": self.hurst, "seed": int(self.seed), "n": self.n, "kind": self.kind}

    def to_binary(self, path) -> Path:
        return _io.write_container(path, {"grid": self.grid.points, "paths": self.paths}, self._meta())

    @classmethod
    def from_binary(cls, path) -> "FbmEnsemble":
        meta, arr = _io.read_container(path)
        if meta.get("type") != "ensemble":
            raise _io.ContainerError("container does not hold an ensemble")
        return cls(meta["hurst"], TimeGrid(arr["grid"]), arr["paths"].reshape(int(meta["n"]), -1),
                   int(meta["seed"]), meta["kind"])

    def to_csv(self, path) -> Path:
        m = self._meta()
        comments = [f"{k}={m[k]}" for k in ("hurst", "seed", "n", "kind")]
        header = ["path"] + [_io.fmt(t) for t in self.grid.points]
        rows = ([str(i)] + list(row) for i, row in enumerate(self.paths))
        return _io.write_csv(path, header, rows, comments)

    @classmethod
    def from_csv(cls, path) -> "FbmEnsemble":
        comments, header, rows = _io.read_csv(path)
        meta = dict(c.split("=", 1) for c in comments)
        grid = TimeGrid(np.array([float(h) for h in header[1:]]))
        paths = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), len(grid))
        return cls(float(meta["hurst"]), grid, paths, int(meta["seed"]), meta["kind"])


def sample_paths(H: float, grid: TimeGrid, sigma=None, n: int = 1000, seed: int = 0,
                 kind: str | None = None, threads: int = 1) -> FbmEnsemble:
    """Exact Gaussian sampling of B^H (or of int_0^t sigma dB^H) on ``grid``.

    ``sigma=None`` gives plain fBM; a coefficient selects the Wiener integral,
    which requires H > 1/2.
    """
    H = _check_hurst(H)
    if kind is None:
        kind = KINDS[0] if sigma is None else KINDS[1]
    if kind not in KINDS:
        raise ValueError(f"unknown ensemble kind {kind!r}")
    if n < 0:
        raise ValueError("path count must be nonnegative")
    t = grid.points
    if kind == KINDS[0]:
        gram = covariance_matrix(H, t)
        sig = None
    else:
        _check_long_memory(H)
        sig = _coef(sigma)
        gram = wiener_gram(sig, t, H)
    live = t > 0
    paths = np.zeros((n, t.size))
    if n and live.any():
        L = factorize(gram[np.ix_(live, live)])
        z = standard_normals(n, int(live.sum()), seed, threads)
        paths[:, live] = z @ L.T
    return FbmEnsemble(H, grid, paths, int(seed), kind, gram, sig)
