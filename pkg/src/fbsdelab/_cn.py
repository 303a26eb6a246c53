"""Backward Crank-Nicolson march shared by the mixed-type PDE and the
time-changed (auxiliary Brownian) PDE.

Each step n -> n+1 of the grid carries its own variance increment V_n,
drift increment B_n and generator weight W_n, so the scheme integrates

    u(t_n) - u(t_{n+1}) = (V_n / 2) u_xx + B_n u_x + W_n f(t, x, u, s_n u_x)

with the diffusion and drift taken at theta = 1/2 and f iterated to a fixed
point within the step.  Using exact variance increments keeps the scheme
consistent when the diffusion coefficient degenerates at t = 0.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.linalg import solve_banded


class PdeConvergenceError(RuntimeError):
    def __init__(self, step: int, residual: float):
        super().__init__(f"fixed-point iteration on the generator did not converge at step {step} "
                         f"(residual {residual:.3e})")
        self.step = step
        self.residual = residual


def d1(u: np.ndarray, dx: float) -> np.ndarray:
    """Fourth-order first derivative along the last axis, one-sided at the ends."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    out[..., 2:-2] = (-u[..., 4:] + 8 * u[..., 3:-1] - 8 * u[..., 1:-3] + u[..., :-4]) / (12 * dx)
    out[..., 0] = (-25 * u[..., 0] + 48 * u[..., 1] - 36 * u[..., 2] + 16 * u[..., 3] - 3 * u[..., 4]) / (12 * dx)
    out[..., 1] = (-3 * u[..., 0] - 10 * u[..., 1] + 18 * u[..., 2] - 6 * u[..., 3] + u[..., 4]) / (12 * dx)
    out[..., -1] = (25 * u[..., -1] - 48 * u[..., -2] + 36 * u[..., -3] - 16 * u[..., -4] + 3 * u[..., -5]) / (12 * dx)
    out[..., -2] = (3 * u[..., -1] + 10 * u[..., -2] - 18 * u[..., -3] + 6 * u[..., -4] - u[..., -5]) / (12 * dx)
    return out


def d2(u: np.ndarray, dx: float) -> np.ndarray:
    """Fourth-order second derivative along the last axis, one-sided at the ends."""
    u = np.asarray(u, dtype=float)
    h2 = 12 * dx * dx
    out = np.empty_like(u)
    out[..., 2:-2] = (-u[..., 4:] + 16 * u[..., 3:-1] - 30 * u[..., 2:-2] + 16 * u[..., 1:-3] - u[..., :-4]) / h2
    c0 = (45, -154, 214, -156, 61, -10)
    c1 = (10, -15, -4, 14, -6, 1)
    out[..., 0] = sum(c * u[..., k] for k, c in enumerate(c0)) / h2
    out[..., 1] = sum(c * u[..., k] for k, c in enumerate(c1)) / h2
    out[..., -1] = sum(c * u[..., -1 - k] for k, c in enumerate(c0)) / h2
    out[..., -2] = sum(c * u[..., -1 - k] for k, c in enumerate(c1)) / h2
    return out


def _operator(V: float, B: float, dx: float, upwind: bool):
    """Tridiagonal coefficients (lo, di, up) of V/2 d_xx + B d_x."""
    lo = V / (2 * dx * dx)
    up = lo
    di = -2 * lo
    if not upwind:
        lo -= B / (2 * dx)
        up += B / (2 * dx)
    elif B > 0:
        di -= B / dx
        up += B / dx
    else:
        lo += B / dx
        di -= B / dx
    return lo, di, up


def march(x: np.ndarray, labels: np.ndarray, V: np.ndarray, B: np.ndarray, W: np.ndarray,
          scale: np.ndarray, terminal: np.ndarray, f: Callable | None,
          tol: float = 1e-9, max_iter: int = 20):
    """Return (u, info) with u[k] the solution at labels[k]; u[-1] = terminal.

    ``f(label, x, u, z)`` is the generator, evaluated with z = scale[k] * u_x.
    """
    nt = labels.size - 1
    m = x.size
    dx = float(x[1] - x[0])
    u = np.empty((nt + 1, m))
    u[-1] = terminal
    upwinded = 0
    iterations = np.zeros(nt, dtype=int)
    residuals = np.zeros(nt)

    def gen(k, v):
        return np.asarray(f(labels[k], x, v, scale[k] * d1(v, dx)), dtype=float)

    f_next = gen(nt, u[-1]) if f is not None else None
    for n in range(nt - 1, -1, -1):
        Vn, Bn, Wn = float(V[n]), float(B[n]), float(W[n])
        up_flag = Vn <= 0 or abs(Bn) * dx > Vn  # cell Peclet |B| dx / (V/2) > 2
        upwinded += up_flag
        lo, di, up = _operator(Vn, Bn, dx, up_flag)
        un = u[n + 1]
        explicit = un[1:-1] + 0.5 * (lo * un[:-2] + di * un[1:-1] + up * un[2:])
        a_lo, a_di, a_up = -0.5 * lo, 1.0 - 0.5 * di, -0.5 * up
        k = m - 2
        ab = np.zeros((3, k))
        ab[0, 1:] = a_up
        ab[1, :] = a_di
        ab[2, :-1] = a_lo
        # u_0 = 2 u_1 - u_2 and u_{m-1} = 2 u_{m-2} - u_{m-3}
        ab[1, 0] += 2 * a_lo
        ab[0, 1] -= a_lo
        ab[1, -1] += 2 * a_up
        ab[2, -2] -= a_up

        def solve(rhs):
            v = np.empty(m)
            v[1:-1] = solve_banded((1, 1), ab, rhs)
            v[0] = 2 * v[1] - v[2]
            v[-1] = 2 * v[-2] - v[-3]
            return v

        if f is None:
            u[n] = solve(explicit)
            continue
        guess = un.copy()
        base = explicit + 0.5 * Wn * f_next[1:-1]
        res = np.inf
        for it in range(1, max_iter + 1):
            f_cur = gen(n, guess)
            new = solve(base + 0.5 * Wn * f_cur[1:-1])
            res = float(np.max(np.abs(new - guess)))
            guess = new
            if res <= tol * max(1.0, float(np.max(np.abs(new)))):
                break
        else:
            raise PdeConvergenceError(n, res)
        iterations[n] = it
        residuals[n] = res
        u[n] = guess
        f_next = gen(n, guess)
    info = {"upwind_steps": int(upwinded), "max_fixed_point_iterations": int(iterations.max(initial=0)),
            "max_step_residual": float(residuals.max(initial=0.0))}
    return u, info
