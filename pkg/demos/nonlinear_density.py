"""
Density envelope of a nonlinear fBSDE
=====================================

With a nonlinear generator there is no closed form.  We solve the mixed
PDE on a grid, read y_t = u(t, eta_t), fit growth constants of u on the
grid and compare the resulting non-Gaussian envelope with Monte Carlo.
"""

import warnings

import numpy as np

from fbsdelab import (Coefficient, CoefficientSet, NonlinearFbsdeSpec, TimeGrid, bsde_marginals, calibrate,
                      g_explicit, growth_indices, kde, marginal_y, nongaussian_density_envelope, sample_paths,
                      signed_square_map, sine_generator, solve_mixed_pde, verify_envelope)

H, t = 0.75, 0.5
cs = CoefficientSet(b=Coefficient.constant(0.2), sigma=Coefficient.polynomial([1.0, 0.5]), eta0=0.1)
spec = NonlinearFbsdeSpec(cs, sine_generator(0.3, 0.2), signed_square_map(0.1), H)

# %%
# Crank-Nicolson in time with a Picard loop for the nonlinearity.
sol = solve_mixed_pde(spec, 400, 400)
print("Picard iterations (max):", sol.meta["max_fixed_point_iterations"])
print("min u_x:", sol.u_x[:, 1:-1].min())

# %%
# Growth of u, u_x and the inverse of u in the far field.
print(growth_indices(sol, t))

# %%
# The law of y_t is the image of a Gaussian under u(t, .).  Its g-function
# has an explicit double-integral form; the calibrated constants bound it.
mg = marginal_y(sol, spec, t)
m, mu = mg.moments()
idx = calibrate(mg.sl, mg.center, mg.var)
print(idx.label, idx.to_dict())
ys = np.linspace(-1.0, 1.0, 5)
lo, hi = idx.g_bounds(ys, m, mg.var)
for yv, a, g, b in zip(ys, lo, g_explicit(mg, ys, m), hi):
    print(f"y={yv:+.2f}:  {a:.4f} <= g={g:.4f} <= {b:.4f}")

# %%
# Monte Carlo check of the envelope.
ens = sample_paths(H, TimeGrid(np.array([0.25, t])), cs.sigma, 100_000, seed=11)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    y, _ = bsde_marginals(sol, spec, t, ens)
emp = kde(y)
env = nongaussian_density_envelope(idx, m, mu, mg.var)
sd = y.std()
rep = verify_envelope(emp, env, (emp.mean - 2.5 * sd, emp.mean + 2.5 * sd))
print("pass fraction on +-2.5 sd:", rep.pass_fraction)
