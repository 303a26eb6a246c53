"""fbsdelab: densities of BSDEs driven by fractional Brownian motion and other Gaussian processes.

Modules
-------
fbm        exact fBM / Wiener-integral sampling and the variance functional iota
heat       heat semigroup, terminal maps and the closed-form linear equation
pde        Crank-Nicolson solver for the mixed-type semilinear PDE
density    Nourdin-Viens density envelopes, the g functional, KDE verification
transfer   time change of a general Gaussian driver to a Brownian problem
lab        experiment configs, orchestration and run reports (CLI: ``fbsdelab``)
"""

from .coefficients import Coefficient, CoefficientError, CoefficientSet, TimeGrid
from .density import (DensityEnvelope, DensityUndefinedError, EmpiricalDensity, GrowthIndices, Marginal,
                      VerificationReport, calibrate, chi, corollary_tails, emit_density_table, find_z0, g_explicit,
                      g_nested_mc, g_y_explicit, g_z_explicit, gaussian_envelope, kde, marginal_y, marginal_z,
                      kernel_smoothed, nongaussian_density_envelope, nongaussian_envelope, nv_density,
                      read_density_table,
                      tail_bound, verify_envelope)
from .fbm import (ConditioningError, FbmEnsemble, QuadratureWarning, UnsupportedHurstError, c_hurst, covariance,
                  covariance_matrix, factorize, iota, iota_derivative, iota_interval, sample_paths,
                  standard_normals, stream, wiener_gram)
from .heat import (H2Violation, LinearFbsdeSpec, TerminalMap, affine_map, cubic_map, heat_kernel, identity_map,
                   linear_solve, quasi_conditional_expectation, semigroup_apply, signed_square_map, softplus_map,
                   terminal_from_dict, zero_map)
from .pde import *  # noqa: F401,F403
from .transfer import (GaussianDriverSpec, H3Violation, RepresentationResult, TransferSolution, check_h3,
                       clock_envelope, euler_bsde_reference, general_envelope, inverse_variance,
                       pushforward_density, representation_check, solve_transferred)
from .lab import ConfigError, ExperimentConfig, RunReport, run

__version__ = "0.1.0"
