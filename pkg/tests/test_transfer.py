import dataclasses

import numpy as np
import pytest

from fbsdelab.coefficients import Coefficient, CoefficientSet
from fbsdelab.density import kde, kernel_smoothed, verify_envelope
from fbsdelab.fbm import sample_paths
from fbsdelab.coefficients import TimeGrid
from fbsdelab.heat import LinearFbsdeSpec, identity_map, linear_solve, semigroup_apply, signed_square_map, softplus_map
from fbsdelab.pde import affine_y_generator, constant_generator, generator_from_dict, softz_generator, \
    tanh_generator, zero_generator
from fbsdelab.transfer import (GaussianDriverSpec, H3Violation, RepresentationResult, check_h3, clock_envelope,
                               euler_bsde_reference, general_envelope, inverse_variance, pushforward_density,
                               representation_check, solve_transferred)

H = 0.75
SOFTPLUS = softplus_map(0.5, 2.0, 0.5)


@pytest.fixture(scope="module")
def zero_fbm():
    return solve_transferred(GaussianDriverSpec.fbm(H), zero_generator(), SOFTPLUS)


# ------------------------------------------------------------------ clocks

def test_brownian_inverse_is_identity():
    d = GaussianDriverSpec.brownian()
    s = np.linspace(0, 1, 11)
    assert np.array_equal(inverse_variance(d, s), s)


def test_fbm_inverse_examples():
    d = GaussianDriverSpec.fbm(H)
    assert inverse_variance(d, 1.0) == 1.0
    assert inverse_variance(d, 0.25) == pytest.approx(0.25 ** (2 / 3), rel=1e-15)


def test_tabulated_clock_round_trip():
    d = GaussianDriverSpec.wiener_integral(Coefficient.polynomial([1.0, 0.5]), H)
    t = np.linspace(0, 1, 1000)
    assert np.max(np.abs(inverse_variance(d, d(t)) - t)) <= 1e-8
    s = np.linspace(0, d.VT, 1000)
    assert np.max(np.abs(d(inverse_variance(d, s)) - s)) <= 1e-8


def test_bisection_matches_closed_form():
    # the same clock without its closed-form inverse goes through bisection
    exact = GaussianDriverSpec.power(2.0, 1.2)
    bare = GaussianDriverSpec(exact.V, 1.0)
    s = np.linspace(0, exact.VT, 257)
    assert np.max(np.abs(inverse_variance(bare, s) - inverse_variance(exact, s))) < 1e-12


def test_clock_errors():
    d = GaussianDriverSpec.fbm(H)
    with pytest.raises(ValueError):
        inverse_variance(d, 1.5)
    with pytest.raises(ValueError):
        inverse_variance(d, -0.1)
    with pytest.raises(ValueError):
        GaussianDriverSpec(lambda t: 1.0 + np.asarray(t))
    with pytest.raises(ValueError):
        GaussianDriverSpec(lambda t: np.sin(4 * np.asarray(t)))
    with pytest.raises(ValueError):
        GaussianDriverSpec.table([0.0, 0.5, 0.4], [0.0, 0.2, 0.3])


# ------------------------------------------------------------------ transferred PDE

def test_zero_generator_is_heat_flow(zero_fbm):
    sol = zero_fbm
    x = np.linspace(-3, 3, 61)
    for s in (0.0, 0.3, 0.7):
        exact = semigroup_apply(sol.driver.VT - s, SOFTPLUS.h, x)
        assert np.max(np.abs(sol.slice(s).value(x) - exact)) < 5e-4


def test_transfer_matches_linear_route(zero_fbm):
    # same iota_t = t^(2H): the transferred solution and the linear closed form agree on every path
    lin = LinearFbsdeSpec(CoefficientSet(), SOFTPLUS, H)
    X = np.random.default_rng(3).standard_normal(2000) * 0.5 ** H
    y1, z1 = zero_fbm.solution_at(0.5, X)
    y2, z2 = linear_solve(lin, 0.5, X)
    assert np.max(np.abs(y1 - y2)) < 1e-3
    assert np.max(np.abs(np.abs(z1) - np.abs(z2))) < 1e-3


def test_transfer_law_against_pushforward(zero_fbm):
    t = 0.5
    ens = sample_paths(H, TimeGrid(np.array([0.25, t])), n=100_000, seed=17)
    y, _ = zero_fbm.solution_at(t, ens.column(t))
    emp = kde(y)
    ref = kernel_smoothed(zero_fbm.marginal(t), emp.grid, emp.bandwidth)
    central = ref > 1e-3 * ref.max()
    assert np.max(np.abs(emp.values - ref)[central] / emp.local_se[central]) < 3
    # and the smoothed curve is close to the exact pushforward density in the bulk
    mg = zero_fbm.marginal(t)
    lo, hi = mg.sl.range
    q = np.linspace(np.quantile(y, 0.05), np.quantile(y, 0.95), 21)
    assert np.all((q > lo) & (q < hi))
    dens = pushforward_density(zero_fbm, t, q)
    assert np.max(np.abs(np.interp(q, emp.grid, ref) - dens)) < 0.02 * dens.max()


def test_brownian_reduction_euler():
    f = tanh_generator(0.3)
    sol = solve_transferred(GaussianDriverSpec.brownian(), f, SOFTPLUS)
    y0, se = euler_bsde_reference(f, SOFTPLUS, n_paths=100_000, seed=18)
    assert abs(float(sol.slice(0.0).value(0.0)) - y0) <= 1e-3
    assert se < 1e-3


def test_h3_probe():
    with pytest.raises(H3Violation):
        solve_transferred(GaussianDriverSpec.brownian(), zero_generator(), signed_square_map(0.1))
    neg = generator_from_dict({"name": "linear", "alpha": 0.0, "beta": -0.5, "gamma": 0.0})
    with pytest.raises(H3Violation):
        check_h3(neg, SOFTPLUS, 3.0, 1.0)
    info = check_h3(tanh_generator(0.3), SOFTPLUS, 3.0, 1.0)
    assert info["inf_h2"] > 0


# ------------------------------------------------------------------ envelopes

def test_same_clock_same_envelope():
    f = tanh_generator(0.3)
    a = solve_transferred(GaussianDriverSpec.fbm(H), f, SOFTPLUS, nx=201, ns=200)
    b = solve_transferred(GaussianDriverSpec.power(1.0, 2 * H), f, SOFTPLUS, nx=201, ns=200)
    ea, eb = general_envelope(a, 0.5), general_envelope(b, 0.5)
    x = np.linspace(ea.m - 2, ea.m + 2, 41)
    for ca, cb in zip(ea.curves(x), eb.curves(x)):
        assert np.allclose(ca, cb, rtol=1e-12, atol=0)


def test_identity_terminal_envelope_sandwiches_normal():
    sol = solve_transferred(GaussianDriverSpec.fbm(H), zero_generator(), identity_map(), nx=201, ns=100,
                            check=False)
    t = 0.5
    V = 0.5 ** (2 * H)
    env = general_envelope(sol, t)
    x = np.linspace(-3, 3, 61) * np.sqrt(V)
    normal = np.exp(-x ** 2 / (2 * V)) / np.sqrt(2 * np.pi * V)
    lo, up = env.curves(x)
    assert np.all(lo <= normal * (1 + 1e-6)) and np.all(normal <= up * (1 + 1e-6))
    assert env.params["c1"] == pytest.approx(2.0, rel=1e-6) and env.params["c2"] == pytest.approx(2.0, rel=1e-6)
    X = np.random.default_rng(5).standard_normal(100_000) * np.sqrt(V)
    emp = kde(sol.solution_at(t, X)[0])
    assert verify_envelope(emp, env, (-2.5 * np.sqrt(V), 2.5 * np.sqrt(V))).pass_fraction == 1.0


def test_z_envelope_needs_z_linear_generator(zero_fbm):
    with pytest.raises(ValueError):
        general_envelope(zero_fbm, 0.5, "z", generator=softz_generator(0.2, 0.3))
    env = general_envelope(zero_fbm, 0.5, "z", generator=zero_generator())
    assert env.params["target"] == "z"


@pytest.mark.parametrize("k", [2.0, 0.5])
def test_clock_envelope_scale_covariance(k):
    m, mu, c1, c2, V = 0.3, 0.4, 0.8, 2.5, 0.6
    base = clock_envelope(m, mu, c1, c2, V)
    scaled = clock_envelope(m, k * mu, c1, c2, k * k * V)
    x = np.linspace(-3, 3, 41)
    for cb, cs in zip(base.curves(m + x), scaled.curves(m + k * x)):
        assert np.allclose(cs, cb / k, rtol=1e-14)


def test_clock_envelope_constants_checked():
    with pytest.raises(ValueError):
        clock_envelope(0.0, 1.0, 2.0, 1.0, 1.0)
    env = clock_envelope(0.0, np.sqrt(2 / np.pi), 2.0, 2.0, 1.0)
    assert env.tail_up(1.0) == pytest.approx(0.15865525393145707, rel=1e-12)


# ------------------------------------------------------------------ representation

def test_representation_constant_generator():
    res = representation_check(constant_generator(0.7), 0.3, [0.0, 1.0], [0.5, -0.2], [0.2, 0.1],
                               GaussianDriverSpec.fbm(H))
    assert np.all(res.errors < 1e-10)
    assert res.monotone


def test_representation_linear_ode_limit():
    y = np.array([0.5, -1.2])
    eps = np.array([0.2, 0.1, 0.05])
    res = representation_check(affine_y_generator(1.0), 0.2, y, 0.0, eps)
    # y^eps = y e^eps, so the error is the rms of y (e^eps - 1 - eps) / eps
    ref = np.sqrt(np.mean(y ** 2)) * (np.expm1(eps) - eps) / eps
    assert np.allclose(res.errors, ref, rtol=1e-3)
    assert res.monotone and res.slope == pytest.approx(1.0, abs=0.05)


def test_representation_tanh_on_fbm():
    eps = np.array([0.2, 0.1, 0.05, 0.025]) * 0.6
    res = representation_check(tanh_generator(0.4, 0.2), 0.4, np.linspace(-1, 1, 5), 0.5, eps,
                               GaussianDriverSpec.fbm(H))
    assert res.monotone and res.reduction > 3 and res.slope >= 0.5


def test_representation_errors():
    with pytest.raises(ValueError):
        representation_check(tanh_generator(0.3), 0.5, 0.0, 0.0, [0.5])
    with pytest.raises(ValueError):
        representation_check(tanh_generator(0.3), 0.5, 0.0, 0.0, [0.1], normalise="bogus")
    xdep = dataclasses.replace(tanh_generator(0.3), uses_x=True)
    with pytest.raises(ValueError):
        representation_check(xdep, 0.5, 0.0, 0.0, [0.1])


def test_representation_subsamples_common_pairs():
    y = np.linspace(-1, 1, 100)
    a = representation_check(tanh_generator(0.3), 0.3, y, 0.2, [0.2, 0.1], n_paths=4, seed=3)
    b = representation_check(tanh_generator(0.3), 0.3, y, 0.2, [0.1], n_paths=4, seed=3)
    assert a.errors[1] == b.errors[0]


def test_monotone_floor():
    assert RepresentationResult(np.array([0.2, 0.1, 0.05]), np.array([1e-3, 5e-4, 2e-4]), "clock").monotone
    assert not RepresentationResult(np.array([0.2, 0.1]), np.array([1e-3, 2e-3]), "clock").monotone
    assert RepresentationResult(np.array([0.2, 0.1]), np.array([0.0, 0.0]), "clock").monotone
