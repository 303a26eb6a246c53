import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.integrate import quad

from fbsdelab.checks import chi_grid, chi_quadrature, convex_linear_spec, standard_coefficients, wiener_samples
from fbsdelab.coefficients import Coefficient, CoefficientSet
from fbsdelab.density import (DensityEnvelope, DensityUndefinedError, GrowthIndices, chi, corollary_tails,
                              corollary_upper, emit_density_table, find_z0, g_explicit, g_y_explicit,
                              gaussian_envelope, kde, kernel_smoothed, linear_moments, marginal_y,
                              nongaussian_density_envelope, nongaussian_envelope, nv_density,
                              read_density_table, tail_bound, verify_envelope)
from fbsdelab.heat import LinearFbsdeSpec, identity_map, linear_solve
from fbsdelab.pde import NonlinearFbsdeSpec, solve_mixed_pde, zero_generator

H = 0.75


def gaussian_sandwich_spec(b=0.0, eta0=0.0):
    cs = CoefficientSet(b=Coefficient.constant(b), sigma=Coefficient.polynomial([1.0, 0.5]), eta0=eta0)
    return LinearFbsdeSpec(cs, identity_map(), H, check_h2=False, bounds={"c": 1.0, "C": 1.0, "c2": 1.0, "C2": 1.0})


def indices(eps_bar=0.5, delta_bar=0.5, lam=0.5, C_ed=1.5, C_tilde=0.4):
    return GrowthIndices(eps_bar, delta_bar, lam, 1.0, C_ed, C_tilde)


# ------------------------------------------------------------------ nv_density

@pytest.mark.parametrize("v", [0.3, 1.0, 2.5])
def test_nv_constant_g_is_gaussian(v):
    mu = np.sqrt(2 * v / np.pi)
    x = np.linspace(-4, 4, 33) * np.sqrt(v)
    got = nv_density(lambda u: v, 0.0, mu, x)
    assert np.max(np.abs(got - stats.norm.pdf(x, scale=np.sqrt(v)))) < 1e-12


def test_nv_constant_g_integrates_to_one():
    v = 0.7
    mu = np.sqrt(2 * v / np.pi)
    sd = np.sqrt(v)
    total = quad(lambda x: nv_density(lambda u: v, 0.0, mu, x), -10 * sd, 10 * sd, epsabs=1e-12, limit=200)[0]
    assert abs(total - 1) < 1e-8


def test_nv_at_center():
    g = lambda u: 2.0 + np.sin(u)
    assert nv_density(g, 0.3, 0.8, 0.3) == pytest.approx(0.8 / (2 * g(0.0)), rel=1e-15)


def test_nv_golden(golden):
    ref = float(golden["nv_density_g1pu2_x1"]["value"])
    assert nv_density(lambda u: 1 + u * u, 0.0, 1.0, 1.0) == pytest.approx(ref, rel=1e-10)


def test_nv_rejects_nonpositive_g():
    with pytest.raises(DensityUndefinedError):
        nv_density(lambda u: u - 1.0, 0.0, 1.0, 0.5)
    with pytest.raises(DensityUndefinedError):
        nv_density(lambda u: 1.0 - u, 0.0, 1.0, 2.0)


# ------------------------------------------------------------------ Gaussian envelopes

def test_gaussian_sandwich_closes():
    spec = gaussian_sandwich_spec(b=0.2, eta0=0.1)
    t = 0.6
    io = float(spec.iota(t))
    m = float(spec.argument(t, 0.0))
    env = gaussian_envelope(spec, t, "y", mu=np.sqrt(2 * io / np.pi), m=m)
    x = m + np.linspace(-5, 5, 201) * np.sqrt(io)
    lo, up = env.curves(x)
    ref = stats.norm.pdf(x, m, np.sqrt(io))
    assert np.max(np.abs(lo - ref)) < 1e-14 and np.max(np.abs(up - ref)) < 1e-14


def test_constant_beta_thetas_coincide():
    cs = standard_coefficients(beta=Coefficient.constant(0.4))
    spec = LinearFbsdeSpec(cs, identity_map(), H, check_h2=False, bounds={"c": 1.0, "C": 1.0, "c2": 1.0, "C2": 1.0})
    env = gaussian_envelope(spec, 0.5, "y")
    th = float(spec.iota(0.5)) * np.exp(2 * 0.4 * 0.5)
    assert env.params["theta1"] == pytest.approx(th, rel=1e-14)
    assert env.params["theta2"] == pytest.approx(th, rel=1e-14)


def test_gaussian_envelope_rejects_t0():
    with pytest.raises(ValueError):
        gaussian_envelope(gaussian_sandwich_spec(), 0.0)


def test_convex_envelope_contains_kde():
    spec = convex_linear_spec()
    t = 0.5
    y, z = linear_solve(spec, t, wiener_samples(spec, t, 100_000, 3))
    for target, F in (("y", y), ("z", z)):
        emp = kde(F)
        env = gaussian_envelope(spec, t, target)
        sd = F.std()
        rep = verify_envelope(emp, env, (emp.mean - 3 * sd, emp.mean + 3 * sd), 3.0)
        assert rep.pass_fraction == 1.0, (target, rep.violations()[:3])


def test_linear_moments_match_samples():
    spec = convex_linear_spec()
    y, _ = linear_solve(spec, 0.5, wiener_samples(spec, 0.5, 200_000, 4))
    m, mu = linear_moments(spec, 0.5)
    assert abs(y.mean() - m) < 4 * y.std() / np.sqrt(y.size)
    assert abs(np.mean(np.abs(y - y.mean())) - mu) < 4 * y.std() / np.sqrt(y.size)


def test_envelope_symmetry():
    spec = gaussian_sandwich_spec()
    env = gaussian_envelope(spec, 0.5)
    x = np.linspace(0, 3, 31)
    lo1, up1 = env.curves(env.m + x)
    lo2, up2 = env.curves(env.m - x)
    assert np.allclose(lo1, lo2, rtol=1e-14, atol=0) and np.allclose(up1, up2, rtol=1e-14, atol=0)
    # the non-Gaussian curves are even in x when m = 0
    lo_a, up_a = nongaussian_envelope(indices(), 0.0, 0.5, 0.6, x)
    lo_b, up_b = nongaussian_envelope(indices(), 0.0, 0.5, 0.6, -x)
    assert np.allclose(lo_a, lo_b, rtol=1e-12) and np.allclose(up_a, up_b, rtol=1e-9)


# ------------------------------------------------------------------ chi

def test_chi_examples():
    assert chi(0.7, 0.7, 0.4, 0.9) == 0.0
    z, m = np.linspace(-2, 3, 11), 0.4
    assert np.allclose(chi(z, m, 1e-12, 1e-3), (z - m) ** 2, atol=1e-12)
    ref = quad(lambda u: u * (1 + abs(u + 0.2) ** 0.6), 0, 1.3, epsabs=1e-14, epsrel=1e-14)[0]
    assert chi(1.5, 0.2, 0.3, 1.0) == pytest.approx(ref, abs=1e-8)


def test_chi_grid_against_quadrature():
    pts = list(chi_grid())
    assert len(pts) == 225
    for z, m, lam, db in pts:
        ref = chi_quadrature(z, m, lam, db)
        assert abs(chi(z, m, lam, db) - ref) <= 1e-8 * max(1.0, abs(ref))


@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(0.05, 1.5), st.floats(0.05, 1.5))
def test_chi_matches_integral(z, m, lam, db):
    ref = chi_quadrature(z, m, lam, db)
    assert abs(chi(z, m, lam, db) - ref) <= 1e-8 * max(1.0, abs(ref))


# ------------------------------------------------------------------ non-Gaussian envelope

def test_nongaussian_at_center():
    idx = indices()
    m, mu, io = 0.3, 0.5, 0.6
    lo, up = nongaussian_envelope(idx, m, mu, io, m)
    a = idx.a
    s = abs(m) ** a
    assert lo == pytest.approx(mu / (2 * idx.C_ed * io * (1 + s) * (1 + s + io ** (idx.eps_bar / 2))), rel=1e-13)
    assert up == pytest.approx(mu * (1 + abs(m) ** (2 * idx.lam * idx.delta_bar)) / (2 * idx.C_tilde * io),
                               rel=1e-13)


@given(st.floats(0.1, 1.5), st.floats(0.1, 1.5), st.floats(0.1, 1.5), st.floats(-1, 1),
       st.floats(0.1, 2.0), st.lists(st.floats(-6, 6), min_size=1, max_size=8))
def test_nongaussian_lower_below_upper(eb, db, lam, m, io, xs):
    # C_ed >= C_tilde keeps the pair consistent, as calibration always produces
    idx = indices(eb, db, lam, C_ed=2.0, C_tilde=0.5)
    lo, up = nongaussian_envelope(idx, m, 0.5, io, np.array(xs))
    assert np.all(lo <= up * (1 + 1e-12))


def test_nongaussian_inconsistent_constants_flagged():
    with pytest.raises(ValueError):
        nongaussian_envelope(indices(C_ed=0.01, C_tilde=100.0), 0.0, 0.5, 1.0, 0.0)
    with pytest.raises(ValueError):
        GrowthIndices(0.0, 0.5, 0.5, 1.0, 1.0, 1.0)


def test_nongaussian_tails_from_mean():
    m = 0.8
    env = nongaussian_density_envelope(indices(), m, 0.5, 0.6)
    up = lambda s: float(env.upper(s))
    assert env.tail_up(6.0) == pytest.approx(quad(up, m + 6.0, np.inf, limit=200)[0], rel=1e-8)
    assert env.tail_down(6.0) == pytest.approx(quad(up, -np.inf, m - 6.0, limit=200)[0], rel=1e-8)
    assert 0 < env.tail_up(8.0) < env.tail_up(6.0) < 1.0
    env0 = nongaussian_density_envelope(indices(), 0.0, 0.5, 0.6)
    assert env0.tail_up(6.0) == pytest.approx(env0.tail_down(6.0), rel=1e-8)


# ------------------------------------------------------------------ corollary and z0

def _holds(idx, m, io, u):
    s = np.abs(u + m) ** idx.a
    return 2 * np.abs(u) ** (2 * idx.a) >= (1 + s) * (1 + s + io ** (idx.eps_bar / 2))


def test_find_z0_scan_and_minimality():
    idx = indices(0.5, 0.5)
    m, io = 0.0, 0.01
    z0 = find_z0(idx, m, io)
    above = z0 * np.geomspace(1, 1e6, 1000)
    assert np.all(_holds(idx, m, io, above - m)) and np.all(_holds(idx, m, io, -above - m))
    below = np.linspace(0.99 * z0, z0, 200, endpoint=False)
    assert not np.all(_holds(idx, m, io, below - m) & _holds(idx, m, io, -below - m))
    assert z0 > abs(m)


def test_find_z0_symmetric_tails():
    idx = indices(0.5, 0.5)
    z0 = find_z0(idx, 0.0, 0.01)
    grid = z0 * 1.005 ** np.arange(-3, 300)
    assert np.array_equal(_holds(idx, 0.0, 0.01, grid), _holds(idx, 0.0, 0.01, -grid))


def test_find_z0_requires_small_product():
    with pytest.raises(ValueError):
        find_z0(indices(1.2, 1.0), 0.0, 0.1)


def test_corollary_upper_shape():
    idx = indices(0.5, 0.5)
    m, mu, io = 0.1, 0.5, 0.3
    z0 = find_z0(idx, m, io)
    with pytest.raises(ValueError):
        corollary_upper(idx, m, mu, io, z0, z0 * 0.5)
    start = max(z0, abs(m)) + 1
    x = np.linspace(start, start + 20, 50)
    vals = corollary_upper(idx, m, mu, io, z0, x)
    assert np.all(np.diff(vals) < 0)
    vals = corollary_upper(idx, m, mu, io, z0, -x)
    assert np.all(np.diff(vals) < 0)


def test_corollary_gaussian_limit():
    idx = GrowthIndices(1e-9, 1e-9, 1e-9, 1.0, 1.3, 0.7)
    m, mu, io, z0 = 0.2, 0.5, 0.4, 1.0
    x = np.array([1.5, 2.0, 3.0])
    expo = ((x - m) ** 2 - (z0 - m) ** 2) / (4 * idx.C_ed * io)
    ref = mu / (2 * idx.C_tilde * io) * 2 * np.exp(-expo)
    assert np.allclose(corollary_upper(idx, m, mu, io, z0, x), ref, rtol=1e-6)


# ------------------------------------------------------------------ tails

def test_tail_bound_examples():
    v = 0.8
    x = np.array([0.5, 1.0, 2.0])
    up, down = tail_bound(0.0, v, x)
    assert np.allclose(up, np.exp(-x ** 2 / (2 * v)), rtol=1e-15) and np.allclose(up, down, rtol=1e-15)
    with pytest.raises(ValueError):
        tail_bound(0.0, v, 0.0)
    with pytest.raises(ValueError):
        tail_bound(-1.0, v, 1.0)


def test_tail_bound_dominates_gaussian():
    v = 1.7
    x = np.linspace(0.1, 6, 12) * np.sqrt(v)
    up, _ = tail_bound(0.0, v, x)
    assert np.all(up >= stats.norm.sf(x / np.sqrt(v)))


def test_tail_bound_monte_carlo(rng):
    v = 0.6
    F = rng.standard_normal(1_000_000) * np.sqrt(v)
    for k in (1, 2, 3):
        x = k * np.sqrt(v)
        up, down = tail_bound(0.0, v, x)
        assert np.mean(F >= x) <= up and np.mean(F <= -x) <= down


def test_tail_bound_up_monotone_beyond_ratio():
    a1, a2 = 0.5, 1.5
    x = np.linspace(a2 / a1, 40, 400)
    up, _ = tail_bound(a1, a2, x)
    assert np.all(np.diff(up) <= 0) and np.all((up > 0) & (up <= 1))


def test_corollary_tails_identity():
    spec = gaussian_sandwich_spec()
    x = np.array([0.3, 1.0, 2.0])
    io = float(spec.iota(0.5))
    b = corollary_tails(spec, 0.5, x)
    ref = np.exp(-x ** 2 / (2 * io))
    for k in ("y_up", "y_down"):
        assert np.allclose(b[k], ref, rtol=1e-14)
    assert np.all(np.diff(b["z_up"]) < 0) and np.all(np.diff(b["y_down"]) < 0)


def test_corollary_tails_monte_carlo():
    spec = convex_linear_spec()
    y, z = linear_solve(spec, 0.5, wiener_samples(spec, 0.5, 1_000_000, 9))
    for name, F in (("y", y), ("z", z)):
        d = F - F.mean()
        for k in (1, 2, 3):
            x = k * d.std()
            b = corollary_tails(spec, 0.5, x)
            assert np.mean(d >= x) <= b[f"{name}_up"] and np.mean(d <= -x) <= b[f"{name}_down"]


# ------------------------------------------------------------------ g representation

def test_g_identity_equals_iota():
    cs = CoefficientSet(sigma=Coefficient.polynomial([1.0, 0.5]), eta0=0.1)
    spec = NonlinearFbsdeSpec(cs, zero_generator(), identity_map(), H)
    sol = solve_mixed_pde(spec, 100, 100)
    mg = marginal_y(sol, spec, 0.5)
    m = mg.center
    ys = np.linspace(-1.5, 1.5, 13)
    assert np.max(np.abs(g_y_explicit(sol, spec, 0.5, ys, m) - float(spec.iota(0.5)))) < 1e-8


def test_g_sandwich_on_calibrated_problem(nonlinear_problem):
    spec, sol, mg, m, mu, idx = nonlinear_problem
    sd = mu * np.sqrt(np.pi / 2)
    ys = np.linspace(-3 * sd, 3 * sd, 21)
    g = g_explicit(mg, ys, m)
    lo, hi = idx.g_bounds(ys, m, mg.var)
    assert np.all(lo <= g) and np.all(g <= hi)
    assert idx.label == "probe-calibrated, not proven global"


def test_g_density_identity(nonlinear_problem):
    # the density built from g through the Nourdin-Viens formula equals the change-of-variables density
    spec, sol, mg, m, mu, idx = nonlinear_problem
    sd = mu * np.sqrt(np.pi / 2)
    x = m + np.linspace(-1.5, 1.5, 7) * sd
    got = nv_density(lambda u: g_explicit(mg, u, m), m, mu, x, tol=1e-7)
    assert np.allclose(got, mg.density(x), rtol=2e-4)


# ------------------------------------------------------------------ KDE and verification

def test_kde_normal_sup_error(rng):
    s = rng.standard_normal(100_000) + 3.0
    emp = kde(s)
    assert np.max(np.abs(emp.values - stats.norm.pdf(emp.grid, 3.0))) < 0.02
    assert 0.98 <= emp.normalisation() <= 1.001


def test_kde_ise_slope():
    ns = (2_000, 8_000, 32_000)
    ise = []
    for n in ns:
        vals = []
        for seed in range(6):
            s = np.random.default_rng(100 + seed).standard_normal(n)
            emp = kde(s, grid=np.linspace(-5, 5, 801))
            vals.append(np.trapezoid((emp.values - stats.norm.pdf(emp.grid)) ** 2, emp.grid))
        ise.append(np.mean(vals))
    slope = np.polyfit(np.log(ns), np.log(ise), 1)[0]
    # Silverman bandwidth: ISE ~ n^(-4/5)
    assert -1.1 < slope < -0.55


def test_kde_small_and_degenerate(rng):
    emp = kde(rng.standard_normal(100))
    assert emp.n == 100 and np.all(emp.values >= 0)
    assert 0.98 <= emp.normalisation() <= 1.001
    with pytest.raises(ValueError):
        kde(np.ones(500))
    with pytest.raises(ValueError):
        kde(rng.standard_normal(99))
    fixed = kde(rng.standard_normal(1000), bandwidth=0.3)
    assert fixed.bandwidth == pytest.approx(0.3)


def test_kernel_smoothed_matches_kde(nonlinear_problem):
    spec, sol, mg, m, mu, idx = nonlinear_problem
    y = mg.sample(mg.center + np.sqrt(mg.var) * np.random.default_rng(2).standard_normal(100_000))
    emp = kde(y)
    ref = kernel_smoothed(mg, emp.grid, emp.bandwidth)
    central = ref > 1e-2 * ref.max()
    z = np.abs(emp.values - ref)[central] / emp.local_se[central]
    assert z.max() < 4.5


def _normal_envelope(m, v, factor=1.0):
    pdf = lambda x: stats.norm.pdf(x, m, np.sqrt(v))
    return DensityEnvelope(m, np.sqrt(2 * v / np.pi), pdf, lambda x: factor * pdf(x), "test")


def test_verify_sandwich_passes(rng):
    s = 0.5 + 0.8 * rng.standard_normal(100_000)
    emp = kde(s, grid=np.linspace(-3, 4, 201))
    rep = verify_envelope(emp, _normal_envelope(0.5, 0.64), (-1.5, 2.5), 3.0)
    # the sandwich is tight, so the check only tolerates MC noise plus kernel bias
    assert rep.pass_fraction >= 0.99


def test_verify_halved_upper_localised(rng):
    s = rng.standard_normal(100_000)
    emp = kde(s, grid=np.linspace(-4, 4, 201))
    rep = verify_envelope(emp, _normal_envelope(0.0, 1.0, 0.5), (-2.5, 2.5), 3.0)
    bad = rep.violations()
    assert bad and rep.summary()["violations"] == len(bad)
    # the violation set is centred on the mode and the excess peaks there
    xs = np.array([v["x"] for v in bad])
    excess = np.array([v["kde"] - v["upper"] for v in bad])
    assert abs(xs.mean()) < 0.1 and np.min(np.abs(xs)) < 0.05
    assert abs(xs[int(np.argmax(excess))]) < 0.3


def test_density_table_round_trip(tmp_path, rng):
    emp = kde(rng.standard_normal(20_000), grid=np.linspace(-3, 3, 61))
    rep = verify_envelope(emp, _normal_envelope(0.0, 1.0), (-2, 2), 3.0)
    path = emit_density_table(tmp_path / "d.csv", rep)
    back = read_density_table(path)
    assert list(back) == ["x", "lower", "upper", "kde", "local_se", "pass"]
    for k in ("x", "lower", "upper", "kde", "local_se"):
        assert np.array_equal(back[k], getattr(rep, k))
    assert np.array_equal(back["pass"].astype(bool), rep.passed)
    # 12 significant digits at least for the sandwich columns
    assert np.allclose(back["lower"], back["upper"], rtol=1e-12)


def test_density_table_empty(tmp_path, rng):
    emp = kde(rng.standard_normal(1000))
    rep = verify_envelope(emp, _normal_envelope(0.0, 1.0), (50.0, 60.0), 3.0)
    path = emit_density_table(tmp_path / "e.csv", rep)
    assert path.read_text().strip().splitlines() == ["x,lower,upper,kde,local_se,pass"]
    assert rep.pass_fraction == 1.0
