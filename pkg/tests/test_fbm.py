import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from fbsdelab.coefficients import Coefficient, CoefficientError, CoefficientSet, TimeGrid
from fbsdelab.fbm import (FbmEnsemble, UnsupportedHurstError, c_hurst, covariance, covariance_matrix, iota,
                          iota_derivative, sample_paths, standard_normals, wiener_gram)

hursts = st.floats(0.05, 0.95)
times = st.floats(0.0, 5.0)


def test_covariance_examples(golden):
    assert covariance(0.5, 0.3, 0.7) == pytest.approx(0.3, abs=1e-15)
    assert covariance(0.7, 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    for key in ("covariance_H0.75_s0.5_t1", "covariance_H0.6_s0.3_t0.7"):
        g = golden[key]
        a = g["args"]
        ref = float(g["value"])
        assert covariance(a["H"], a["s"], a["t"]) == pytest.approx(ref, rel=1e-15, abs=1e-16)


@pytest.mark.parametrize("H, s, t", [(0.0, 1, 1), (1.0, 1, 1), (-0.2, 1, 1), (0.5, -1, 1), (0.5, 1, -0.1)])
def test_covariance_rejects_bad_input(H, s, t):
    with pytest.raises(ValueError):
        covariance(H, s, t)


@given(hursts, times, times)
def test_covariance_symmetric_nonnegative(H, s, t):
    c = covariance(H, s, t)
    assert c == covariance(H, t, s)
    assert c >= -1e-14


@given(hursts, st.floats(0.01, 3.0), st.floats(0.01, 3.0), st.floats(0.1, 10.0))
def test_covariance_self_similar(H, s, t, c):
    assert covariance(H, c * s, c * t) == pytest.approx(c ** (2 * H) * covariance(H, s, t), rel=1e-12)


@given(hursts, st.lists(st.floats(0.001, 4.0), min_size=2, max_size=30, unique=True))
def test_covariance_matrix_psd(H, ts):
    ts = np.sort(ts)
    K = covariance_matrix(H, ts)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-10 * np.trace(K)


def test_c_hurst():
    assert c_hurst(0.75) == pytest.approx(0.375)


# ---------------------------------------------------------------- iota

@pytest.mark.parametrize("H", [0.6, 0.75, 0.9])
@pytest.mark.parametrize("t", [0.25, 1.0, 2.0])
def test_iota_unit_sigma(H, t):
    for sig in (Coefficient.constant(1.0), Coefficient.table([0.0, 2.0], [1.0, 1.0])):
        assert abs(iota(sig, t, H) - t ** (2 * H)) / t ** (2 * H) < 1e-6


@given(st.floats(0.55, 0.95), st.floats(0.05, 2.0), st.floats(-3.0, 3.0).filter(lambda k: abs(k) > 1e-3))
def test_iota_constant_sigma_scaling(H, t, k):
    assert iota(k, t, H) == pytest.approx(k * k * t ** (2 * H), rel=1e-9)


def test_iota_golden_linear_sigma(golden):
    g = golden["iota_sigma_s_t1_H0.75"]
    sig = Coefficient.polynomial([0.0, 1.0])
    assert iota(sig, 1.0, 0.75) == pytest.approx(float(g["value"]), rel=1e-10)


def test_iota_brute_force_oracle():
    # tensor-product midpoint rule on the singular kernel, away from the diagonal cells
    H = 0.75
    sig = lambda s: 1.0 + 0.5 * s
    n = 2000
    u = (np.arange(n) + 0.5) / n
    U, V = np.meshgrid(u, u)
    K = np.abs(U - V) ** (2 * H - 2)
    np.fill_diagonal(K, 0.0)
    brute = c_hurst(H) * (sig(U) * sig(V) * K).sum() / n ** 2
    exact = iota(Coefficient.polynomial([1.0, 0.5]), 1.0, H)
    # the skipped diagonal carries O(n^(1-2H)) of the mass
    assert brute == pytest.approx(exact, rel=0.05)
    assert brute < exact


def test_iota_basic_properties():
    sig = Coefficient.polynomial([1.0, 0.5])
    assert iota(sig, 0.0, 0.75) == 0.0
    vals = iota(sig, np.linspace(0, 1, 21), 0.75)
    assert np.all(np.diff(vals) > 0)


@pytest.mark.parametrize("H", [0.5, 0.3])
def test_iota_rejects_short_memory(H):
    with pytest.raises(UnsupportedHurstError):
        iota(1.0, 1.0, H)


@pytest.mark.parametrize("H", [0.6, 0.75, 0.9])
def test_iota_derivative_unit_sigma(H):
    for t in (0.3, 1.0, 1.7):
        assert iota_derivative(1.0, t, H) == pytest.approx(2 * H * t ** (2 * H - 1), rel=1e-10)


def test_iota_derivative_small_t():
    assert iota_derivative(1.0, 1e-6, 0.75) < 1e-2


def test_iota_derivative_matches_finite_difference():
    sig = Coefficient.polynomial([0.0, 1.0])
    h = 1e-5
    fd = (iota(sig, 1 + h, 0.75) - iota(sig, 1 - h, 0.75)) / (2 * h)
    assert iota_derivative(sig, 1.0, 0.75) == pytest.approx(fd, rel=1e-6)
    for sig in (Coefficient.polynomial([1.0, 0.5]), Coefficient.table([0, 0.5, 1.5], [1.0, 2.0, 1.5])):
        for t in (0.2, 0.7, 1.2):
            fd = (iota(sig, t + h, 0.75) - iota(sig, t - h, 0.75)) / (2 * h)
            assert iota_derivative(sig, t, 0.75) == pytest.approx(fd, rel=1e-5)


def test_iota_derivative_formula():
    H, t = 0.7, 0.8
    sig = lambda s: 1.0 + s * s
    ref = 2 * c_hurst(H) * sig(t) * quad(lambda v: sig(v) * (t - v) ** (2 * H - 2), 0, t, limit=200)[0]
    assert iota_derivative(Coefficient.polynomial([1.0, 0.0, 1.0]), t, H) == pytest.approx(ref, rel=1e-8)


# ---------------------------------------------------------------- sampling

def test_wiener_gram_unit_sigma_is_fbm_covariance():
    t = np.linspace(0.1, 1.0, 10)
    assert np.allclose(wiener_gram(1.0, t, 0.75), covariance_matrix(0.75, t), rtol=1e-9, atol=1e-12)


def test_brownian_increments_uncorrelated():
    grid = TimeGrid(np.array([0.25, 0.5, 0.75, 1.0]))
    ens = sample_paths(0.5, grid, n=50_000, seed=3)
    inc = np.diff(np.hstack([np.zeros((ens.n, 1)), ens.paths]), axis=1)
    c = np.corrcoef(inc.T)
    off = c[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off) < 3 * 2 / np.sqrt(ens.n))


def test_variance_at_one():
    ens = sample_paths(0.7, TimeGrid(np.array([0.5, 1.0])), n=100_000, seed=4)
    x = ens.column(1.0)
    se = np.sqrt(2.0 / ens.n)
    assert abs(np.mean(x * x) - covariance(0.7, 1, 1)) < 3 * se


def test_empty_ensemble():
    ens = sample_paths(0.6, TimeGrid.uniform(1.0, 8), n=0, seed=1)
    assert ens.paths.shape == (0, len(ens.grid))
    assert ens.hurst == 0.6 and ens.seed == 1


def test_seed_reproducible_and_thread_independent():
    grid = TimeGrid.uniform(1.0, 16)
    a = sample_paths(0.75, grid, n=20_000, seed=9)
    b = sample_paths(0.75, grid, n=20_000, seed=9, threads=3)
    c = sample_paths(0.75, grid, n=20_000, seed=10)
    assert np.array_equal(a.paths, b.paths)
    assert not np.array_equal(a.paths, c.paths)


def test_standard_normals_prefix_stable():
    # the first block does not depend on how many blocks follow
    a = standard_normals(100, 3, seed=5)
    b = standard_normals(50_000, 3, seed=5)
    assert np.array_equal(a, b[:100])


def test_paths_start_at_zero_when_grid_has_zero():
    ens = sample_paths(0.6, TimeGrid.uniform(1.0, 8), n=100, seed=0)
    assert np.all(ens.paths[:, 0] == 0.0)


def test_wiener_integral_kind():
    sig = Coefficient.polynomial([1.0, 0.5])
    ens = sample_paths(0.75, TimeGrid(np.array([0.5, 1.0])), sig, n=100_000, seed=2)
    assert ens.kind == "wiener-integral-of-sigma"
    v = np.mean(ens.column(1.0) ** 2)
    ref = iota(sig, 1.0, 0.75)
    assert abs(v - ref) < 3 * ref * np.sqrt(2 / ens.n)
    with pytest.raises(UnsupportedHurstError):
        sample_paths(0.4, TimeGrid(np.array([0.5, 1.0])), sig, n=10, seed=0)


def test_gram_convergence_rate():
    grid = TimeGrid.uniform(1.0, 16, start=1 / 16)
    dist = []
    ns = [1_000, 10_000, 100_000]
    for n in ns:
        d = []
        for rep in range(4):
            ens = sample_paths(0.75, grid, n=n, seed=100 + rep)
            d.append(np.linalg.norm(ens.empirical_gram() - ens.gram))
        dist.append(np.mean(d))
    slope = np.polyfit(np.log(ns), np.log(dist), 1)[0]
    assert abs(slope + 0.5) <= 0.15


def test_ensemble_round_trips(tmp_path):
    ens = sample_paths(0.75, TimeGrid.uniform(1.0, 5, start=0.2), n=7, seed=11)
    b = FbmEnsemble.from_binary(ens.to_binary(tmp_path / "e.bin"))
    c = FbmEnsemble.from_csv(ens.to_csv(tmp_path / "e.csv"))
    for other in (b, c):
        assert np.array_equal(other.paths, ens.paths)
        assert np.array_equal(other.grid.points, ens.grid.points)
        assert (other.hurst, other.seed, other.kind) == (ens.hurst, ens.seed, ens.kind)


# ---------------------------------------------------------------- coefficients

def test_time_grid_invariants():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([-0.1, 0.5]))
    assert TimeGrid.uniform(2.0, 4).horizon == 2.0


def test_sigma_zero_rejected():
    cs = CoefficientSet(sigma=Coefficient.table([0, 0.5, 1], [1.0, 0.0, 1.0]))
    with pytest.raises(CoefficientError, match="σ\\(t\\) ≠ 0"):
        cs.validate(1.0)
    with pytest.raises(CoefficientError):
        CoefficientSet(sigma=Coefficient.polynomial([1.0, -2.0])).validate(1.0)


def test_coefficient_round_trip():
    cs = CoefficientSet(b=0.2, sigma=Coefficient.polynomial([1.0, 0.5]),
                        alpha=Coefficient.table([0, 1], [0.1, 0.3]), eta0=0.4)
    back = CoefficientSet.from_dict(cs.to_dict())
    t = np.linspace(0, 1, 11)
    for k in ("b", "sigma", "alpha", "beta", "gamma"):
        assert np.allclose(getattr(back, k)(t), getattr(cs, k)(t))
    assert back.eta0 == 0.4


@given(st.lists(st.floats(-2, 2), min_size=1, max_size=4), st.floats(0, 1), st.floats(0, 1))
def test_polynomial_integral(coeffs, a, b):
    c = Coefficient.polynomial(coeffs)
    ref = quad(lambda s: float(c(s)), a, b)[0]
    assert c.integral(a, b) == pytest.approx(ref, abs=1e-10)
