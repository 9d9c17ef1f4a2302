import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats

from uraenas.arch_dist import (
    B_CLAMP, ConcentrationParams, arch_objective_grad, dirichlet_jacobian, dirichlet_mean, dirichlet_vjp,
    implicit_dz_dalpha, sample_dirichlet, sample_dirichlet_batch, sample_gamma,
)
from uraenas.errors import InputError
from uraenas.rng import stream
from uraenas.samplers import arch_step

# (alpha, z, dz/dalpha) from the inverse-CDF path z(alpha) = P^-1(alpha, u) with u held fixed,
# differentiated by central differences (step 1e-6) and frozen here.
FROZEN_DZ = [
    (0.5, 0.07423593091627269, 0.41662195698899396),
    (2.0, 1.6783469900166612, 0.9932948933366603),
    (5.0, 7.993589586052632, 1.2952610735084136),
]


@pytest.mark.parametrize("alpha,z,expected", FROZEN_DZ)
def test_implicit_derivative_matches_frozen_inverse_cdf_values(alpha, z, expected):
    got = implicit_dz_dalpha(np.array([alpha]), np.array([z]))[0]
    assert got == pytest.approx(expected, rel=1e-4)


@given(st.floats(0.05, 50.0), st.floats(0.02, 0.98))
def test_implicit_derivative_matches_common_random_numbers(alpha, u):
    z = special.gammaincinv(alpha, u)
    h = 1e-6 * max(1.0, alpha)
    fd = (special.gammaincinv(alpha + h, u) - special.gammaincinv(alpha - h, u)) / (2 * h)
    got = implicit_dz_dalpha(np.array([alpha]), np.array([z]))[0]
    assert got == pytest.approx(fd, rel=1e-3, abs=1e-10)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 4.0])
def test_gamma_draws_match_distribution(alpha):
    z, dz = sample_gamma(np.full(20000, alpha), stream(0, "t", alpha))
    assert stats.kstest(z, stats.gamma(alpha).cdf).pvalue > 0.01
    assert np.all(np.isfinite(dz))


def test_gamma_shape_bounds():
    with pytest.raises(InputError):
        sample_gamma(np.array([np.exp(-11.0)]), np.random.default_rng(0))
    with pytest.raises(InputError):
        sample_dirichlet(np.array([1.0, -1.0]), np.random.default_rng(0))


def test_simplex_invariants_over_1e5_draws():
    theta, _, _ = sample_dirichlet_batch(np.array([0.3, 2.0, 5.0, 1e-3, 1.0]), 100_000, stream(1, "simplex"))
    assert theta.min() > 0
    assert np.abs(theta.sum(axis=1) - 1).max() <= 1e-9


def test_ks_beta_2_5():
    theta, _, _ = sample_dirichlet_batch(np.array([2.0, 5.0]), 20000, stream(2, "ks"))
    assert stats.kstest(theta[:, 0], stats.beta(2, 5).cdf).pvalue > 0.01


def test_extreme_concentrations_stay_positive():
    beta = np.array([5.69e3, 4.54e-5, 29.0, 2.0e3, 7.9e-3])
    rng = np.random.default_rng(0)
    for _ in range(50):
        s = sample_dirichlet(beta, rng)
        assert s.theta.min() > 0 and abs(s.theta.sum() - 1) <= 1e-9


def test_pathwise_mean_derivative():
    beta = np.array([2.0, 5.0, 1.5])
    rng = stream(3, "pathwise")
    jac = np.mean([dirichlet_jacobian(sample_dirichlet(beta, rng)) for _ in range(10000)], axis=0)
    s = beta.sum()
    exact = (np.eye(3) * s - beta[:, None]) / s**2
    assert np.linalg.norm(jac - exact) / np.linalg.norm(exact) <= 0.05


def test_vjp_equals_jacobian_transpose_product():
    rng = np.random.default_rng(4)
    s = sample_dirichlet(np.array([0.7, 2.0, 3.0, 1.1, 0.4]), rng)
    g = rng.standard_normal(5)
    np.testing.assert_allclose(dirichlet_vjp(s, g), dirichlet_jacobian(s).T @ g, atol=1e-12)


@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=6), st.floats(1e-3, 1e3))
def test_mean_scale_covariance(beta, c):
    beta = np.array(beta)
    np.testing.assert_allclose(dirichlet_mean(c * beta), dirichlet_mean(beta), rtol=1e-14)


def test_mean_scale_covariance_exact_for_powers_of_two():
    beta = np.array([0.3, 1.7, 4.0])
    assert np.array_equal(dirichlet_mean(8.0 * beta), dirichlet_mean(beta))


def test_regularizer_gradient_matches_finite_differences():
    params = ConcentrationParams.init(["0-1", "0-2"], 5, reg_weight=0.01)
    rng = np.random.default_rng(5)
    for e in params.b:
        params.b[e] = rng.normal(0, 1, 5)
    sample = params.sample(rng)
    zero = {e: np.zeros(5) for e in params.b}
    g = arch_objective_grad(params, zero, sample)
    for e in params.b:
        fd = np.zeros(5)
        for i in range(5):
            for sgn in (1, -1):
                q = params.copy()
                q.b[e][i] += sgn * 1e-6
                fd[i] += sgn * q.regularizer() / 2e-6
        np.testing.assert_allclose(g[e], fd, rtol=1e-5, atol=1e-9)


def test_objective_grad_chains_through_exp():
    params = ConcentrationParams.init(["0-1"], 5, reg_weight=0.0)
    params.b["0-1"] = np.array([0.1, -0.4, 0.3, 0.0, 1.2])
    s = params.sample(np.random.default_rng(6))
    g = np.arange(5.0)
    got = arch_objective_grad(params, {"0-1": g}, s)["0-1"]
    np.testing.assert_allclose(got, dirichlet_vjp(s.edges["0-1"], g) * np.exp(params.b["0-1"]), atol=1e-14)


@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5), st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=5),
       st.floats(0, 10))
def test_arch_step_stays_clamped(b, g, eta):
    out = arch_step(np.array(b), np.array(g), eta)
    assert np.all(np.abs(out) <= B_CLAMP)


def test_json_roundtrip_is_exact():
    params = ConcentrationParams.init(["0-1", "1-2"], 5, reg_weight=1e-3)
    params.b["0-1"] = np.random.default_rng(7).normal(size=5)
    back = ConcentrationParams.from_json(params.to_json())
    for e in params.b:
        np.testing.assert_array_equal(back.b[e], params.b[e])
    assert json.loads(back.to_json()) == json.loads(params.to_json())


def test_same_stream_same_draw():
    beta = np.array([1.0, 2.0, 3.0])
    a = sample_dirichlet(beta, stream(9, "x", 1)).theta
    b = sample_dirichlet(beta, stream(9, "x", 1)).theta
    c = sample_dirichlet(beta, stream(9, "x", 2)).theta
    assert np.array_equal(a, b) and not np.array_equal(a, c)
