import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsolve.grid import Domain
from fpsolve.models import (
    BUILTIN_NAMES, ModelError, SdeModel, exact_density, exact_jet, exact_solution,
    generator_apply, make_builtin, zero_drift_model,
)

# Frozen from scipy.integrate.quad / dblquad over the whole plane (or the
# radial reduction), independent of the package's Gauss-Legendre rule.
RING2D_K = 3.8478260603312187      # pi * int_{-1}^inf exp(-2 t^2) dt
RING4D_K = 12.422228510191603      # pi^2 * int_{-1}^inf (t+1) exp(-2 t^2) dt
GIBBS2D_Z = 2.6528405915062128     # dblquad of exp(-2 V) over R^2
RING2D_MEAN_R2 = 1.0276239313394953

EXACT_MODELS = ("ring2d", "gibbs2d", "ring4d")


@pytest.fixture(scope="module")
def solutions():
    return {name: exact_solution(make_builtin(name)) for name in EXACT_MODELS}


def test_ring2d_drift_on_unit_circle():
    np.testing.assert_allclose(make_builtin("ring2d").drift_at([1.0, 0.0])[0], [0.0, -1.0])


def test_gibbs2d_drift_vanishes_at_origin():
    np.testing.assert_array_equal(make_builtin("gibbs2d").drift_at([0.0, 0.0])[0], [0.0, 0.0])


def test_turb6d_first_drift_component():
    f = make_builtin("turb6d").drift_at([1.0, 0, 0, 0, 0, 0])[0]
    assert f[0] == pytest.approx(0.4, abs=1e-15)


def test_unknown_model_rejected():
    with pytest.raises(ModelError):
        make_builtin("ring3d")


def test_state_dependent_noise_rejected():
    with pytest.raises(ModelError):
        SdeModel("bad", 1, lambda x: -x, lambda x: -np.ones(len(x)), lambda x: x)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_diffusion_symmetric_and_builtin_noise(name):
    m = make_builtin(name)
    np.testing.assert_array_equal(m.diffusion, m.diffusion.T)
    if name != "turb6d":
        assert m.noise_level == 1.0
    else:
        np.testing.assert_allclose(np.diag(m.diffusion), [4.0, 0.25, 0.04, 0.01, 0.01, 0.01])
        assert not m.has_exact_solution


def _fd_divergence(model, x, eps=1e-6):
    total = np.zeros(x.shape[0])
    for i in range(model.dim):
        step = np.zeros(model.dim)
        step[i] = eps
        total += (model.drift_at(x + step)[:, i] - model.drift_at(x - step)[:, i]) / (2 * eps)
    return total


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_divergence_matches_finite_differences(name):
    m = make_builtin(name)
    x = m.domain.uniform(np.random.default_rng(3), 200)
    fd = _fd_divergence(m, x)
    an = m.divergence_at(x)
    np.testing.assert_allclose(an, fd, rtol=1e-5, atol=1e-5 * np.abs(an).max())


@pytest.mark.parametrize("name,oracle", [("ring2d", RING2D_K), ("ring4d", RING4D_K), ("gibbs2d", GIBBS2D_Z)])
def test_normalization_matches_quadrature_oracle(solutions, name, oracle):
    assert solutions[name].normalization == pytest.approx(oracle, rel=1e-4)


def test_ring2d_density_on_ring(solutions):
    sol = solutions["ring2d"]
    assert exact_density(sol, np.array([1.0, 0.0])) == pytest.approx(1 / RING2D_K, rel=1e-6)
    assert exact_density(sol, np.array([0.0, 1.0])) == exact_density(sol, np.array([1.0, 0.0]))


def test_gibbs2d_peak_at_origin(solutions):
    sol = solutions["gibbs2d"]
    peak = exact_density(sol, np.array([0.0, 0.0]))
    assert peak == pytest.approx(1 / GIBBS2D_Z, rel=1e-6)
    others = sol.density(sol.domain.uniform(np.random.default_rng(0), 5000))
    assert np.all(others < peak)


@pytest.mark.parametrize("name", EXACT_MODELS)
def test_density_positive_and_bounded(solutions, name):
    sol = solutions[name]
    x = sol.domain.uniform(np.random.default_rng(1), 2000)
    u = sol.density(x)
    assert np.all(u > 0)
    assert np.all(u <= 1 / sol.normalization * (1 + 1e-12))


def test_exact_solution_requires_potential():
    with pytest.raises(ModelError):
        exact_solution(make_builtin("turb6d"))


def test_generator_zero_drift_flat_jet():
    m = zero_drift_model(3)
    assert generator_apply(m, 2.5, np.zeros(3), np.zeros((3, 3)), np.array([0.1, 0.2, 0.3])) == 0.0


def test_generator_linear_drift_constant_function():
    m = SdeModel("ou1", 1, lambda x: -x, lambda x: -np.ones(x.shape[0]), 1.0)
    for x in (-1.3, 0.0, 2.0):
        assert generator_apply(m, 1.0, [0.0], [[0.0]], np.array([x])) == 1.0


def test_generator_dimension_mismatch():
    with pytest.raises(ModelError):
        generator_apply(make_builtin("ring2d"), 1.0, np.zeros(3), np.zeros((3, 3)), np.zeros(3))


def test_generator_annihilates_ring2d_at_sample_point(solutions):
    sol = solutions["ring2d"]
    x = np.array([0.5, 0.3])
    u, g, h = exact_jet(sol, x)
    assert abs(generator_apply(sol.model, u, g, h, x)) < 1e-10


def test_generator_linear_in_diffusion():
    x = np.array([[0.4, -0.2]])
    u, g, h = 0.3, np.array([[0.1, 0.2]]), np.array([[[1.0, 0.0], [0.0, 2.0]]])
    lo = generator_apply(zero_drift_model(2, 1.0), u, g, h, x)
    hi = generator_apply(zero_drift_model(2, np.sqrt(2.0)), u, g, h, x)
    assert hi == pytest.approx(2 * lo)


@pytest.mark.parametrize("name", ["ring2d", "gibbs2d"])
def test_exact_jet_gradient_vanishes_at_critical_points(solutions, name):
    point = np.array([1.0, 0.0]) if name == "ring2d" else np.array([0.0, 0.0])
    _, g, _ = exact_jet(solutions[name], point)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


@pytest.mark.parametrize("name", EXACT_MODELS)
def test_exact_jet_matches_finite_differences(solutions, name):
    sol = solutions[name]
    n = sol.model.dim
    eps = 1e-5
    for x in sol.domain.uniform(np.random.default_rng(5), 20) * 0.6:
        u, g, h = exact_jet(sol, x)
        fd_g = np.empty(n)
        fd_h = np.empty((n, n))
        for i in range(n):
            e = np.zeros(n)
            e[i] = eps
            fd_g[i] = (exact_density(sol, x + e) - exact_density(sol, x - e)) / (2 * eps)
            g_plus = exact_jet(sol, x + e)[1]
            g_minus = exact_jet(sol, x - e)[1]
            fd_h[i] = (g_plus - g_minus) / (2 * eps)
        scale = max(np.linalg.norm(g), 1e-3 * u)
        assert np.linalg.norm(fd_g - g) <= 1e-6 * scale
        np.testing.assert_allclose(h, h.T, atol=1e-15)
        assert np.linalg.norm(fd_h - h) <= 1e-6 * max(np.linalg.norm(h), u)


_CACHE = {}


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(EXACT_MODELS), st.integers(0, 2**32 - 1))
def test_generator_annihilates_exact_density(name, seed):
    if name not in _CACHE:
        _CACHE[name] = exact_solution(make_builtin(name))
    sol = _CACHE[name]
    x = sol.domain.uniform(np.random.default_rng(seed), 25)
    u, g, h = exact_jet(sol, x)
    r = generator_apply(sol.model, u, g, h, x)
    assert np.max(np.abs(r)) < 1e-8 / sol.normalization


def test_custom_domain_normalisation_smaller_box():
    m = make_builtin("ring2d")
    small = exact_solution(m, Domain.cube(-1.0, 1.0, 2))
    assert small.normalization < exact_solution(m).normalization


def test_ring2d_second_moment_oracle(solutions):
    sol = solutions["ring2d"]
    from fpsolve.models import tensor_quadrature

    r2 = tensor_quadrature(lambda x: np.sum(x * x, axis=1) * sol.density(x), sol.domain)
    assert r2 == pytest.approx(RING2D_MEAN_R2, rel=1e-6)
