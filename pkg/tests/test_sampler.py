import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpsolve._accel import njit
from fpsolve.grid import DensityField, Domain, GridSpec
from fpsolve.gridsolver import discrete_l2_error
from fpsolve.models import SdeModel, exact_solution, make_builtin, zero_drift_model
from fpsolve.sampler import (
    ReferenceSet, SimulationError, Trajectory, TrajectoryConfig, em_step,
    estimate_density_full_grid, estimate_density_split, inject_multiplicative_noise,
    sample_collocation, snap_to_grid, substream,
)

RING2D_MEAN_R2 = 1.0276239313394953  # quadrature oracle, see test_models


@njit
def _ou_drift(x):
    return -x


@njit
def _cubic_drift(x):
    return x * x * x


def _ou(sigma=1.0):
    return SdeModel("ou", 1, _ou_drift, lambda x: -np.ones(x.shape[0]), sigma,
                    domain=Domain((-4.0,), (4.0,)))


def _naive_counts(model, grid, nodes_idx, steps, cfg):
    """Replay the same trajectory and count per reference box by brute force."""
    traj = Trajectory(model, cfg)
    traj.burn_in()
    states = traj.record(steps)
    idx = grid.node_index(states)
    inside = np.all((idx >= 0) & (idx < grid.points_per_axis), axis=1)
    flat = np.full(steps, -1)
    flat[inside] = grid.flat_index(idx[inside])
    targets = grid.flat_index(nodes_idx)
    return np.array([(flat == t).sum() for t in targets])


# ------------------------------------------------------------- config


def test_trajectory_config_invariants():
    with pytest.raises(ValueError):
        TrajectoryConfig(dt=0.0)
    with pytest.raises(ValueError):
        TrajectoryConfig(burn_in_time=-1.0)
    with pytest.raises(ValueError):
        TrajectoryConfig(dt=1e-2, internal_gap=1e-3)
    cfg = TrajectoryConfig(dt=1e-3)
    assert cfg.internal_gap == pytest.approx(1e-2)
    assert cfg.burn_in_steps == 10_000 and cfg.gap_steps == 10


def test_grid_invariants():
    with pytest.raises(ValueError):
        GridSpec(Domain.cube(0, 1, 1), 2)
    with pytest.raises(ValueError):
        Domain((1.0,), (1.0,))
    g = GridSpec(Domain((0.0, -1.0), (1.0, 1.0)), 10)
    np.testing.assert_allclose(g.spacing, [0.1, 0.2])
    np.testing.assert_allclose(g.nodes()[11], [0.1, -0.8])


# ---------------------------------------------------------- em_step


def test_em_step_deterministic_euler():
    m = SdeModel("decay", 1, _ou_drift, lambda x: -np.ones(x.shape[0]), 0.0)
    assert em_step(m, np.array([1.0]), 0.1, np.random.default_rng(0))[0] == pytest.approx(0.9)


def test_em_step_zero_dt_is_identity():
    x = np.array([0.3, -0.7])
    np.testing.assert_array_equal(em_step(zero_drift_model(2), x, 0.0, np.random.default_rng(1)), x)


def test_em_step_blow_up_carries_state():
    m = SdeModel("cubic", 1, _cubic_drift, lambda x: 3 * x[:, 0] ** 2, 0.0)
    with pytest.raises(SimulationError) as err:
        em_step(m, np.array([1e200]), 1.0, np.random.default_rng(0))
    assert err.value.state is not None


def test_trajectory_blow_up_raises():
    m = SdeModel("cubic", 1, _cubic_drift, lambda x: 3 * x[:, 0] ** 2, 1.0)
    traj = Trajectory(m, TrajectoryConfig(dt=0.1), x0=[10.0])
    with pytest.raises(SimulationError):
        traj.advance(1000)


def test_ou_stationary_variance_literal_tolerance():
    # 1e6 steps at dt=1e-3 span 1000 time units; the sample variance has a
    # standard error near 0.016, so this band is narrower than the noise
    traj = Trajectory(_ou(), TrajectoryConfig(seed=0))
    traj.burn_in()
    assert traj.record(10**6).var() == pytest.approx(0.5, abs=0.01)


def test_ou_stationary_variance_four_standard_errors():
    steps, dt = 10**6, 1e-3
    stderr = 0.5 / np.sqrt(steps * dt)  # var(s^2) ~ 2 v^2 int rho^2 / T, rho = exp(-t)
    traj = Trajectory(_ou(), TrajectoryConfig(dt=dt, seed=0))
    traj.burn_in()
    assert abs(traj.record(steps).var() - 0.5) < 4 * stderr


def test_em_step_matches_trajectory_kernel():
    cfg = TrajectoryConfig(dt=1e-2, burn_in_time=0.0, seed=4)
    traj = Trajectory(_ou(), cfg, x0=[0.5])
    incs = traj.increments(5)
    x = np.array([0.5])
    for inc in incs:
        x = x + _ou_drift(x[None, :])[0] * cfg.dt + inc
    again = Trajectory(_ou(), cfg, x0=[0.5])
    np.testing.assert_allclose(again.advance(5), x, rtol=1e-14)


# ------------------------------------------------------ collocation


def test_collocation_count_exact():
    m = make_builtin("ring2d")
    for alpha in (0.0, 0.5, 1.0):
        pts = sample_collocation(m, m.domain, 5, alpha, TrajectoryConfig(burn_in_time=0.1))
        assert pts.shape == (5, 2)


def test_collocation_alpha_zero_uniform():
    m = make_builtin("gibbs2d")
    pts = sample_collocation(m, m.domain, 4000, 0.0, TrajectoryConfig(seed=2))
    se = m.domain.widths / np.sqrt(12 * len(pts))
    assert np.all(np.abs(pts.mean(axis=0) - m.domain.center) < 3 * se)
    assert np.all(m.domain.contains(pts))


def test_collocation_alpha_one_on_ring():
    m = make_builtin("ring2d")
    pts = sample_collocation(m, m.domain, 10_000, 1.0, TrajectoryConfig(seed=3))
    r2 = np.sum(pts**2, axis=1).mean()
    assert abs(r2 - RING2D_MEAN_R2) < 0.1
    assert abs(r2 - 1.0) < 0.1


def test_collocation_mixture_fraction():
    m = make_builtin("ring2d")
    _, mask = sample_collocation(m, m.domain, 10_000, 0.7, TrajectoryConfig(seed=5), return_mask=True)
    assert abs(mask.mean() - 0.7) < 0.02


def test_collocation_deterministic():
    m = make_builtin("ring2d")
    cfg = TrajectoryConfig(seed=9, burn_in_time=1.0)
    a = sample_collocation(m, m.domain, 300, 0.7, cfg)
    b = sample_collocation(m, m.domain, 300, 0.7, cfg)
    np.testing.assert_array_equal(a, b)


def test_collocation_rejects_bad_arguments():
    m = make_builtin("ring2d")
    with pytest.raises(ValueError):
        sample_collocation(m, m.domain, 0, 0.5, TrajectoryConfig())
    with pytest.raises(ValueError):
        sample_collocation(m, m.domain, 5, 1.5, TrajectoryConfig())


# ------------------------------------------------------------- snapping


def test_snap_examples():
    grid = GridSpec(Domain((0.0,), (1.0,)), 10)
    nodes, idx = snap_to_grid([[0.3], [0.14]], grid)
    np.testing.assert_allclose(nodes.ravel(), [0.3, 0.1])
    np.testing.assert_array_equal(idx.ravel(), [3, 1])


def test_snap_deduplicates_in_first_occurrence_order():
    grid = GridSpec(Domain((0.0,), (1.0,)), 10)
    nodes, _ = snap_to_grid([[0.52], [0.21], [0.48], [0.19]], grid)
    np.testing.assert_allclose(nodes.ravel(), [0.5, 0.2])


def test_snap_outside_domain_rejected():
    grid = GridSpec(Domain((0.0,), (1.0,)), 10)
    with pytest.raises(ValueError):
        snap_to_grid([[1.2]], grid)


def test_snap_upper_edge_goes_to_last_node():
    grid = GridSpec(Domain((0.0,), (1.0,)), 10)
    nodes, idx = snap_to_grid([[1.0]], grid)
    assert idx[0, 0] == 9 and nodes[0, 0] == pytest.approx(0.9)


# ------------------------------------------------------ full-grid MC


def test_frozen_particle_fills_one_box():
    model = zero_drift_model(2, sigma=0.0)
    grid = GridSpec(model.domain, 10)
    field = estimate_density_full_grid(model, grid, 1000, TrajectoryConfig(burn_in_time=0.0), x0=[0.3, 0.6])
    assert np.count_nonzero(field.values) == 1
    assert field.mass == pytest.approx(1.0)
    assert field.values[grid.flat_index([[3, 6]])[0]] > 0


def test_ring2d_histogram_mass():
    m = make_builtin("ring2d")
    field = estimate_density_full_grid(m, GridSpec(m.domain, 50), 200_000, TrajectoryConfig(seed=1))
    assert np.all(field.values >= 0)
    assert 0.95 <= field.mass <= 1.0


def test_full_grid_refuses_high_dimension():
    m = make_builtin("ring4d")
    with pytest.raises(ValueError, match="split"):
        estimate_density_full_grid(m, GridSpec(m.domain, 5), 10, TrajectoryConfig())


def test_full_grid_deterministic():
    m = make_builtin("gibbs2d")
    cfg = TrajectoryConfig(seed=11, burn_in_time=1.0)
    a = estimate_density_full_grid(m, GridSpec(m.domain, 20), 50_000, cfg)
    b = estimate_density_full_grid(m, GridSpec(m.domain, 20), 50_000, cfg)
    np.testing.assert_array_equal(a.values, b.values)


def test_monte_carlo_error_lag1_autocorrelation_small():
    # plain check of the uncorrelated-error assumption; see the ledger for measurements
    m = make_builtin("ring2d")
    grid = GridSpec(m.domain, 50)
    field = estimate_density_full_grid(m, grid, 10**6, TrajectoryConfig(seed=0))
    err = (field.values - exact_solution(m).density(grid.nodes())).reshape(grid.shape)
    err = err - err.mean()
    lag = (np.sum(err[1:, :] * err[:-1, :]) + np.sum(err[:, 1:] * err[:, :-1])) / (
        np.sum(err[1:, :] ** 2) + np.sum(err[:, 1:] ** 2))
    assert abs(lag) < 0.1, f"lag-1 autocorrelation {lag:.3f}"


# ------------------------------------------------------------ split MC


def test_split_zero_steps_gives_zero():
    m = make_builtin("ring4d")
    grid = GridSpec(m.domain, 8)
    nodes = grid.domain.lower_array + np.array([[4, 4, 4, 4], [3, 4, 4, 4]]) * grid.spacing
    np.testing.assert_array_equal(
        estimate_density_split(m, grid, ReferenceSet(nodes), 0, TrajectoryConfig(burn_in_time=0.1)), 0.0)


def test_split_shared_half_index_without_match_counts_nothing():
    model = zero_drift_model(4, sigma=0.0)
    grid = GridSpec(model.domain, 10)
    refs = np.array([[2, 3, 4, 5], [2, 3, 6, 7]]) * 0.1
    cfg = TrajectoryConfig(burn_in_time=0.0)
    miss = estimate_density_split(model, grid, refs, 100, cfg, x0=[0.2, 0.3, 0.8, 0.8], return_counts=True)[1]
    np.testing.assert_array_equal(miss, [0, 0])
    hit = estimate_density_split(model, grid, refs, 100, cfg, x0=[0.2, 0.3, 0.6, 0.7], return_counts=True)[1]
    np.testing.assert_array_equal(hit, [0, 100])


def test_split_requires_grid_nodes_and_even_dim():
    m = make_builtin("ring4d")
    grid = GridSpec(m.domain, 8)
    with pytest.raises(ValueError, match="grid nodes"):
        estimate_density_split(m, grid, np.array([[0.01, 0.0, 0.0, 0.0]]), 10, TrajectoryConfig())
    m3 = zero_drift_model(3)
    with pytest.raises(ValueError, match="even"):
        estimate_density_split(m3, GridSpec(m3.domain, 4), np.zeros((1, 3)), 10, TrajectoryConfig())


def test_split_matches_naive_counter_50_points():
    m = make_builtin("ring4d")
    grid = GridSpec(m.domain, 10)
    cfg = TrajectoryConfig(seed=21, burn_in_time=1.0)
    warm = sample_collocation(m, m.domain, 400, 1.0, cfg)
    nodes, idx = snap_to_grid(warm[m.domain.contains(warm)], grid)
    nodes, idx = nodes[:50], idx[:50]
    assert len(nodes) == 50
    _, eta = estimate_density_split(m, grid, ReferenceSet(nodes), 10**5, cfg, return_counts=True)
    np.testing.assert_array_equal(eta, _naive_counts(m, grid, idx, 10**5, cfg))
    assert eta.sum() > 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.integers(4, 9))
def test_split_equals_naive_on_random_reference_sets(seed, count, npts):
    m = make_builtin("ring4d")
    grid = GridSpec(m.domain, npts)
    rng = np.random.default_rng(seed)
    # bias picks toward the ring so that some reference boxes are visited
    idx = np.clip(np.rint((rng.normal(0, 0.6, (count, 4)) + 2.0) / grid.spacing), 0, npts - 1).astype(int)
    _, first = np.unique(grid.flat_index(idx), return_index=True)
    idx = idx[np.sort(first)]
    nodes = grid.domain.lower_array + idx * grid.spacing
    cfg = TrajectoryConfig(seed=seed, burn_in_time=0.5)
    _, eta = estimate_density_split(m, grid, ReferenceSet(nodes), 5000, cfg, return_counts=True)
    np.testing.assert_array_equal(eta, _naive_counts(m, grid, idx, 5000, cfg))


def test_split_density_normalisation():
    m = make_builtin("ring4d")
    grid = GridSpec(m.domain, 6)
    nodes = grid.domain.lower_array + np.array([[3, 3, 3, 3]]) * grid.spacing
    dens, eta = estimate_density_split(m, grid, nodes, 20_000, TrajectoryConfig(seed=2), return_counts=True)
    assert dens[0] == pytest.approx(eta[0] / (20_000 * grid.box_volume))


# --------------------------------------------------------------- noise


def test_noise_alpha_zero_identity():
    d = np.linspace(0.1, 2.0, 50)
    np.testing.assert_array_equal(inject_multiplicative_noise(d, 0.0, np.random.default_rng(0)), d)


def test_noise_support_and_mean():
    d = np.full(10_000, 2.0)
    out = inject_multiplicative_noise(d, 0.5, np.random.default_rng(1))
    ratio = out / d
    assert ratio.min() >= 0.5 and ratio.max() <= 1.5
    assert abs(ratio.mean() - 1.0) < 3 * (0.5 / np.sqrt(3)) / 100


def test_noise_alpha_range():
    with pytest.raises(ValueError):
        inject_multiplicative_noise(np.ones(3), 1.0, np.random.default_rng(0))


def test_substreams_are_independent_and_reproducible():
    a = substream(5, "noise").random(4)
    np.testing.assert_array_equal(a, substream(5, "noise").random(4))
    assert not np.array_equal(a, substream(5, "init").random(4))
    assert not np.array_equal(a, substream(6, "noise").random(4))


def test_discrete_error_of_histogram_is_order_of_percent():
    m = make_builtin("ring2d")
    grid = GridSpec(m.domain, 50)
    field = estimate_density_full_grid(m, grid, 10**6, TrajectoryConfig(seed=3))
    oracle = DensityField(grid, exact_solution(m).density(grid.nodes()))
    assert 1e-3 < discrete_l2_error(field, oracle) < 0.2
