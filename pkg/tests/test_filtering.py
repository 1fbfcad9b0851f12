"""Tests for qfilter.filtering."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfilter.filtering import (
    HETERODYNE,
    HOMODYNE,
    FilterError,
    FilterState,
    FilterSystem,
    MeasurementChannel,
    coarse_grain,
    girsanov_weighted_moment,
    integrate,
    normalize,
    run_filter_ensemble,
    simulate_output,
    step_heterodyne,
    step_pure_propagator,
    step_unnormalized,
    weighted_moment_ode,
)
from qfilter.models import PAULI, spin_half_complete, spin_half_sphere
from qfilter.operators import OperatorError, dagger, min_eigenvalue
from qfilter.stochastic import SeedPolicy, TimeGrid, TrajectoryError, sample_wiener_path

SX, SY, SZ = PAULI["sx"], PAULI["sy"], PAULI["sz"]


@pytest.fixture(scope="module")
def hemisphere():
    return spin_half_sphere(2, strength=0.5, omega=1.0, initial_direction=(1.0, 0.0, 1.0))


def random_system(seed, d, kinds, scheme="kraus", unobserved=False):
    r = np.random.default_rng(seed)
    a = r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))
    H = 0.5 * (a + dagger(a))
    chans = []
    for j, kind in enumerate(kinds):
        L = (r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))) / d
        chans.append(MeasurementChannel(L, float(r.uniform(0.2, 1.0)), kind))
    if unobserved:
        L = (r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))) / d
        chans.append(MeasurementChannel(L, 0.5, HOMODYNE, observed=False))
    return FilterSystem.build(H, chans, scheme=scheme)


def random_state(seed, d):
    r = np.random.default_rng(seed)
    a = r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))
    rho = a @ dagger(a)
    return rho / np.trace(rho).real


class TestCoarseGraining:
    def test_hemisphere_average(self, hemisphere):
        obs = hemisphere.system().observed
        assert [ob.weight for ob in obs] == pytest.approx([2 * np.pi, 2 * np.pi], rel=1e-12)
        np.testing.assert_allclose(obs[0].L, 0.5 * SZ / 4, atol=1e-12)
        np.testing.assert_allclose(obs[1].L, -0.5 * SZ / 4, atol=1e-12)

    def test_single_patch_sees_nothing(self):
        ob = spin_half_sphere(1, strength=1.0, quad_order=8).system().observed[0]
        assert ob.weight == pytest.approx(4 * np.pi)
        assert np.max(np.abs(ob.L)) < 1e-12

    def test_quadrature_converged(self):
        coarse = spin_half_sphere(3, strength=1.0, quad_order=12).system().observed
        fine = spin_half_sphere(3, strength=1.0, quad_order=30).system().observed
        for a, b in zip(coarse, fine):
            assert np.max(np.abs(a.L - b.L)) < 1e-8

    def test_sphere_matches_complete_dissipation(self, hemisphere):
        axes = spin_half_complete(strength=0.5, omega=1.0).system()
        g1 = hemisphere.system().generator().schrodinger
        g2 = axes.generator().schrodinger
        np.testing.assert_allclose(g1, g2, atol=1e-10)

    def test_mixed_kinds_rejected(self):
        chans = [MeasurementChannel(SZ, 1.0, HOMODYNE, group=0),
                 MeasurementChannel(SX, 1.0, HETERODYNE, group=0)]
        with pytest.raises(OperatorError):
            coarse_grain(chans)

    def test_zero_weight_group_rejected(self):
        with pytest.raises(OperatorError):
            coarse_grain([MeasurementChannel(SZ, 0.0)])


class TestSingleStep:
    def eigen_system(self, lam):
        return FilterSystem.build(np.zeros((2, 2)), [MeasurementChannel(0.5 * SZ, lam)])

    def test_eigenstate_product_formula(self):
        lam, ell = 1.3, 0.5
        system = self.eigen_system(lam)
        grid = TimeGrid(0.0, 1.0, 1000)
        dY = sample_wiener_path(grid, [lam], SeedPolicy(1), 0).increments[:, 0]
        state = FilterState.initial(np.diag([1.0, 0.0]))
        for y in dY:
            state = step_unnormalized(state, system, [y], grid.dt, normalize_step=False)
        expected = np.prod((1.0 - 0.5 * lam * ell**2 * grid.dt + ell * dY) ** 2)
        assert state.varsigma[0, 0].real == pytest.approx(expected, rel=1e-11)
        assert abs(state.varsigma[1, 1]) < 1e-15

    def test_eigenstate_continuum_limit(self):
        lam, ell, t = 1.0, 0.5, 1.0
        system = self.eigen_system(lam)
        grid = TimeGrid(0.0, t, 10_000)
        dY = sample_wiener_path(grid, [lam], SeedPolicy(2), 0).increments
        batch = integrate(system, np.diag([1.0, 0.0]), grid, dY[None], mode="replay",
                          record_every=grid.n_steps)
        exact = 2 * ell * dY.sum() - 2 * lam * ell**2 * t
        # the discrete quadratic variation differs from lam t by O(sqrt(dt))
        allowed = 5 * ell**2 * lam * math.sqrt(2 * t * grid.dt)
        assert abs(batch.log_likelihood[0, -1] - exact) < allowed

    def test_normalized_matches_raw(self):
        system = random_system(3, 3, [HOMODYNE, HOMODYNE])
        grid = TimeGrid(0.0, 0.2, 200)
        dY = sample_wiener_path(grid, system.weights, SeedPolicy(3), 0).increments
        raw = norm = FilterState.initial(random_state(4, 3))
        for row in dY:
            raw = step_unnormalized(raw, system, row, grid.dt, normalize_step=False)
            norm = step_unnormalized(norm, system, row, grid.dt)
        rho, rho_hat = normalize(raw)
        np.testing.assert_allclose(norm.varsigma, rho, atol=1e-12)
        assert math.exp(norm.log_likelihood) == pytest.approx(rho_hat, rel=1e-10)

    def test_heterodyne_complex_equals_columns(self):
        system = random_system(5, 3, [HETERODYNE, HETERODYNE])
        grid = TimeGrid(0.0, 0.1, 100)
        cols = sample_wiener_path(grid, system.weights, SeedPolicy(5), 0).increments
        dZ = system.from_columns(cols)
        np.testing.assert_allclose(system.to_columns(dZ), cols, atol=1e-15)
        rho0 = random_state(6, 3)
        state = FilterState.initial(rho0)
        for row in dZ:
            state = step_heterodyne(state, system, row, grid.dt)
        batch = integrate(system, rho0, grid, cols[None], mode="replay",
                          record_every=grid.n_steps)
        np.testing.assert_allclose(state.varsigma, batch.rho[0], atol=1e-12)
        assert state.log_likelihood == pytest.approx(batch.log_likelihood[0, -1], abs=1e-12)

    def test_homodyne_rejects_complex_increment(self):
        system = self.eigen_system(1.0)
        with pytest.raises(OperatorError):
            step_unnormalized(FilterState.initial(np.eye(2) / 2), system, [0.1j], 0.01)

    def test_step_heterodyne_requires_heterodyne(self):
        with pytest.raises(OperatorError):
            step_heterodyne(FilterState.initial(np.eye(2) / 2), self.eigen_system(1.0), [0.1], 0.01)

    def test_simulate_output_drift(self):
        system = random_system(7, 2, [HOMODYNE, HETERODYNE])
        rho = random_state(8, 2)
        out = simulate_output(FilterState.initial(rho), system, np.zeros(system.n_columns), 0.01)
        ob0, ob1 = system.observed
        assert out[0] == pytest.approx(2 * ob0.weight * np.trace(ob0.L @ rho).real * 0.01)
        assert out[1] == pytest.approx(ob1.weight * np.trace(ob1.L @ rho) * 0.01)

    def test_normalize(self):
        state = FilterState(np.diag([2.0, 1.0]).astype(complex), math.log(2.0))
        rho, rho_hat = normalize(state)
        np.testing.assert_allclose(rho, np.diag([2 / 3, 1 / 3]))
        assert rho_hat == pytest.approx(6.0)

    def test_euler_scheme_can_lose_positivity(self):
        system = FilterSystem.build(np.zeros((2, 2)), [MeasurementChannel(SX, 1.0)],
                                    scheme="euler")
        with pytest.raises(FilterError):
            step_unnormalized(FilterState.initial(np.diag([1.0, 0.0])), system, [0.5], 0.01)


class TestPurePropagator:
    def test_tracks_state_under_complete_observation(self):
        model = spin_half_complete(strength=0.5, omega=1.0, initial_direction=(1, 0, 1))
        system = model.system()
        grid = TimeGrid(0.0, 0.5, 500)
        dY = sample_wiener_path(grid, system.weights, SeedPolicy(9), 0).increments
        state = FilterState.initial(model.rho0, track_propagator=True)
        F = np.eye(2, dtype=complex)
        for row in dY:
            state = step_unnormalized(state, system, row, grid.dt, normalize_step=False)
            F = step_pure_propagator(F, system, row, grid.dt)
        np.testing.assert_allclose(F @ model.rho0 @ dagger(F), state.varsigma,
                                   rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(state.pure_propagator, F, atol=1e-12)

    def test_refused_without_complete_observation(self, hemisphere):
        with pytest.raises(OperatorError):
            step_pure_propagator(np.eye(2), hemisphere.system(), [0.0, 0.0], 0.01)


class TestIntegrate:
    @pytest.mark.parametrize("scheme", ["kraus", "euler"])
    def test_batch_matches_step_loop(self, scheme):
        system = random_system(11, 3, [HOMODYNE, HETERODYNE], scheme=scheme, unobserved=True)
        grid = TimeGrid(0.0, 0.05, 50)
        cols = sample_wiener_path(grid, system.weights, SeedPolicy(11), 0).increments
        rho0 = random_state(12, 3)
        state = FilterState.initial(rho0)
        for row in system.from_columns(cols):
            state = step_unnormalized(state, system, row, grid.dt)
        batch = integrate(system, rho0, grid, cols, mode="replay", record_every=10)
        np.testing.assert_allclose(batch.rho[0], state.varsigma, atol=1e-12)
        assert batch.log_likelihood[0, -1] == pytest.approx(state.log_likelihood, abs=1e-12)
        assert batch.times.shape == (6,)

    def test_physical_increments_follow_the_state(self):
        system = random_system(13, 2, [HOMODYNE])
        grid = TimeGrid(0.0, 0.01, 10)
        noise = sample_wiener_path(grid, system.weights, SeedPolicy(13), 0).increments
        rho0 = random_state(14, 2)
        batch = integrate(system, rho0, grid, noise, mode="physical")
        first = simulate_output(FilterState.initial(rho0), system, noise[0], grid.dt)
        assert batch.increments[0, 0, 0] == pytest.approx(first[0], abs=1e-15)
        replay = integrate(system, rho0, grid, batch.increments, mode="replay")
        np.testing.assert_allclose(replay.rho, batch.rho, atol=1e-14)

    def test_failure_is_reported_with_index(self):
        system = FilterSystem.build(np.zeros((2, 2)), [MeasurementChannel(SX, 1.0)],
                                    scheme="euler")
        grid = TimeGrid(0.0, 0.02, 2)
        noise = np.zeros((3, 2, 1))
        noise[1, 0, 0] = 0.5
        with pytest.raises(TrajectoryError) as info:
            integrate(system, np.diag([1.0, 0.0]), grid, noise, first_index=40)
        assert info.value.index == 41

    def test_noise_shape_checked(self):
        system = random_system(15, 2, [HOMODYNE])
        with pytest.raises(OperatorError):
            integrate(system, np.eye(2) / 2, TimeGrid(0, 1, 4), np.zeros((1, 3, 1)))

    def test_unknown_mode(self):
        system = random_system(15, 2, [HOMODYNE])
        with pytest.raises(ValueError):
            integrate(system, np.eye(2) / 2, TimeGrid(0, 1, 4), np.zeros((1, 4, 1)), mode="x")


class TestEnsembles:
    def test_reference_mean_is_exact_prior(self, hemisphere):
        system = hemisphere.system()
        grid = TimeGrid(0.0, 0.5, 250)
        res = run_filter_ensemble(system, hemisphere.rho0, grid, 1500, SeedPolicy(21),
                                  record_every=125)
        exact = system.exact_prior(hemisphere.rho0, 0.5)
        z_re = np.abs(res.mean["varsigma_re"] - exact.real) / res.stderr["varsigma_re"]
        assert np.nanmax(z_re) < 4.5
        z = np.abs(res.mean["rho_hat"][1:] - 1) / res.stderr["rho_hat"][1:]
        assert np.max(z) < 4.5

    def test_physical_mean_of_posterior_is_prior(self, hemisphere):
        system = hemisphere.system()
        grid = TimeGrid(0.0, 0.5, 250)
        sz = [SZ]
        res = run_filter_ensemble(system, hemisphere.rho0, grid, 1500, SeedPolicy(22),
                                  mode="physical", record_every=250, observables=sz)
        exact = np.trace(SZ @ system.exact_prior(hemisphere.rho0, 0.5)).real
        got, se = res.mean["expect_re"][-1, 0], res.stderr["expect_re"][-1, 0]
        assert abs(got - exact) < 4.5 * se

    def test_weighted_ode_without_tilt_is_prior(self, hemisphere):
        system = hemisphere.system()
        grid = TimeGrid(0.0, 1.0, 200)
        ode = weighted_moment_ode(system, hemisphere.rho0, grid, 0.0, SZ)
        exact = np.trace(SZ @ system.exact_prior(hemisphere.rho0, 1.0)).real
        assert ode == pytest.approx(exact, abs=1e-9)

    def test_weighted_moment_requires_homodyne(self):
        system = random_system(23, 2, [HETERODYNE])
        with pytest.raises(OperatorError):
            weighted_moment_ode(system, np.eye(2) / 2, TimeGrid(0, 1, 4), 0.1, SZ)

    def test_girsanov_small(self, hemisphere):
        system = hemisphere.system()
        grid = TimeGrid(0.0, 0.5, 100)
        est, se = girsanov_weighted_moment(system, hemisphere.rho0, grid, [0.3, 0.0], SZ,
                                           1000, SeedPolicy(24))
        ode = weighted_moment_ode(system, hemisphere.rho0, grid, [0.3, 0.0], SZ)
        assert abs(est - ode) < 4.5 * se


class TestProperties:
    @given(st.integers(0, 2**31 - 1), st.integers(2, 4),
           st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3),
           st.floats(1e-4, 1e-1))
    def test_kraus_step_stays_positive(self, seed, d, dy, dt):
        system = random_system(seed, d, [HOMODYNE, HETERODYNE], unobserved=True)
        dZ = [dy[0], dy[1] + 1j * dy[2]]
        state = step_unnormalized(FilterState.initial(random_state(seed + 1, d)), system,
                                  dZ, dt, normalize_step=False)
        rho = state.varsigma
        assert np.max(np.abs(rho - dagger(rho))) < 1e-12
        assert min_eigenvalue(rho / np.trace(rho).real) > -1e-12

    @given(st.integers(0, 2**31 - 1), st.integers(2, 4),
           st.lists(st.floats(-0.5, 0.5), min_size=2, max_size=2),
           st.floats(1e-4, 1e-2))
    def test_euler_trace_increment(self, seed, d, dy, dt):
        system = random_system(seed, d, [HOMODYNE, HOMODYNE], scheme="euler")
        rho = random_state(seed + 1, d)
        try:
            state = step_unnormalized(FilterState.initial(rho), system, dy, dt,
                                      normalize_step=False)
        except FilterError:
            return
        expected = 1.0 + sum(2 * y * np.trace(ob.L @ rho).real
                             for y, ob in zip(dy, system.observed))
        assert np.trace(state.varsigma).real == pytest.approx(expected, abs=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_pure_states_stay_pure_under_complete_observation(self, seed):
        model = spin_half_complete(strength=0.8, omega=0.3,
                                   initial_direction=np.random.default_rng(seed).normal(size=3))
        system = model.system()
        assert system.residual == ()
        grid = TimeGrid(0.0, 0.05, 50)
        noise = sample_wiener_path(grid, system.weights, SeedPolicy(seed), 0).increments
        batch = integrate(system, model.rho0, grid, noise, mode="physical")
        assert np.max(np.abs(1 - batch.purity)) < 1e-12
