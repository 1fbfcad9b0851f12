"""Tests for qfilter.stochastic."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qfilter.stochastic import (
    SeedPolicy,
    TimeGrid,
    TrajectoryError,
    _splitmix64,
    doleans_exponential,
    refine_path,
    resolve_workers,
    run_ensemble,
    sample_wiener_path,
    stable_hash,
    standard_normals,
)


class TestSeeding:
    def test_splitmix64_reference_sequence(self):
        # First outputs of the SplitMix64 generator seeded with 0
        golden = 0x9E3779B97F4A7C15
        assert _splitmix64(0) == 0xE220A8397B1DCDAF
        assert _splitmix64(golden) == 0x6E789E6AA1B965F4
        assert _splitmix64((2 * golden) % 2**64) == 0x06C45D188009454F

    def test_stable_hash_is_frozen(self):
        assert stable_hash(0, 0) == _splitmix64(_splitmix64(0))
        assert stable_hash(12345, 7) == _splitmix64(_splitmix64(12345) ^ 7)

    def test_stable_hash_rejects_negative(self):
        with pytest.raises(ValueError):
            stable_hash(-1, 0)

    @given(st.integers(0, 2**40), st.integers(0, 2**20))
    def test_distinct_trajectories_get_distinct_keys(self, seed, k):
        assert stable_hash(seed, k) != stable_hash(seed, k + 1)
        assert 0 <= stable_hash(seed, k) < 2**64

    def test_refinement_keys_differ_from_trajectory_keys(self):
        s = SeedPolicy(3)
        assert s.key(5, 1) != s.key(5, 0)
        assert s.key(5, 1) != s.key(6, 0)

    def test_normals_reproducible(self):
        a = standard_normals(42, 1001)
        b = standard_normals(42, 1001)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a[:10], standard_normals(43, 10))

    def test_normals_prefix_stable(self):
        np.testing.assert_array_equal(standard_normals(9, 10), standard_normals(9, 11)[:10])

    def test_normal_moments(self):
        z = standard_normals(2024, 400_000)
        se = 1.0 / np.sqrt(z.size)
        assert abs(z.mean()) < 5 * se
        assert abs(z.var() - 1.0) < 5 * np.sqrt(2.0) * se
        assert abs(np.mean(z**4) - 3.0) < 5 * np.sqrt(96.0) * se


class TestTimeGrid:
    def test_from_dt(self):
        g = TimeGrid.from_dt(0.0, 1.0, 1e-3)
        assert g.n_steps == 1000
        assert g.times[-1] == pytest.approx(1.0)
        assert g.index_of(0.25) == 250

    def test_rejects_fractional_steps(self):
        with pytest.raises(ValueError):
            TimeGrid.from_dt(0.0, 1.0, 0.3)

    def test_rejects_off_grid_time(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 10).index_of(0.05)

    @pytest.mark.parametrize("args", [(0.0, 0.0, 5), (0.0, 1.0, 0), (1.0, 0.0, 3)])
    def test_rejects_bad_grids(self, args):
        with pytest.raises(ValueError):
            TimeGrid(*args)


class TestPaths:
    def test_increment_variance(self):
        grid = TimeGrid(0.0, 1.0, 200)
        w = [0.5, 2.0]
        inc = np.concatenate([sample_wiener_path(grid, w, SeedPolicy(1), k).increments
                              for k in range(200)])
        var = inc.var(axis=0) / grid.dt
        n = inc.shape[0]
        for v, wi in zip(var, w):
            assert abs(v - wi) < 5 * wi * np.sqrt(2.0 / n)

    def test_refinement_sums_to_coarse(self):
        grid = TimeGrid(0.0, 1.0, 50)
        seeds = SeedPolicy(2)
        coarse = sample_wiener_path(grid, [1.0, 3.0], seeds, 4)
        fine = refine_path(coarse, seeds, 4)
        np.testing.assert_allclose(fine.increments[0::2] + fine.increments[1::2],
                                   coarse.increments, atol=1e-15)
        assert fine.dt == pytest.approx(coarse.dt / 2)

    def test_refined_increment_variance(self):
        grid = TimeGrid(0.0, 1.0, 100)
        seeds = SeedPolicy(3)
        fine = np.concatenate([refine_path(sample_wiener_path(grid, [1.0], seeds, k), seeds, k)
                               .increments for k in range(300)])
        v = fine.var() / (grid.dt / 2)
        assert abs(v - 1.0) < 5 * np.sqrt(2.0 / fine.size)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            sample_wiener_path(TimeGrid(0, 1, 4), [-1.0], SeedPolicy(0), 0)

    def test_doleans_exponential_closed_form(self):
        inc = np.array([[0.1], [-0.2], [0.05]])
        g, w, dt = 0.7, 2.0, 0.01
        expected = np.exp(g * np.cumsum(inc[:, 0]) - 0.5 * g**2 * w * dt * np.arange(1, 4))
        np.testing.assert_allclose(doleans_exponential(inc, [g], [w], dt)[1:], expected)

    def test_doleans_exponential_mean_one(self):
        grid = TimeGrid(0.0, 1.0, 20)
        vals = np.array([doleans_exponential(sample_wiener_path(grid, [1.5], SeedPolicy(8), k)
                                             .increments, [0.6], [1.5], grid.dt)[-1]
                         for k in range(20000)])
        assert abs(vals.mean() - 1.0) < 4 * vals.std(ddof=1) / np.sqrt(vals.size)


def _job(ks):
    x = np.array([float(k) for k in ks])
    return {"x": x, "sq": np.stack([x, x**2], axis=1)}


class TestEnsemble:
    def test_mean_and_standard_error(self):
        res = run_ensemble(10, _job, chunk_size=3, workers=1)
        x = np.arange(10.0)
        assert res.mean["x"] == pytest.approx(x.mean())
        assert res.stderr["x"] == pytest.approx(x.std(ddof=1) / np.sqrt(10))
        np.testing.assert_allclose(res.mean["sq"], [x.mean(), (x**2).mean()])

    def test_single_trajectory_has_nan_error(self):
        res = run_ensemble(1, _job)
        assert np.isnan(res.stderr["x"])

    @pytest.mark.parametrize("workers", [2, 3, 8])
    def test_worker_count_does_not_change_results(self, workers):
        grid = TimeGrid(0.0, 1.0, 10)

        def job(ks):
            return {"w": np.stack([sample_wiener_path(grid, [1.0], SeedPolicy(5), k)
                                   .increments.sum(axis=0) for k in ks])}

        a = run_ensemble(101, job, workers=1, chunk_size=7, keep_samples=True)
        b = run_ensemble(101, job, workers=workers, chunk_size=7, keep_samples=True)
        assert a.mean["w"].tobytes() == b.mean["w"].tobytes()
        assert a.stderr["w"].tobytes() == b.stderr["w"].tobytes()
        assert a.samples["w"].tobytes() == b.samples["w"].tobytes()

    def test_failure_names_trajectory(self):
        def job(ks):
            if 12 in ks:
                raise FloatingPointError("boom")
            return {"x": np.zeros(len(ks))}

        with pytest.raises(TrajectoryError) as info:
            run_ensemble(20, job, chunk_size=5, workers=2)
        assert info.value.index == 10

    def test_wrong_output_length(self):
        with pytest.raises(TrajectoryError):
            run_ensemble(4, lambda ks: {"x": np.zeros(1)}, chunk_size=2)

    def test_workers_from_environment(self, monkeypatch):
        monkeypatch.setenv("QFILTER_WORKERS", "3")
        assert resolve_workers() == 3
        monkeypatch.setenv("QFILTER_WORKERS", "0")
        assert resolve_workers() >= 1
        monkeypatch.setenv("QFILTER_WORKERS", "many")
        with pytest.raises(ValueError):
            resolve_workers()
