"""Tests for qfilter.operators."""

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given
from hypothesis import strategies as st

from qfilter.models import PAULI
from qfilter.operators import (
    MAX_PROPAGATION_DIM,
    OperatorError,
    as_operator,
    check_density_matrix,
    commutator,
    compress_channels,
    dagger,
    exact_lindblad_propagate,
    lindblad_generator,
    min_eigenvalue,
    purity,
    unvec,
    vec,
)

SX, SY, SZ = PAULI["sx"], PAULI["sy"], PAULI["sz"]
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)  # |1><0| with |0> excited


def random_matrix(seed, d):
    r = np.random.default_rng(seed)
    return r.normal(size=(d, d)) + 1j * r.normal(size=(d, d))


def random_hermitian(seed, d):
    a = random_matrix(seed, d)
    return 0.5 * (a + dagger(a))


def random_state(seed, d):
    a = random_matrix(seed, d)
    rho = a @ dagger(a)
    return rho / np.trace(rho).real


def random_model(seed, d, n_channels):
    H = random_hermitian(seed, d)
    r = np.random.default_rng(seed + 1)
    chans = [(random_matrix(seed + 10 + j, d) / d, float(r.uniform(0.1, 1.0)))
             for j in range(n_channels)]
    return H, chans


def master_rhs_matrix(H, chans):
    """Schroedinger-picture right-hand side written directly in matrix form."""

    def rhs(rho):
        out = -1j * (H @ rho - rho @ H)
        for L, w in chans:
            LdL = dagger(L) @ L
            out = out + w * (L @ rho @ dagger(L) - 0.5 * (LdL @ rho + rho @ LdL))
        return out

    return rhs


seeds = st.integers(min_value=0, max_value=2**31 - 1)
dims = st.integers(min_value=2, max_value=4)


class TestBasics:
    def test_pauli_commutator(self):
        np.testing.assert_allclose(commutator(SX, SY), 2j * SZ)

    def test_vec_is_column_major(self):
        a = np.array([[1, 2], [3, 4]], dtype=complex)
        np.testing.assert_array_equal(vec(a), [1, 3, 2, 4])
        np.testing.assert_array_equal(unvec(vec(a), 2), a)

    def test_purity_and_min_eigenvalue(self):
        mixed = np.eye(2) / 2
        assert purity(mixed) == pytest.approx(0.5)
        assert min_eigenvalue(mixed) == pytest.approx(0.5)

    def test_as_operator_rejects_non_square(self):
        with pytest.raises(OperatorError):
            as_operator(np.zeros((2, 3)))

    def test_as_operator_rejects_nan(self):
        with pytest.raises(OperatorError):
            as_operator(np.array([[np.nan, 0], [0, 1]]))

    @pytest.mark.parametrize("rho", [np.diag([1.5, -0.5]), np.array([[0.5, 1], [0, 0.5]]),
                                     np.diag([0.6, 0.6])])
    def test_check_density_matrix_rejects(self, rho):
        with pytest.raises(OperatorError):
            check_density_matrix(rho)


class TestGenerator:
    def test_heisenberg_decay_of_sigma_z(self):
        gen = lindblad_generator(np.zeros((2, 2)), [(SIGMA_MINUS, 1.0)])
        np.testing.assert_allclose(gen.apply_heisenberg(SZ), -(np.eye(2) + SZ), atol=1e-15)

    def test_amplitude_damping_population(self):
        gamma, t = 0.7, 1.3
        gen = lindblad_generator(np.zeros((2, 2)), [(SIGMA_MINUS, gamma)])
        rho = exact_lindblad_propagate(np.diag([1.0, 0.0]), gen, t)
        assert rho[0, 0].real == pytest.approx(np.exp(-gamma * t), rel=1e-12)

    def test_rabi_oscillation(self):
        omega, t = 1.1, 0.9
        gen = lindblad_generator(0.5 * omega * SX, [])
        rho = exact_lindblad_propagate(np.diag([1.0, 0.0]), gen, t)
        assert rho[0, 0].real == pytest.approx(np.cos(omega * t / 2) ** 2, rel=1e-12)

    def test_rejects_non_hermitian_hamiltonian(self):
        with pytest.raises(OperatorError):
            lindblad_generator(SIGMA_MINUS, [])

    def test_rejects_negative_weight(self):
        with pytest.raises(OperatorError):
            lindblad_generator(SZ, [(SX, -1.0)])

    def test_dimension_cap(self):
        d = MAX_PROPAGATION_DIM + 1
        gen = lindblad_generator(np.zeros((2, 2)), [])
        big = type(gen)(d, np.zeros((1, 1)), np.zeros((1, 1)))
        with pytest.raises(OperatorError):
            exact_lindblad_propagate(np.eye(d) / d, big, 1.0)

    def test_negative_time_rejected(self):
        gen = lindblad_generator(SZ, [])
        with pytest.raises(OperatorError):
            exact_lindblad_propagate(np.eye(2) / 2, gen, -1.0)

    def test_matches_direct_integration(self):
        H, chans = random_model(7, 3, 2)
        rho0 = random_state(8, 3)
        t = 0.8
        rhs = master_rhs_matrix(H, chans)
        sol = scipy.integrate.solve_ivp(
            lambda _, y: rhs(y.reshape(3, 3)).ravel(), (0, t), rho0.ravel().astype(complex),
            rtol=1e-11, atol=1e-13, method="DOP853")
        expected = sol.y[:, -1].reshape(3, 3)
        got = exact_lindblad_propagate(rho0, lindblad_generator(H, chans), t)
        np.testing.assert_allclose(got, expected, atol=1e-9)


class TestProperties:
    @given(seeds, dims)
    def test_duality(self, seed, d):
        H, chans = random_model(seed, d, 2)
        gen = lindblad_generator(H, chans)
        X = random_hermitian(seed + 100, d)
        rho = random_state(seed + 200, d)
        lhs = np.trace(X @ gen.apply_schrodinger(rho))
        rhs = np.trace(gen.apply_heisenberg(X) @ rho)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    @given(seeds, dims)
    def test_unital_and_trace_preserving(self, seed, d):
        H, chans = random_model(seed, d, 2)
        gen = lindblad_generator(H, chans)
        assert np.max(np.abs(gen.apply_heisenberg(np.eye(d)))) < 1e-12
        rho = random_state(seed + 3, d)
        assert abs(np.trace(gen.apply_schrodinger(rho))) < 1e-12

    @given(seeds, dims)
    def test_jacobi_identity(self, seed, d):
        a, b, c = (random_matrix(seed + i, d) for i in range(3))
        total = (commutator(a, commutator(b, c)) + commutator(b, commutator(c, a))
                 + commutator(c, commutator(a, b)))
        assert np.max(np.abs(total)) < 1e-10

    @given(seeds, dims, st.floats(min_value=0.0, max_value=3.0))
    def test_propagation_keeps_states_positive(self, seed, d, t):
        H, chans = random_model(seed, d, 2)
        rho = exact_lindblad_propagate(random_state(seed + 5, d), lindblad_generator(H, chans), t)
        assert abs(np.trace(rho) - 1) < 1e-10
        assert min_eigenvalue(rho) > -1e-10

    @given(seeds, st.integers(min_value=2, max_value=3), st.integers(min_value=1, max_value=12))
    def test_compression_preserves_generator(self, seed, d, n):
        H, chans = random_model(seed, d, n)
        compressed = compress_channels(chans)
        assert len(compressed) <= d * d
        g1 = lindblad_generator(H, chans).schrodinger
        g2 = lindblad_generator(H, compressed).schrodinger
        assert np.max(np.abs(g1 - g2)) < 1e-10 * max(1.0, np.max(np.abs(g1)))
