"""Dense operator algebra and Lindblad generators.

Operators are plain complex ``numpy`` arrays.  Superoperators act on
column-major vectorizations, so ``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.

Two forms of the generator are built together:

* the Heisenberg form acting on observables,
  ``X -> i[H, X] + sum_j w_j (L_j^+ X L_j - {L_j^+ L_j, X} / 2)``
* the Schroedinger form acting on states, its adjoint under the trace
  pairing ``<X, rho> = tr(X rho)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "MAX_PROPAGATION_DIM",
    "OperatorError",
    "Generator",
    "as_operator",
    "check_density_matrix",
    "commutator",
    "dagger",
    "vec",
    "unvec",
    "lindblad_generator",
    "exact_lindblad_propagate",
    "hermitian_part",
    "min_eigenvalue",
    "purity",
    "compress_channels",
]

#: Largest Hilbert-space dimension accepted by :func:`exact_lindblad_propagate`.
#: The superoperator has ``dim**2`` rows, so 64 levels already means a
#: 4096 x 4096 dense exponential.
MAX_PROPAGATION_DIM = 64


class OperatorError(ValueError):
    """Raised for malformed operators or states."""


def as_operator(x, dim: int | None = None, name: str = "operator") -> np.ndarray:
    """Return ``x`` as a finite square complex matrix, validating its shape."""
    a = np.asarray(x, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise OperatorError(f"{name} must be a square matrix, got shape {a.shape}")
    if dim is not None and a.shape[0] != dim:
        raise OperatorError(f"{name} has dimension {a.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(a)):
        raise OperatorError(f"{name} has non-finite entries")
    return a


def dagger(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


def hermitian_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + dagger(a))


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``[a, b] = a b - b a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise OperatorError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a @ b - b @ a


def vec(x: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(x).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int) -> np.ndarray:
    return np.asarray(v).reshape((dim, dim), order="F")


def min_eigenvalue(rho: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(hermitian_part(rho))[0])


def purity(rho: np.ndarray) -> float:
    """``tr(rho^2) / tr(rho)^2``; equals 1 exactly for rank-one states."""
    tr = np.trace(rho).real
    return float(np.vdot(rho, rho).real / tr**2)


def check_density_matrix(rho, *, normalized: bool = True, atol: float = 1e-9) -> np.ndarray:
    """Validate a (possibly unnormalized) density matrix and return it.

    Hermiticity is checked to ``atol`` relative to the trace, the smallest
    eigenvalue must be ``>= -atol`` (relative), and with ``normalized`` the
    trace must equal one to ``atol``.
    """
    r = as_operator(rho, name="density matrix")
    tr = np.trace(r)
    scale = max(abs(tr), 1.0)
    if np.max(np.abs(r - dagger(r))) > atol * scale:
        raise OperatorError("density matrix is not Hermitian")
    if normalized and abs(tr - 1.0) > atol:
        raise OperatorError(f"density matrix has trace {tr.real:.12g}, expected 1")
    if min_eigenvalue(r) < -atol * scale:
        raise OperatorError("density matrix is not positive semidefinite")
    return r


@dataclass(frozen=True)
class Generator:
    """A Lindblad generator in both pictures.

    ``heisenberg`` and ``schrodinger`` are ``dim**2 x dim**2`` matrices acting
    on column-major vectorizations; the second is the adjoint of the first.
    """

    dim: int
    heisenberg: np.ndarray
    schrodinger: np.ndarray

    def apply_heisenberg(self, x: np.ndarray) -> np.ndarray:
        return unvec(self.heisenberg @ vec(x), self.dim)

    def apply_schrodinger(self, rho: np.ndarray) -> np.ndarray:
        return unvec(self.schrodinger @ vec(rho), self.dim)


def _channel_arrays(channels, dim):
    ops, weights = [], []
    for item in channels:
        op, w = item
        w = float(w)
        if not np.isfinite(w) or w < 0:
            raise OperatorError(f"channel weight must be finite and non-negative, got {w}")
        ops.append(as_operator(op, dim, name="channel operator"))
        weights.append(w)
    return ops, weights


def lindblad_generator(H, channels: Sequence[tuple[np.ndarray, float]]) -> Generator:
    """Build the Lindblad generator for Hamiltonian ``H`` and weighted channels.

    ``channels`` is a sequence of ``(L_j, w_j)`` pairs with ``w_j >= 0``.

    Examples
    --------
    >>> import numpy as np
    >>> sm = np.array([[0, 0], [1, 0]], dtype=complex)
    >>> gen = lindblad_generator(np.zeros((2, 2)), [(sm, 1.0)])
    >>> np.allclose(gen.apply_heisenberg(np.diag([1.0, -1.0])), -np.diag([2.0, 0.0]))
    True
    """
    H = as_operator(H, name="Hamiltonian")
    dim = H.shape[0]
    if np.max(np.abs(H - dagger(H)), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(H))):
        raise OperatorError("Hamiltonian must be Hermitian")
    ops, weights = _channel_arrays(channels, dim)

    eye = np.eye(dim, dtype=complex)
    ham = np.kron(eye, H) - np.kron(H.T, eye)
    heis = 1j * ham
    schr = -1j * ham
    for L, w in zip(ops, weights):
        if w == 0.0:
            continue
        LdL = dagger(L) @ L
        anti = 0.5 * (np.kron(eye, LdL) + np.kron(LdL.T, eye))
        heis = heis + w * (np.kron(L.T, dagger(L)) - anti)
        schr = schr + w * (np.kron(np.conj(L), L) - anti)
    return Generator(dim=dim, heisenberg=heis, schrodinger=schr)


def exact_lindblad_propagate(rho0, generator: Generator, t: float,
                             max_dim: int = MAX_PROPAGATION_DIM) -> np.ndarray:
    """Propagate ``rho0`` for time ``t`` with the exact semigroup.

    The exponential of the Schroedinger superoperator is taken with the
    scaling-and-squaring Pade method of :func:`scipy.linalg.expm`.
    """
    if generator.dim > max_dim:
        raise OperatorError(
            f"dimension {generator.dim} exceeds the exact-propagation cap {max_dim}")
    if t < 0:
        raise OperatorError("propagation time must be non-negative")
    rho0 = as_operator(rho0, generator.dim, name="initial state")
    prop = scipy.linalg.expm(t * generator.schrodinger)
    return unvec(prop @ vec(rho0), generator.dim)


def _hermitian_basis(dim: int) -> np.ndarray:
    """Orthonormal Hermitian operator basis under ``<A, B> = tr(A^+ B)``."""
    basis = []
    for i in range(dim):
        e = np.zeros((dim, dim), dtype=complex)
        e[i, i] = 1.0
        basis.append(e)
    s = 1.0 / np.sqrt(2.0)
    for i in range(dim):
        for j in range(i + 1, dim):
            e = np.zeros((dim, dim), dtype=complex)
            e[i, j] = e[j, i] = s
            basis.append(e)
            f = np.zeros((dim, dim), dtype=complex)
            f[i, j] = -1j * s
            f[j, i] = 1j * s
            basis.append(f)
    return np.array(basis)


def compress_channels(channels: Sequence[tuple[np.ndarray, float]], *,
                      rtol: float = 1e-14) -> list[tuple[np.ndarray, float]]:
    """Rewrite weighted channels as an equivalent set of at most ``dim**2``.

    Both sums ``sum_j w_j L_j X L_j^+`` and ``sum_j w_j L_j^+ L_j`` are
    preserved, so the generator is unchanged.  The rewrite diagonalizes the
    coefficient matrix ``A = sum_j w_j c_j c_j^+`` of the channels in a fixed
    orthonormal operator basis; eigenvalues below ``rtol * max`` are dropped.
    This keeps fine quadrature discretizations cheap to step.
    """
    channels = list(channels)
    if not channels:
        return []
    dim = np.asarray(channels[0][0]).shape[0]
    ops, weights = _channel_arrays(channels, dim)
    if len(ops) <= dim * dim:
        return [(L, w) for L, w in zip(ops, weights) if w > 0]
    basis = _hermitian_basis(dim)
    flat_basis = basis.reshape(len(basis), -1)
    coeffs = np.conj(flat_basis) @ np.array(ops).reshape(len(ops), -1).T
    w = np.asarray(weights)
    kossakowski = (coeffs * w) @ dagger(coeffs)
    evals, evecs = np.linalg.eigh(hermitian_part(kossakowski))
    keep = evals > rtol * max(evals[-1], 0.0)
    out = []
    for a, v in zip(evals[keep], evecs.T[keep]):
        L = np.tensordot(v, basis, axes=(0, 0))
        out.append((L, float(a)))
    return out
