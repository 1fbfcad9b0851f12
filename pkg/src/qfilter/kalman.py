r"""Gaussian (Kalman) posterior for systems with canonical commutation relations.

Coordinates
-----------
A model with ``n`` modes has ``d = 2n`` real quadratures ``R_a`` with
``[R_a, R_b] = -i S_ab`` for a real antisymmetric ``S``.  With the
``"canonical"`` choice ``S = c J`` blockwise, ``J = [[0, -1], [1, 0]]`` and
``c = 2`` the vacuum has unit covariance.  The Hamiltonian is
``H = R^T Omega R / 2 + upsilon^T R``; coupling channel ``j`` is
``L_j = zeta_j^T R`` with complex ``zeta_j`` and weight ``w_j``.

With ``E = sum_j w_j zeta_j zeta_j^H`` the prior moments obey

    m'  = A m + b,            A = -S Omega + S Im(E),   b = -S upsilon
    V'  = A V + V A^T + D,    D = S Re(E) S^T

where ``V`` is the symmetrized covariance.  A homodyne channel with
``zeta = x + i y`` and weight ``w`` has gain vector ``g = 2 V x + S y`` and
subtracts ``w g g^T`` from ``V'``; a heterodyne channel acts as the two
homodyne channels ``zeta / sqrt 2`` and ``-i zeta / sqrt 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg

from . import kernels
from .stochastic import TimeGrid

__all__ = [
    "HOMODYNE",
    "HETERODYNE",
    "ADMISSIBILITY_TOL",
    "KalmanError",
    "ClassicalLimitError",
    "PhaseChannel",
    "PhaseSpaceModel",
    "GaussianPosterior",
    "DriftData",
    "KalmanPath",
    "canonical_form",
    "drift_data",
    "riccati_rhs",
    "riccati_rhs_short",
    "riccati_rhs_complex",
    "riccati_step",
    "solve_riccati",
    "transport_propagator",
    "prior_moments",
    "kalman_mean_step",
    "complex_kalman_step",
    "run_kalman",
    "admissibility_margin",
    "scalar_reduction",
    "stationary_covariance",
    "collapse_rate",
    "scalar_gain",
]

HOMODYNE = "homodyne"
HETERODYNE = "heterodyne"
ADMISSIBILITY_TOL = 1e-6
_SQRT2 = math.sqrt(2.0)


class KalmanError(ValueError):
    """Invalid model data or a failed numerical check."""


class ClassicalLimitError(KalmanError):
    """The requested quantity needs a nonzero commutator."""


def canonical_form(n_modes: int, c: float = 2.0) -> np.ndarray:
    """Block-diagonal ``c J`` for quadrature order ``(q_1, p_1, q_2, p_2, ...)``."""
    J = np.array([[0.0, -1.0], [1.0, 0.0]])
    return np.kron(np.eye(n_modes), c * J)


@dataclass(frozen=True)
class PhaseChannel:
    zeta: np.ndarray
    weight: float
    kind: str = HOMODYNE
    observed: bool = True

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=complex).reshape(-1)
        if not np.all(np.isfinite(z)):
            raise KalmanError("zeta must be finite")
        object.__setattr__(self, "zeta", z)
        w = float(self.weight)
        if not math.isfinite(w) or w < 0:
            raise KalmanError(f"channel weight must be finite and non-negative, got {w}")
        object.__setattr__(self, "weight", w)
        if self.kind not in (HOMODYNE, HETERODYNE):
            raise KalmanError(f"unknown channel kind {self.kind!r}")


def _symmetric(name, a, d, *, anti=False):
    a = np.asarray(a, dtype=float)
    if a.shape != (d, d):
        raise KalmanError(f"{name} must have shape ({d}, {d}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise KalmanError(f"{name} must be finite")
    ref = -a.T if anti else a.T
    if np.max(np.abs(a - ref)) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise KalmanError(f"{name} must be {'anti' if anti else ''}symmetric")
    return a


@dataclass(frozen=True)
class PhaseSpaceModel:
    """Linear-Gaussian open system; see the module docstring for conventions."""

    n_modes: int
    S: np.ndarray
    Omega: np.ndarray
    upsilon: np.ndarray
    channels: tuple[PhaseChannel, ...]
    P0: np.ndarray
    theta0: np.ndarray

    def __post_init__(self):
        if self.n_modes < 1:
            raise KalmanError("n_modes must be positive")
        d = 2 * self.n_modes
        object.__setattr__(self, "S", _symmetric("S", self.S, d, anti=True))
        object.__setattr__(self, "Omega", _symmetric("Omega", self.Omega, d))
        object.__setattr__(self, "P0", _symmetric("P0", self.P0, d))
        ups = np.asarray(self.upsilon, dtype=float).reshape(-1)
        th = np.asarray(self.theta0, dtype=float).reshape(-1)
        if ups.shape != (d,) or th.shape != (d,):
            raise KalmanError(f"upsilon and theta0 must have length {d}")
        object.__setattr__(self, "upsilon", ups)
        object.__setattr__(self, "theta0", th)
        chans = tuple(self.channels)
        for ch in chans:
            if ch.zeta.shape != (d,):
                raise KalmanError(f"zeta must have length {d}")
        object.__setattr__(self, "channels", chans)
        if admissibility_margin(self.P0, self.S) < -ADMISSIBILITY_TOL:
            raise KalmanError("P0 violates the uncertainty relation P + i S / 2 >= 0")

    @property
    def dim(self) -> int:
        return 2 * self.n_modes

    @cached_property
    def E(self) -> np.ndarray:
        E = np.zeros((self.dim, self.dim), dtype=complex)
        for ch in self.channels:
            E += ch.weight * np.outer(ch.zeta, np.conj(ch.zeta))
        return E

    @cached_property
    def A(self) -> np.ndarray:
        return -self.S @ self.Omega + self.S @ self.E.imag

    @cached_property
    def b(self) -> np.ndarray:
        return -self.S @ self.upsilon

    @cached_property
    def D(self) -> np.ndarray:
        D = self.S @ self.E.real @ self.S.T
        return 0.5 * (D + D.T)

    @cached_property
    def observed(self) -> tuple[PhaseChannel, ...]:
        return tuple(ch for ch in self.channels if ch.observed)

    @cached_property
    def _columns(self):
        zetas, lam, col_map = [], [], []
        for ch in self.observed:
            if ch.kind == HOMODYNE:
                col_map.append((len(zetas),))
                zetas.append(ch.zeta)
                lam.append(ch.weight)
            else:
                col_map.append((len(zetas), len(zetas) + 1))
                zetas.extend([ch.zeta / _SQRT2, -1j * ch.zeta / _SQRT2])
                lam.extend([ch.weight, ch.weight])
        Z = np.array(zetas, dtype=complex).reshape(len(zetas), self.dim).T
        return 2.0 * Z.real, self.S @ Z.imag, np.array(lam, dtype=float), tuple(col_map)

    @property
    def X2(self) -> np.ndarray:
        """``2 Re zeta`` of the homodyne-equivalent observed columns (d x m)."""
        return self._columns[0]

    @property
    def SY(self) -> np.ndarray:
        """``S Im zeta`` of the homodyne-equivalent observed columns (d x m)."""
        return self._columns[1]

    @property
    def weights(self) -> np.ndarray:
        return self._columns[2]

    @property
    def n_columns(self) -> int:
        return len(self._columns[2])

    def gains(self, P) -> np.ndarray:
        """Gain vectors ``2 P Re zeta + S Im zeta``, one column per noise column."""
        return np.asarray(P) @ self.X2 + self.SY

    def to_columns(self, increments) -> np.ndarray:
        """Per-channel increments (complex for heterodyne) to noise columns."""
        inc = np.asarray(increments)
        n_obs = len(self.observed)
        if inc.shape[-1] != n_obs:
            raise KalmanError(f"expected {n_obs} increments per step, got {inc.shape[-1]}")
        out = np.empty(inc.shape[:-1] + (self.n_columns,))
        for i, (ch, cols) in enumerate(zip(self.observed, self._columns[3])):
            if ch.kind == HOMODYNE:
                out[..., cols[0]] = np.real(inc[..., i])
            else:
                out[..., cols[0]] = _SQRT2 * np.real(inc[..., i])
                out[..., cols[1]] = _SQRT2 * np.imag(inc[..., i])
        return out

    def to_dict(self) -> dict:
        return {
            "type": "phase_space",
            "n_modes": self.n_modes,
            "S": self.S.tolist(),
            "Omega": self.Omega.tolist(),
            "upsilon": self.upsilon.tolist(),
            "channels": [
                {"zeta": [[float(z.real), float(z.imag)] for z in ch.zeta],
                 "weight": ch.weight, "kind": ch.kind, "observed": ch.observed}
                for ch in self.channels
            ],
            "P0": self.P0.tolist(),
            "theta0": self.theta0.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PhaseSpaceModel":
        try:
            n = int(data["n_modes"])
            d = 2 * n
            S = data.get("S", "canonical")
            S = canonical_form(n, float(data.get("c", 2.0))) if S == "canonical" else S
            chans = []
            for ch in data.get("channels", []):
                z = np.asarray(ch["zeta"], dtype=float)
                if z.shape != (d, 2):
                    raise KalmanError("zeta must be a list of [re, im] pairs")
                chans.append(PhaseChannel(z[:, 0] + 1j * z[:, 1], ch["weight"],
                                          ch.get("kind", HOMODYNE), ch.get("observed", True)))
            return cls(
                n_modes=n,
                S=np.asarray(S, dtype=float),
                Omega=np.asarray(data.get("Omega", np.zeros((d, d))), dtype=float),
                upsilon=np.asarray(data.get("upsilon", np.zeros(d)), dtype=float),
                channels=tuple(chans),
                P0=np.asarray(data.get("P0", np.eye(d)), dtype=float),
                theta0=np.asarray(data.get("theta0", np.zeros(d)), dtype=float),
            )
        except KeyError as exc:
            raise KalmanError(f"missing model field {exc}") from exc


@dataclass(frozen=True)
class GaussianPosterior:
    """Posterior mean ``theta``, covariance ``P`` and log density ratio at ``t``."""

    theta: np.ndarray
    P: np.ndarray
    log_rho_hat: float = 0.0
    t: float = 0.0

    @classmethod
    def prior(cls, model: PhaseSpaceModel) -> "GaussianPosterior":
        return cls(model.theta0.copy(), model.P0.copy(), 0.0, 0.0)


@dataclass(frozen=True)
class DriftData:
    """Coefficients of the filter equations at covariance ``P``.

    ``alpha`` is the drift of the mean written against the raw record,
    ``m' = alpha m + b + G dY``; ``kappa_tilde``, ``epsilon_tilde`` and
    ``mu_bar`` give the Riccati equation the form
    ``P' = kt P + P kt^T + et - P mu P``.
    """

    A: np.ndarray
    gains: np.ndarray
    alpha: np.ndarray
    kappa_tilde: np.ndarray
    epsilon_tilde: np.ndarray
    mu_bar: np.ndarray


def drift_data(model: PhaseSpaceModel, P) -> DriftData:
    P = np.asarray(P, dtype=float)
    G = model.gains(P)
    lam = model.weights
    X2, SY = model.X2, model.SY
    return DriftData(
        A=model.A,
        gains=G,
        alpha=model.A - (G * lam) @ X2.T,
        kappa_tilde=model.A - (SY * lam) @ X2.T,
        epsilon_tilde=model.D - (SY * lam) @ SY.T,
        mu_bar=(X2 * lam) @ X2.T,
    )


def riccati_rhs(model: PhaseSpaceModel, P) -> np.ndarray:
    """``A P + P A^T + D - sum_k w_k g_k g_k^T``."""
    P = np.asarray(P, dtype=float)
    G = model.gains(P)
    return model.A @ P + P @ model.A.T + model.D - (G * model.weights) @ G.T


def riccati_rhs_short(model: PhaseSpaceModel, P) -> np.ndarray:
    """The same right-hand side in the form ``kt P + P kt^T + et - P mu P``."""
    P = np.asarray(P, dtype=float)
    dd = drift_data(model, P)
    return dd.kappa_tilde @ P + P @ dd.kappa_tilde.T + dd.epsilon_tilde - P @ dd.mu_bar @ P


def riccati_rhs_complex(model: PhaseSpaceModel, P) -> np.ndarray:
    """Right-hand side with heterodyne channels kept in complex form.

    Each heterodyne channel contributes ``-2 w Re(h h^H)`` with
    ``h = (P - i S / 2) zeta``.
    """
    P = np.asarray(P, dtype=float)
    out = model.A @ P + P @ model.A.T + model.D
    K = P - 0.5j * model.S
    for ch in model.observed:
        if ch.kind == HETERODYNE:
            h = K @ ch.zeta
            out = out - 2.0 * ch.weight * np.outer(h, np.conj(h)).real
        else:
            g = 2.0 * P @ ch.zeta.real + model.S @ ch.zeta.imag
            out = out - ch.weight * np.outer(g, g)
    return out


def admissibility_margin(P, S) -> float:
    """Smallest eigenvalue of the Hermitian matrix ``P + i S / 2``."""
    M = np.asarray(P, dtype=complex) + 0.5j * np.asarray(S)
    return float(np.linalg.eigvalsh(0.5 * (M + M.conj().T))[0])


def _check_admissible(P, S, t):
    margin = admissibility_margin(P, S)
    if margin < -ADMISSIBILITY_TOL * max(1.0, float(np.max(np.abs(P)))):
        raise KalmanError(f"covariance violates P + i S / 2 >= 0 at t={t:.6g} (margin {margin:.3g})")


def riccati_step(model: PhaseSpaceModel, P, dt: float, *, t: float = 0.0) -> np.ndarray:
    """One classical RK4 step of the Riccati equation."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    P = np.asarray(P, dtype=float)
    k1 = riccati_rhs(model, P)
    k2 = riccati_rhs(model, P + 0.5 * dt * k1)
    k3 = riccati_rhs(model, P + 0.5 * dt * k2)
    k4 = riccati_rhs(model, P + dt * k3)
    out = P + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out = 0.5 * (out + out.T)
    _check_admissible(out, model.S, t + dt)
    return out


def solve_riccati(model: PhaseSpaceModel, grid: TimeGrid, P0=None, *,
                  record_every: int = 1) -> np.ndarray:
    """RK4 covariance path on ``grid``, shape ``(n_steps // record_every + 1, d, d)``."""
    if record_every < 1 or grid.n_steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    P0 = model.P0 if P0 is None else np.asarray(P0, dtype=float)
    path = kernels.riccati_rk4(P0, model.A, model.D, model.X2, model.SY, model.weights,
                               grid.dt, grid.n_steps, record_every)
    if not np.all(np.isfinite(path)):
        raise KalmanError("Riccati solution diverged")
    M = path.astype(complex) + 0.5j * model.S
    margins = np.linalg.eigvalsh(0.5 * (M + np.conj(np.swapaxes(M, -1, -2))))[:, 0]
    scale = np.maximum(1.0, np.max(np.abs(path), axis=(1, 2)))
    bad = np.flatnonzero(margins < -ADMISSIBILITY_TOL * scale)
    if bad.size:
        i = int(bad[0])
        _check_admissible(path[i], model.S, grid.t0 + i * record_every * grid.dt)
    return path


def transport_propagator(model: PhaseSpaceModel, r: float, t: float) -> np.ndarray:
    """Prior mean propagator ``expm((t - r) A)``: ``m(t) = Phi m(r)`` without drift.

    Test vectors ``xi`` are transported by the transpose.
    """
    return scipy.linalg.expm((t - r) * model.A)


def prior_moments(model: PhaseSpaceModel, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact prior mean and covariance at time ``t`` (Van Loan exponentials)."""
    d = model.dim
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = model.A
    aug[:d, d] = model.b
    E1 = scipy.linalg.expm(t * aug)
    mean = E1[:d, :d] @ model.theta0 + E1[:d, d]
    M = np.zeros((2 * d, 2 * d))
    M[:d, :d] = -model.A
    M[:d, d:] = model.D
    M[d:, d:] = model.A.T
    E2 = scipy.linalg.expm(t * M)
    phi = E2[d:, d:].T
    V = phi @ model.P0 @ phi.T + phi @ E2[:d, d:]
    return mean, 0.5 * (V + V.T)


def _log_rho_increment(model, theta, dY, dt):
    pred = model.X2.T @ theta
    return float(pred @ dY - 0.5 * dt * np.sum(model.weights * pred**2))


def kalman_mean_step(model: PhaseSpaceModel, post: GaussianPosterior, dY, dt: float) -> GaussianPosterior:
    """Advance the mean (Euler) and covariance (RK4) by one step.

    ``dY`` holds one increment per observed channel (complex for heterodyne).
    The log density ratio gains ``sum_k (X2^T m)_k dY_k - w_k (X2^T m)_k^2 dt / 2``.
    """
    cols = model.to_columns(np.asarray(dY).reshape(-1))
    G = model.gains(post.P)
    pred = model.X2.T @ post.theta
    innov = cols - model.weights * pred * dt
    theta = post.theta + (model.A @ post.theta + model.b) * dt + G @ innov
    log_rho = post.log_rho_hat + _log_rho_increment(model, post.theta, cols, dt)
    P = riccati_step(model, post.P, dt, t=post.t)
    return GaussianPosterior(theta, P, log_rho, post.t + dt)


def complex_kalman_step(model: PhaseSpaceModel, post: GaussianPosterior, dZ, dt: float) -> GaussianPosterior:
    """Kalman step with every observed channel heterodyne, in complex form.

    Mean: ``m += (A m + b) dt + sum_j 2 Re(conj(h_j) dZt_j)`` with
    ``h_j = (P - i S / 2) zeta_j`` and innovation ``dZt = dZ - w zeta^T m dt``;
    log density: ``2 Re(conj(zeta^T m) dZ) - w |zeta^T m|^2 dt``.
    """
    if not model.observed or any(ch.kind != HETERODYNE for ch in model.observed):
        raise KalmanError("complex_kalman_step needs heterodyne observation on every channel")
    dZ = np.asarray(dZ, dtype=complex).reshape(-1)
    if dZ.size != len(model.observed):
        raise KalmanError("one complex increment per observed channel is required")
    K = post.P - 0.5j * model.S
    m = post.theta
    dm = (model.A @ m + model.b) * dt
    dlog = 0.0
    for ch, z in zip(model.observed, dZ):
        ell = ch.zeta @ m
        h = K @ ch.zeta
        dm = dm + 2.0 * np.real(np.conj(h) * (z - ch.weight * ell * dt))
        dlog += 2.0 * np.real(np.conj(ell) * z) - ch.weight * abs(ell) ** 2 * dt
    P = _rk4_complex(model, post.P, dt)
    _check_admissible(P, model.S, post.t + dt)
    return GaussianPosterior(m + dm, P, post.log_rho_hat + dlog, post.t + dt)


def _rk4_complex(model, P, dt):
    k1 = riccati_rhs_complex(model, P)
    k2 = riccati_rhs_complex(model, P + 0.5 * dt * k1)
    k3 = riccati_rhs_complex(model, P + 0.5 * dt * k2)
    k4 = riccati_rhs_complex(model, P + dt * k3)
    out = P + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (out + out.T)


@dataclass
class KalmanPath:
    """Filter output on a grid: means ``(n, n_steps+1, d)``, covariances
    ``(n_steps+1, d, d)`` and log density ratios ``(n, n_steps+1)``."""

    times: np.ndarray
    theta: np.ndarray
    P: np.ndarray
    log_rho_hat: np.ndarray


def run_kalman(model: PhaseSpaceModel, grid: TimeGrid, increments) -> KalmanPath:
    """Filter a batch of records.

    ``increments`` has shape ``(n, n_steps, n_columns)`` in noise-column
    layout (see :meth:`PhaseSpaceModel.to_columns`).  The covariance is
    integrated with RK4 and the mean with Euler steps that use the
    covariance at the left end of each step.
    """
    inc = np.asarray(increments, dtype=float)
    if inc.ndim == 2:
        inc = inc[None]
    if inc.shape[1:] != (grid.n_steps, model.n_columns):
        raise KalmanError(f"increments shape {inc.shape} does not match the grid and model")
    n = inc.shape[0]
    P_path = solve_riccati(model, grid)
    dt = grid.dt
    theta = np.empty((n, grid.n_steps + 1, model.dim))
    log_rho = np.zeros((n, grid.n_steps + 1))
    m = np.broadcast_to(model.theta0, (n, model.dim)).copy()
    theta[:, 0] = m
    lam = model.weights
    At = model.A.T
    X2 = model.X2
    for s in range(grid.n_steps):
        G = model.gains(P_path[s])
        pred = m @ X2
        dy = inc[:, s]
        log_rho[:, s + 1] = log_rho[:, s] + np.sum(pred * dy - 0.5 * dt * lam * pred**2, axis=1)
        m = m + (m @ At + model.b) * dt + (dy - lam * pred * dt) @ G.T
        theta[:, s + 1] = m
    return KalmanPath(grid.times, theta, P_path, log_rho)


@dataclass(frozen=True)
class ScalarReduction:
    """Restriction of a completely, complexly observed model to the span of
    its coupling vectors.  ``basis`` is orthonormal (d x r); ``epsilon``,
    ``c`` and ``omega`` are r x r Hermitian matrices."""

    basis: np.ndarray
    epsilon: np.ndarray
    c: np.ndarray
    omega: np.ndarray

    def embed(self, p) -> np.ndarray:
        """Real covariance ``2 Re(B p B^H)`` of the phase-invariant state with
        restricted covariance ``p``."""
        B = self.basis
        return 2.0 * np.real(B @ p @ B.conj().T)


def scalar_reduction(model: PhaseSpaceModel, *, tol: float = 1e-10) -> ScalarReduction:
    """Reduce a model observed completely in complex form to ``(epsilon, c, omega)``.

    Requires every channel observed in heterodyne form, coupling vectors
    spanning an ``n``-dimensional isotropic subspace (``B^T B = 0``), and
    ``S`` and ``Omega`` that do not mix it with its conjugate.
    """
    if not model.channels or any(
            (not ch.observed) or ch.kind != HETERODYNE for ch in model.channels):
        raise KalmanError("needs complete observation with every channel heterodyne")
    Z = np.array([ch.zeta for ch in model.channels]).T
    U, sv, _ = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.sum(sv > tol * sv[0]))
    if rank != model.n_modes:
        raise KalmanError(f"coupling vectors span {rank} dimensions, expected {model.n_modes}")
    B = U[:, :rank]
    scale = max(1.0, float(np.max(np.abs(model.S))), float(np.max(np.abs(model.Omega))))
    for name, M in (("metric", np.eye(model.dim)), ("S", model.S), ("Omega", model.Omega)):
        if np.max(np.abs(B.T @ M @ B)) > tol * scale:
            raise KalmanError(f"{name} couples the coupling subspace to its conjugate")
    Bh = B.conj().T
    eps = sum(ch.weight * np.outer(Bh @ ch.zeta, np.conj(Bh @ ch.zeta)) for ch in model.channels)
    c = 1j * Bh @ model.S @ B
    om = Bh @ model.Omega @ B
    herm = lambda a: 0.5 * (a + a.conj().T)
    return ScalarReduction(B, herm(eps), herm(c), herm(om))


def _psd_sqrt(a):
    w, v = np.linalg.eigh(a)
    if w[0] <= 0:
        raise KalmanError("epsilon must be positive definite")
    return (v * np.sqrt(w)) @ v.conj().T, (v / np.sqrt(w)) @ v.conj().T


def _abs_hermitian(a):
    w, v = np.linalg.eigh(0.5 * (a + a.conj().T))
    return (v * np.abs(w)) @ v.conj().T


def stationary_covariance(model: PhaseSpaceModel, *, tol: float = 1e-10) -> np.ndarray:
    """Limit of the posterior covariance under complete complex observation.

    On the coupling subspace ``p = eps^-1/2 |eps^1/2 c eps^1/2| eps^-1/2 / 2``,
    embedded as a phase-invariant real covariance.  Models whose
    ``omega c eps`` and ``eps c omega`` differ are refused, and the result is
    checked to be a fixed point of the Riccati equation.
    """
    red = scalar_reduction(model, tol=tol)
    e, c, om = red.epsilon, red.c, red.omega
    comm = om @ c @ e - e @ c @ om
    if np.max(np.abs(comm)) > tol * max(1.0, np.max(np.abs(om @ c @ e))):
        raise KalmanError("omega c eps != eps c omega: no closed-form stationary covariance")
    rt, irt = _psd_sqrt(e)
    p = 0.5 * irt @ _abs_hermitian(rt @ c @ rt) @ irt
    P = red.embed(0.5 * (p + p.conj().T))
    resid = np.max(np.abs(riccati_rhs(model, P)))
    scale = max(1.0, float(np.max(np.abs(model.D))), float(np.max(np.abs(e))))
    if resid > 1e-9 * scale:
        raise KalmanError(f"stationary covariance fails the Riccati fixed-point check ({resid:.3g})")
    return P


def _scalar(a, name, tol):
    s = np.trace(a).real / a.shape[0]
    if np.max(np.abs(a - s * np.eye(a.shape[0]))) > tol * max(1.0, abs(s)):
        raise KalmanError(f"{name} is not a multiple of the identity; no scalar rate")
    return float(s)


def collapse_rate(model: PhaseSpaceModel, *, tol: float = 1e-10) -> float:
    """Exponential rate ``eps |c|`` of convergence to the stationary covariance."""
    red = scalar_reduction(model, tol=tol)
    eps = _scalar(red.epsilon, "epsilon", tol)
    c = _scalar(red.c, "c", tol)
    if abs(c) <= tol:
        raise ClassicalLimitError("c = 0: the covariance decays algebraically, not exponentially")
    return eps * abs(c)


def scalar_gain(model: PhaseSpaceModel, P) -> np.ndarray:
    """Gain ``p - c / 2`` on the coupling subspace, ``B^H (P - i S / 2) B``."""
    red = scalar_reduction(model)
    B = red.basis
    return B.conj().T @ (np.asarray(P) - 0.5j * model.S) @ B
