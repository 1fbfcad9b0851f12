"""Model catalog and the JSON model format.

Finite-dimensional models are :class:`QuantumModel` instances; Gaussian
models are :class:`qfilter.kalman.PhaseSpaceModel`.  Both round-trip
through plain dictionaries (``to_dict`` / :func:`model_from_dict`).
Matrices are nested lists of ``[re, im]`` pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .filtering import HETERODYNE, HOMODYNE, FilterSystem, MeasurementChannel
from .kalman import PhaseChannel, PhaseSpaceModel, canonical_form
from .operators import OperatorError, as_operator, check_density_matrix

__all__ = [
    "PAULI",
    "QuantumModel",
    "FockBridge",
    "spin_half_sphere",
    "spin_half_complete",
    "open_oscillator",
    "truncated_fock_bridge",
    "coherent_state",
    "leakage",
    "model_from_dict",
    "CATALOG",
    "build_model",
]

PAULI = {
    "sx": np.array([[0, 1], [1, 0]], dtype=complex),
    "sy": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "sz": np.array([[1, 0], [0, -1]], dtype=complex),
}


def _encode(a: np.ndarray) -> list:
    a = np.asarray(a, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def _decode(data, name: str) -> np.ndarray:
    a = np.asarray(data, dtype=float)
    if a.ndim != 3 or a.shape[-1] != 2:
        raise OperatorError(f"{name} must be a matrix of [re, im] pairs")
    return a[..., 0] + 1j * a[..., 1]


@dataclass(frozen=True)
class QuantumModel:
    """Hamiltonian, coupling channels, initial state and named observables."""

    name: str
    H: np.ndarray
    channels: tuple[MeasurementChannel, ...]
    rho0: np.ndarray
    observables: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        H = as_operator(self.H, name="Hamiltonian")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "rho0", check_density_matrix(self.rho0))
        if self.rho0.shape != H.shape:
            raise OperatorError("initial state dimension does not match H")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def system(self) -> FilterSystem:
        return FilterSystem.build(self.H, self.channels)

    def to_dict(self) -> dict:
        return {
            "type": "finite",
            "name": self.name,
            "dim": self.dim,
            "H": _encode(self.H),
            "channels": [
                {"L": _encode(ch.L), "weight": ch.weight, "kind": ch.kind,
                 "group": ch.group, "observed": ch.observed}
                for ch in self.channels
            ],
            "rho0": _encode(self.rho0),
            "observables": {k: _encode(v) for k, v in self.observables.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuantumModel":
        try:
            chans = tuple(
                MeasurementChannel(_decode(ch["L"], "L"), ch["weight"], ch.get("kind", HOMODYNE),
                                   ch.get("group"), ch.get("observed", True))
                for ch in data["channels"])
            return cls(
                name=data.get("name", "custom"),
                H=_decode(data["H"], "H"),
                channels=chans,
                rho0=_decode(data["rho0"], "rho0"),
                observables={k: _decode(v, k) for k, v in data.get("observables", {}).items()},
            )
        except KeyError as exc:
            raise OperatorError(f"missing model field {exc}") from exc


def model_from_dict(data: dict):
    """Decode either model type from its dictionary form."""
    kind = data.get("type")
    if kind == "finite":
        return QuantumModel.from_dict(data)
    if kind == "phase_space":
        return PhaseSpaceModel.from_dict(data)
    raise OperatorError(f"unknown model type {kind!r}")


def _spin_state(direction) -> np.ndarray:
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    return 0.5 * (np.eye(2) + sum(n[i] * PAULI[k] for i, k in enumerate(("sx", "sy", "sz"))))


def spin_half_sphere(n_patches: int = 2, *, strength: float = 1.0, omega: float = 0.0,
                     kind: str = HOMODYNE, quad_order: int = 50,
                     initial_direction=(0.0, 0.0, 1.0)) -> QuantumModel:
    """Spin-1/2 coupled to every direction of the unit sphere.

    Direction ``x`` carries ``L_x = strength (x . sigma) / 2`` with weight
    measure the solid angle (total ``4 pi``), so ``L_x + L_x^+`` has
    eigenvalues ``+-strength``.  The sphere is split into ``n_patches``
    equal-area polar bands; each band is one observed group, discretized
    by a product rule (Gauss-Legendre of ``quad_order`` points in
    ``cos(theta)`` times ``2 quad_order`` equally spaced azimuths).  The
    Hamiltonian is ``omega sigma_x / 2``.
    """
    if n_patches < 1:
        raise ValueError("n_patches must be at least 1")
    if quad_order < 1:
        raise ValueError("quad_order must be at least 1")
    nodes, wts = np.polynomial.legendre.leggauss(quad_order)
    n_phi = 2 * quad_order
    phis = 2 * np.pi * np.arange(n_phi) / n_phi
    sig = [PAULI["sx"], PAULI["sy"], PAULI["sz"]]
    channels = []
    for band in range(n_patches):
        hi = 1.0 - 2.0 * band / n_patches
        lo = 1.0 - 2.0 * (band + 1) / n_patches
        us = 0.5 * (hi + lo) + 0.5 * (hi - lo) * nodes
        wu = 0.5 * (hi - lo) * wts
        for u, w in zip(us, wu):
            s = math.sqrt(max(0.0, 1.0 - u * u))
            for phi in phis:
                x = (s * math.cos(phi), s * math.sin(phi), u)
                L = 0.5 * strength * (x[0] * sig[0] + x[1] * sig[1] + x[2] * sig[2])
                channels.append(MeasurementChannel(L, w * 2 * np.pi / n_phi, kind, band))
    return QuantumModel(
        name=f"spin_half_sphere({n_patches})",
        H=0.5 * omega * PAULI["sx"],
        channels=tuple(channels),
        rho0=_spin_state(initial_direction),
        observables=dict(PAULI),
    )


def spin_half_complete(*, strength: float = 1.0, omega: float = 0.0, kind: str = HOMODYNE,
                       initial_direction=(0.0, 0.0, 1.0)) -> QuantumModel:
    """Complete observation of the spin-1/2 sphere model.

    Observing every direction separately is equivalent in law to observing
    the three axes ``strength sigma_a / 2``, each with weight ``4 pi / 3``:
    the summed noise ``sum_x x dY_x`` is a 3-vector Wiener process with
    covariance ``(4 pi / 3) I dt``.
    """
    w = 4.0 * np.pi / 3.0
    chans = tuple(MeasurementChannel(0.5 * strength * PAULI[k], w, kind)
                  for k in ("sx", "sy", "sz"))
    return QuantumModel("spin_half_complete", 0.5 * omega * PAULI["sx"], chans,
                        _spin_state(initial_direction), dict(PAULI))


def open_oscillator(epsilon: float = 1.0, omega: float = 0.0, c_val: float = 2.0, *,
                    P0=None, theta0=None, kind: str = HETERODYNE) -> PhaseSpaceModel:
    """Single mode with ``S = c J``, ``Omega = omega I`` and one coupling
    ``zeta = (1, i) / sqrt 2`` of weight ``epsilon``.

    Under heterodyne observation the covariance stays ``p_t I`` with
    ``p' = epsilon (c^2 / 4 - p^2)``.  ``c = 2`` is the quantum oscillator,
    ``c = 0`` the classical limit and ``c < 0`` the unstable case.
    """
    if not (math.isfinite(epsilon) and epsilon >= 0):
        raise ValueError("epsilon must be finite and non-negative")
    zeta = np.array([1.0, 1j]) / math.sqrt(2.0)
    return PhaseSpaceModel(
        n_modes=1,
        S=canonical_form(1, c_val),
        Omega=omega * np.eye(2),
        upsilon=np.zeros(2),
        channels=(PhaseChannel(zeta, epsilon, kind),),
        P0=np.eye(2) if P0 is None else np.asarray(P0, dtype=float),
        theta0=np.zeros(2) if theta0 is None else np.asarray(theta0, dtype=float),
    )


def coherent_state(alpha: complex, n_levels: int) -> np.ndarray:
    """Truncated, renormalized coherent state vector."""
    n = np.arange(n_levels)
    logfact = np.array([math.lgamma(k + 1) for k in n])
    amp = np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * logfact) * np.power(complex(alpha), n)
    return amp / np.linalg.norm(amp)


def leakage(rho: np.ndarray, n_top: int = 3) -> float:
    """Population of the top ``n_top`` Fock levels (truncation check)."""
    rho = np.asarray(rho)
    return float(np.real(np.trace(rho[..., -n_top:, -n_top:], axis1=-2, axis2=-1)).max())


@dataclass(frozen=True)
class FockBridge:
    """Matched finite-dimensional and Gaussian descriptions of one mode."""

    quantum: QuantumModel
    gaussian: PhaseSpaceModel
    q: np.ndarray
    p: np.ndarray


_COUPLINGS = {
    "amplitude": np.array([1.0, 1j]) / math.sqrt(2.0),
    "quadrature": np.array([1.0, 0.0]) / math.sqrt(2.0),
}


def truncated_fock_bridge(n_levels: int = 30, *, epsilon: float = 1.0, omega: float = 0.0,
                          coupling: str = "amplitude", kind: str = HETERODYNE,
                          alpha: complex = 1.0, max_leakage: float = 1e-8) -> FockBridge:
    """Oscillator with ``[q, p] = 2i`` truncated to ``n_levels`` Fock states.

    ``q = a + a^+`` and ``p = -i (a - a^+)``, so the Gaussian side uses the
    canonical ``S`` with ``c = 2``.  ``coupling`` selects ``zeta``:
    ``"amplitude"`` gives ``L = sqrt(2) a``, ``"quadrature"`` gives
    ``L = q / sqrt 2``.  The initial state is the coherent state ``|alpha>``.
    """
    if n_levels < 10:
        raise ValueError("n_levels must be at least 10")
    if coupling not in _COUPLINGS:
        raise ValueError(f"coupling must be one of {sorted(_COUPLINGS)}")
    a = np.diag(np.sqrt(np.arange(1, n_levels)), k=1).astype(complex)
    ad = a.conj().T
    q = a + ad
    p = -1j * (a - ad)
    zeta = _COUPLINGS[coupling]
    L = zeta[0] * q + zeta[1] * p
    H = omega * (2.0 * ad @ a + np.eye(n_levels))
    psi = coherent_state(alpha, n_levels)
    rho0 = np.outer(psi, psi.conj())
    if leakage(rho0) > max_leakage:
        raise ValueError("initial state populates the truncation edge; increase n_levels")
    quantum = QuantumModel(
        name=f"truncated_fock_bridge({n_levels})",
        H=H,
        channels=(MeasurementChannel(L, epsilon, kind),),
        rho0=rho0,
        observables={"q": q, "p": p, "qq": q @ q, "pp": p @ p, "qp_sym": 0.5 * (q @ p + p @ q),
                     "edge": np.diag((np.arange(n_levels) >= n_levels - 3).astype(complex))},
    )
    gaussian = PhaseSpaceModel(
        n_modes=1,
        S=canonical_form(1, 2.0),
        Omega=omega * np.eye(2),
        upsilon=np.zeros(2),
        channels=(PhaseChannel(zeta, epsilon, kind),),
        P0=np.eye(2),
        theta0=np.array([2.0 * complex(alpha).real, 2.0 * complex(alpha).imag]),
    )
    return FockBridge(quantum, gaussian, q, p)


CATALOG = {
    "spin_half_sphere": spin_half_sphere,
    "spin_half_complete": spin_half_complete,
    "open_oscillator": open_oscillator,
    "truncated_fock_bridge": truncated_fock_bridge,
}


def build_model(source):
    """Build a model from a catalog reference ``{"name": ..., "params": {...}}``
    or decode an inline model dictionary."""
    if isinstance(source, str):
        source = {"name": source}
    if "type" in source:
        return model_from_dict(source)
    name = source.get("name")
    if name not in CATALOG:
        raise OperatorError(f"unknown catalog model {name!r}; choose from {sorted(CATALOG)}")
    return CATALOG[name](**source.get("params", {}))
