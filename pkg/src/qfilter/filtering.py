"""Posterior (filtering) equations for finite-dimensional systems.

The unnormalized posterior state ``S`` obeys the linear equation

    dS = L*(S) dt + sum_i (Lb_i S dY_i + S Lb_i^+ dY_i)          (homodyne)
    dS = L*(S) dt + sum_i (Lb_i S dZ_i^* + S Lb_i^+ dZ_i)         (heterodyne)

where ``L*`` is the Schroedinger-picture Lindblad generator over *all*
coupling channels and ``Lb_i = sum_{j in group i} w_j L_j / W_i`` is the
weight-averaged operator of observed group ``i`` with total weight ``W_i``.
Increments have variance ``W_i dt`` under the reference measure
(``E|dZ|^2 = W_i dt``, ``dZ^2 = 0``).  The trace of ``S`` is the likelihood
ratio of the observed record.

Steps are first order.  The default ``"kraus"`` scheme writes each step as
``M S M^+ + dt sum_r R_r S R_r^+`` with ``M = 1 - K dt + sum_i Lb_i dY_i`` and
residual channels ``R_r`` carrying the dissipation that ``M`` does not
(``sqrt(w_j) (L_j - Lb_i)`` for observed channels, ``sqrt(w_j) L_j`` for
unobserved ones).  It differs from the Euler-Maruyama step by a term whose
mean is ``O(dt^2)``.  Each step is a positive map, so pure states stay pure
under complete observation.  ``"euler"`` selects the plain Euler-Maruyama step.

Heterodyne channels are stepped as two homodyne channels ``Lb / sqrt 2`` and
``-i Lb / sqrt 2`` driven by ``dY_+ = sqrt 2 Re dZ`` and ``dY_- = sqrt 2 Im dZ``,
which reproduces the complex equation term by term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from . import kernels
from .operators import (
    Generator,
    OperatorError,
    as_operator,
    compress_channels,
    dagger,
    exact_lindblad_propagate,
    hermitian_part,
    lindblad_generator,
    min_eigenvalue,
)
from .stochastic import (
    EnsembleResult,
    SeedPolicy,
    TimeGrid,
    TrajectoryError,
    run_ensemble,
    sample_wiener_path,
)

__all__ = [
    "HOMODYNE",
    "HETERODYNE",
    "MODES",
    "SCHEMES",
    "PSD_TOL",
    "FilterError",
    "MeasurementChannel",
    "ObservedChannel",
    "FilterSystem",
    "FilterState",
    "TrajectoryBatch",
    "coarse_grain",
    "step_unnormalized",
    "step_pure_propagator",
    "step_heterodyne",
    "simulate_output",
    "normalize",
    "integrate",
    "run_filter_ensemble",
    "girsanov_weighted_moment",
    "weighted_moment_ode",
]

HOMODYNE = "homodyne"
HETERODYNE = "heterodyne"
#: Output-record modes: filter a simulated physical record, replay a given
#: record, or drive the filter with reference-measure (pure noise) increments.
MODES = ("physical", "replay", "reference")
SCHEMES = ("kraus", "euler")
#: Normalized states with an eigenvalue below ``-PSD_TOL`` abort the run.
PSD_TOL = 1e-6
_SQRT2 = math.sqrt(2.0)


class FilterError(RuntimeError):
    """Numerical failure of the posterior equation (positivity, trace)."""


@dataclass(frozen=True)
class MeasurementChannel:
    """A coupling operator with its weight.

    Channels sharing a ``group`` label are observed only through their
    weighted average; ``group=None`` makes the channel its own group.
    Unobserved channels (``observed=False``) only dissipate.
    """

    L: np.ndarray
    weight: float
    kind: str = HOMODYNE
    group: Hashable | None = None
    observed: bool = True

    def __post_init__(self):
        object.__setattr__(self, "L", as_operator(self.L, name="coupling operator"))
        w = float(self.weight)
        if not math.isfinite(w) or w < 0:
            raise OperatorError(f"channel weight must be finite and non-negative, got {w}")
        object.__setattr__(self, "weight", w)
        if self.kind not in (HOMODYNE, HETERODYNE):
            raise OperatorError(f"unknown channel kind {self.kind!r}")


@dataclass(frozen=True)
class ObservedChannel:
    """Averaged operator ``L`` and total weight of one observed group."""

    L: np.ndarray
    weight: float
    kind: str
    group: Hashable
    size: int


def _group_members(channels):
    order: list[Hashable] = []
    members: dict[Hashable, list[int]] = {}
    for idx, ch in enumerate(channels):
        if not ch.observed:
            continue
        key = ("_single", idx) if ch.group is None else ch.group
        if key not in members:
            order.append(key)
            members[key] = []
        members[key].append(idx)
    return order, members


def coarse_grain(channels: Sequence[MeasurementChannel]) -> list[ObservedChannel]:
    """Average observed channels over their groups.

    Groups keep the order of their first member.  A group whose total weight
    is zero carries no information and is rejected.

    Examples
    --------
    >>> import numpy as np
    >>> sz = np.diag([1.0, -1.0])
    >>> chans = [MeasurementChannel(sz, 1.0, group=0), MeasurementChannel(-sz, 1.0, group=0)]
    >>> g = coarse_grain(chans)[0]
    >>> float(g.weight), bool(np.allclose(g.L, 0))
    (2.0, True)
    """
    order, members = _group_members(channels)
    out = []
    for key in order:
        group = [channels[i] for i in members[key]]
        kinds = {ch.kind for ch in group}
        if len(kinds) != 1:
            raise OperatorError(f"group {key!r} mixes homodyne and heterodyne channels")
        total = sum(ch.weight for ch in group)
        if total <= 0:
            raise OperatorError(f"group {key!r} has zero total weight")
        L = sum(ch.weight * ch.L for ch in group) / total
        label = key[1] if isinstance(key, tuple) and key[:1] == ("_single",) else key
        out.append(ObservedChannel(L, total, group[0].kind, label, len(group)))
    return out


@dataclass(frozen=True)
class FilterSystem:
    """Precomputed data for stepping the posterior equation.

    Build with :meth:`FilterSystem.build`.  ``L_cols`` and ``weights`` hold the
    homodyne-equivalent observed operators, one per noise column.
    """

    H: np.ndarray
    channels: tuple[MeasurementChannel, ...]
    observed: tuple[ObservedChannel, ...]
    dissipative: tuple[tuple[np.ndarray, float], ...]
    residual: tuple[tuple[np.ndarray, float], ...]
    scheme: str
    K: np.ndarray
    L_cols: np.ndarray
    weights: np.ndarray
    columns: tuple[tuple[int, ...], ...]

    @classmethod
    def build(cls, H, channels: Sequence[MeasurementChannel], *,
              scheme: str = "kraus") -> "FilterSystem":
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
        H = as_operator(H, name="Hamiltonian")
        d = H.shape[0]
        if np.max(np.abs(H - dagger(H))) > 1e-12 * max(1.0, np.max(np.abs(H))):
            raise OperatorError("Hamiltonian must be Hermitian")
        channels = tuple(channels)
        for ch in channels:
            if ch.L.shape != (d, d):
                raise OperatorError("coupling operator dimension does not match H")
        observed = tuple(coarse_grain(channels))
        diss = tuple(compress_channels([(ch.L, ch.weight) for ch in channels]))
        order, members = _group_members(channels)
        resid = [(ch.L, ch.weight) for ch in channels if not ch.observed]
        for key, ob in zip(order, observed):
            resid.extend((channels[i].L - ob.L, channels[i].weight) for i in members[key])
        resid = tuple((L, w) for L, w in compress_channels(resid)
                      if w * np.max(np.abs(L)) ** 2 > 1e-14 * max(1.0, _observed_scale(observed)))
        K = 1j * H + 0.5 * sum((w * dagger(L) @ L for L, w in diss),
                               np.zeros((d, d), dtype=complex))
        cols, lam, col_map = [], [], []
        for ob in observed:
            if ob.kind == HOMODYNE:
                col_map.append((len(cols),))
                cols.append(ob.L)
                lam.append(ob.weight)
            else:
                col_map.append((len(cols), len(cols) + 1))
                cols.extend([ob.L / _SQRT2, -1j * ob.L / _SQRT2])
                lam.extend([ob.weight, ob.weight])
        L_cols = np.array(cols, dtype=complex).reshape(len(cols), d, d)
        return cls(H, channels, observed, diss, resid, scheme, K, L_cols,
                   np.array(lam, dtype=float), tuple(col_map))

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def n_columns(self) -> int:
        return len(self.weights)

    @property
    def complete(self) -> bool:
        """Every channel observed on its own."""
        return all(ch.observed for ch in self.channels) and all(
            ob.size == 1 for ob in self.observed)

    def generator(self) -> Generator:
        return lindblad_generator(self.H, self.dissipative)

    def exact_prior(self, rho0, t: float) -> np.ndarray:
        """The unconditioned state at time ``t`` (the mean of the posterior)."""
        return exact_lindblad_propagate(rho0, self.generator(), t)

    def to_columns(self, increments) -> np.ndarray:
        """Map per-channel increments (complex for heterodyne) to noise columns."""
        inc = np.asarray(increments)
        if inc.shape[-1] != len(self.observed):
            raise OperatorError(
                f"expected {len(self.observed)} increments per step, got {inc.shape[-1]}")
        out = np.empty(inc.shape[:-1] + (self.n_columns,))
        for i, (ob, cols) in enumerate(zip(self.observed, self.columns)):
            if ob.kind == HOMODYNE:
                if np.any(np.imag(inc[..., i]) != 0):
                    raise OperatorError("homodyne increments must be real")
                out[..., cols[0]] = np.real(inc[..., i])
            else:
                out[..., cols[0]] = _SQRT2 * np.real(inc[..., i])
                out[..., cols[1]] = _SQRT2 * np.imag(inc[..., i])
        return out

    def from_columns(self, cols) -> np.ndarray:
        """Inverse of :meth:`to_columns`; complex output when any channel is heterodyne."""
        cols = np.asarray(cols, dtype=float)
        het = any(ob.kind == HETERODYNE for ob in self.observed)
        out = np.empty(cols.shape[:-1] + (len(self.observed),), dtype=complex if het else float)
        for i, (ob, c) in enumerate(zip(self.observed, self.columns)):
            if ob.kind == HOMODYNE:
                out[..., i] = cols[..., c[0]]
            else:
                out[..., i] = (cols[..., c[0]] + 1j * cols[..., c[1]]) / _SQRT2
        return out


@dataclass(frozen=True)
class FilterState:
    """Posterior state at time ``t``.

    In normalized stepping ``varsigma`` has unit trace and the likelihood
    ratio is ``exp(log_likelihood)``; in raw stepping the trace of
    ``varsigma`` carries it.  ``pure_propagator`` is the accumulated ``F``
    with ``varsigma ~ F rho0 F^+``, kept only under complete observation.
    """

    varsigma: np.ndarray
    log_likelihood: float = 0.0
    t: float = 0.0
    pure_propagator: np.ndarray | None = None

    @classmethod
    def initial(cls, rho0, *, track_propagator: bool = False, t: float = 0.0) -> "FilterState":
        rho0 = as_operator(rho0, name="initial state")
        F = np.eye(rho0.shape[0], dtype=complex) if track_propagator else None
        return cls(rho0, 0.0, t, F)


def _check_state(state: FilterState, system: FilterSystem):
    if state.varsigma.shape != (system.dim, system.dim):
        raise OperatorError("state dimension does not match the system")


def _column_coefficients(system: FilterSystem, increments) -> np.ndarray:
    """Complex coefficient ``c_i`` of ``Lb_i`` in ``B = -K dt + sum c_i Lb_i``."""
    inc = np.asarray(increments).reshape(-1)
    if inc.size != len(system.observed):
        raise OperatorError(
            f"expected {len(system.observed)} increments, got {inc.size}")
    out = np.empty(inc.size, dtype=complex)
    for i, ob in enumerate(system.observed):
        if ob.kind == HOMODYNE:
            if np.imag(inc[i]) != 0:
                raise OperatorError("homodyne increments must be real")
            out[i] = np.real(inc[i])
        else:
            out[i] = np.conj(inc[i])
    return out


def _observed_scale(observed) -> float:
    return max((ob.weight * float(np.max(np.abs(ob.L))) ** 2 for ob in observed), default=0.0)


def _stepping_channels(system: FilterSystem):
    return system.residual if system.scheme == "kraus" else system.dissipative


def _euler(state: FilterState, system: FilterSystem, coeffs, dt: float,
           normalize_step: bool) -> FilterState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    rho = state.varsigma
    B = -dt * system.K
    for ob, c in zip(system.observed, coeffs):
        B = B + c * ob.L
    T = B @ rho
    new = rho + T + dagger(T)
    if system.scheme == "kraus":
        new = new + T @ dagger(B)
    for L, w in _stepping_channels(system):
        new = new + (dt * w) * (L @ rho @ dagger(L))
    new = hermitian_part(new)
    tr = float(np.trace(new).real)
    if not (tr > 0 and math.isfinite(tr)):
        raise FilterError(f"posterior trace became {tr} at t={state.t + dt:.6g}")
    if min_eigenvalue(new / tr) < -PSD_TOL:
        raise FilterError(f"posterior lost positivity at t={state.t + dt:.6g}")
    F = state.pure_propagator
    if F is not None:
        F = F + B @ F
    ll = state.log_likelihood
    if normalize_step:
        new = new / tr
        ll += math.log(tr)
        if F is not None:
            F = F / math.sqrt(tr)
    return FilterState(new, ll, state.t + dt, F)


def step_unnormalized(state: FilterState, system: FilterSystem, dY, dt: float, *,
                      normalize_step: bool = True) -> FilterState:
    """One first-order step of the linear posterior equation.

    ``dY`` holds one increment per observed group (complex for heterodyne
    groups, which are stepped with the complex equation).  With
    ``normalize_step`` the state is rescaled to unit trace and the log of
    the removed factor is added to ``log_likelihood``.  A tracked pure
    propagator is advanced alongside.
    """
    _check_state(state, system)
    return _euler(state, system, _column_coefficients(system, dY), dt, normalize_step)


def step_heterodyne(state: FilterState, system: FilterSystem, dZ, dt: float, *,
                    normalize_step: bool = True) -> FilterState:
    """Step with complex increments; every observed group must be heterodyne."""
    if any(ob.kind != HETERODYNE for ob in system.observed):
        raise OperatorError("step_heterodyne needs heterodyne observation on every group")
    dZ = np.asarray(dZ, dtype=complex)
    return step_unnormalized(state, system, dZ, dt, normalize_step=normalize_step)


def step_pure_propagator(F, system: FilterSystem, dY, dt: float) -> np.ndarray:
    """Advance ``F -> F + (-K dt + sum_i c_i L_i) F`` under complete observation."""
    if not system.complete:
        raise OperatorError("the pure propagator needs every channel observed on its own")
    F = as_operator(F, system.dim, name="propagator")
    coeffs = _column_coefficients(system, dY)
    B = -dt * system.K
    for ob, c in zip(system.observed, coeffs):
        B = B + c * ob.L
    return F + B @ F


def simulate_output(state: FilterState, system: FilterSystem, noise_row, dt: float) -> np.ndarray:
    """Observed increments under the physical measure.

    ``noise_row`` holds one reference increment per noise column.  Homodyne
    groups give ``dY = W tr(rho (L + L^+)) dt + dw``; heterodyne groups give
    ``dZ = W tr(rho L) dt + (dw_+ + i dw_-) / sqrt 2``.
    """
    rho = state.varsigma / np.trace(state.varsigma).real
    noise_row = np.asarray(noise_row, dtype=float).reshape(-1)
    if noise_row.size != system.n_columns:
        raise OperatorError("noise row does not match the observed channels")
    base = system.from_columns(noise_row)
    out = np.array(base, dtype=complex)
    for i, ob in enumerate(system.observed):
        ell = np.trace(ob.L @ rho)
        if ob.kind == HOMODYNE:
            out[i] += 2.0 * ob.weight * ell.real * dt
        else:
            out[i] += ob.weight * ell * dt
    if all(ob.kind == HOMODYNE for ob in system.observed):
        return out.real
    return out


def normalize(state: FilterState) -> tuple[np.ndarray, float]:
    """Return the normalized posterior and the likelihood ratio ``rho_hat``."""
    tr = float(np.trace(state.varsigma).real)
    if not tr > 0:
        raise FilterError("cannot normalize a state with non-positive trace")
    return state.varsigma / tr, tr * math.exp(state.log_likelihood)


@dataclass
class TrajectoryBatch:
    """Recorded output of :func:`integrate` for a batch of trajectories.

    ``increments`` are in noise-column layout; use
    :meth:`FilterSystem.from_columns` for complex heterodyne increments.
    """

    times: np.ndarray
    rho: np.ndarray
    log_likelihood: np.ndarray
    purity: np.ndarray
    expectations: np.ndarray
    increments: np.ndarray

    @property
    def varsigma(self) -> np.ndarray:
        """Final unnormalized states ``exp(log_likelihood) rho``."""
        return np.exp(self.log_likelihood[:, -1])[:, None, None] * self.rho


def integrate(system: FilterSystem, rho0, grid: TimeGrid, noise, *, mode: str = "reference",
              record_every: int = 1, observables: Sequence[np.ndarray] = (),
              first_index: int = 0) -> TrajectoryBatch:
    """Integrate a batch of trajectories with normalized first-order steps.

    ``noise`` has shape ``(n, n_steps, n_columns)``.  In ``"reference"`` and
    ``"replay"`` mode the columns are the observed increments themselves; in
    ``"physical"`` mode they are the innovations and the record is generated
    from the filter's own state.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if record_every < 1 or grid.n_steps % record_every:
        raise ValueError("record_every must divide the number of steps")
    rho0 = as_operator(rho0, system.dim, name="initial state")
    tr = np.trace(rho0).real
    if not tr > 0:
        raise OperatorError("initial state must have positive trace")
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 2:
        noise = noise[None]
    if noise.shape[1:] != (grid.n_steps, system.n_columns):
        raise OperatorError(
            f"noise shape {noise.shape} does not match ({grid.n_steps}, {system.n_columns})")
    obs = np.array([as_operator(o, system.dim, name="observable") for o in observables],
                   dtype=complex).reshape(len(observables), system.dim, system.dim)
    chans = _stepping_channels(system)
    Ld = np.array([math.sqrt(w) * L for L, w in chans], dtype=complex).reshape(
        len(chans), system.dim, system.dim)
    out = kernels.sme_integrate(rho0 / tr, system.K, Ld, system.L_cols, system.weights, noise,
                                grid.dt, mode == "physical", record_every, obs,
                                system.scheme == "kraus")
    failed = np.flatnonzero(out["status"] >= 0)
    if failed.size:
        k = int(failed[0])
        step = int(out["status"][k])
        raise TrajectoryError(first_index + k, f"posterior lost positivity or trace at step {step}")
    loglik = out["loglik"] + math.log(tr)
    return TrajectoryBatch(grid.times[::record_every], out["rho"], loglik, out["purity"],
                           out["expect"], out["increments"])


def run_filter_ensemble(system: FilterSystem, rho0, grid: TimeGrid, n_traj: int,
                        seeds: SeedPolicy, *, mode: str = "reference", record_every: int = 1,
                        observables: Sequence[np.ndarray] = (), workers: int | None = None,
                        chunk_size: int = 256, keep_samples: bool = False) -> EnsembleResult:
    """Monte Carlo ensemble of posterior trajectories.

    Reduced quantities: the final unnormalized state (``varsigma_re``,
    ``varsigma_im``), the likelihood ratio ``rho_hat`` and log-likelihood on
    the recorded grid, purity, and the real and imaginary parts of the
    posterior expectations of ``observables``.
    """
    if mode == "replay":
        raise ValueError("replay needs a given record; use integrate directly")

    def job(ks: range):
        noise = np.stack([sample_wiener_path(grid, system.weights, seeds, k).increments
                          for k in ks])
        batch = integrate(system, rho0, grid, noise, mode=mode, record_every=record_every,
                          observables=observables, first_index=ks.start)
        vs = batch.varsigma
        return {
            "varsigma_re": vs.real,
            "varsigma_im": vs.imag,
            "rho_hat": np.exp(batch.log_likelihood),
            "log_likelihood": batch.log_likelihood,
            "purity": batch.purity,
            "expect_re": batch.expectations.real,
            "expect_im": batch.expectations.imag,
            "Y_total": batch.increments.sum(axis=1),
        }

    return run_ensemble(n_traj, job, workers=workers, chunk_size=chunk_size,
                        keep_samples=keep_samples)


def _g_columns(system: FilterSystem, g) -> np.ndarray:
    if any(ob.kind != HOMODYNE for ob in system.observed):
        raise OperatorError("weighted moments are implemented for homodyne groups only")
    g = np.broadcast_to(np.asarray(g, dtype=float), (len(system.observed),))
    if not np.all(np.isfinite(g)):
        raise ValueError("g must be finite")
    return np.array(g)


def girsanov_weighted_moment(system: FilterSystem, rho0, grid: TimeGrid, g, X,
                             n_traj: int, seeds: SeedPolicy, *, workers: int | None = None,
                             chunk_size: int = 256) -> tuple[float, float]:
    """Monte Carlo estimate of ``E[exp(g.Y_t - g^2 W t / 2) tr(X S_t)]``.

    ``g`` is constant in time, one value per observed group (or a scalar).
    Returns the estimate and its standard error.  The increments are drawn
    under the reference measure.
    """
    gc = _g_columns(system, g)
    X = as_operator(X, system.dim, name="observable")
    t = grid.t1 - grid.t0

    def job(ks: range):
        noise = np.stack([sample_wiener_path(grid, system.weights, seeds, k).increments
                          for k in ks])
        batch = integrate(system, rho0, grid, noise, mode="reference",
                          record_every=grid.n_steps, observables=[X], first_index=ks.start)
        Y = batch.increments.sum(axis=1)
        log_w = Y @ gc - 0.5 * t * np.sum(gc**2 * system.weights)
        val = np.exp(log_w + batch.log_likelihood[:, -1]) * batch.expectations[:, -1, 0].real
        return {"value": val}

    res = run_ensemble(n_traj, job, workers=workers, chunk_size=chunk_size)
    return float(res.mean["value"]), float(res.stderr["value"])


def weighted_moment_ode(system: FilterSystem, rho0, grid: TimeGrid, g, X) -> float:
    """Deterministic counterpart of :func:`girsanov_weighted_moment`.

    Integrates ``d rho_g / dt = L*(rho_g) + sum_i g_i W_i (Lb_i rho_g + rho_g Lb_i^+)``
    with classical RK4 on ``grid`` and returns ``tr(X rho_g(t1))``.
    """
    gc = _g_columns(system, g)
    X = as_operator(X, system.dim, name="observable")
    rho = as_operator(rho0, system.dim, name="initial state").copy()
    M = sum((gi * ob.weight * ob.L for gi, ob in zip(gc, system.observed)),
            np.zeros((system.dim, system.dim), dtype=complex))
    Kd = system.K

    def rhs(r):
        out = -(Kd @ r) - r @ dagger(Kd) + M @ r + r @ dagger(M)
        for L, w in system.dissipative:
            out = out + w * (L @ r @ dagger(L))
        return out

    h = grid.dt
    for _ in range(grid.n_steps):
        k1 = rhs(rho)
        k2 = rhs(rho + 0.5 * h * k1)
        k3 = rhs(rho + 0.5 * h * k2)
        k4 = rhs(rho + h * k3)
        rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(np.trace(X @ rho).real)
