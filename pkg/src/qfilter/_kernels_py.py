"""Pure numpy implementations of the stepping kernels.

These are the reference versions; the compiled module ``_kernels`` exposes
the same functions with identical signatures.  The numpy versions step a
whole batch of trajectories at once.
"""

from __future__ import annotations

import numpy as np

PSD_TOL = 1e-6


def _min_eig(rho: np.ndarray) -> np.ndarray:
    d = rho.shape[-1]
    if d == 1:
        return rho[:, 0, 0].real
    if d == 2:
        a = rho[:, 0, 0].real
        c = rho[:, 1, 1].real
        b = np.abs(rho[:, 0, 1])
        return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b**2)
    return np.linalg.eigvalsh(rho)[:, 0]


def sme_integrate(rho0, K, Ldiss, Lobs, lam, noise, dt, physical, record_every, observables,
                  quadratic=True):
    """First-order integration of the linear filtering equation.

    Each step maps ``rho -> rho + B rho + rho B^+ [+ B rho B^+] + dt sum_j Lj rho Lj^+``
    with ``B = -K dt + sum_i dY_i L_i``, then renormalizes.  With
    ``quadratic`` the bracketed term is kept, which makes the step the
    positive map ``M rho M^+`` (``M = 1 + B``) plus dissipators; ``Ldiss``
    must then hold only the residual channels not accounted for by ``M``.

    Parameters
    ----------
    rho0 : (d, d) complex
        Normalized initial state shared by all trajectories.
    K : (d, d) complex
        ``i H + 1/2 sum_j w_j L_j^+ L_j`` over every dissipative channel.
    Ldiss : (n_d, d, d) complex
        Dissipative channels pre-scaled by ``sqrt(w_j)``.
    Lobs : (m, d, d) complex
        Observed (averaged) coupling operators, one per noise column.
    lam : (m,) float
        Weights of the observed channels.
    noise : (n, n_steps, m) float
        Reference-measure increments, column ``i`` of variance ``lam[i] dt``.
    physical : bool
        Add the drift ``lam_i tr(rho (L_i + L_i^+)) dt`` to every increment.
    record_every : int
        Stride between recorded grid points.
    observables : (n_o, d, d) complex
    quadratic : bool
        Include ``B rho B^+`` (Kraus form) instead of the plain Euler step.

    Returns
    -------
    dict with ``rho`` (n, d, d), ``loglik`` (n, n_rec), ``purity`` (n, n_rec),
    ``expect`` (n, n_rec, n_o), ``increments`` (n, n_steps, m) and
    ``status`` (n,) holding -1 or the first failing step.
    """
    noise = np.asarray(noise, dtype=float)
    n, n_steps, m = noise.shape
    d = K.shape[0]
    n_rec = n_steps // record_every + 1
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (n, d, d)).copy()
    loglik = np.zeros(n)
    status = np.full(n, -1, dtype=np.int64)
    rec_ll = np.zeros((n, n_rec))
    rec_pur = np.zeros((n, n_rec))
    rec_exp = np.zeros((n, n_rec, observables.shape[0]), dtype=complex)
    increments = np.empty_like(noise)
    Ldiss_h = np.conj(np.swapaxes(Ldiss, -1, -2))

    def record(slot):
        rec_ll[:, slot] = loglik
        rec_pur[:, slot] = np.einsum("nab,nab->n", rho, np.conj(rho)).real
        rec_exp[:, slot, :] = np.einsum("oab,nba->no", observables, rho)

    record(0)
    for s in range(n_steps):
        dy = noise[:, s, :]
        if physical and m:
            ell = np.einsum("iab,nba->ni", Lobs, rho)
            dy = dy + 2.0 * dt * lam * ell.real
        increments[:, s, :] = dy
        B = np.einsum("ni,iab->nab", dy, Lobs) - dt * K
        T = B @ rho
        new = rho + T + np.conj(np.swapaxes(T, -1, -2))
        if quadratic:
            new += T @ np.conj(np.swapaxes(B, -1, -2))
        if Ldiss.shape[0]:
            new += dt * np.einsum("jab,nbc,jcd->nad", Ldiss, rho, Ldiss_h, optimize=True)
        tr = np.einsum("naa->n", new).real
        bad = ~(tr > 0) | ~np.isfinite(tr)
        tr_safe = np.where(bad, 1.0, tr)
        new = new / tr_safe[:, None, None]
        new = 0.5 * (new + np.conj(np.swapaxes(new, -1, -2)))
        bad |= ~np.all(np.isfinite(new), axis=(1, 2))
        if not np.all(bad):
            ok = ~bad
            bad[ok] |= _min_eig(new[ok]) < -PSD_TOL
        fresh = bad & (status < 0)
        status[fresh] = s
        keep = status < 0
        rho = np.where(keep[:, None, None], new, rho)
        loglik = np.where(keep, loglik + np.log(tr_safe), loglik)
        if (s + 1) % record_every == 0:
            record((s + 1) // record_every)
    return {"rho": rho, "loglik": rec_ll, "purity": rec_pur, "expect": rec_exp,
            "increments": increments, "status": status}


def riccati_rk4(P0, A, D, X2, SY, lam, dt, n_steps, record_every):
    """Classical RK4 for ``P' = A P + P A^T + D - G diag(lam) G^T``.

    ``G = P X2 + SY`` collects the gain vectors of the homodyne-equivalent
    observed channels column by column.  Returns the recorded path with
    shape ``(n_steps // record_every + 1, d, d)``.
    """
    P = np.array(P0, dtype=float)
    A = np.asarray(A, dtype=float)
    D = np.asarray(D, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    SY = np.asarray(SY, dtype=float)
    lam = np.asarray(lam, dtype=float)
    At = A.T.copy()

    def rhs(p):
        G = p @ X2 + SY
        return A @ p + p @ At + D - (G * lam) @ G.T

    n_rec = n_steps // record_every + 1
    out = np.empty((n_rec,) + P.shape)
    out[0] = P
    h2 = 0.5 * dt
    for s in range(n_steps):
        k1 = rhs(P)
        k2 = rhs(P + h2 * k1)
        k3 = rhs(P + h2 * k2)
        k4 = rhs(P + dt * k3)
        P = P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = 0.5 * (P + P.T)
        if (s + 1) % record_every == 0:
            out[(s + 1) // record_every] = P
    return out
