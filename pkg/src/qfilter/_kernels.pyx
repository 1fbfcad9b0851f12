# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stepping kernels.

Same signatures and semantics as :mod:`qfilter._kernels_py`; the loops run
per trajectory with the GIL released, so chunks can be spread over threads.
"""

import numpy as np

from libc.math cimport log, sqrt, isfinite
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport zgemm

ctypedef double complex cplx

cdef double PSD_TOL = 1e-6
# Below this dimension the plain loops beat the BLAS call overhead.
cdef int BLAS_MIN_DIM = 8


# Row-major buffers read as column-major are transposes, so the row-major
# product ``A B`` is the column-major product ``B^T A^T``.
cdef inline void _mul(const cplx* A, const cplx* B, cplx alpha, cplx beta, cplx* out,
                      int d) noexcept nogil:
    """Row-major ``out = alpha A B + beta out``."""
    cdef char n = b'N'
    zgemm(&n, &n, &d, &d, &d, &alpha, <cplx*>B, &d, <cplx*>A, &d, &beta, out, &d)


cdef inline void _mul_adj(const cplx* A, const cplx* B, cplx alpha, cplx beta, cplx* out,
                          int d) noexcept nogil:
    """Row-major ``out = alpha A B^+ + beta out``."""
    cdef char n = b'N'
    cdef char c = b'C'
    zgemm(&c, &n, &d, &d, &d, &alpha, <cplx*>B, &d, <cplx*>A, &d, &beta, out, &d)


cdef inline double cabs2(cplx z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef inline cplx conj(cplx z) noexcept nogil:
    return z.real - 1j * z.imag


cdef bint _psd_ok(cplx* a, cplx* work, int d) noexcept nogil:
    """True when the smallest eigenvalue of Hermitian ``a`` is >= -PSD_TOL."""
    cdef int i, j, k
    cdef double s, aa, cc, bb
    cdef cplx acc
    if d == 1:
        return a[0].real >= -PSD_TOL
    if d == 2:
        aa = a[0].real
        cc = a[3].real
        bb = cabs2(a[1])
        return 0.5 * (aa + cc) - sqrt(0.25 * (aa - cc) * (aa - cc) + bb) >= -PSD_TOL
    # Cholesky of a + tol * I succeeds iff every eigenvalue exceeds -tol.
    for j in range(d):
        s = a[j * d + j].real + PSD_TOL
        for k in range(j):
            s -= cabs2(work[j * d + k])
        if not s > 0.0:
            return False
        s = sqrt(s)
        work[j * d + j] = s
        for i in range(j + 1, d):
            acc = a[i * d + j]
            for k in range(j):
                acc = acc - work[i * d + k] * conj(work[j * d + k])
            work[i * d + j] = acc / s
    return True


cdef void _record(cplx* rho, int d, const cplx* obs, int n_obs, double ll,
                  double* out_ll, double* out_pur, cplx* out_exp) noexcept nogil:
    cdef int a, b, o
    cdef double pur = 0.0
    cdef cplx acc
    for a in range(d * d):
        pur += cabs2(rho[a])
    out_ll[0] = ll
    out_pur[0] = pur
    for o in range(n_obs):
        acc = 0.0
        for a in range(d):
            for b in range(d):
                acc = acc + obs[o * d * d + a * d + b] * rho[b * d + a]
        out_exp[o] = acc


cdef long _run_one(const cplx* rho0, const cplx* K, const cplx* Ld, int n_d,
                   const cplx* Lo, const double* lam, int m,
                   const double* noise, int n_steps, double dt, bint physical, bint quadratic,
                   int record_every, const cplx* obs, int n_obs,
                   cplx* rho, cplx* B, cplx* T, cplx* new, cplx* tmp, cplx* work,
                   double* inc, double* rec_ll, double* rec_pur, cplx* rec_exp,
                   int d) noexcept nogil:
    cdef int s, i, j, a, b, c, slot
    cdef int dd = d * d
    cdef double y, tr, ll = 0.0
    cdef cplx acc
    cdef bint blas = d >= BLAS_MIN_DIM
    memcpy(rho, rho0, dd * sizeof(cplx))
    _record(rho, d, obs, n_obs, ll, rec_ll, rec_pur, rec_exp)
    for s in range(n_steps):
        for a in range(dd):
            B[a] = -dt * K[a]
        for i in range(m):
            y = noise[s * m + i]
            if physical:
                acc = 0.0
                for a in range(d):
                    for b in range(d):
                        acc = acc + Lo[i * dd + a * d + b] * rho[b * d + a]
                y += 2.0 * dt * lam[i] * acc.real
            inc[s * m + i] = y
            for a in range(dd):
                B[a] = B[a] + y * Lo[i * dd + a]
        # T = B rho
        if blas:
            _mul(B, rho, 1.0, 0.0, T, d)
        else:
            for a in range(d):
                for c in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc = acc + B[a * d + b] * rho[b * d + c]
                    T[a * d + c] = acc
        for a in range(d):
            for c in range(d):
                new[a * d + c] = rho[a * d + c] + T[a * d + c] + conj(T[c * d + a])
        if quadratic:
            # B rho B^+ = T B^+
            if blas:
                _mul_adj(T, B, 1.0, 1.0, new, d)
            else:
                for a in range(d):
                    for c in range(d):
                        acc = 0.0
                        for b in range(d):
                            acc = acc + T[a * d + b] * conj(B[c * d + b])
                        new[a * d + c] = new[a * d + c] + acc
        for j in range(n_d):
            if blas:
                _mul(Ld + j * dd, rho, 1.0, 0.0, tmp, d)
                _mul_adj(tmp, Ld + j * dd, dt, 1.0, new, d)
                continue
            for a in range(d):
                for c in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc = acc + Ld[j * dd + a * d + b] * rho[b * d + c]
                    tmp[a * d + c] = acc
            for a in range(d):
                for c in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc = acc + tmp[a * d + b] * conj(Ld[j * dd + c * d + b])
                    new[a * d + c] = new[a * d + c] + dt * acc
        tr = 0.0
        for a in range(d):
            tr += new[a * d + a].real
        if not (tr > 0.0 and isfinite(tr)):
            return s
        for a in range(d):
            for c in range(a, d):
                acc = 0.5 * (new[a * d + c] + conj(new[c * d + a])) / tr
                if not (isfinite(acc.real) and isfinite(acc.imag)):
                    return s
                rho[a * d + c] = acc
                rho[c * d + a] = conj(acc)
        if not _psd_ok(rho, work, d):
            return s
        ll += log(tr)
        if (s + 1) % record_every == 0:
            slot = (s + 1) // record_every
            _record(rho, d, obs, n_obs, ll, rec_ll + slot, rec_pur + slot,
                    rec_exp + slot * n_obs)
    return -1


def sme_integrate(rho0, K, Ldiss, Lobs, lam, noise, double dt, physical,
                  int record_every, observables, quadratic=True):
    """First-order integration of the linear filtering equation.

    See :func:`qfilter._kernels_py.sme_integrate` for the argument layout.
    """
    cdef cplx[:, ::1] K_v = np.ascontiguousarray(K, dtype=complex)
    cdef int d = K_v.shape[0]
    cdef cplx[:, ::1] rho0_v = np.ascontiguousarray(rho0, dtype=complex).reshape(d, d)
    cdef cplx[:, :, ::1] Ld_v = np.ascontiguousarray(Ldiss, dtype=complex).reshape(-1, d, d)
    cdef cplx[:, :, ::1] Lo_v = np.ascontiguousarray(Lobs, dtype=complex).reshape(-1, d, d)
    cdef double[::1] lam_v = np.ascontiguousarray(lam, dtype=float).reshape(-1)
    noise_arr = np.ascontiguousarray(noise, dtype=float)
    cdef double[:, :, ::1] noise_v = noise_arr
    cdef cplx[:, :, ::1] obs_v = np.ascontiguousarray(observables, dtype=complex).reshape(-1, d, d)
    cdef int N = noise_v.shape[0]
    cdef int n_steps = noise_v.shape[1]
    cdef int m = noise_v.shape[2]
    cdef int n_d = Ld_v.shape[0]
    cdef int n_obs = obs_v.shape[0]
    cdef int n_rec = n_steps // record_every + 1
    cdef bint phys = bool(physical)
    cdef bint quad = bool(quadratic)
    if Lo_v.shape[0] != m or lam_v.shape[0] != m:
        raise ValueError("observed channels do not match the noise columns")

    rho_out = np.zeros((N, d, d), dtype=complex)
    ll_out = np.zeros((N, n_rec))
    pur_out = np.zeros((N, n_rec))
    exp_out = np.zeros((N, n_rec, n_obs), dtype=complex)
    inc_out = np.zeros((N, n_steps, m))
    status = np.full(N, -1, dtype=np.int64)
    cdef cplx[:, :, ::1] rho_o = rho_out
    cdef double[:, ::1] ll_o = ll_out
    cdef double[:, ::1] pur_o = pur_out
    cdef cplx[:, :, ::1] exp_o = exp_out
    cdef double[:, :, ::1] inc_o = inc_out
    cdef long[::1] st_o = status

    work_arr = np.zeros((5, d * d), dtype=complex)
    cdef cplx[:, ::1] w = work_arr
    cdef cplx* obs_ptr = &obs_v[0, 0, 0] if n_obs else NULL
    cdef cplx* ld_ptr = &Ld_v[0, 0, 0] if n_d else NULL
    cdef cplx* lo_ptr = &Lo_v[0, 0, 0] if m else NULL
    cdef double* lam_ptr = &lam_v[0] if m else NULL
    cdef double* noise_ptr
    cdef double* inc_ptr
    cdef cplx* exp_ptr
    cdef cplx dummy[1]
    cdef int n
    with nogil:
        for n in range(N):
            noise_ptr = &noise_v[n, 0, 0] if n_steps * m else NULL
            inc_ptr = &inc_o[n, 0, 0] if n_steps * m else NULL
            exp_ptr = &exp_o[n, 0, 0] if n_obs else dummy
            st_o[n] = _run_one(&rho0_v[0, 0], &K_v[0, 0], ld_ptr, n_d, lo_ptr, lam_ptr, m,
                               noise_ptr, n_steps, dt, phys, quad, record_every, obs_ptr, n_obs,
                               &rho_o[n, 0, 0], &w[0, 0], &w[1, 0], &w[2, 0], &w[3, 0],
                               &w[4, 0], inc_ptr, &ll_o[n, 0], &pur_o[n, 0], exp_ptr, d)
    return {"rho": rho_out, "loglik": ll_out, "purity": pur_out, "expect": exp_out,
            "increments": inc_out, "status": status}


cdef void _riccati_rhs(const double* P, const double* A, const double* D,
                       const double* X2, const double* SY, const double* lam,
                       int d, int m, double* G, double* out) noexcept nogil:
    cdef int a, b, c, k
    cdef double acc
    for a in range(d):
        for k in range(m):
            acc = SY[a * m + k]
            for b in range(d):
                acc += P[a * d + b] * X2[b * m + k]
            G[a * m + k] = acc
    for a in range(d):
        for c in range(d):
            acc = D[a * d + c]
            for b in range(d):
                acc += A[a * d + b] * P[b * d + c] + P[a * d + b] * A[c * d + b]
            for k in range(m):
                acc -= lam[k] * G[a * m + k] * G[c * m + k]
            out[a * d + c] = acc


def riccati_rk4(P0, A, D, X2, SY, lam, double dt, int n_steps, int record_every):
    """Classical RK4 for the filter Riccati equation; see the numpy version."""
    cdef double[:, ::1] P_v = np.array(P0, dtype=float, order="C")
    cdef int d = P_v.shape[0]
    cdef double[:, ::1] A_v = np.ascontiguousarray(A, dtype=float)
    cdef double[:, ::1] D_v = np.ascontiguousarray(D, dtype=float)
    X2_arr = np.ascontiguousarray(X2, dtype=float).reshape(d, -1)
    cdef double[:, ::1] X2_v = X2_arr
    cdef int m = X2_v.shape[1]
    cdef double[:, ::1] SY_v = np.ascontiguousarray(SY, dtype=float).reshape(d, m)
    cdef double[::1] lam_v = np.ascontiguousarray(lam, dtype=float).reshape(m)
    cdef int n_rec = n_steps // record_every + 1
    out = np.empty((n_rec, d, d))
    cdef double[:, :, ::1] out_v = out
    buf = np.zeros((6, d * d))
    gbuf = np.zeros(max(d * m, 1))
    cdef double[:, ::1] bv = buf
    cdef double[::1] gv = gbuf
    cdef double* P = &P_v[0, 0]
    cdef double* k1 = &bv[0, 0]
    cdef double* k2 = &bv[1, 0]
    cdef double* k3 = &bv[2, 0]
    cdef double* k4 = &bv[3, 0]
    cdef double* tmp = &bv[4, 0]
    cdef double* nxt = &bv[5, 0]
    cdef double* x2p = &X2_v[0, 0] if m else NULL
    cdef double* syp = &SY_v[0, 0] if m else NULL
    cdef double* lamp = &lam_v[0] if m else NULL
    cdef double h2 = 0.5 * dt
    cdef double h6 = dt / 6.0
    cdef int s, a, c, dd = d * d
    with nogil:
        memcpy(&out_v[0, 0, 0], P, dd * sizeof(double))
        for s in range(n_steps):
            _riccati_rhs(P, &A_v[0, 0], &D_v[0, 0], x2p, syp, lamp, d, m, &gv[0], k1)
            for a in range(dd):
                tmp[a] = P[a] + h2 * k1[a]
            _riccati_rhs(tmp, &A_v[0, 0], &D_v[0, 0], x2p, syp, lamp, d, m, &gv[0], k2)
            for a in range(dd):
                tmp[a] = P[a] + h2 * k2[a]
            _riccati_rhs(tmp, &A_v[0, 0], &D_v[0, 0], x2p, syp, lamp, d, m, &gv[0], k3)
            for a in range(dd):
                tmp[a] = P[a] + dt * k3[a]
            _riccati_rhs(tmp, &A_v[0, 0], &D_v[0, 0], x2p, syp, lamp, d, m, &gv[0], k4)
            for a in range(dd):
                nxt[a] = P[a] + h6 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])
            for a in range(d):
                for c in range(d):
                    P[a * d + c] = 0.5 * (nxt[a * d + c] + nxt[c * d + a])
            if (s + 1) % record_every == 0:
                memcpy(&out_v[(s + 1) // record_every, 0, 0], P, dd * sizeof(double))
    return out
