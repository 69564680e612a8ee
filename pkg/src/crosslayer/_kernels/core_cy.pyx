# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backend for the hot per-iteration kernels.

Same function-by-function contract as core_py: one tone slice per call, an
explicit index range over the natural axis, preallocated outputs.  Loop
bodies mirror the reference backend's arithmetic per output element.
"""

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_lapack cimport zpotrf, zpotrs

BACKEND = "cython"

ctypedef double complex cplx
ctypedef cnp.int64_t idx_t


def effective_channels(const cplx[:, :, :, ::1] H, const cplx[:, ::1] V,
                       const idx_t[::1] sptr, const idx_t[::1] block_bs,
                       cplx[:, :, ::1] G, Py_ssize_t k0, Py_ssize_t k1):
    cdef Py_ssize_t I = G.shape[1], N = G.shape[2], M = H.shape[3]
    cdef Py_ssize_t k, b, i, n, m, q
    cdef cplx acc
    with nogil:
        for k in range(k0, k1):
            for i in range(I):
                for n in range(N):
                    G[k, i, n] = 0
            for b in range(sptr[k], sptr[k + 1]):
                q = block_bs[b]
                for i in range(I):
                    for n in range(N):
                        acc = 0
                        for m in range(M):
                            acc = acc + H[q, i, n, m] * V[b, m]
                        G[k, i, n] = G[k, i, n] + acc


def receivers_mse(const cplx[:, :, ::1] G, const idx_t[::1] uptr, const idx_t[::1] uidx,
                  const double[::1] noise, cplx[:, ::1] U, double[::1] E,
                  Py_ssize_t i0, Py_ssize_t i1):
    cdef Py_ssize_t K = G.shape[0], N = G.shape[2]
    cdef Py_ssize_t i, j, k, a, b, cnt
    cdef Py_ssize_t nrhs_max = 0
    for i in range(i0, i1):
        if uptr[i + 1] - uptr[i] > nrhs_max:
            nrhs_max = uptr[i + 1] - uptr[i]
    if nrhs_max == 0:
        return
    # column-major scratch for LAPACK
    Cbuf = np.empty(N * N, dtype=np.complex128)
    Rbuf = np.empty(N * nrhs_max, dtype=np.complex128)
    cdef cplx[::1] Cv = Cbuf
    cdef cplx[::1] Rv = Rbuf
    cdef int n_int = <int> N, nrhs = 0, info = 0
    cdef char lo = b'L'
    cdef cplx acc
    cdef double ereal
    with nogil:
        for i in range(i0, i1):
            cnt = uptr[i + 1] - uptr[i]
            if cnt == 0:
                continue
            for b in range(N):
                for a in range(N):
                    acc = 0
                    for k in range(K):
                        acc = acc + G[k, i, a] * G[k, i, b].conjugate()
                    Cv[b * N + a] = acc
                Cv[b * N + b] = Cv[b * N + b] + noise[i]
            for j in range(cnt):
                k = uidx[uptr[i] + j]
                for a in range(N):
                    Rv[j * N + a] = G[k, i, a]
            nrhs = <int> cnt
            zpotrf(&lo, &n_int, &Cv[0], &n_int, &info)
            if info != 0:
                with gil:
                    raise np.linalg.LinAlgError("receiver covariance not positive definite")
            zpotrs(&lo, &n_int, &nrhs, &Cv[0], &n_int, &Rv[0], &n_int, &info)
            for j in range(cnt):
                k = uidx[uptr[i] + j]
                ereal = 0
                for a in range(N):
                    U[k, a] = Rv[j * N + a]
                    acc = G[k, i, a].conjugate() * Rv[j * N + a]
                    ereal = ereal + acc.real
                E[k] = 1.0 - ereal


def general_mse(const cplx[:, :, ::1] G, const cplx[:, ::1] U, const idx_t[::1] stream_user,
                const double[::1] noise, double[::1] E, Py_ssize_t k0, Py_ssize_t k1):
    cdef Py_ssize_t K = G.shape[0], N = G.shape[2]
    cdef Py_ssize_t k, j, n, iu
    cdef cplx t, own
    cdef double total, unorm
    with nogil:
        for k in range(k0, k1):
            iu = stream_user[k]
            total = 0
            own = 0
            for j in range(K):
                t = 0
                for n in range(N):
                    t = t + U[k, n].conjugate() * G[j, iu, n]
                if j == k:
                    own = t
                total = total + t.real * t.real + t.imag * t.imag
            unorm = 0
            for n in range(N):
                unorm = unorm + U[k, n].real * U[k, n].real + U[k, n].imag * U[k, n].imag
            E[k] = ((own.real - 1.0) * (own.real - 1.0) + own.imag * own.imag
                    + (total - (own.real * own.real + own.imag * own.imag))
                    + noise[iu] * unorm)


def precoder_quadratics(const cplx[:, :, :, ::1] H, const cplx[:, ::1] U, const double[::1] weff,
                        const idx_t[::1] stream_user, cplx[:, :, ::1] A, cplx[:, :, ::1] X,
                        Py_ssize_t q0, Py_ssize_t q1):
    cdef Py_ssize_t K = X.shape[1], M = X.shape[2], N = H.shape[2]
    cdef Py_ssize_t q, k, m, l, n, iu
    cdef cplx acc, xm
    cdef double w
    with nogil:
        for q in range(q0, q1):
            for m in range(M):
                for l in range(M):
                    A[q, m, l] = 0
            for k in range(K):
                iu = stream_user[k]
                for m in range(M):
                    acc = 0
                    for n in range(N):
                        acc = acc + H[q, iu, n, m].conjugate() * U[k, n]
                    X[q, k, m] = acc
                w = weff[k]
                if w != 0:
                    for m in range(M):
                        xm = X[q, k, m] * w
                        for l in range(M):
                            A[q, m, l] = A[q, m, l] + xm * X[q, k, l].conjugate()
