"""Pure-numpy backend for the hot per-iteration kernels.

All functions operate on one tone slice and take an explicit index range
over their natural axis (streams, users, or BSs), writing results into
preallocated output arrays.  Worker-based parallelism chunks those ranges;
because every output element depends only on the inputs (never on other
chunks' outputs), results are bitwise independent of the chunking.

Index structures (built by wmmse.StreamProblem):
  stream_user[k]  user of stream k
  sptr[k]:sptr[k+1]  rows of the block arrays belonging to stream k
  block_bs[b]     BS of block b
  uptr/uidx       CSR of stream indices grouped by user
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def effective_channels(H, V, sptr, block_bs, G, k0, k1):
    """G[k, i] = sum over blocks b of stream k of H[bs_b, i] @ V[b].

    H: (Q, I, N, M); V: (B, M); G out: (K, I, N) complex.
    """
    b0, b1 = sptr[k0], sptr[k1]
    rows = np.einsum("binm,bm->bin", H[block_bs[b0:b1]], V[b0:b1])
    if b1 - b0 == k1 - k0:  # every stream has exactly one block
        G[k0:k1] = rows
    else:
        G[k0:k1] = 0.0
        own = np.repeat(np.arange(k0, k1) - k0, np.diff(sptr[k0 : k1 + 1]))
        np.add.at(G[k0:k1], own, rows)


def receivers_mse(G, uptr, uidx, noise, U, E, i0, i1):
    """MMSE receivers and their MSEs for the streams of users [i0, i1).

    u_k = (sigma_i^2 I + sum_j g_j g_j^H)^{-1} g_k and e_k = 1 - Re(g_k^H u_k),
    evaluated at user i_k.  G: (K, I, N); U out: (K, N); E out: (K,).
    """
    n = G.shape[2]
    Gs = G[:, i0:i1, :]
    C = np.einsum("kin,kim->inm", Gs, Gs.conj())
    C[:, np.arange(n), np.arange(n)] += noise[i0:i1, None]
    counts = np.diff(uptr[i0 : i1 + 1])
    if np.all(counts == 1):  # one stream per user: batched solve
        ks = uidx[uptr[i0] : uptr[i1]]
        rhs = G[ks, i0 + np.arange(i1 - i0), :]
        sol = np.linalg.solve(C, rhs[:, :, None])[:, :, 0]
        U[ks] = sol
        E[ks] = 1.0 - np.real(np.einsum("kn,kn->k", rhs.conj(), sol))
        return
    for i in range(i0, i1):
        ks = uidx[uptr[i] : uptr[i + 1]]
        if len(ks) == 0:
            continue
        rhs = G[ks, i, :].T
        sol = np.linalg.solve(C[i - i0], rhs)
        U[ks] = sol.T
        E[ks] = 1.0 - np.real(np.sum(G[ks, i, :].conj() * sol.T, axis=1))


def general_mse(G, U, stream_user, noise, E, k0, k1):
    """MSE of streams [k0, k1) at arbitrary receivers U.

    e_k = |u_k^H g_k(i_k) - 1|^2 + sum_{j != k} |u_k^H g_j(i_k)|^2
          + sigma_{i_k}^2 ||u_k||^2.
    """
    users = stream_user[k0:k1]
    Gi = G[:, users, :]  # (K, nk, N)
    T = np.einsum("kn,jkn->jk", U[k0:k1].conj(), Gi)
    own = T[np.arange(k0, k1), np.arange(k1 - k0)]
    total = np.sum(np.abs(T) ** 2, axis=0)
    unorm = np.real(np.einsum("kn,kn->k", U[k0:k1].conj(), U[k0:k1]))
    E[k0:k1] = np.abs(own - 1.0) ** 2 + (total - np.abs(own) ** 2) + noise[users] * unorm


def precoder_quadratics(H, U, weff, stream_user, A, X, q0, q1):
    """Per-BS quadratic data of the precoder subproblem for BSs [q0, q1).

    X[q, k] = H[q, i_k]^H u_k and A[q] = sum_k weff_k X[q, k] X[q, k]^H.
    A out: (Q, M, M); X out: (Q, K, M).
    """
    Hs = H[q0:q1][:, stream_user]  # (nq, K, N, M)
    X[q0:q1] = np.einsum("qknm,kn->qkm", Hs.conj(), U)
    A[q0:q1] = np.einsum("k,qkm,qkl->qml", weff, X[q0:q1], X[q0:q1].conj())
