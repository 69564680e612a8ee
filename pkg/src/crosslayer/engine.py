"""Internal single-beam WMMSE engine.

Every precoding-family solver in the package (sum-utility precoding, joint
scheduling, BS assignment, sparse clustering, stochastic precoding) is an
outer loop around the same three phases on a collection of "streams":

  stream k   one beam intended for user i_k, with receiver u_k, MSE e_k and
             weight w_k; its transmit side is one or more "blocks" (q, v),
             one M-vector per serving BS q per tone.

Plain precoding uses one stream per user with one block (its serving BS);
CoMP clustering gives a stream one block per candidate BS; BS assignment
creates one single-block stream per candidate (user, BS) pair.

Phases (u, w, v) each minimize the weighted-MMSE surrogate
sum_k scale_k (w_k e_k - log w_k) over their own variables, so the
surrogate never increases across any sub-step.  Within a phase, per-index
updates depend only on the previous phase's state; worker parallelism
chunks the index range and is bitwise reproducible for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._kernels import core
from .errors import NumericError
from .rng import rng_for

__all__ = ["StreamProblem", "power_constrained_solve", "run_phases"]

_E_FLOOR = 1e-300


def _ranges(n: int, workers: int):
    w = max(1, min(workers, n))
    if w == 1:
        return [(0, n)]
    bounds = np.linspace(0, n, w + 1).astype(int)
    return [(int(bounds[j]), int(bounds[j + 1])) for j in range(w) if bounds[j] < bounds[j + 1]]


class StreamProblem:
    """State and phase updates for one slot of a stream/block problem."""

    def __init__(self, instance, stream_user, block_stream, block_bs, *, slot=0, scale=None):
        stream_user = np.asarray(stream_user, dtype=np.int64)
        block_stream = np.asarray(block_stream, dtype=np.int64)
        block_bs = np.asarray(block_bs, dtype=np.int64)
        order = np.lexsort((block_bs, block_stream))
        block_stream = block_stream[order]
        block_bs = block_bs[order]

        self.instance = instance
        self.slot = slot
        # per-tone contiguous channel slices (F, Q, I, N, M)
        self.H = np.ascontiguousarray(instance.channels[:, :, :, slot].transpose(2, 0, 1, 3, 4))
        self.noise = instance.noise_power
        self.pbar = instance.power_budget

        self.K = len(stream_user)
        self.B = len(block_stream)
        self.F = self.H.shape[0]
        self.Q = self.H.shape[1]
        self.I = self.H.shape[2]
        self.N = self.H.shape[3]
        self.M = self.H.shape[4]

        self.stream_user = stream_user
        self.block_stream = block_stream
        self.block_bs = block_bs
        self.sptr = np.concatenate(([0], np.cumsum(np.bincount(block_stream, minlength=self.K))))
        self.single_block = bool(np.all(np.diff(self.sptr) == 1))
        uorder = np.argsort(stream_user, kind="stable")
        self.uidx = uorder.astype(np.int64)
        self.uptr = np.concatenate(
            ([0], np.cumsum(np.bincount(stream_user[uorder], minlength=self.I)))
        )
        self.bs_blocks = [np.flatnonzero(block_bs == q) for q in range(self.Q)]

        self.V = np.zeros((self.B, self.F, self.M), dtype=np.complex128)
        self.U = np.zeros((self.K, self.F, self.N), dtype=np.complex128)
        self.E = np.ones((self.K, self.F))
        self.W = np.ones((self.K, self.F))
        self.scale = np.ones(self.K) if scale is None else np.asarray(scale, dtype=float)
        self.mu = np.zeros(self.Q)

        self._G = np.zeros((self.F, self.K, self.I, self.N), dtype=np.complex128)
        self._G_fresh = False
        self._A = np.zeros((self.F, self.Q, self.M, self.M), dtype=np.complex128)
        self._X = np.zeros((self.F, self.Q, self.K, self.M), dtype=np.complex128)
        self._executor = None

    # -- construction -----------------------------------------------------

    @classmethod
    def for_serving_sets(cls, instance, serving_sets=None, slot=0):
        """One stream per user; one block per serving BS of that user."""
        if serving_sets is None:
            serving_sets = [(int(q),) for q in instance.serving_bs]
        users, bss = [], []
        for i, bs_set in enumerate(serving_sets):
            for q in sorted(set(int(q) for q in bs_set)):
                users.append(i)
                bss.append(q)
        return cls(instance, np.arange(instance.num_users), users, bss, slot=slot)

    @classmethod
    def for_pairs(cls, instance, pairs, slot=0):
        """One single-block stream per (user, bs) candidate pair."""
        users = [i for i, _ in pairs]
        bss = [q for _, q in pairs]
        return cls(instance, users, np.arange(len(pairs)), bss, slot=slot)

    # -- worker pool --------------------------------------------------------

    def _map(self, fn, n, workers):
        ranges = _ranges(n, workers)
        if len(ranges) == 1:
            fn(*ranges[0])
            return
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=len(ranges))
        list(self._executor.map(lambda r: fn(*r), ranges))

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=False)
            self._executor = None

    # -- state helpers ------------------------------------------------------

    def init_precoders(self, seed):
        """Gaussian directions, then exact per-BS power: sum of block norms
        at BS q equals pbar_q."""
        rng = rng_for(seed, "precoder-init")
        raw = rng.standard_normal((self.B, self.F, self.M)) + 1j * rng.standard_normal(
            (self.B, self.F, self.M)
        )
        self.V[:] = raw
        for q in range(self.Q):
            rows = self.bs_blocks[q]
            if len(rows) == 0:
                continue
            p = np.sum(np.abs(self.V[rows]) ** 2)
            self.V[rows] *= np.sqrt(self.pbar[q] / p)
        self._G_fresh = False

    def init_precoders_random_power(self, seed):
        """Gaussian directions with a uniformly random per-BS power level in
        (0, pbar].  Used by multi-slot scheduling: equal-power starts keep
        symmetric instances pinned at symmetric (all-active) stationary
        points, so slot symmetry must be broken at the init."""
        rng = rng_for(seed, "precoder-init-sched", self.slot)
        raw = rng.standard_normal((self.B, self.F, self.M)) + 1j * rng.standard_normal(
            (self.B, self.F, self.M)
        )
        self.V[:] = raw
        for q in range(self.Q):
            rows = self.bs_blocks[q]
            if len(rows) == 0:
                continue
            p = np.sum(np.abs(self.V[rows]) ** 2)
            self.V[rows] *= np.sqrt(rng.uniform() * self.pbar[q] / p)
        self._G_fresh = False

    def set_precoders(self, V):
        self.V[:] = V
        self._G_fresh = False

    def bs_power(self) -> np.ndarray:
        p = np.zeros(self.Q)
        for q in range(self.Q):
            rows = self.bs_blocks[q]
            if len(rows):
                p[q] = np.sum(np.abs(self.V[rows]) ** 2)
        return p

    def max_power_violation(self) -> float:
        p = self.bs_power()
        return float(np.max(np.maximum(0.0, (p - self.pbar) / self.pbar)))

    # -- phases -------------------------------------------------------------

    def refresh_G(self, workers=1):
        if self._G_fresh:
            return
        for f in range(self.F):
            Hf, Vf, Gf = self.H[f], np.ascontiguousarray(self.V[:, f]), self._G[f]
            self._map(
                lambda k0, k1, Hf=Hf, Vf=Vf, Gf=Gf: core.effective_channels(
                    Hf, Vf, self.sptr, self.block_bs, Gf, k0, k1
                ),
                self.K,
                workers,
            )
        self._G_fresh = True

    def update_receivers(self, workers=1):
        """MMSE receivers; E becomes the per-stream MMSE."""
        self.refresh_G(workers)
        for f in range(self.F):
            Gf, Uf, Ef = self._G[f], np.empty((self.K, self.N), np.complex128), np.empty(self.K)
            self._map(
                lambda i0, i1, Gf=Gf, Uf=Uf, Ef=Ef: core.receivers_mse(
                    Gf, self.uptr, self.uidx, self.noise, Uf, Ef, i0, i1
                ),
                self.I,
                workers,
            )
            self.U[:, f] = Uf
            self.E[:, f] = np.maximum(Ef, _E_FLOOR)

    def general_mse(self, workers=1) -> np.ndarray:
        """MSE at the current receivers for the current V (any receivers)."""
        self.refresh_G(workers)
        out = np.empty((self.K, self.F))
        for f in range(self.F):
            Gf, Uf, Ef = self._G[f], np.ascontiguousarray(self.U[:, f]), np.empty(self.K)
            self._map(
                lambda k0, k1, Gf=Gf, Uf=Uf, Ef=Ef: core.general_mse(
                    Gf, Uf, self.stream_user, self.noise, Ef, k0, k1
                ),
                self.K,
                workers,
            )
            out[:, f] = np.maximum(Ef, _E_FLOOR)
        return out

    def update_weights(self):
        self.W = 1.0 / self.E

    def weff(self) -> np.ndarray:
        return self.scale[:, None] * self.W

    def quadratics(self, workers=1):
        """A[q] and X[q, k] per tone from the current receivers/weights."""
        weff = self.weff()
        for f in range(self.F):
            Hf = self.H[f]
            Uf = np.ascontiguousarray(self.U[:, f])
            wf = np.ascontiguousarray(weff[:, f])
            Af, Xf = self._A[f], self._X[f]
            self._map(
                lambda q0, q1, Hf=Hf, Uf=Uf, wf=wf, Af=Af, Xf=Xf: core.precoder_quadratics(
                    Hf, Uf, wf, self.stream_user, Af, Xf, q0, q1
                ),
                self.Q,
                workers,
            )
        return self._A, self._X

    def update_precoders(self, workers=1):
        """Exact v-phase (single-block streams): per BS, the joint KKT solve
        v_b = (A_q + mu_q I)^{-1} b_b with mu_q from bisection on the power."""
        A, X = self.quadratics(workers)
        weff = self.weff()

        def solve_bs(q0, q1):
            for q in range(q0, q1):
                rows = self.bs_blocks[q]
                if len(rows) == 0:
                    continue
                ks = self.block_stream[rows]
                Bv = np.ascontiguousarray(
                    (X[:, q, ks, :] * weff[ks].T[:, :, None]).transpose(1, 0, 2)
                )  # (nb, F, M)
                Vq, mu = power_constrained_solve(A[:, q], Bv, self.pbar[q])
                self.V[rows] = Vq
                self.mu[q] = mu

        self._map(solve_bs, self.Q, workers)
        self._G_fresh = False

    def update_precoders_gs(self, workers=1):
        """Exact v-phase for multi-block (CoMP) streams without a group
        penalty: Gauss-Seidel across BSs, solving each BS's blocks jointly
        under its power budget (within one BS the objective separates across
        streams, so the joint KKT solve is exact given the other BSs)."""
        A, X = self.quadratics(workers)
        weff = self.weff()
        self.refresh_G(workers)
        # T[f][j, k] = u_k^H ghat_j(i_k), maintained across BS updates
        T = np.empty((self.F, self.K, self.K), dtype=np.complex128)
        for f in range(self.F):
            Gi = self._G[f][:, self.stream_user, :]
            T[f] = np.einsum("kn,jkn->jk", np.ascontiguousarray(self.U[:, f]).conj(), Gi)
        for q in range(self.Q):
            rows = self.bs_blocks[q]
            if len(rows) == 0:
                continue
            js = self.block_stream[rows]
            Bv = np.empty((len(rows), self.F, self.M), dtype=np.complex128)
            for a, (b, j) in enumerate(zip(rows, js)):
                for f in range(self.F):
                    t_other = T[f, j] - X[f, q].conj() @ self.V[b, f]
                    Bv[a, f] = weff[j, f] * X[f, q, j] - X[f, q].T @ (weff[:, f] * t_other)
            Vq, mu = power_constrained_solve(A[:, q], Bv, self.pbar[q])
            for a, (b, j) in enumerate(zip(rows, js)):
                for f in range(self.F):
                    delta = Vq[a, f] - self.V[b, f]
                    T[f, j] += X[f, q].conj() @ delta
                self.V[b] = Vq[a]
            self.mu[q] = mu
        self._G_fresh = False

    # -- prox v-phase (multi-block / group-penalized) -------------------------

    def sweep_precoders_prox(self, lam=0.0, sweeps=20, block_tol=1e-8, workers=1):
        """Cyclic block-coordinate v-phase for the group-penalized subproblem.

        Each (block, tone) update exactly minimizes the majorized quadratic
        (curvature = lambda_max(A_q) per tone) plus lam * ||v|| under the
        block's residual share of the BS power, so the penalized surrogate
        never increases.  Sweeps run sequentially: with CoMP streams, blocks
        at different BSs couple through the objective.
        """
        A, X = self.quadratics(workers)
        weff = self.weff()
        curv = np.maximum(np.linalg.eigvalsh(A.transpose(1, 0, 2, 3))[..., -1], 1e-12)  # (Q, F)

        # T[f, j, k] = u_k^H ghat_j(i_k): inner products of aggregate stream
        # channels with every receiver; maintained incrementally per block.
        self.refresh_G(workers)
        T = np.empty((self.F, self.K, self.K), dtype=np.complex128)
        for f in range(self.F):
            Gi = self._G[f][:, self.stream_user, :]
            T[f] = np.einsum("kn,jkn->jk", np.ascontiguousarray(self.U[:, f]).conj(), Gi)

        power = self.bs_power()
        for _ in range(sweeps):
            max_change = 0.0
            for b in range(self.B):
                j, q = self.block_stream[b], self.block_bs[b]
                for f in range(self.F):
                    a = curv[q, f]
                    v_old = self.V[b, f].copy()
                    grad = X[f, q].T @ (weff[:, f] * T[f, j]) - weff[j, f] * X[f, q, j]
                    target = a * v_old - grad
                    nt = np.linalg.norm(target)
                    if nt <= lam:
                        v_new = np.zeros_like(v_old)
                    else:
                        v_new = (1.0 - lam / nt) * target / a
                    cap = max(self.pbar[q] - (power[q] - np.sum(np.abs(v_old) ** 2)), 0.0)
                    nv2 = np.sum(np.abs(v_new) ** 2)
                    if nv2 > cap:
                        v_new *= np.sqrt(cap / nv2) if nv2 > 0 else 0.0
                    delta = v_new - v_old
                    change = np.linalg.norm(delta)
                    if change > 0:
                        self.V[b, f] = v_new
                        power[q] += np.sum(np.abs(v_new) ** 2) - np.sum(np.abs(v_old) ** 2)
                        T[f, j] += X[f, q].conj() @ delta
                        max_change = max(max_change, change)
            if max_change < block_tol:
                break
        self._G_fresh = False

    # -- values ---------------------------------------------------------------

    def stream_rates(self) -> np.ndarray:
        """Per-(stream, tone) rates at the current MMSE receivers: -log e."""
        return -np.log(self.E)

    def user_rates(self, stream_weights=None) -> np.ndarray:
        """Per-user rates; optional per-stream weights (e.g. association z)."""
        r = np.sum(self.stream_rates(), axis=1)
        if stream_weights is not None:
            r = r * np.asarray(stream_weights, dtype=float)
        out = np.zeros(self.I)
        np.add.at(out, self.stream_user, r)
        return out

    def penalty(self, lam: float) -> float:
        if lam == 0.0:
            return 0.0
        return float(lam * np.sum(np.linalg.norm(self.V, axis=2)))

    def surrogate_from_E(self, E, lam=0.0) -> float:
        """sum_k scale_k (w e - log w) + lam * sum ||v|| at the given MSEs."""
        val = np.sum(self.scale[:, None] * (self.W * E - np.log(self.W)))
        return float(val) + self.penalty(lam)

    def surrogate_general(self, lam=0.0, workers=1) -> float:
        """Surrogate at the current (u, w, V), recomputing the MSEs."""
        return self.surrogate_from_E(self.general_mse(workers), lam)


def power_constrained_solve(A, B, pbar, *, rel_tol=1e-10, max_iter=500):
    """min sum_b (v_b^H A_f v_b - 2 Re b_b^H v_b) s.t. sum_{b,f} ||v_b||^2 <= pbar.

    A: (F, M, M) Hermitian PSD, B: (nb, F, M).  Returns (V, mu): either mu=0
    with the unconstrained solution feasible, or mu>0 with the power within
    rel_tol of pbar (bisection with a doubling upper bracket).
    """
    A = np.asarray(A)
    B = np.asarray(B)
    vals, vecs = np.linalg.eigh(A)  # (F, M), (F, M, M)
    vals = np.maximum(vals, 0.0)
    Bt = np.einsum("fnm,bfn->bfm", vecs.conj(), B)
    s = np.abs(Bt) ** 2
    # rounding-level components on (near-)null eigendirections would fake an
    # unbounded unconstrained power; drop anything 12 digits below the peak
    keep = s > 1e-24 * np.max(s, initial=0.0)
    if not np.any(keep):
        return np.zeros_like(B), 0.0
    sv = s[keep]
    vv = np.broadcast_to(vals[None], s.shape)[keep]

    def powr(mu):
        return float(np.sum(sv / (vv + mu) ** 2))

    p0 = np.inf if np.any(vv == 0.0) else powr(0.0)
    if p0 <= pbar:
        mu = 0.0
    else:
        hi = max(float(np.max(vals)), 1.0)
        while powr(hi) > pbar:
            hi *= 2.0
            if hi > 1e300:
                raise NumericError("power bisection failed to bracket")
        lo, mu = 0.0, hi
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            p = powr(mid)
            if abs(p - pbar) <= rel_tol * pbar:
                mu = mid
                break
            if p > pbar:
                lo = mid
            else:
                hi = mid
            mu = hi
    coeff = np.zeros_like(Bt)
    np.divide(Bt, vals[None] + mu, out=coeff, where=keep)
    V = np.einsum("fmn,bfn->bfm", vecs, coeff)
    return V, float(mu)


def run_phases(
    sp: StreamProblem,
    stop,
    *,
    lam: float = 0.0,
    prox: bool | None = None,
    prox_sweeps: int = 20,
    scale_fn=None,
    utility_fn=None,
    record: str = "substeps",
    workers: int = 1,
):
    """Drive u/w/v phases until the stop rule fires.

    Yields one dict per iteration with the trace values; the caller owns
    report assembly.  `scale_fn(user_rates)` may reset per-stream scales
    once per iteration (adaptive utility weights).  With prox=None the
    v-phase is exact when every stream has a single block and lam == 0,
    and the prox sweep otherwise.
    """
    if prox is None:
        prox = lam != 0.0
    prev_util = None
    for it in range(stop.max_iters):
        sub = []
        if record == "substeps" and it > 0:
            sub.append(sp.surrogate_general(lam, workers))  # after previous v-phase
        sp.update_receivers(workers)
        if record == "substeps":
            sub.append(sp.surrogate_from_E(sp.E, lam))  # after u-phase (old w)
        rates = sp.user_rates()
        util = float(np.sum(rates)) if utility_fn is None else float(utility_fn(rates))
        if scale_fn is not None:
            sp.scale = np.asarray(scale_fn(rates), dtype=float)
        sp.update_weights()
        objective = sp.surrogate_from_E(sp.E, lam)
        if record == "substeps":
            sub.append(objective)  # after w-phase
        done = prev_util is not None and stop.done(prev_util, util)
        yield {
            "iteration": it,
            "rates": rates,
            "utility": util,
            "objective": objective,
            "substeps": sub,
            "max_power_violation": sp.max_power_violation(),
            "done": done,
        }
        if done:
            break
        prev_util = util
        if prox:
            sp.sweep_precoders_prox(lam, sweeps=prox_sweeps, workers=workers)
        elif sp.single_block:
            sp.update_precoders(workers)
        else:
            sp.update_precoders_gs(workers)
