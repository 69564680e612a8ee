"""Block-coordinate WMMSE precoding for interference and interfering
broadcast channels, plus the rate/MSE evaluators shared by the other
solvers.

Single-beam mode (one stream per user) is the default.  Multi-stream mode
(streams_per_user > 1) uses matrix weights W = E^-1 and log det terms; it
is available for plain precoding only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import StreamProblem, power_constrained_solve, run_phases
from .errors import ConfigurationError, NumericError
from .net_model import NetworkInstance
from .report import SolveReport, StopRule

__all__ = [
    "PrecoderSet",
    "ReceiverSet",
    "WeightSet",
    "user_rate",
    "mse",
    "mmse_receiver",
    "weight_update",
    "precoder_update",
    "solve_wmmse",
    "sum_rate",
    "sum_rate_gradient",
    "sum_rate_pgrad_norm",
]


@dataclass
class PrecoderSet:
    """Transmit precoders V[i, q, f, t] of shape (M, d), units sqrt(watts)."""

    V: np.ndarray  # (I, Q, F, T, M, d)

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=np.complex128)
        if self.V.ndim != 6:
            raise ConfigurationError("PrecoderSet array must be (I, Q, F, T, M, d)")

    def block(self, i, q, f=0, t=0):
        return self.V[i, q, f, t]

    def bs_power(self, q, t=0) -> float:
        return float(np.sum(np.abs(self.V[:, q, :, t]) ** 2))

    def max_power_violation(self, instance) -> float:
        worst = 0.0
        for t in range(self.V.shape[3]):
            p = np.array([self.bs_power(q, t) for q in range(self.V.shape[1])])
            worst = max(worst, float(np.max((p - instance.power_budget) / instance.power_budget)))
        return worst

    def check_power(self, instance, tol=1e-8):
        if self.max_power_violation(instance) > tol:
            raise ConfigurationError("per-BS power constraint violated")


@dataclass
class ReceiverSet:
    U: np.ndarray  # (I, F, T, N, d)

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.complex128)
        if not np.all(np.isfinite(self.U.view(float))):
            raise ConfigurationError("receivers must be finite")


@dataclass
class WeightSet:
    """Positive scalars (single-beam) or Hermitian PD matrices per (i, f, t)."""

    W: np.ndarray  # (I, F, T) float or (I, F, T, d, d) complex

    def __post_init__(self):
        self.W = np.asarray(self.W)
        if self.W.ndim == 3:
            if np.any(self.W.real <= 0):
                raise ConfigurationError("scalar weights must be positive")
        elif self.W.ndim == 5:
            lo = np.linalg.eigvalsh(self.W)[..., 0]
            if np.any(lo <= 0):
                raise ConfigurationError("matrix weights must be positive definite")
        else:
            raise ConfigurationError("WeightSet array must be (I, F, T) or (I, F, T, d, d)")


def _default_serving(instance):
    return [(int(q),) for q in instance.serving_bs]


def _pset_array(precoders, instance):
    V = precoders.V if isinstance(precoders, PrecoderSet) else np.asarray(precoders)
    if V.ndim != 6:
        raise ConfigurationError("precoders must be a PrecoderSet or (I, Q, F, T, M, d) array")
    return V


def _stream_effective(H, V, serving_sets, j, i, f, t):
    """What user i receives of user j's (possibly multi-BS) stream: (N, d)."""
    acc = None
    for q in serving_sets[j]:
        x = H[q, i, f, t] @ V[j, q, f, t]
        acc = x if acc is None else acc + x
    return acc


def user_rate(instance, precoders, serving_sets=None, i=0, f=0, t=0) -> float:
    """log det(I + S S^H C^-1) of user i on tone f at slot t, where S sums the
    serving-BS contributions and C is the interference-plus-noise covariance."""
    V = _pset_array(precoders, instance)
    if serving_sets is None:
        serving_sets = _default_serving(instance)
    H = instance.channels
    N = instance.rx_antennas
    C = instance.noise_power[i] * np.eye(N, dtype=np.complex128)
    for j in range(instance.num_users):
        if j == i:
            continue
        T = _stream_effective(H, V, serving_sets, j, i, f, t)
        C += T @ T.conj().T
    S = _stream_effective(H, V, serving_sets, i, i, f, t)
    sign, ld_int = np.linalg.slogdet(C)
    _, ld_full = np.linalg.slogdet(C + S @ S.conj().T)
    return float(ld_full - ld_int)


def mse(instance, precoders, u, i=0, f=0, t=0, serving_sets=None) -> float:
    """Single-beam MSE of user i at receiver u (not necessarily MMSE)."""
    V = _pset_array(precoders, instance)
    if V.shape[-1] != 1:
        raise ConfigurationError("mse is defined for single-beam precoders")
    if serving_sets is None:
        serving_sets = _default_serving(instance)
    u = np.asarray(u, dtype=np.complex128).reshape(-1)
    H = instance.channels
    s = _stream_effective(H, V, serving_sets, i, i, f, t)[:, 0]
    e = abs(np.vdot(u, s) - 1.0) ** 2
    for j in range(instance.num_users):
        if j == i:
            continue
        tj = _stream_effective(H, V, serving_sets, j, i, f, t)[:, 0]
        e += abs(np.vdot(u, tj)) ** 2
    e += instance.noise_power[i] * float(np.vdot(u, u).real)
    return float(e)


def mmse_receiver(instance, precoders, i=0, f=0, t=0, serving_sets=None) -> np.ndarray:
    """u_i = (sum_j T_j T_j^H + sigma^2 I)^-1 S_i; minimizes the MSE."""
    V = _pset_array(precoders, instance)
    if serving_sets is None:
        serving_sets = _default_serving(instance)
    H = instance.channels
    N = instance.rx_antennas
    C = instance.noise_power[i] * np.eye(N, dtype=np.complex128)
    for j in range(instance.num_users):
        T = _stream_effective(H, V, serving_sets, j, i, f, t)
        C += T @ T.conj().T
    S = _stream_effective(H, V, serving_sets, i, i, f, t)
    return np.linalg.solve(C, S)


def weight_update(e):
    """w = 1/e for scalar MSE; W = E^-1 for a Hermitian PD MSE matrix."""
    if np.isscalar(e) or np.asarray(e).ndim == 0:
        e = float(np.real(e))
        if e <= 0:
            raise NumericError("MSE must be positive")
        return 1.0 / e
    E = np.asarray(e, dtype=np.complex128)
    if np.linalg.eigvalsh(E)[0] <= 0:
        raise NumericError("MSE matrix must be positive definite")
    return np.linalg.inv(E)


def _coerce_receivers(receivers, instance, slot):
    U = receivers.U if isinstance(receivers, ReceiverSet) else np.asarray(receivers)
    if U.ndim == 5:  # (I, F, T, N, d) with d == 1
        U = U[:, :, slot, :, 0]
    elif U.ndim == 2:  # (I, N)
        U = U[:, None, :]
    if U.shape != (instance.num_users, instance.tones, instance.rx_antennas):
        raise ConfigurationError("receiver array has unexpected shape")
    return np.asarray(U, dtype=np.complex128)


def _coerce_weights(weights, instance, slot):
    W = weights.W if isinstance(weights, WeightSet) else np.asarray(weights, dtype=float)
    if W.ndim == 3:  # (I, F, T)
        W = W[:, :, slot]
    elif W.ndim == 1:
        W = W[:, None]
    if W.shape != (instance.num_users, instance.tones):
        raise ConfigurationError("weight array has unexpected shape")
    return W


def precoder_update(instance, receivers, weights, q, serving_sets=None, slot=0, scale=None):
    """Power-constrained precoder solve for BS q at the current receivers and weights.

    Returns (precoders, mu): a dict mapping user -> (F, M) beam at BS q, and
    the water-level multiplier (mu = 0 iff the unconstrained solution meets
    the power budget; otherwise the power equals the budget within the
    bisection tolerance).
    """
    sp = StreamProblem.for_serving_sets(instance, serving_sets, slot)
    sp.U = _coerce_receivers(receivers, instance, slot)
    sp.W = _coerce_weights(weights, instance, slot)
    if scale is not None:
        sp.scale = np.asarray(scale, dtype=float)
    A, X = sp.quadratics()
    weff = sp.weff()
    rows = sp.bs_blocks[q]
    if len(rows) == 0:
        return {}, 0.0
    ks = sp.block_stream[rows]
    Bv = np.ascontiguousarray((X[:, q, ks, :] * weff[ks].T[:, :, None]).transpose(1, 0, 2))
    Vq, mu = power_constrained_solve(A[:, q], Bv, instance.power_budget[q])
    out = {int(sp.stream_user[k]): Vq[j] for j, k in enumerate(ks)}
    return out, mu


def _report_from_steps(algo, steps, record):
    rep = SolveReport(algo=algo)
    for st in steps:
        rep.objective.append(st["objective"])
        rep.sum_rate.append(float(np.sum(st["rates"])))
        rep.min_rate.append(float(np.min(st["rates"])))
        rep.max_power_violation.append(st["max_power_violation"])
        if record == "substeps":
            rep.substep_objective.extend(st["substeps"])
    rep.converged = bool(steps) and steps[-1]["done"]
    if not rep.converged:
        rep.flags.append("max-iterations")
    return rep


def solve_wmmse(
    instance: NetworkInstance,
    serving_sets=None,
    init: PrecoderSet | None = None,
    stop_rule: StopRule | None = None,
    *,
    seed: int = 0,
    slot: int = 0,
    workers: int = 1,
    record: str = "substeps",
    streams_per_user: int = 1,
):
    """Sum-rate WMMSE: alternating MMSE receivers, weights 1/e, and per-BS
    power-constrained precoder solves.

    Returns (PrecoderSet, SolveReport).  The weighted-MMSE surrogate is
    nonincreasing at every sub-step and the sum rate at MMSE receivers is
    nondecreasing per iteration.  Multi-BS serving sets (CoMP streams) route
    the v-phase through the block-coordinate prox solver.
    """
    stop = stop_rule or StopRule()
    if streams_per_user > 1:
        return _solve_wmmse_mimo(
            instance, serving_sets, init, stop, seed=seed, slot=slot,
            d=streams_per_user, record=record,
        )
    t0 = time.perf_counter()
    sp = StreamProblem.for_serving_sets(instance, serving_sets, slot)
    if init is not None:
        V = _pset_array(init, instance)
        for b in range(sp.B):
            sp.V[b] = V[sp.stream_user[sp.block_stream[b]], sp.block_bs[b], :, slot, :, 0]
        sp._G_fresh = False
    else:
        sp.init_precoders(seed)
    steps = list(run_phases(sp, stop, record=record, workers=workers))
    rep = _report_from_steps("wmmse", steps, record)
    sp.update_receivers(workers)
    rep.final_rates = sp.user_rates()
    rep.wall_time = time.perf_counter() - t0
    pset = precoder_set_from_stream(sp, instance, slot)
    sp.close()
    return pset, rep


def precoder_set_from_stream(sp, instance, slot=0, d=1) -> PrecoderSet:
    V = np.zeros(
        (instance.num_users, instance.num_bs, instance.tones, instance.slots,
         instance.tx_antennas, d),
        dtype=np.complex128,
    )
    for b in range(sp.B):
        V[sp.stream_user[sp.block_stream[b]], sp.block_bs[b], :, slot, :, 0] = sp.V[b]
    return PrecoderSet(V)


def sum_rate(instance, precoders, serving_sets=None, t=0) -> float:
    return float(
        sum(
            user_rate(instance, precoders, serving_sets, i, f, t)
            for i in range(instance.num_users)
            for f in range(instance.tones)
        )
    )


# -- stationarity of the original sum-rate problem -------------------------


def sum_rate_gradient(sp: StreamProblem) -> np.ndarray:
    """Conjugate gradient d(sum rate)/dV* per (block, tone), at the current V.

    Sum rate is evaluated at MMSE receivers (a function of V alone).
    """
    sp.refresh_G()
    grad = np.zeros_like(sp.V)
    N = sp.N
    for f in range(sp.F):
        G = sp._G[f]  # (K, I, N)
        Tfull = np.einsum("kin,kim->inm", G, G.conj())
        Tfull[:, np.arange(N), np.arange(N)] += sp.noise[:, None]
        for b in range(sp.B):
            kb, q = sp.block_stream[b], sp.block_bs[b]
            acc = np.zeros(sp.M, dtype=np.complex128)
            for k in range(sp.K):  # rate term of stream k
                ik = sp.stream_user[k]
                gb = G[kb, ik]
                Hq = sp.H[f, q, ik]
                acc += Hq.conj().T @ np.linalg.solve(Tfull[ik], gb)
                if k != kb:
                    gk = G[k, ik]
                    Ck = Tfull[ik] - np.outer(gk, gk.conj())
                    acc -= Hq.conj().T @ np.linalg.solve(Ck, gb)
            grad[b, f] = acc
    return grad


def project_bs_power(sp: StreamProblem, V) -> np.ndarray:
    """Scale each BS's stacked blocks onto its power ball."""
    out = V.copy()
    for q in range(sp.Q):
        rows = sp.bs_blocks[q]
        if len(rows) == 0:
            continue
        p = np.sum(np.abs(out[rows]) ** 2)
        if p > sp.pbar[q]:
            out[rows] *= np.sqrt(sp.pbar[q] / p)
    return out


def sum_rate_pgrad_norm(instance, precoders, serving_sets=None, slot=0, step=1.0) -> float:
    """Projected-gradient residual ||V - P(V + step grad)|| / step of the
    sum-rate objective under the per-BS power constraints."""
    sp = StreamProblem.for_serving_sets(instance, serving_sets, slot)
    V = _pset_array(precoders, instance)
    for b in range(sp.B):
        sp.V[b] = V[sp.stream_user[sp.block_stream[b]], sp.block_bs[b], :, slot, :, 0]
    sp._G_fresh = False
    g = sum_rate_gradient(sp)
    moved = project_bs_power(sp, sp.V + step * g)
    return float(np.linalg.norm(sp.V - moved) / step)


# -- multi-stream (matrix-weight) mode --------------------------------------


def _solve_wmmse_mimo(instance, serving_sets, init, stop, *, seed, slot, d, record):
    if serving_sets is None:
        serving_sets = _default_serving(instance)
    if any(len(s) != 1 for s in serving_sets):
        raise ConfigurationError("multi-stream mode supports single-serving users only")
    if d > min(instance.tx_antennas, instance.rx_antennas):
        raise ConfigurationError("streams_per_user exceeds min(M, N)")
    t0 = time.perf_counter()
    H = instance.channels[:, :, :, slot]  # (Q, I, F, N, M)
    Q, I, F = instance.num_bs, instance.num_users, instance.tones
    N, M = instance.rx_antennas, instance.tx_antennas
    serv = np.array([s[0] for s in serving_sets])
    noise = instance.noise_power
    pbar = instance.power_budget

    from .rng import rng_for

    if init is not None:
        V = np.ascontiguousarray(_pset_array(init, instance)[np.arange(I), serv, :, slot])
    else:
        rng = rng_for(seed, "precoder-init-mimo", slot)
        V = rng.standard_normal((I, F, M, d)) + 1j * rng.standard_normal((I, F, M, d))
        for q in range(Q):
            users = np.flatnonzero(serv == q)
            p = np.sum(np.abs(V[users]) ** 2)
            V[users] *= np.sqrt(pbar[q] / p)
    U = np.zeros((I, F, N, d), dtype=np.complex128)
    W = np.tile(np.eye(d, dtype=np.complex128), (I, F, 1, 1))
    E = np.tile(np.eye(d, dtype=np.complex128), (I, F, 1, 1))

    def gmat(j, i, f):
        return H[serv[j], i, f] @ V[j, f]

    def mmse_pass():
        rates = np.zeros(I)
        for f in range(F):
            Gs = np.stack([[gmat(j, i, f) for i in range(I)] for j in range(I)])  # (j, i, N, d)
            for i in range(I):
                T = noise[i] * np.eye(N, dtype=np.complex128)
                for j in range(I):
                    T += Gs[j, i] @ Gs[j, i].conj().T
                U[i, f] = np.linalg.solve(T, Gs[i, i])
                Ei = np.eye(d, dtype=np.complex128) - U[i, f].conj().T @ Gs[i, i]
                Ei = 0.5 * (Ei + Ei.conj().T)
                E[i, f] = Ei
                rates[i] += -float(np.linalg.slogdet(Ei)[1])
        return rates

    def general_E():
        out = np.empty_like(E)
        for f in range(F):
            for i in range(I):
                own = U[i, f].conj().T @ gmat(i, i, f)
                Ei = (np.eye(d) - own) @ (np.eye(d) - own).conj().T
                for j in range(I):
                    if j != i:
                        c = U[i, f].conj().T @ gmat(j, i, f)
                        Ei += c @ c.conj().T
                Ei += noise[i] * U[i, f].conj().T @ U[i, f]
                out[i, f] = 0.5 * (Ei + Ei.conj().T)
        return out

    def surrogate(Emats):
        val = 0.0
        for f in range(F):
            for i in range(I):
                val += float(np.real(np.trace(W[i, f] @ Emats[i, f])))
                val -= float(np.linalg.slogdet(W[i, f])[1])
        return val

    rep = SolveReport(algo="wmmse-mimo")
    prev = None
    rates = np.zeros(I)
    for it in range(stop.max_iters):
        if record == "substeps" and it > 0:
            rep.substep_objective.append(surrogate(general_E()))
        rates = mmse_pass()
        if record == "substeps":
            rep.substep_objective.append(surrogate(E))
        for f in range(F):
            for i in range(I):
                W[i, f] = weight_update(E[i, f])
        obj = surrogate(E)
        if record == "substeps":
            rep.substep_objective.append(obj)
        util = float(np.sum(rates))
        rep.objective.append(obj)
        rep.sum_rate.append(util)
        rep.min_rate.append(float(np.min(rates)))
        power = np.array(
            [np.sum(np.abs(V[np.flatnonzero(serv == q)]) ** 2) for q in range(Q)]
        )
        rep.max_power_violation.append(float(np.max((power - pbar) / pbar)))
        if prev is not None and stop.done(prev, util):
            rep.converged = True
            break
        prev = util
        # v-phase: per-BS quadratic with matrix right-hand sides
        for q in range(Q):
            users = np.flatnonzero(serv == q)
            if len(users) == 0:
                continue
            A = np.zeros((F, M, M), dtype=np.complex128)
            for f in range(F):
                for j in range(I):
                    HU = H[q, j, f].conj().T @ U[j, f]
                    A[f] += HU @ W[j, f] @ HU.conj().T
                A[f] = 0.5 * (A[f] + A[f].conj().T)
            Bcols = np.zeros((len(users) * d, F, M), dtype=np.complex128)
            for a, i in enumerate(users):
                for f in range(F):
                    Bi = H[q, i, f].conj().T @ U[i, f] @ W[i, f]
                    Bcols[a * d : (a + 1) * d, f] = Bi.T
            Vc, _ = power_constrained_solve(A, Bcols, pbar[q])
            for a, i in enumerate(users):
                V[i] = Vc[a * d : (a + 1) * d].transpose(1, 2, 0)
    else:
        rep.converged = False
        rep.flags.append("max-iterations")
    rates = mmse_pass()
    rep.final_rates = rates
    rep.wall_time = time.perf_counter() - t0

    Vfull = np.zeros((I, Q, F, instance.slots, M, d), dtype=np.complex128)
    for i in range(I):
        Vfull[i, serv[i], :, slot] = V[i]
    return PrecoderSet(Vfull), rep
