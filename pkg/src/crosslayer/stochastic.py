"""Stochastic WMMSE: expected sum-rate precoding under partial CSI.

Each iteration draws one channel realization, computes MMSE receivers and
weights on that sample, folds the sample's quadratics into running
accumulators (A per BS, B per user, optional forgetting factor), and
re-solves the per-BS power-constrained precoders against the accumulated
data.  Receivers therefore adapt to instantaneous channels while the
transmit side adapts to the channel statistics.

Baselines: WMMSE on one realization, WMMSE on the mean channels, and
projected stochastic gradient ascent with a diminishing step c/sqrt(t).
All are evaluated by the same Monte-Carlo protocol with a shared eval
sample set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .engine import StreamProblem, power_constrained_solve
from .errors import ConfigurationError
from .net_model import DistributionTable, NetworkInstance, sample_channels
from .report import SolveReport
from .rng import rng_for
from .wmmse import precoder_set_from_stream, project_bs_power, sum_rate_gradient

__all__ = [
    "Accumulators",
    "StochasticState",
    "stochastic_wmmse_step",
    "run_stochastic",
    "baselines",
    "mc_expected_rates",
    "tune_sgd_step",
]


@dataclass
class Accumulators:
    """Running per-user quadratic data: A[i] Hermitian PSD (M x M), B[i] (M,).

    Users of one BS share the same A (identical per-sample increments), so
    A is stored per BS; `a_for(i)` exposes the per-user view.
    """

    A: np.ndarray  # (Q, F, M, M)
    B: np.ndarray  # (I, F, M)
    serving_bs: np.ndarray
    count: int = 0

    def a_for(self, i: int) -> np.ndarray:
        return self.A[self.serving_bs[i]]


@dataclass
class StochasticState:
    problem: StreamProblem
    acc: Accumulators
    theta: float = 1.0

    @property
    def precoders(self) -> np.ndarray:
        return self.problem.V


def _new_state(instance, seed, theta, slot=0) -> StochasticState:
    sp = StreamProblem.for_serving_sets(instance, None, slot=slot)
    if not sp.single_block:
        raise ConfigurationError("stochastic WMMSE expects single-serving users")
    sp.init_precoders(seed)
    acc = Accumulators(
        A=np.zeros((sp.Q, sp.F, sp.M, sp.M), dtype=np.complex128),
        B=np.zeros((sp.K, sp.F, sp.M), dtype=np.complex128),
        serving_bs=np.asarray(instance.serving_bs),
    )
    return StochasticState(problem=sp, acc=acc, theta=theta)


def _set_channels(sp: StreamProblem, H) -> None:
    sp.H = np.ascontiguousarray(np.asarray(H)[:, :, :, sp.slot].transpose(2, 0, 1, 3, 4))
    sp._G_fresh = False


def stochastic_wmmse_step(state: StochasticState, H_sample, workers: int = 1) -> None:
    """One accumulate-and-solve step on a fresh channel realization."""
    sp = state.problem
    acc = state.acc
    _set_channels(sp, H_sample)
    sp.update_receivers(workers)
    sp.update_weights()
    A_inc, X = sp.quadratics(workers)  # (F, Q, M, M), (F, Q, K, M)
    weff = sp.weff()
    if state.theta != 1.0:
        acc.A *= state.theta
        acc.B *= state.theta
    acc.A += A_inc.transpose(1, 0, 2, 3)
    for k in range(sp.K):
        q = sp.block_bs[k]
        acc.B[k] += weff[k][:, None] * X[:, q, k, :]
    acc.count += 1

    def solve_bs(q0, q1):
        for q in range(q0, q1):
            rows = sp.bs_blocks[q]
            if len(rows) == 0:
                continue
            Vq, mu = power_constrained_solve(acc.A[q], acc.B[rows], sp.pbar[q])
            sp.V[rows] = Vq
            sp.mu[q] = mu

    sp._map(solve_bs, sp.Q, workers)
    sp._G_fresh = False


def mc_expected_rates(instance, V_blocks, eval_set, workers: int = 1) -> np.ndarray:
    """Per-user expected rates by Monte-Carlo over the eval channel set;
    receivers are re-derived (MMSE) per sample."""
    sp = StreamProblem.for_serving_sets(instance, None)
    sp.set_precoders(V_blocks)
    total = np.zeros(sp.I)
    for H in eval_set:
        _set_channels(sp, H)
        sp.update_receivers(workers)
        total += sp.user_rates()
    sp.close()
    return total / len(eval_set)


def _eval_set(instance, table, seed, n_samples):
    return [
        sample_channels(instance, table, _derived_seed(seed, "mc-eval", k))
        for k in range(n_samples)
    ]


def _derived_seed(seed, tag, k) -> int:
    return int(rng_for(seed, tag, k).integers(0, 2**62))


def run_stochastic(
    instance: NetworkInstance,
    table: DistributionTable,
    iterations: int = 200,
    seed: int = 0,
    *,
    theta: float = 1.0,
    eval_samples: int = 200,
    eval_every: int = 25,
    eval_seed: int | None = None,
    workers: int = 1,
):
    """Returns (StochasticState, SolveReport); the report's trace columns are
    (eval_iteration, mc_expected_sum_rate)."""
    t0 = time.perf_counter()
    state = _new_state(instance, seed, theta)
    eval_set = _eval_set(instance, table, seed if eval_seed is None else eval_seed, eval_samples)
    rep = SolveReport(algo="stochastic-wmmse")
    eval_at, mc_trace = [], []
    for t in range(iterations):
        H = sample_channels(instance, table, _derived_seed(seed, "stoch-sample", t))
        stochastic_wmmse_step(state, H, workers)
        if (t + 1) % eval_every == 0 or t == iterations - 1:
            rates = mc_expected_rates(instance, state.precoders, eval_set, workers)
            eval_at.append(t + 1)
            mc_trace.append(float(np.sum(rates)))
            rep.final_rates = rates
    rep.extra_columns["eval_iteration"] = eval_at
    rep.extra_columns["mc_expected_sum_rate"] = mc_trace
    rep.sum_rate = list(mc_trace)
    rep.wall_time = time.perf_counter() - t0
    state.problem.close()
    return state, rep


def tune_sgd_step(instance, table, seed, iterations, grid=(0.01, 0.1, 1.0), eval_samples=50):
    """Pick the diminishing-step constant c on a validation seed."""
    best_c, best_val = grid[0], -np.inf
    for c in grid:
        _, rep = _run_sgd(
            instance, table, iterations, seed, c,
            eval_samples=eval_samples, eval_every=max(iterations, 1),
        )
        val = rep.extra_columns["mc_expected_sum_rate"][-1]
        if val > best_val:
            best_c, best_val = c, val
    return best_c


def _run_sgd(instance, table, iterations, seed, step_c, *, eval_samples, eval_every, workers=1):
    t0 = time.perf_counter()
    sp = StreamProblem.for_serving_sets(instance, None)
    sp.init_precoders(seed)
    eval_set = _eval_set(instance, table, seed, eval_samples)
    rep = SolveReport(algo="sgd")
    eval_at, mc_trace = [], []
    for t in range(iterations):
        H = sample_channels(instance, table, _derived_seed(seed, "stoch-sample", t))
        _set_channels(sp, H)
        grad = sum_rate_gradient(sp)
        sp.set_precoders(project_bs_power(sp, sp.V + step_c / np.sqrt(t + 1.0) * grad))
        if (t + 1) % eval_every == 0 or t == iterations - 1:
            rates = mc_expected_rates(instance, sp.V, eval_set, workers)
            eval_at.append(t + 1)
            mc_trace.append(float(np.sum(rates)))
            rep.final_rates = rates
    rep.extra_columns["eval_iteration"] = eval_at
    rep.extra_columns["mc_expected_sum_rate"] = mc_trace
    rep.sum_rate = list(mc_trace)
    rep.wall_time = time.perf_counter() - t0
    sp.close()
    return sp, rep


def baselines(
    instance: NetworkInstance,
    table: DistributionTable,
    kind: str,
    seed: int = 0,
    *,
    iterations: int = 200,
    eval_samples: int = 200,
    eval_seed: int | None = None,
    sgd_step: float | None = None,
    workers: int = 1,
):
    """Comparison algorithms evaluated by the shared Monte-Carlo protocol.

    kind: 'one-sample' (WMMSE on one realization), 'mean' (WMMSE on the mean
    channels), or 'sgd' (projected stochastic gradient, step c/sqrt(t)).
    Returns (precoder blocks, SolveReport).
    """
    from .wmmse import solve_wmmse

    if kind not in ("one-sample", "mean", "sgd"):
        raise ConfigurationError(f"unknown baseline kind {kind!r}")
    if kind == "sgd":
        c = sgd_step
        if c is None:
            c = tune_sgd_step(instance, table, _derived_seed(seed, "sgd-validate", 0), iterations)
        sp, rep = _run_sgd(
            instance, table, iterations, seed, c,
            eval_samples=eval_samples, eval_every=iterations, workers=workers,
        )
        rep.algo = "sgd"
        rep.extra_columns["sgd_step"] = [c]
        return sp.V, rep

    if kind == "one-sample":
        H = sample_channels(instance, table, _derived_seed(seed, "baseline-one-sample", 0))
    else:
        H = table.mean_channels()
    design = replace(instance, channels=H)
    pset, _ = solve_wmmse(design, seed=seed, workers=workers, record="none")
    sp = StreamProblem.for_serving_sets(instance, None)
    for b in range(sp.B):
        sp.V[b] = pset.V[sp.stream_user[sp.block_stream[b]], sp.block_bs[b], :, 0, :, 0]
    eval_set = _eval_set(instance, table, seed if eval_seed is None else eval_seed, eval_samples)
    rates = mc_expected_rates(instance, sp.V, eval_set, workers)
    rep = SolveReport(algo=kind)
    rep.final_rates = rates
    rep.extra_columns["eval_iteration"] = [0]
    rep.extra_columns["mc_expected_sum_rate"] = [float(np.sum(rates))]
    rep.sum_rate = [float(np.sum(rates))]
    V = sp.V.copy()
    sp.close()
    return V, rep
