"""Joint user scheduling across time slots and beamforming.

Outer iterations alternate MMSE receivers, utility-gradient weights
w_i[t] = U'(R_i)/e_i[t] (recomputed once per iteration from the cross-slot
rates), and per-slot power-constrained precoder solves.  Scheduling
indicators are extracted afterwards by thresholding the beam norms; rates
are then recomputed with the sub-threshold beams zeroed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import StreamProblem
from .errors import ConfigurationError
from .net_model import NetworkInstance
from .report import SolveReport, StopRule
from .utility import UtilityConfig, evaluate, rate_gradient
from .wmmse import PrecoderSet

__all__ = ["ScheduleState", "solve_joint_scheduling", "extract_schedule", "default_epsilon"]


@dataclass
class ScheduleState:
    alpha: np.ndarray        # (I, T) binary indicators
    precoders: PrecoderSet   # thresholded beams, all slots
    rates: np.ndarray        # (I,) totals over active slots
    slot_rates: np.ndarray   # (I, T)


def default_epsilon(instance) -> float:
    """Beam-norm threshold 1e-4 sqrt(pbar) (smallest budget when unequal)."""
    return 1e-4 * float(np.sqrt(np.min(instance.power_budget)))


def extract_schedule(precoders, epsilon: float, t_axis: int = 3) -> np.ndarray:
    """alpha[i, t] = 1 iff the norm of user i's slot-t beams exceeds epsilon
    (strict inequality)."""
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    V = precoders.V if isinstance(precoders, PrecoderSet) else np.asarray(precoders)
    norms = np.sqrt(np.sum(np.abs(V) ** 2, axis=(1, 2, 4, 5)))  # (I, T)
    return (norms > epsilon).astype(np.int64)


def solve_joint_scheduling(
    instance: NetworkInstance,
    utility_config: UtilityConfig | None = None,
    T: int | None = None,
    stop_rule: StopRule | None = None,
    *,
    serving_sets=None,
    seed: int = 0,
    workers: int = 1,
    epsilon: float | None = None,
    record: str = "iters",
):
    """Returns (ScheduleState, SolveReport).

    The instance must carry T slots of channels (NetworkInstance.with_slots
    tiles a single-slot instance).  Scheduling indicators start at 1 on all
    slots; the per-user rate is the sum of its active slot rates.
    """
    cfg = utility_config or UtilityConfig(alpha=0.0)
    if cfg.kind != "alpha-fair":
        raise ConfigurationError("joint scheduling requires a differentiable alpha-fair utility")
    stop = stop_rule or StopRule()
    if T is None:
        T = instance.slots
    if T != instance.slots:
        raise ConfigurationError(
            f"instance carries {instance.slots} slots but T={T}; use with_slots"
        )
    t0 = time.perf_counter()
    sps = [StreamProblem.for_serving_sets(instance, serving_sets, slot=t) for t in range(T)]
    for sp in sps:
        # T = 1 keeps the plain-precoding init (exact reduction to the
        # sum-rate algorithm); multi-slot runs randomize the initial slot
        # powers to break slot symmetry.
        if T == 1:
            sp.init_precoders(seed)
        else:
            sp.init_precoders_random_power(seed)

    rep = SolveReport(algo="joint-sched")
    utils = []
    prev = None
    for it in range(stop.max_iters):
        slot_user_rates = []
        for sp in sps:
            sp.update_receivers(workers)
            slot_user_rates.append(sp.user_rates())
        R = np.sum(slot_user_rates, axis=0)
        util = evaluate(cfg, R)
        utils.append(util)
        if record == "substeps":
            rep.substep_objective.append(util)
        grad = rate_gradient(cfg, R)
        obj = 0.0
        for sp in sps:
            sp.scale = grad[sp.stream_user]
            sp.update_weights()
            obj += sp.surrogate_from_E(sp.E)
        rep.objective.append(obj)
        rep.sum_rate.append(float(np.sum(R)))
        rep.min_rate.append(float(np.min(R)))
        rep.max_power_violation.append(max(sp.max_power_violation() for sp in sps))
        if prev is not None and stop.done(prev, util):
            rep.converged = True
            break
        prev = util
        for sp in sps:
            sp.update_precoders(workers)
    else:
        rep.converged = False
        rep.flags.append("max-iterations")

    # assemble the full-slot precoder set, threshold, and recompute rates
    eps = default_epsilon(instance) if epsilon is None else epsilon
    I, Q, F, M = instance.num_users, instance.num_bs, instance.tones, instance.tx_antennas
    V = np.zeros((I, Q, F, T, M, 1), dtype=np.complex128)
    for t, sp in enumerate(sps):
        for b in range(sp.B):
            V[sp.stream_user[sp.block_stream[b]], sp.block_bs[b], :, t, :, 0] = sp.V[b]
    pset = PrecoderSet(V)
    alpha = extract_schedule(pset, eps)
    off_i, off_t = np.nonzero(alpha == 0)
    pset.V[off_i, :, :, off_t] = 0.0

    slot_rates = np.zeros((I, T))
    for t, sp in enumerate(sps):
        for b in range(sp.B):
            i = sp.stream_user[sp.block_stream[b]]
            sp.V[b] = pset.V[i, sp.block_bs[b], :, t, :, 0]
        sp._G_fresh = False
        sp.update_receivers(workers)
        slot_rates[:, t] = sp.user_rates()
        sp.close()
    slot_rates *= alpha
    rates = slot_rates.sum(axis=1)
    rep.final_rates = rates
    rep.extra_columns["utility"] = utils
    rep.wall_time = time.perf_counter() - t0
    state = ScheduleState(alpha=alpha, precoders=pset, rates=rates, slot_rates=slot_rates)
    return state, rep
