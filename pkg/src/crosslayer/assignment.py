"""Joint BS assignment and beamforming.

Binary association variables are relaxed to the capped simplex
{z >= 0, sum_q z_i^q <= 1} per user.  Each candidate (user, BS) pair is a
virtual single-beam stream; z scales both the pair's utility contribution
and its WMMSE weight, so zero-z pairs collapse to zero beams.  One
projected-gradient pass on z (Armijo backtracking) alternates with one
WMMSE epoch on the beams.  The final hard assignment takes each user's
argmax z with lowest-BS-index tie-break, then re-optimizes beams for the
fixed assignment.
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
from .wmmse import PrecoderSet, precoder_set_from_stream

__all__ = ["AssociationState", "project_simplex_cap", "solve_joint_assignment"]


@dataclass
class AssociationState:
    z: np.ndarray            # (I, Q) relaxed association, 0 outside candidates
    assignment: np.ndarray   # (I,) final hard BS index
    precoders: PrecoderSet   # beams after the fixed-assignment polish
    rates: np.ndarray        # (I,) final rates under the hard assignment


def project_simplex_cap(raw_z) -> np.ndarray:
    """Euclidean projection onto {z >= 0, sum z <= 1}."""
    z = np.asarray(raw_z, dtype=float)
    clipped = np.maximum(z, 0.0)
    if clipped.sum() <= 1.0:
        return clipped
    # active cap: project onto the probability simplex (sort-based)
    u = np.sort(z)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, len(z) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(z - theta, 0.0)


def _pair_list(instance, candidate_sets):
    if candidate_sets is None:
        candidate_sets = [tuple(range(instance.num_bs))] * instance.num_users
    pairs = []
    for i, cset in enumerate(candidate_sets):
        if len(cset) == 0:
            raise ConfigurationError(f"user {i} has an empty candidate set")
        for q in sorted(set(int(q) for q in cset)):
            pairs.append((i, q))
    return pairs, candidate_sets


def solve_joint_assignment(
    instance: NetworkInstance,
    utility_config: UtilityConfig | None = None,
    stop_rule: StopRule | None = None,
    *,
    candidate_sets=None,
    seed: int = 0,
    workers: int = 1,
    inner_iters: int = 20,
    polish_iters: int = 100,
    slot: int = 0,
):
    """Returns (AssociationState, SolveReport).

    stop_rule counts outer epochs (one WMMSE epoch + one z pass each).  A
    failed line search keeps the last feasible z and flags the report.
    """
    cfg = utility_config or UtilityConfig(alpha=0.0)
    if cfg.kind != "alpha-fair":
        raise ConfigurationError("joint assignment requires an alpha-fair utility")
    stop = stop_rule or StopRule(max_iters=60)
    t0 = time.perf_counter()
    pairs, candidate_sets = _pair_list(instance, candidate_sets)
    sp = StreamProblem.for_pairs(instance, pairs, slot=slot)
    sp.init_precoders(seed)
    pair_user = sp.stream_user
    pair_bs = sp.block_bs  # single-block streams in pair order

    nc = np.array([len(set(c)) for c in candidate_sets], dtype=float)
    z = 1.0 / nc[pair_user]

    def user_rates_from(zvec, r_pair):
        R = np.zeros(instance.num_users)
        np.add.at(R, pair_user, zvec * r_pair)
        return R

    rep = SolveReport(algo="joint-assign")
    utils = []
    prev = None
    r_pair = np.zeros(len(pairs))
    for it in range(stop.max_iters):
        # WMMSE epoch at fixed z
        for _ in range(inner_iters):
            sp.update_receivers(workers)
            r_pair = np.sum(sp.stream_rates(), axis=1)
            R = user_rates_from(z, r_pair)
            sp.scale = rate_gradient(cfg, R)[pair_user] * z
            sp.update_weights()
            sp.update_precoders(workers)
        sp.update_receivers(workers)
        r_pair = np.sum(sp.stream_rates(), axis=1)

        # one projected-gradient pass on z with Armijo backtracking
        R = user_rates_from(z, r_pair)
        util = evaluate(cfg, R)
        grad = rate_gradient(cfg, R)[pair_user] * r_pair
        step = 1.0
        accepted = False
        while step > 1e-12:
            cand = np.empty_like(z)
            for i in range(instance.num_users):
                rows = np.nonzero(pair_user == i)[0]
                cand[rows] = project_simplex_cap(z[rows] + step * grad[rows])
            util_cand = evaluate(cfg, user_rates_from(cand, r_pair))
            if util_cand >= util + 1e-4 * float(grad @ (cand - z)):
                z = cand
                util = util_cand
                accepted = True
                break
            step *= 0.5
        if not accepted and "line-search-failure" not in rep.flags:
            rep.flags.append("line-search-failure")

        utils.append(util)
        R = user_rates_from(z, r_pair)
        rep.objective.append(util)
        rep.sum_rate.append(float(np.sum(R)))
        rep.min_rate.append(float(np.min(R)))
        rep.max_power_violation.append(sp.max_power_violation())
        if prev is not None and stop.done(prev, util):
            rep.converged = True
            break
        prev = util
    else:
        rep.converged = False
        rep.flags.append("max-iterations")
    sp.close()

    # hard assignment: per-user argmax z, ties to the lowest BS index
    Z = np.zeros((instance.num_users, instance.num_bs))
    Z[pair_user, pair_bs] = z
    assignment = np.argmax(Z, axis=1).astype(np.int64)

    # polish beams for the fixed assignment (adaptively reweighted WMMSE)
    hard_pairs = [(i, int(assignment[i])) for i in range(instance.num_users)]
    sp2 = StreamProblem.for_pairs(instance, hard_pairs, slot=slot)
    sp2.init_precoders(seed)
    prev_u = None
    for _ in range(polish_iters):
        sp2.update_receivers(workers)
        R = sp2.user_rates()
        u_now = evaluate(cfg, R)
        if prev_u is not None and stop.done(prev_u, u_now):
            break
        prev_u = u_now
        sp2.scale = rate_gradient(cfg, R)
        sp2.update_weights()
        sp2.update_precoders(workers)
    sp2.update_receivers(workers)
    rates = sp2.user_rates()
    pset = precoder_set_from_stream(sp2, instance, slot)
    sp2.close()

    rep.final_rates = rates
    rep.extra_columns["utility"] = utils
    rep.wall_time = time.perf_counter() - t0
    state = AssociationState(z=Z, assignment=assignment, precoders=pset, rates=rates)
    return state, rep
