"""Sparse WMMSE for CoMP BS clustering.

Utility maximization minus a group-LASSO penalty lambda * sum ||V_i^q||_F
over per-(user, BS) precoder blocks.  The u/w phases are the standard
closed forms; the v-phase runs cyclic block-coordinate prox updates (see
engine.StreamProblem.sweep_precoders_prox).  Cluster membership is read
off the surviving block norms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .engine import StreamProblem, run_phases
from .errors import ConfigurationError
from .net_model import NetworkInstance
from .report import SolveReport, StopRule
from .utility import UtilityConfig, evaluate, rate_gradient
from .wmmse import PrecoderSet, precoder_set_from_stream

__all__ = [
    "ClusterConfig",
    "group_soft_threshold",
    "solve_sparse_wmmse",
    "extract_clusters",
    "collapse_lambda",
]


@dataclass
class ClusterConfig:
    lam: float = 0.0
    candidate_sets: list = field(default_factory=list)  # per-user BS subsets

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        for i, cset in enumerate(self.candidate_sets):
            if len(cset) == 0:
                raise ConfigurationError(f"user {i} has an empty candidate set")

    @classmethod
    def all_bs(cls, instance, lam: float) -> "ClusterConfig":
        return cls(lam=lam, candidate_sets=[tuple(range(instance.num_bs))] * instance.num_users)


def group_soft_threshold(b, lam: float, a: float) -> np.ndarray:
    """argmin_v (a/2)||v||^2 - Re<b, v> + lam ||v||: zero when ||b|| <= lam,
    otherwise (1 - lam/||b||) b / a."""
    if a <= 0:
        raise ConfigurationError("curvature a must be positive")
    b = np.asarray(b)
    nb = float(np.linalg.norm(b))
    if nb <= lam:
        return np.zeros_like(b)
    return (1.0 - lam / nb) * b / a


def extract_clusters(instance, precoders, candidate_sets, epsilon=None):
    """S_i = {q in Q_i : ||V_i^q||_F > eps}; eps defaults to 1e-4 sqrt(pbar_q)."""
    V = precoders.V if isinstance(precoders, PrecoderSet) else np.asarray(precoders)
    clusters = []
    for i, cset in enumerate(candidate_sets):
        keep = []
        for q in sorted(set(int(q) for q in cset)):
            eps = 1e-4 * np.sqrt(instance.power_budget[q]) if epsilon is None else epsilon
            if np.linalg.norm(V[i, q]) > eps:
                keep.append(q)
        clusters.append(tuple(keep))
    return clusters


def solve_sparse_wmmse(
    instance: NetworkInstance,
    cluster_config: ClusterConfig,
    utility_config: UtilityConfig | None = None,
    stop_rule: StopRule | None = None,
    *,
    seed: int = 0,
    workers: int = 1,
    sweeps: int = 20,
    epsilon=None,
    slot: int = 0,
    record: str = "substeps",
):
    """Returns (PrecoderSet, clusters, SolveReport).

    With lam == 0 and singleton candidate sets this is exactly the plain
    WMMSE path (same iterates); the stop rule tracks the penalized utility
    U(R) - lam * sum ||V_i^q||.
    """
    cfg = utility_config or UtilityConfig(alpha=0.0)
    stop = stop_rule or StopRule()
    lam = cluster_config.lam
    t0 = time.perf_counter()
    sp = StreamProblem.for_serving_sets(instance, cluster_config.candidate_sets, slot=slot)
    sp.init_precoders(seed)

    scale_fn = None
    if not (cfg.kind == "alpha-fair" and cfg.alpha == 0.0):
        scale_fn = lambda rates: rate_gradient(cfg, rates)

    def utility_fn(rates):
        return evaluate(cfg, rates) - sp.penalty(lam)

    rep = SolveReport(algo="sparse-wmmse")
    steps = []
    for st in run_phases(
        sp, stop, lam=lam, prox_sweeps=sweeps, scale_fn=scale_fn,
        utility_fn=utility_fn, record=record, workers=workers,
    ):
        steps.append(st)
        rep.objective.append(st["objective"])
        rep.sum_rate.append(float(np.sum(st["rates"])))
        rep.min_rate.append(float(np.min(st["rates"])))
        rep.max_power_violation.append(st["max_power_violation"])
        if record == "substeps":
            rep.substep_objective.extend(st["substeps"])
        rep.extra_columns.setdefault("penalized_utility", []).append(st["utility"])
    rep.converged = bool(steps) and steps[-1]["done"]
    if not rep.converged:
        rep.flags.append("max-iterations")
    sp.update_receivers(workers)
    rep.final_rates = sp.user_rates()
    pset = precoder_set_from_stream(sp, instance, slot)
    sp.close()
    clusters = extract_clusters(instance, pset, cluster_config.candidate_sets, epsilon)
    rep.extra_columns["mean_cluster_size"] = [float(np.mean([len(c) for c in clusters]))]
    rep.wall_time = time.perf_counter() - t0
    return pset, clusters, rep


def collapse_lambda(instance: NetworkInstance, cluster_config: ClusterConfig, seed: int = 0,
                    slot: int = 0) -> float:
    """A penalty level that provably zeroes every block in the first v-sweep.

    Bounds the prox target ||a v - grad|| of any block during the sweep:
    ||v_b|| <= sqrt(pbar), |T[j, k]| <= sum_{b in j} ||X[q_b, k]|| sqrt(pbar),
    so ||grad_b|| <= sum_k weff_k ||X[q_b, k]|| tau_{j,k} + weff_j ||X[q_b, j]||.
    Once zero, u = 0 and w = 1 keep the iterates at zero.
    """
    sp = StreamProblem.for_serving_sets(instance, cluster_config.candidate_sets, slot=slot)
    sp.init_precoders(seed)
    sp.update_receivers()
    sp.update_weights()
    A, X = sp.quadratics()
    weff = sp.weff()
    bound = 0.0
    sqp = np.sqrt(instance.power_budget)
    for f in range(sp.F):
        curv = np.maximum(np.linalg.eigvalsh(A[f])[:, -1], 1e-12)  # (Q,)
        xn = np.linalg.norm(X[f], axis=2)  # (Q, K)
        for j in range(sp.K):
            rows = range(sp.sptr[j], sp.sptr[j + 1])
            tau_jk = sum(xn[sp.block_bs[b]] * sqp[sp.block_bs[b]] for b in rows)  # (K,)
            for b in rows:
                q = sp.block_bs[b]
                g = float(np.sum(weff[:, f] * xn[q] * tau_jk) + weff[j, f] * xn[q, j])
                bound = max(bound, curv[q] * sqp[q] + g)
    return float(bound)
