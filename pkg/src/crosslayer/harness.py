"""Experiment orchestration: config parsing, algorithm dispatch, shared
baselines, CDF/trace emission, and brute-force oracles for tests."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .net_model import NetworkInstance, generate_hex_layout, random_instance
from .report import SolveReport, StopRule
from .rng import rng_for
from .utility import UtilityConfig, evaluate

__all__ = [
    "ExperimentConfig",
    "run_experiment",
    "brute_force_sumrate",
    "rate_cdf",
    "baseline_nn_wmmse",
    "baseline_svd_mmse_tdma",
    "baseline_random_sched",
]

LN2 = float(np.log(2.0))


# -- oracles ----------------------------------------------------------------


def brute_force_sumrate(instance: NetworkInstance, grid_resolution: int = 200) -> float:
    """Grid search over per-user beam amplitudes for <=2-user SISO single-tone
    instances; global optimum within O(1/grid) accuracy."""
    if (
        instance.num_users > 2
        or instance.tx_antennas != 1
        or instance.rx_antennas != 1
        or instance.tones != 1
    ):
        raise ConfigurationError("brute-force oracle handles <= 2 users, SISO, single tone")
    h = instance.channels[:, :, 0, 0, 0, 0]  # (Q, I)
    serv = instance.serving_bs
    sigma2 = instance.noise_power
    I = instance.num_users
    if I == 1:
        g = abs(h[serv[0], 0]) ** 2
        p = np.linspace(0.0, instance.power_budget[serv[0]], grid_resolution)
        return float(np.max(np.log(1.0 + g * p / sigma2[0])))

    a1 = np.linspace(0.0, np.sqrt(instance.power_budget[serv[0]]), grid_resolution)
    a2 = np.linspace(0.0, np.sqrt(instance.power_budget[serv[1]]), grid_resolution)
    p1, p2 = np.meshgrid(a1**2, a2**2, indexing="ij")
    if serv[0] == serv[1]:  # shared BS: joint power budget
        feasible = p1 + p2 <= instance.power_budget[serv[0]]
    else:
        feasible = np.ones_like(p1, dtype=bool)
    g = np.abs(h) ** 2
    r1 = np.log(1.0 + g[serv[0], 0] * p1 / (sigma2[0] + g[serv[1], 0] * p2))
    r2 = np.log(1.0 + g[serv[1], 1] * p2 / (sigma2[1] + g[serv[0], 1] * p1))
    total = np.where(feasible, r1 + r2, -np.inf)
    return float(np.max(total))


def rate_cdf(rates) -> np.ndarray:
    """Empirical CDF points: rows (rate, quantile) with quantile k/n."""
    r = np.sort(np.asarray(rates, dtype=float))
    q = np.arange(1, len(r) + 1) / len(r)
    return np.column_stack([r, q])


# -- shared baselines ---------------------------------------------------------


def _weighted_wmmse(instance, serving, cfg, stop, seed, workers):
    """Greedy-assignment helper: adaptively reweighted WMMSE at T = 1."""
    from dataclasses import replace

    from .scheduler import solve_joint_scheduling

    inst = replace(instance, serving_bs=serving)
    return solve_joint_scheduling(inst, cfg, T=1, stop_rule=stop, seed=seed, workers=workers)


def baseline_nn_wmmse(
    instance, utility_config=None, stop_rule=None, *, seed=0, workers=1
):
    """Assign each user to the BS with the strongest instantaneous channel
    (slot-0 Frobenius norm), then reweighted WMMSE for the utility."""
    cfg = utility_config or UtilityConfig(alpha=0.0)
    norms = np.sqrt(np.sum(np.abs(instance.channels[:, :, :, 0]) ** 2, axis=(2, 3, 4)))
    serving = np.argmax(norms, axis=0)  # (I,) strongest BS per user
    state, rep = _weighted_wmmse(instance, serving, cfg, stop_rule or StopRule(), seed, workers)
    rep.algo = "nn-wmmse"
    rep.extra_columns["assignment"] = serving.tolist()
    return rep


def baseline_svd_mmse_tdma(instance, T=None, *, seed=0, workers=1):
    """Each BS serves its own users round-robin across slots with the
    dominant-singular-vector precoder at full power (split equally across
    tones, single beam); users apply MMSE receivers.

    The slot cycle defaults to the largest per-BS load; slot channels reuse
    slot 0 when the instance carries a single slot.
    """
    from .engine import StreamProblem

    t0 = time.perf_counter()
    Q, I, F = instance.num_bs, instance.num_users, instance.tones
    users_of = [np.flatnonzero(instance.serving_bs == q) for q in range(Q)]
    load = max((len(u) for u in users_of), default=1)
    T = load if T is None else T
    rates = np.zeros(I)
    alpha = np.zeros((I, T), dtype=np.int64)
    for t in range(T):
        active = []
        for q in range(Q):
            if len(users_of[q]):
                active.append(int(users_of[q][t % len(users_of[q])]))
        slot = t if t < instance.slots else 0
        sp = StreamProblem.for_serving_sets(
            instance,
            [(int(instance.serving_bs[i]),) if i in active else () for i in range(I)],
            slot=slot,
        )
        for b in range(sp.B):
            i = int(sp.stream_user[sp.block_stream[b]])
            q = int(sp.block_bs[b])
            for f in range(F):
                H = instance.channels[q, i, f, slot]
                _, _, vh = np.linalg.svd(H)
                sp.V[b, f] = np.sqrt(instance.power_budget[q] / F) * vh[0].conj()
        sp.update_receivers(workers)
        r = sp.user_rates()
        rates += r
        for i in active:
            alpha[i, t] = 1
        sp.close()
    rep = SolveReport(algo="svd-mmse-tdma")
    rep.final_rates = rates
    rep.sum_rate = [float(np.sum(rates))]
    rep.min_rate = [float(np.min(rates))]
    rep.extra_columns["slots"] = [T]
    rep.wall_time = time.perf_counter() - t0
    return rep


def baseline_random_sched(
    instance,
    T=None,
    *,
    users_per_slot=None,
    utility_config=None,
    stop_rule=None,
    seed=0,
    workers=1,
):
    """Uniform random scheduling with a fixed per-slot user count, then
    per-slot sum-rate WMMSE on the scheduled users."""
    from .wmmse import solve_wmmse

    t0 = time.perf_counter()
    I = instance.num_users
    T = instance.slots if T is None else T
    if T > instance.slots:
        raise ConfigurationError("instance carries fewer slots than requested")
    n_active = int(np.ceil(I / T)) if users_per_slot is None else int(users_per_slot)
    n_active = min(max(n_active, 1), I)
    rng = rng_for(seed, "random-sched")
    rates = np.zeros(I)
    alpha = np.zeros((I, T), dtype=np.int64)
    for t in range(T):
        if n_active == I:
            active = np.arange(I)
        else:
            active = np.sort(rng.choice(I, size=n_active, replace=False))
        serving_sets = [
            (int(instance.serving_bs[i]),) if i in set(active.tolist()) else ()
            for i in range(I)
        ]
        _, rep_t = solve_wmmse(
            instance, serving_sets=serving_sets, seed=seed, slot=t,
            stop_rule=stop_rule, workers=workers, record="none",
        )
        rates += rep_t.final_rates
        alpha[active, t] = 1
    rep = SolveReport(algo="random-sched")
    rep.final_rates = rates
    rep.sum_rate = [float(np.sum(rates))]
    rep.min_rate = [float(np.min(rates))]
    rep.extra_columns["users_per_slot"] = [n_active]
    rep.wall_time = time.perf_counter() - t0
    return rep


# -- experiment orchestration -------------------------------------------------

ALGORITHMS = (
    "wmmse",
    "joint-sched",
    "joint-assign",
    "sparse-wmmse",
    "nmaxmin",
    "stochastic-wmmse",
    "nn-wmmse",
    "svd-mmse-tdma",
    "random-sched",
    "one-sample",
    "mean",
    "sgd",
)


@dataclass
class ExperimentConfig:
    algorithm: str
    seeds: list
    out_dir: str | None = None
    instance: dict | None = None
    instance_path: str | None = None
    graph_path: str | None = None
    utility: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    units: str = "nats"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.units not in ("nats", "bits"):
            raise ConfigurationError("units must be 'nats' or 'bits'")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.instance_path and not Path(self.instance_path).exists():
            raise ConfigurationError(f"instance file not found: {self.instance_path}")
        if self.graph_path and not Path(self.graph_path).exists():
            raise ConfigurationError(f"graph file not found: {self.graph_path}")
        if self.algorithm == "nmaxmin" and not self.graph_path:
            raise ConfigurationError("nmaxmin requires graph_path")
        if self.algorithm != "nmaxmin" and not (self.instance or self.instance_path):
            raise ConfigurationError(f"{self.algorithm} requires an instance")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "seed" in d and "seeds" not in d:
            d["seeds"] = [d.pop("seed")]
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"malformed config {path}: {exc}")

    def config_hash(self) -> str:
        blob = json.dumps(
            {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "out_dir"},
            sort_keys=True, default=str,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _load_instance(cfg: ExperimentConfig, seed: int) -> NetworkInstance:
    if cfg.instance_path:
        return NetworkInstance.load(cfg.instance_path, seed=seed)
    inst = dict(cfg.instance)
    kind = inst.pop("layout", None)
    if kind == "hex":
        return generate_hex_layout(seed=inst.pop("seed", seed), **inst)
    if kind == "random":
        return random_instance(seed=inst.pop("seed", seed), **inst)
    if kind is not None and kind != "explicit":
        raise ConfigurationError(f"unknown layout kind {kind!r}")
    return NetworkInstance.from_config(inst, seed=seed)


def _run_one(cfg: ExperimentConfig, seed: int):
    from .assignment import solve_joint_assignment
    from .backhaul import BackhaulGraph, solve_nmaxmin
    from .clustering import ClusterConfig, solve_sparse_wmmse
    from .net_model import build_estimation_table
    from .report import StopRule as SR
    from .scheduler import solve_joint_scheduling
    from .stochastic import baselines as stoch_baselines
    from .stochastic import run_stochastic
    from .wmmse import solve_wmmse

    p = dict(cfg.params)
    workers = int(p.pop("workers", 1))
    ucfg = UtilityConfig(**cfg.utility) if cfg.utility else None
    stop = SR(p.pop("rel_tol", 1e-6), p.pop("max_iters", 500))

    if cfg.algorithm == "nmaxmin":
        graph = BackhaulGraph.from_file(cfg.graph_path, seed=seed)
        _, _, rep = solve_nmaxmin(graph, workers=workers, **p)
        return rep

    inst = _load_instance(cfg, seed)
    if cfg.algorithm == "wmmse":
        _, rep = solve_wmmse(inst, stop_rule=stop, seed=seed, workers=workers, **p)
    elif cfg.algorithm == "joint-sched":
        T = int(p.pop("slots", inst.slots))
        if inst.slots == 1 and T > 1:
            inst = inst.with_slots(T)
        _, rep = solve_joint_scheduling(
            inst, ucfg, T=T, stop_rule=stop, seed=seed, workers=workers, **p
        )
    elif cfg.algorithm == "joint-assign":
        _, rep = solve_joint_assignment(
            inst, ucfg, stop_rule=stop, seed=seed, workers=workers, **p
        )
    elif cfg.algorithm == "sparse-wmmse":
        lam = float(p.pop("lam", p.pop("lambda", 0.0)))
        ccfg = ClusterConfig.all_bs(inst, lam)
        _, _, rep = solve_sparse_wmmse(
            inst, ccfg, ucfg, stop_rule=stop, seed=seed, workers=workers, **p
        )
    elif cfg.algorithm == "stochastic-wmmse":
        table = build_estimation_table(
            inst, seed=seed,
            eta_db=float(p.pop("eta_db", 6.0)),
            gamma=float(p.pop("gamma", 1.0)),
            snr_db=float(p.pop("snr_db", 15.0)),
        )
        _, rep = run_stochastic(
            inst, table,
            iterations=int(p.pop("iterations", 200)),
            seed=seed, workers=workers, **p,
        )
    elif cfg.algorithm in ("one-sample", "mean", "sgd"):
        table = build_estimation_table(
            inst, seed=seed,
            eta_db=float(p.pop("eta_db", 6.0)),
            gamma=float(p.pop("gamma", 1.0)),
            snr_db=float(p.pop("snr_db", 15.0)),
        )
        _, rep = stoch_baselines(inst, table, cfg.algorithm, seed=seed, workers=workers, **p)
    elif cfg.algorithm == "nn-wmmse":
        rep = baseline_nn_wmmse(inst, ucfg, stop, seed=seed, workers=workers)
    elif cfg.algorithm == "svd-mmse-tdma":
        rep = baseline_svd_mmse_tdma(inst, seed=seed, workers=workers, **p)
    elif cfg.algorithm == "random-sched":
        T = int(p.pop("slots", inst.slots))
        if inst.slots == 1 and T > 1:
            inst = inst.with_slots(T)
        rep = baseline_random_sched(inst, T, seed=seed, workers=workers, **p)
    else:  # pragma: no cover
        raise ConfigurationError(cfg.algorithm)
    return rep


def _unit_scale(units: str) -> float:
    return 1.0 / LN2 if units == "bits" else 1.0


def run_experiment(config) -> list:
    """Run every seed of an experiment and write its artifacts.

    Per seed: <out>/seed-<n>/{report.csv, rates.csv, cdf.csv, manifest.json}.
    Returns [(seed, SolveReport), ...].
    """
    if isinstance(config, (str, Path)):
        cfg = ExperimentConfig.from_file(config)
    elif isinstance(config, dict):
        cfg = ExperimentConfig.from_dict(config)
    else:
        cfg = config
    scale = _unit_scale(cfg.units)
    results = []
    for seed in cfg.seeds:
        rep = _run_one(cfg, seed)
        results.append((seed, rep))
        if cfg.out_dir:
            sub = Path(cfg.out_dir) / f"seed-{seed}"
            sub.mkdir(parents=True, exist_ok=True)
            rep.to_csv(sub / "report.csv")
            if rep.final_rates is not None:
                rates = np.asarray(rep.final_rates) * scale
                with open(sub / "rates.csv", "w") as fh:
                    fh.write(f"user,rate_{cfg.units}\n")
                    for i, r in enumerate(rates):
                        fh.write(f"{i},{float(r)!r}\n")
                cdf = rate_cdf(rates)
                with open(sub / "cdf.csv", "w") as fh:
                    fh.write("rate,quantile\n")
                    for r, q in cdf:
                        fh.write(f"{float(r)!r},{float(q)!r}\n")
            manifest = {
                "seed": seed,
                "algorithm": cfg.algorithm,
                "config_hash": cfg.config_hash(),
                "version": _pkg_version(),
                "units": cfg.units,
                "wall_time": rep.wall_time,
                "converged": rep.converged,
                "flags": rep.flags,
            }
            with open(sub / "manifest.json", "w") as fh:
                json.dump(manifest, fh, indent=1)
    return results


def _pkg_version() -> str:
    from . import __version__

    return __version__
