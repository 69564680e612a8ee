"""Compare the compiled kernel backend against the pure-numpy fallback.

Times the four hot kernels in isolation and a full precoding solve with the
engine bound to each backend.  Run from the repo root:

    python benchmarks/bench_kernels.py [--sizes small,medium,large]
"""

import argparse
import time

import numpy as np

import crosslayer.engine as engine
from crosslayer._kernels import available_backends
from crosslayer.net_model import random_instance
from crosslayer.report import StopRule
from crosslayer.wmmse import solve_wmmse

SIZES = {
    "small": dict(num_bs=4, num_users=8, tx_antennas=2, rx_antennas=2),
    "medium": dict(num_bs=19, num_users=38, tx_antennas=4, rx_antennas=2),
    "large": dict(num_bs=57, num_users=114, tx_antennas=4, rx_antennas=2),
}


def time_call(fn, repeat=5):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(backends, size):
    inst = random_instance(seed=0, **SIZES[size])
    sp = engine.StreamProblem.for_serving_sets(inst)
    sp.init_precoders(0)
    H, V = sp.H[0], np.ascontiguousarray(sp.V[:, 0])
    K, I, N, M, Q = sp.K, sp.I, sp.N, sp.M, sp.Q
    G = np.zeros((K, I, N), dtype=np.complex128)
    U = np.zeros((K, N), dtype=np.complex128)
    E = np.zeros(K)
    A = np.zeros((Q, M, M), dtype=np.complex128)
    X = np.zeros((Q, K, M), dtype=np.complex128)
    weff = np.ones(K)
    rows = {}
    for name, mod in backends.items():
        mod.effective_channels(H, V, sp.sptr, sp.block_bs, G, 0, K)
        rows[name] = {
            "effective_channels": time_call(
                lambda: mod.effective_channels(H, V, sp.sptr, sp.block_bs, G, 0, K)
            ),
            "receivers_mse": time_call(
                lambda: mod.receivers_mse(G, sp.uptr, sp.uidx, sp.noise, U, E, 0, I)
            ),
            "general_mse": time_call(
                lambda: mod.general_mse(G, U, sp.stream_user, sp.noise, E, 0, K)
            ),
            "precoder_quadratics": time_call(
                lambda: mod.precoder_quadratics(H, U, weff, sp.stream_user, A, X, 0, Q)
            ),
        }
    return rows


def bench_solve(backends, size):
    inst = random_instance(seed=0, **SIZES[size])
    out = {}
    for name, mod in backends.items():
        engine.core = mod
        out[name] = time_call(
            lambda: solve_wmmse(inst, seed=1, stop_rule=StopRule(0.0, 30), record="none"),
            repeat=3,
        )
    return out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="small,medium,large")
    args = parser.parse_args()
    backends = available_backends()
    print(f"backends available: {sorted(backends)}")
    default_core = engine.core
    try:
        for size in args.sizes.split(","):
            print(f"\n== {size}: {SIZES[size]}")
            rows = bench_kernels(backends, size)
            kernels = list(next(iter(rows.values())))
            for kern in kernels:
                cells = "  ".join(f"{name}={rows[name][kern]*1e6:9.1f}us" for name in sorted(rows))
                print(f"  {kern:22s} {cells}")
            solve = bench_solve(backends, size)
            cells = "  ".join(f"{name}={solve[name]*1e3:9.2f}ms" for name in sorted(solve))
            print(f"  {'solve_wmmse (30 it)':22s} {cells}")
            if len(solve) == 2:
                print(f"  speedup (solve): {solve['python'] / solve['cython']:.2f}x")
    finally:
        engine.core = default_core


if __name__ == "__main__":
    main()
