import json
import subprocess
import sys

import numpy as np
import pytest

from crosslayer.errors import ConfigurationError
from crosslayer.harness import (
    ExperimentConfig,
    baseline_nn_wmmse,
    baseline_random_sched,
    baseline_svd_mmse_tdma,
    brute_force_sumrate,
    rate_cdf,
    run_experiment,
)
from crosslayer.net_model import NetworkInstance, random_instance
from crosslayer.report import SolveReport, StopRule
from crosslayer.wmmse import solve_wmmse


def siso_instance(h, sigma2=1.0, pbar=1.0):
    h = np.asarray(h, dtype=complex)
    Q, I = h.shape
    return NetworkInstance(
        channels=h.reshape(Q, I, 1, 1, 1, 1),
        noise_power=np.full(I, sigma2),
        power_budget=np.full(Q, pbar),
        serving_bs=np.arange(I),
    )


class TestBruteForce:
    def test_interference_free_two_links(self):
        inst = siso_instance([[1.0, 0.0], [0.0, 1.0]])
        assert brute_force_sumrate(inst, 400) == pytest.approx(2 * np.log(2.0), abs=1e-6)

    def test_symmetric_strong_interference_corner(self):
        # optimum sits at a corner of the power box (binary on/off)
        inst = siso_instance([[1.0, 1.0], [1.0, 1.0]])
        g = 401
        a = np.linspace(0, 1, g)
        p1, p2 = np.meshgrid(a**2, a**2, indexing="ij")
        r = np.log(1 + p1 / (1 + p2)) + np.log(1 + p2 / (1 + p1))
        best = np.unravel_index(np.argmax(r), r.shape)
        assert best[0] in (0, g - 1) and best[1] in (0, g - 1)
        assert brute_force_sumrate(inst, g) == pytest.approx(r[best], abs=1e-9)

    def test_oracle_refuses_large_instances(self):
        inst = random_instance(3, 3, seed=0)
        with pytest.raises(ConfigurationError):
            brute_force_sumrate(inst)


def test_rate_cdf_quantiles():
    points = rate_cdf([3.0, 1.0, 2.0])
    assert np.allclose(points, [[1.0, 1 / 3], [2.0, 2 / 3], [3.0, 1.0]])


class TestBaselines:
    def test_nn_wmmse_single_user_equals_wmmse(self):
        inst = random_instance(1, 1, seed=3, tx_antennas=3, rx_antennas=2)
        rep = baseline_nn_wmmse(inst, seed=1)
        _, rep_w = solve_wmmse(inst, seed=1)
        assert rep.final_rates[0] == pytest.approx(rep_w.final_rates[0], rel=1e-8)

    def test_svd_tdma_single_user_rate(self):
        inst = random_instance(1, 1, seed=4, tx_antennas=3, rx_antennas=2, power_budget=2.0)
        rep = baseline_svd_mmse_tdma(inst)
        smax = np.linalg.svd(inst.channels[0, 0, 0, 0], compute_uv=False)[0]
        oracle = np.log(1.0 + 2.0 * smax**2 / 1.0)
        assert rep.final_rates[0] == pytest.approx(oracle, rel=1e-10)

    def test_random_sched_all_users_equals_wmmse(self):
        inst = random_instance(2, 4, seed=5, tx_antennas=2, rx_antennas=2)
        rep = baseline_random_sched(inst, T=1, users_per_slot=4, seed=2)
        _, rep_w = solve_wmmse(inst, seed=2)
        assert rep.final_rates == pytest.approx(rep_w.final_rates, rel=1e-10)

    def test_svd_tdma_serves_each_user(self):
        inst = random_instance(2, 4, seed=6, tx_antennas=2, rx_antennas=2)
        rep = baseline_svd_mmse_tdma(inst)
        assert rep.extra_columns["slots"] == [2]
        assert np.all(rep.final_rates > 0)


class TestReportCsv:
    def test_roundtrip_bit_exact(self, tmp_path):
        inst = random_instance(2, 3, seed=7, tx_antennas=2, rx_antennas=2)
        _, rep = solve_wmmse(inst, seed=0)
        path = tmp_path / "report.csv"
        rep.to_csv(path)
        back = SolveReport.from_csv(path)
        assert back.objective == rep.objective
        assert back.sum_rate == rep.sum_rate
        assert back.min_rate == rep.min_rate
        assert back.max_power_violation == rep.max_power_violation


class TestRunExperiment:
    def test_wmmse_artifacts(self, tmp_path):
        inst = random_instance(2, 3, seed=1, tx_antennas=2, rx_antennas=2)
        cfg = {
            "algorithm": "wmmse",
            "seeds": [0, 1],
            "out_dir": str(tmp_path / "runs"),
            "instance": inst.to_config(),
        }
        results = run_experiment(cfg)
        assert len(results) == 2
        for seed, rep in results:
            sub = tmp_path / "runs" / f"seed-{seed}"
            assert (sub / "report.csv").exists()
            assert (sub / "rates.csv").exists()
            assert (sub / "cdf.csv").exists()
            manifest = json.loads((sub / "manifest.json").read_text())
            assert manifest["seed"] == seed
            assert manifest["algorithm"] == "wmmse"
            back = SolveReport.from_csv(sub / "report.csv")
            assert np.all(np.diff(back.sum_rate) >= -1e-9)
        m0 = json.loads((tmp_path / "runs/seed-0/manifest.json").read_text())
        m1 = json.loads((tmp_path / "runs/seed-1/manifest.json").read_text())
        assert m0["config_hash"] == m1["config_hash"]

    def test_bits_units(self, tmp_path):
        inst = random_instance(1, 1, seed=2)
        base = {
            "algorithm": "wmmse",
            "seeds": [0],
            "instance": inst.to_config(),
        }
        out_n = run_experiment({**base, "out_dir": str(tmp_path / "n"), "units": "nats"})
        out_b = run_experiment({**base, "out_dir": str(tmp_path / "b"), "units": "bits"})
        rn = float((tmp_path / "n/seed-0/rates.csv").read_text().splitlines()[1].split(",")[1])
        rb = float((tmp_path / "b/seed-0/rates.csv").read_text().splitlines()[1].split(",")[1])
        assert rb == pytest.approx(rn / np.log(2.0), rel=1e-12)

    def test_unknown_algorithm_rejected(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict({"algorithm": "magic", "seeds": [0]})

    def test_hex_layout_config(self, tmp_path):
        cfg = {
            "algorithm": "wmmse",
            "seeds": [3],
            "instance": {
                "layout": "hex", "cells": 1, "sectors_per_cell": 3,
                "users_per_sector": 1, "tx_antennas": 2, "rx_antennas": 2,
            },
        }
        (seed, rep), = run_experiment(cfg)
        assert rep.final_rates.shape == (3,)


class TestCli:
    def run_cli(self, *argv):
        return subprocess.run(
            [sys.executable, "-m", "crosslayer.cli", *argv],
            capture_output=True, text=True,
        )

    def test_solve_and_cdf(self, tmp_path):
        inst = random_instance(2, 2, seed=1, tx_antennas=2, rx_antennas=2)
        cfg_path = tmp_path / "inst.json"
        inst.save(cfg_path)
        out = self.run_cli(
            "solve", "--algo", "wmmse", "--config", str(cfg_path),
            "--seed", "3", "--out", str(tmp_path / "run"),
        )
        assert out.returncode == 0, out.stderr
        assert "seed=3" in out.stdout
        res = self.run_cli(
            "cdf", "--rates", str(tmp_path / "run/seed-3/rates.csv"),
            "--out", str(tmp_path / "cdf.csv"),
        )
        assert res.returncode == 0
        assert (tmp_path / "cdf.csv").read_text().startswith("rate,quantile")

    def test_oracle_maxflow(self, tmp_path):
        graph = tmp_path / "net.graph"
        graph.write_text(
            "node s router\nnode a router\nnode b router\nnode d user\n"
            "edge s a wired 1.0\nedge a d wired 1.0\n"
            "edge s b wired 2.0\nedge b d wired 2.0\n"
            "commodity s d\n"
        )
        out = self.run_cli("oracle", "--kind", "maxflow", "--graph", str(graph))
        assert out.returncode == 0
        assert out.stdout.strip() == "maxmin-flow=3.0"

    def test_config_error_exit_code(self, tmp_path):
        out = self.run_cli("solve", "--algo", "wmmse", "--config", str(tmp_path / "nope.json"))
        assert out.returncode == 1

    def test_sparse_lambda_flag(self, tmp_path):
        inst = random_instance(2, 2, seed=2, tx_antennas=2, rx_antennas=2)
        cfg_path = tmp_path / "inst.json"
        inst.save(cfg_path)
        out = self.run_cli(
            "solve", "--algo", "sparse-wmmse", "--config", str(cfg_path),
            "--lambda", "0.2", "--seed", "0",
        )
        assert out.returncode == 0, out.stderr

    def test_nmaxmin_graph_flag(self, tmp_path):
        graph = tmp_path / "net.graph"
        graph.write_text(
            "tones 1\nnode r0 router\nnode b0 bs\nnode u0 user\n"
            "power b0 2.0\nnoise u0 1.0\n"
            "edge r0 b0 wired 50.0\nedge b0 u0 wireless 1.0\n"
            "commodity r0 u0\n"
        )
        out = self.run_cli(
            "solve", "--algo", "nmaxmin", "--graph", str(graph), "--seed", "1",
        )
        assert out.returncode == 0, out.stderr
