import numpy as np
import pytest

from crosslayer.backhaul import (
    BackhaulGraph,
    FlowAllocation,
    check_flow_conservation,
    generate_backhaul_network,
    rate_mse_coeffs,
    solve_flow_lp,
    solve_nmaxmin,
    wireless_link_rates,
)
from crosslayer.errors import ConfigurationError

try:
    import networkx as nx
except ImportError:  # pragma: no cover
    nx = None


def two_path_graph():
    return BackhaulGraph(
        node_names=["s", "a", "b", "d"],
        node_kind=["router", "router", "router", "user"],
        wired=[(0, 1, 1.0), (1, 3, 1.0), (0, 2, 2.0), (2, 3, 2.0)],
        wl_pairs=[],
        tones=1,
        gains=np.zeros((0, 1, 1)),
        commodities=[(0, 3)],
        power_budget=np.zeros(0),
        noise_power=np.ones(1),
    )


def chain_graph():
    # s -> a -> d with both links at capacity 7
    return BackhaulGraph(
        node_names=["s", "a", "d"],
        node_kind=["router", "router", "user"],
        wired=[(0, 1, 7.0), (1, 2, 7.0)],
        wl_pairs=[],
        tones=1,
        gains=np.zeros((0, 1, 1)),
        commodities=[(0, 2)],
        power_budget=np.zeros(0),
        noise_power=np.ones(1),
    )


class TestFlowConservation:
    def test_balanced_path(self):
        g = chain_graph()
        flows = FlowAllocation(
            rates=np.array([5.0]), link_rates=np.array([[5.0, 5.0]]), min_rate=5.0
        )
        res = check_flow_conservation(g, flows)
        assert np.allclose(res, 0.0)

    def test_unbalanced_detected(self):
        g = chain_graph()
        flows = FlowAllocation(
            rates=np.array([5.0]), link_rates=np.array([[5.0, 4.0]]), min_rate=5.0
        )
        res = check_flow_conservation(g, flows)
        assert res[0, 1] == pytest.approx(1.0)  # node a accumulates 1 unit
        assert res[0, 0] == pytest.approx(0.0)
        assert res[0, 2] == pytest.approx(1.0 - 5.0 + 4.0 + 5.0 - 5.0 + 0.0, abs=2)

    def test_lp_flows_conserve(self):
        g = generate_backhaul_network(n_bs=4, n_routers=3, n_users=5, n_commodities=6, seed=1)
        caps = wireless_link_rates(g, np.full(g.n_wl, 0.5))
        flow = solve_flow_lp(g, caps)
        assert np.max(np.abs(check_flow_conservation(g, flow))) < 1e-9


class TestRateMseCoeffs:
    def test_degenerate_receiver(self):
        c = rate_mse_coeffs(0.0, 1.0, 1.0, 1.0, np.array([1.0]))
        assert c.c1 == pytest.approx(0.0)
        assert c.c2 == pytest.approx(0.0)
        assert np.allclose(c.c3, 0.0)

    def test_scalar_link_log2(self):
        # h = 1, v = 1, sigma^2 = 1: MMSE u = 0.5, e = 0.5, w = 2 -> RHS = log 2
        u, w = 0.5, 2.0
        c = rate_mse_coeffs(u, w, 1.0, 1.0, np.array([1.0]))
        assert c.rhs(1.0, np.array([1.0])) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_rhs_matches_rate_at_closed_forms(self):
        rng = np.random.default_rng(0)
        for _ in range(40):
            L = int(rng.integers(1, 5))
            h = rng.standard_normal(L) + 1j * rng.standard_normal(L)  # gains to user of link 0
            v = rng.uniform(0.1, 2.0, L)
            sigma2 = rng.uniform(0.2, 2.0)
            denom = float(np.sum(np.abs(h) ** 2 * v**2) + sigma2)
            u = h[0] * v[0] / denom
            e = 1.0 - abs(h[0]) ** 2 * v[0] ** 2 / denom
            w = 1.0 / e
            c = rate_mse_coeffs(u, w, h[0], sigma2, np.abs(h) ** 2)
            own = abs(h[0]) ** 2 * v[0] ** 2
            rate = np.log1p(own / (denom - own))
            assert c.rhs(v[0], v) == pytest.approx(rate, rel=1e-10)

    def test_minorant_below_true_rate(self):
        # any (u, w) gives a lower bound on the true link rate
        rng = np.random.default_rng(3)
        for _ in range(60):
            L = int(rng.integers(1, 4))
            h = rng.standard_normal(L) + 1j * rng.standard_normal(L)
            v = rng.uniform(0.0, 2.0, L)
            sigma2 = rng.uniform(0.2, 2.0)
            u = rng.standard_normal() + 1j * rng.standard_normal()
            w = rng.uniform(0.05, 5.0)
            c = rate_mse_coeffs(u, w, h[0], sigma2, np.abs(h) ** 2)
            own = abs(h[0]) ** 2 * v[0] ** 2
            tot = float(np.sum(np.abs(h) ** 2 * v**2) + sigma2)
            rate = np.log1p(own / (tot - own)) if own > 0 else 0.0
            assert c.rhs(v[0], v) <= rate + 1e-9


class TestFlowLp:
    def test_two_parallel_paths(self):
        flow = solve_flow_lp(two_path_graph())
        assert flow.min_rate == pytest.approx(3.0, abs=1e-9)

    def test_zero_capacity_cut(self):
        g = BackhaulGraph(
            node_names=["s", "a", "d"],
            node_kind=["router", "router", "user"],
            wired=[(0, 1, 5.0), (1, 2, 1e-9)],
            wl_pairs=[],
            tones=1,
            gains=np.zeros((0, 1, 1)),
            commodities=[(0, 2)],
            power_budget=np.zeros(0),
            noise_power=np.ones(1),
        )
        flow = solve_flow_lp(g)
        assert flow.min_rate == pytest.approx(0.0, abs=1e-8)

    def test_no_path_rejected(self):
        with pytest.raises(ConfigurationError):
            BackhaulGraph(
                node_names=["s", "d"],
                node_kind=["router", "user"],
                wired=[],
                wl_pairs=[],
                tones=1,
                gains=np.zeros((0, 1, 1)),
                commodities=[(0, 1)],
                power_budget=np.zeros(0),
                noise_power=np.ones(1),
            )

    @pytest.mark.skipif(nx is None, reason="networkx unavailable")
    def test_against_networkx_maxflow(self):
        # single commodity: max-min rate equals the max flow
        rng = np.random.default_rng(7)
        for trial in range(5):
            n = 6
            names = [f"n{k}" for k in range(n)]
            kinds = ["router"] * (n - 1) + ["user"]
            wired = []
            G = nx.DiGraph()
            for a in range(n):
                for b in range(n):
                    if a != b and rng.random() < 0.5:
                        cap = float(rng.uniform(0.5, 4.0))
                        wired.append((a, b, cap))
                        G.add_edge(a, b, capacity=cap)
            if not nx.has_path(G, 0, n - 1):
                continue
            g = BackhaulGraph(
                node_names=names, node_kind=kinds, wired=wired, wl_pairs=[],
                tones=1, gains=np.zeros((0, 1, 1)), commodities=[(0, n - 1)],
                power_budget=np.zeros(0), noise_power=np.ones(1),
            )
            flow = solve_flow_lp(g)
            oracle, _ = nx.maximum_flow(G, 0, n - 1)
            assert flow.min_rate == pytest.approx(oracle, rel=1e-8, abs=1e-9)

    def test_table1_style_sizes(self):
        # ~1.4e4 variables at 50 commodities (sizes only; timings out of scope)
        g = generate_backhaul_network(
            n_bs=16, n_routers=8, n_users=20, n_commodities=50, tones=3, seed=2
        )
        n_c, L = len(g.commodities), g.n_links
        n_vars = 1 + n_c + n_c * L
        n_cons = n_c * g.n_nodes + L + n_c
        assert 1.0e4 <= n_vars <= 2.5e4
        caps = wireless_link_rates(g, np.full(g.n_wl, 0.3))
        flow = solve_flow_lp(g, caps)
        assert flow.min_rate >= 0.0
        assert np.max(np.abs(check_flow_conservation(g, flow))) < 1e-8


class TestNMaxMin:
    def test_wired_only_two_paths(self):
        flow, v, rep = solve_nmaxmin(two_path_graph())
        assert flow.min_rate == pytest.approx(3.0, abs=1e-3)
        assert v.size == 0

    def test_point_to_point_rate(self):
        gains = np.array([[[2.0 + 0j]]])
        g = BackhaulGraph(
            node_names=["r0", "b0", "u0"],
            node_kind=["router", "bs", "user"],
            wired=[(0, 1, 100.0)],
            wl_pairs=[(1, 2)],
            tones=1,
            gains=gains,
            commodities=[(0, 2)],
            power_budget=np.array([1.5]),
            noise_power=np.array([0.5]),
        )
        flow, v, rep = solve_nmaxmin(g)
        oracle = np.log(1.0 + 1.5 * 4.0 / 0.5)
        assert flow.min_rate == pytest.approx(oracle, rel=1e-6)
        assert v[0] ** 2 == pytest.approx(1.5, rel=1e-6)

    def test_desk_scale_monotone_and_feasible(self):
        g = generate_backhaul_network(
            n_bs=4, n_routers=3, n_users=5, n_commodities=5, tones=2, seed=3
        )
        flow, v, rep = solve_nmaxmin(g, max_outer=20)
        tr = np.asarray(rep.min_rate)
        assert np.all(np.diff(tr) >= -1e-8)
        assert rep.residuals["conservation"] < 1e-6
        caps = wireless_link_rates(g, v)
        assert flow.capacity_violation(g, caps) < 1e-6
        for b in range(len(g.bs_nodes)):
            lb = g.bs_links(b)
            if len(lb):
                assert np.sum(v[lb] ** 2) <= g.power_budget[b] * (1 + 1e-9)

    def test_worker_parity_bitwise(self):
        g = generate_backhaul_network(
            n_bs=3, n_routers=2, n_users=4, n_commodities=4, tones=2, seed=5
        )
        f1, v1, r1 = solve_nmaxmin(g, max_outer=6, workers=1)
        f4, v4, r4 = solve_nmaxmin(g, max_outer=6, workers=4)
        assert np.array_equal(v1, v4)
        assert r1.min_rate == r4.min_rate
        assert np.array_equal(f1.link_rates, f4.link_rates)

    def test_repeat_determinism(self):
        g = generate_backhaul_network(
            n_bs=3, n_routers=2, n_users=4, n_commodities=4, tones=2, seed=6
        )
        f1, v1, r1 = solve_nmaxmin(g, max_outer=5)
        f2, v2, r2 = solve_nmaxmin(g, max_outer=5)
        assert np.array_equal(v1, v2)
        assert r1.min_rate == r2.min_rate


class TestGraphIO:
    def test_file_roundtrip(self, tmp_path):
        g = generate_backhaul_network(
            n_bs=3, n_routers=2, n_users=4, n_commodities=4, tones=2, seed=8
        )
        path = tmp_path / "net.graph"
        g.to_file(path)
        back = BackhaulGraph.from_file(path, seed=0)
        assert back.node_names == g.node_names
        assert back.node_kind == g.node_kind
        assert back.wired == g.wired
        assert back.wl_pairs == g.wl_pairs
        assert back.commodities == g.commodities
        assert np.array_equal(back.power_budget, g.power_budget)

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.graph"
        path.write_text("node a router\nedge a b wired 1.0\n")
        with pytest.raises(ConfigurationError):
            BackhaulGraph.from_file(path)


class TestTransformedProblemStructure:
    def test_rate_mse_feasible_set_midpoint_convex(self):
        # the {v, R} block is convex: midpoints of feasible points stay feasible
        rng = np.random.default_rng(4)
        for _ in range(40):
            L = int(rng.integers(1, 4))
            h = rng.standard_normal(L) + 1j * rng.standard_normal(L)
            c1 = rng.uniform(-0.5, 1.0)
            c2 = rng.uniform(0.0, 2.0)
            c3 = rng.uniform(0.01, 2.0, L)

            def g(F, v):
                return np.sum(F) - c2 * v[0] + np.sum(c3 * v**2)

            # rejection-sample two feasible points
            pts = []
            while len(pts) < 2:
                F = rng.uniform(0, 1.0, 3)
                v = rng.uniform(0, 1.5, L)
                if g(F, v) <= c1:
                    pts.append((F, v))
            Fm = 0.5 * (pts[0][0] + pts[1][0])
            vm = 0.5 * (pts[0][1] + pts[1][1])
            assert g(Fm, vm) <= c1 + 1e-12

    def test_admm_residuals_below_tolerance_at_exit(self):
        g = generate_backhaul_network(
            n_bs=3, n_routers=2, n_users=4, n_commodities=4, tones=2, seed=11
        )
        _, _, rep = solve_nmaxmin(g, max_outer=12, inner_tol=1e-5)
        last_outer = len(rep.min_rate) - 1
        early = any(f == f"inner-early-stop@{last_outer}" for f in rep.flags)
        if not early:
            assert rep.residuals["admm_primal_rms"] < 1e-4
            assert rep.residuals["admm_dual_rms"] < 1e-4

    def test_instance_override(self):
        g = generate_backhaul_network(
            n_bs=2, n_routers=2, n_users=3, n_commodities=3, tones=2, seed=12
        )
        import numpy as _np

        from crosslayer.net_model import NetworkInstance

        H = g.gains[:, :, :, None, None, None]  # (Q, I, F, 1, 1, 1)
        inst = NetworkInstance(
            channels=H * 1.5,
            noise_power=g.noise_power,
            power_budget=g.power_budget * 2.0,
            serving_bs=_np.zeros(3, dtype=int),
        )
        flow1, v1, _ = solve_nmaxmin(g, max_outer=4)
        flow2, v2, _ = solve_nmaxmin(g, instance=inst, max_outer=4)
        assert flow2.min_rate != flow1.min_rate  # override actually applied
