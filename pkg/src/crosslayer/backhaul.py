"""Network-layer model and the min-rate-maximizing joint routing/precoding
solver.

A BackhaulGraph couples a wired multicommodity flow network (routers, BSs,
users) with SISO wireless access links (BS, user, tone).  The outer solver
alternates closed-form receiver/weight updates per wireless link with an
inner consensus-ADMM solve of the convex {v, R} subproblem, in which the
wireless capacity constraints are replaced by their concave quadratic
rate-MSE minorants.  After each outer iteration the flows are re-solved
exactly (LP) against the true wireless rates at the current precoders, so
the reported min-rate trace is feasible and monotone.

Wireless precoders are real and nonnegative: the SISO rate depends only on
|v|, so the phase is absorbed into the receivers without loss.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
from scipy.optimize import linprog

from .errors import ConfigurationError, NumericError
from .net_model import pathloss_variance
from .report import SolveReport
from .rng import rng_for

__all__ = [
    "BackhaulGraph",
    "FlowAllocation",
    "RateMseCoefficients",
    "check_flow_conservation",
    "rate_mse_coeffs",
    "wireless_link_rates",
    "solve_flow_lp",
    "solve_nmaxmin",
    "generate_backhaul_network",
]

NODE_KINDS = ("router", "bs", "user")


@dataclass
class BackhaulGraph:
    """Wired links plus SISO wireless links (bs, user, tone).

    Wireless link ids follow the wired ones: link L_w + p * F + f is pair p
    on tone f.  `gains[b, u, f]` is the complex channel from BS-node index b
    to user-node index u; interference at a user sums over every
    transmitting same-tone link, so the gain tensor covers all pairs of
    participating nodes.
    """

    node_names: list
    node_kind: list
    wired: list                      # (src_node, dst_node, capacity)
    wl_pairs: list                   # (bs_node, user_node)
    tones: int
    gains: np.ndarray                # (n_bs, n_users, F) complex
    commodities: list                # (src_node, dst_node)
    power_budget: np.ndarray         # (n_bs,)
    noise_power: np.ndarray          # (n_users,)

    def __post_init__(self):
        self.n_nodes = len(self.node_names)
        if len(self.node_kind) != self.n_nodes:
            raise ConfigurationError("node_kind must match node_names")
        for kind in self.node_kind:
            if kind not in NODE_KINDS:
                raise ConfigurationError(f"unknown node kind {kind!r}")
        self.bs_nodes = [n for n, k in enumerate(self.node_kind) if k == "bs"]
        self.user_nodes = [n for n, k in enumerate(self.node_kind) if k == "user"]
        self.bs_index = {n: j for j, n in enumerate(self.bs_nodes)}
        self.user_index = {n: j for j, n in enumerate(self.user_nodes)}
        self.power_budget = np.asarray(self.power_budget, dtype=float)
        self.noise_power = np.asarray(self.noise_power, dtype=float)
        if np.any(self.power_budget <= 0) or np.any(self.noise_power <= 0):
            raise ConfigurationError("power budgets and noise powers must be > 0")
        self.gains = np.asarray(self.gains, dtype=np.complex128)
        if self.gains.shape != (len(self.bs_nodes), len(self.user_nodes), self.tones):
            raise ConfigurationError("gains tensor must be (n_bs, n_users, tones)")
        for src, dst, cap in self.wired:
            if cap <= 0:
                raise ConfigurationError("wired capacities must be > 0")
            if not (0 <= src < self.n_nodes and 0 <= dst < self.n_nodes):
                raise ConfigurationError("wired edge references unknown node")
        for b, u in self.wl_pairs:
            if self.node_kind[b] != "bs" or self.node_kind[u] != "user":
                raise ConfigurationError("wireless pairs must run from a BS to a user")

        self.n_wired = len(self.wired)
        self.n_wl = len(self.wl_pairs) * self.tones
        self.n_links = self.n_wired + self.n_wl
        self.link_src = np.empty(self.n_links, dtype=np.int64)
        self.link_dst = np.empty(self.n_links, dtype=np.int64)
        for l, (s, d, _) in enumerate(self.wired):
            self.link_src[l], self.link_dst[l] = s, d
        for p, (b, u) in enumerate(self.wl_pairs):
            for f in range(self.tones):
                l = self.n_wired + p * self.tones + f
                self.link_src[l], self.link_dst[l] = b, u
        self.wired_capacity = np.array([c for _, _, c in self.wired], dtype=float)
        # per wireless link: tone, own complex gain, serving BS row, user row
        self.wl_tone = np.array(
            [f for _ in self.wl_pairs for f in range(self.tones)], dtype=np.int64
        )
        self.wl_bs = np.array(
            [self.bs_index[b] for b, _ in self.wl_pairs for _ in range(self.tones)],
            dtype=np.int64,
        )
        self.wl_user = np.array(
            [self.user_index[u] for _, u in self.wl_pairs for _ in range(self.tones)],
            dtype=np.int64,
        )
        self.wl_gain = self.gains[self.wl_bs, self.wl_user, self.wl_tone]
        # cross gains between same-tone links: xg[l, n] = |h from BS(n) to user(l)|^2
        self.tone_links = [
            np.flatnonzero(self.wl_tone == f) for f in range(self.tones)
        ]
        self._validate_paths()

    def _validate_paths(self):
        out_adj = [[] for _ in range(self.n_nodes)]
        for l in range(self.n_links):
            out_adj[self.link_src[l]].append(self.link_dst[l])
        for i, (src, dst) in enumerate(self.commodities):
            seen = {src}
            queue = deque([src])
            while queue:
                v = queue.popleft()
                if v == dst:
                    break
                for w in out_adj[v]:
                    if w not in seen:
                        seen.add(w)
                        queue.append(w)
            else:
                raise ConfigurationError(f"commodity {i} has no path {src} -> {dst}")

    def cross_gain_sq(self, f: int) -> np.ndarray:
        """|h|^2 from the BS of link n to the user of link l, for links on
        tone f: (L_f, L_f) with rows indexed like tone_links[f]."""
        links = self.tone_links[f]
        return np.abs(self.gains[np.ix_(self.wl_bs[links], self.wl_user[links], [f])][:, :, 0].T) ** 2

    def bs_links(self, b_row: int) -> np.ndarray:
        """Wireless link indices (into the wl arrays) transmitted by BS row."""
        return np.flatnonzero(self.wl_bs == b_row)

    # -- text format --------------------------------------------------------

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"tones {self.tones}\n")
            for name, kind in zip(self.node_names, self.node_kind):
                fh.write(f"node {name} {kind}\n")
            for n, kind in enumerate(self.node_kind):
                if kind == "bs":
                    fh.write(
                        f"power {self.node_names[n]} {float(self.power_budget[self.bs_index[n]])!r}\n"
                    )
                if kind == "user":
                    fh.write(
                        f"noise {self.node_names[n]} {float(self.noise_power[self.user_index[n]])!r}\n"
                    )
            for s, d, cap in self.wired:
                fh.write(f"edge {self.node_names[s]} {self.node_names[d]} wired {float(cap)!r}\n")
            for b, u in self.wl_pairs:
                var = float(np.mean(np.abs(self.gains[self.bs_index[b], self.user_index[u]]) ** 2))
                fh.write(f"edge {self.node_names[b]} {self.node_names[u]} wireless {var!r}\n")
            for s, d in self.commodities:
                fh.write(f"commodity {self.node_names[s]} {self.node_names[d]}\n")

    @classmethod
    def from_file(cls, path, seed: int = 0) -> "BackhaulGraph":
        """Edge-list text format; wireless edge capacities are pathloss
        variances, from which per-tone Rayleigh gains are drawn with `seed`.
        Cross-interference applies between the listed pairs only."""
        tones = 1
        names, kinds = [], []
        wired, wl, commodities = [], [], []
        power, noise = {}, {}
        with open(path) as fh:
            for raw in fh:
                line = raw.split("#")[0].strip()
                if not line:
                    continue
                parts = line.split()
                try:
                    if parts[0] == "tones":
                        tones = int(parts[1])
                    elif parts[0] == "node":
                        names.append(parts[1])
                        kinds.append(parts[2])
                    elif parts[0] == "power":
                        power[parts[1]] = float(parts[2])
                    elif parts[0] == "noise":
                        noise[parts[1]] = float(parts[2])
                    elif parts[0] == "edge":
                        src, dst, kind, value = parts[1], parts[2], parts[3], float(parts[4])
                        if kind == "wired":
                            wired.append((src, dst, value))
                        elif kind == "wireless":
                            wl.append((src, dst, value))
                        else:
                            raise ConfigurationError(f"unknown edge kind {kind!r}")
                    elif parts[0] == "commodity":
                        commodities.append((parts[1], parts[2]))
                    else:
                        raise ConfigurationError(f"unknown directive {parts[0]!r}")
                except (IndexError, ValueError) as exc:
                    raise ConfigurationError(f"malformed graph line: {line!r} ({exc})")
        index = {name: n for n, name in enumerate(names)}
        missing = [
            n for pair in (wired + wl + [(s, d, None) for s, d in commodities])
            for n in pair[:2] if n not in index
        ]
        if missing:
            raise ConfigurationError(f"edges reference undeclared nodes: {sorted(set(missing))}")
        bs_nodes = [n for n, k in enumerate(kinds) if k == "bs"]
        user_nodes = [n for n, k in enumerate(kinds) if k == "user"]
        bs_row = {n: j for j, n in enumerate(bs_nodes)}
        user_row = {n: j for j, n in enumerate(user_nodes)}
        rng = rng_for(seed, "backhaul-gains")
        gains = np.zeros((len(bs_nodes), len(user_nodes), tones), dtype=np.complex128)
        for src, dst, var in wl:
            b, u = bs_row[index[src]], user_row[index[dst]]
            z = rng.standard_normal(tones) + 1j * rng.standard_normal(tones)
            gains[b, u] = np.sqrt(var / 2.0) * z
        return cls(
            node_names=names,
            node_kind=kinds,
            wired=[(index[s], index[d], c) for s, d, c in wired],
            wl_pairs=[(index[s], index[d]) for s, d, _ in wl],
            tones=tones,
            gains=gains,
            commodities=[(index[s], index[d]) for s, d in commodities],
            power_budget=np.array([power.get(names[n], 1.0) for n in bs_nodes]),
            noise_power=np.array([noise.get(names[n], 1.0) for n in user_nodes]),
        )


@dataclass
class FlowAllocation:
    rates: np.ndarray        # (n_c,) end-to-end commodity rates
    link_rates: np.ndarray   # (n_c, n_links) per-commodity per-link rates
    min_rate: float

    def conservation_residual(self, graph: BackhaulGraph) -> np.ndarray:
        return check_flow_conservation(graph, self)

    def capacity_violation(self, graph: BackhaulGraph, wireless_caps) -> float:
        """Worst relative overload across links."""
        load = self.link_rates.sum(axis=0)
        caps = np.concatenate([graph.wired_capacity, np.asarray(wireless_caps, dtype=float)])
        return float(np.max((load - caps) / np.maximum(caps, 1e-12)))


def check_flow_conservation(graph: BackhaulGraph, flows) -> np.ndarray:
    """Residual sum_in R + 1{src} R_i - sum_out R - 1{dst} R_i per
    (commodity, node); all zeros iff the flow is balanced."""
    link_rates = flows.link_rates if isinstance(flows, FlowAllocation) else np.asarray(flows)
    rates = flows.rates if isinstance(flows, FlowAllocation) else None
    n_c = link_rates.shape[0]
    res = np.zeros((n_c, graph.n_nodes))
    for l in range(graph.n_links):
        res[:, graph.link_dst[l]] += link_rates[:, l]
        res[:, graph.link_src[l]] -= link_rates[:, l]
    for i, (src, dst) in enumerate(graph.commodities):
        r = rates[i] if rates is not None else 0.0
        res[i, src] += r
        res[i, dst] -= r
    return res


@dataclass
class RateMseCoefficients:
    c1: float
    c2: float
    c3: np.ndarray  # per same-tone link, own link included

    def rhs(self, v_own: float, v_tone: np.ndarray) -> float:
        """Value of the rate-MSE minorant at the given same-tone precoders."""
        return float(self.c1 + self.c2 * v_own - np.sum(self.c3 * np.asarray(v_tone) ** 2))


def rate_mse_coeffs(u_l: complex, w_l: float, h_own: complex, sigma_d2: float,
                    cross_gain_sq: np.ndarray) -> RateMseCoefficients:
    """c1 = 1 + log w - w (1 + sigma^2 |u|^2), c2 = 2 w Re(u* h),
    c3_n = w |u|^2 |h_n|^2 over the same-tone links (own link included)."""
    if w_l <= 0:
        raise NumericError("weight must be positive")
    au2 = abs(u_l) ** 2
    c1 = 1.0 + np.log(w_l) - w_l * (1.0 + sigma_d2 * au2)
    c2 = 2.0 * w_l * float(np.real(np.conj(u_l) * h_own))
    c3 = w_l * au2 * np.asarray(cross_gain_sq, dtype=float)
    return RateMseCoefficients(float(c1), float(c2), c3)


def wireless_link_rates(graph: BackhaulGraph, v: np.ndarray) -> np.ndarray:
    """True SISO rates log(1 + SINR) of every wireless link at precoders v."""
    rates = np.empty(graph.n_wl)
    for f in range(graph.tones):
        links = graph.tone_links[f]
        if len(links) == 0:
            continue
        xg = graph.cross_gain_sq(f)  # (L_f, L_f)
        p = v[links] ** 2
        total = xg @ p + graph.noise_power[graph.wl_user[links]]
        own = np.abs(graph.wl_gain[links]) ** 2 * p
        rates[links] = np.log1p(own / (total - own))
    return rates


def _lp_matrices(graph: BackhaulGraph, caps: np.ndarray):
    n_c, L, V = len(graph.commodities), graph.n_links, graph.n_nodes
    nv = 1 + n_c + n_c * L  # [t, R, F(commodity-major)]

    def fvar(i, l):
        return 1 + n_c + i * L + l

    rows, cols, vals = [], [], []
    for i in range(n_c):
        src, dst = graph.commodities[i]
        base = i * V
        for l in range(L):
            rows.append(base + graph.link_dst[l])
            cols.append(fvar(i, l))
            vals.append(1.0)
            rows.append(base + graph.link_src[l])
            cols.append(fvar(i, l))
            vals.append(-1.0)
        rows.append(base + src)
        cols.append(1 + i)
        vals.append(1.0)
        rows.append(base + dst)
        cols.append(1 + i)
        vals.append(-1.0)
    A_eq = sps.coo_matrix((vals, (rows, cols)), shape=(n_c * V, nv)).tocsr()
    b_eq = np.zeros(n_c * V)

    rows, cols, vals = [], [], []
    for l in range(L):
        for i in range(n_c):
            rows.append(l)
            cols.append(fvar(i, l))
            vals.append(1.0)
    for i in range(n_c):  # t - R_i <= 0
        rows.append(L + i)
        cols.append(0)
        vals.append(1.0)
        rows.append(L + i)
        cols.append(1 + i)
        vals.append(-1.0)
    A_ub = sps.coo_matrix((vals, (rows, cols)), shape=(L + n_c, nv)).tocsr()
    b_ub = np.concatenate([caps, np.zeros(n_c)])
    c = np.zeros(nv)
    c[0] = -1.0
    return c, A_ub, b_ub, A_eq, b_eq, nv


def solve_flow_lp(graph: BackhaulGraph, wireless_caps=None) -> FlowAllocation:
    """Exact max-min multicommodity flow with all link capacities fixed.

    Wireless capacities default to zero (wired-only problem when the graph
    has no wireless links).  Solved with the HiGHS LP solver.
    """
    if wireless_caps is None:
        wireless_caps = np.zeros(graph.n_wl)
    wireless_caps = np.maximum(np.asarray(wireless_caps, dtype=float), 0.0)
    if wireless_caps.shape != (graph.n_wl,):
        raise ConfigurationError("wireless_caps must have one entry per wireless link")
    caps = np.concatenate([graph.wired_capacity, wireless_caps])
    c, A_ub, b_ub, A_eq, b_eq, nv = _lp_matrices(graph, caps)
    n_c, L = len(graph.commodities), graph.n_links
    res = linprog(
        c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
        bounds=[(0, None)] * nv, method="highs",
    )
    if not res.success:
        raise NumericError(f"flow LP failed: {res.message}")
    x = res.x
    return FlowAllocation(
        rates=x[1 : 1 + n_c].copy(),
        link_rates=x[1 + n_c :].reshape(n_c, L).copy(),
        min_rate=float(x[0]),
    )


def generate_backhaul_network(
    n_bs: int = 8,
    n_routers: int = 4,
    n_users: int = 10,
    n_commodities: int = 10,
    tones: int = 3,
    seed: int = 0,
    *,
    wired_capacity=(4.0, 20.0),
    power_budget: float = 10.0,
    noise_power: float = 1.0,
    nearest_bs: int = 3,
    area: float = 1000.0,
) -> BackhaulGraph:
    """Desk-scale SDN-RAN test network.

    Routers form a ring (wired both ways) with the first router acting as
    gateway; each BS connects to its two nearest routers; each user gets
    wireless links from its `nearest_bs` closest BSs.  Wireless gains are
    Rayleigh with the (200/dist)^3 pathloss variance.  Commodities run from
    a random router to a random user.
    """
    rng = rng_for(seed, "backhaul-network")
    names, kinds = [], []
    for r in range(n_routers):
        names.append(f"r{r}")
        kinds.append("router")
    for b in range(n_bs):
        names.append(f"b{b}")
        kinds.append("bs")
    for u in range(n_users):
        names.append(f"u{u}")
        kinds.append("user")
    router_ids = list(range(n_routers))
    bs_ids = [n_routers + b for b in range(n_bs)]
    user_ids = [n_routers + n_bs + u for u in range(n_users)]

    router_pos = np.column_stack(
        [np.linspace(0, area, n_routers), np.full(n_routers, area)]
    )
    bs_pos = np.column_stack(
        [rng.uniform(0, area, n_bs), rng.uniform(0.3 * area, 0.7 * area, n_bs)]
    )
    user_pos = np.column_stack([rng.uniform(0, area, n_users), rng.uniform(0, 0.4 * area, n_users)])

    lo, hi = wired_capacity
    wired = []

    def add_duplex(a, b):
        cap = float(rng.uniform(lo, hi))
        wired.append((a, b, cap))
        wired.append((b, a, cap))

    for r in range(n_routers):
        add_duplex(router_ids[r], router_ids[(r + 1) % n_routers])
    for b in range(n_bs):
        d = np.linalg.norm(router_pos - bs_pos[b], axis=1)
        for r in np.argsort(d)[:2]:
            add_duplex(router_ids[int(r)], bs_ids[b])

    wl_pairs = []
    for u in range(n_users):
        d = np.linalg.norm(bs_pos - user_pos[u], axis=1)
        for b in np.argsort(d)[: min(nearest_bs, n_bs)]:
            wl_pairs.append((bs_ids[int(b)], user_ids[u]))

    gains = np.zeros((n_bs, n_users, tones), dtype=np.complex128)
    for b in range(n_bs):
        for u in range(n_users):
            dist = max(np.linalg.norm(bs_pos[b] - user_pos[u]), 35.0)
            var = pathloss_variance(dist)
            z = rng.standard_normal(tones) + 1j * rng.standard_normal(tones)
            gains[b, u] = np.sqrt(var / 2.0) * z

    commodities = []
    for _ in range(n_commodities):
        commodities.append(
            (int(rng.integers(0, n_routers)), user_ids[int(rng.integers(0, n_users))])
        )
    return BackhaulGraph(
        node_names=names,
        node_kind=kinds,
        wired=wired,
        wl_pairs=wl_pairs,
        tones=tones,
        gains=gains,
        commodities=commodities,
        power_budget=np.full(n_bs, power_budget),
        noise_power=np.full(n_users, noise_power),
    )

# -- inner ADMM --------------------------------------------------------------


class _ConsensusAdmm:
    """Consensus ADMM for the inner convex {v, R} subproblem.

    Global variables [t, R, F, v] get local copies in five block families:
    an epigraph block {R_i >= t} carrying the +t objective, per-node flow
    conservation blocks, per-wired-link capped-simplex blocks, per-wireless-
    link rate-MSE constraint blocks (which also copy every same-tone
    precoder), and per-BS power-ball blocks.  Every x-block update is an
    exact Euclidean projection; the z-update averages copies.  All
    projections are chunked row-wise for worker parallelism and are bitwise
    independent of the worker count.

    Residuals are RMS-normalized: r = ||x - Ez|| / sqrt(n_copies),
    s = rho ||E^T dz|| / sqrt(n_global).
    """

    def __init__(self, graph: BackhaulGraph, rho: float = 1.0, workers: int = 1):
        self.graph = graph
        self.rho = rho
        self.workers = max(1, workers)
        n_c, L = len(graph.commodities), graph.n_links
        self.n_c, self.L = n_c, L
        self.idx_R = 1 + np.arange(n_c)
        self.IF = 1 + n_c + (np.arange(n_c)[:, None] * L + np.arange(L)[None, :])
        self.idx_v = 1 + n_c + n_c * L + np.arange(graph.n_wl)
        self.n_g = 1 + n_c + n_c * L + graph.n_wl

        reg = []

        def add(block_idx):
            start = sum(len(b) for b in reg)
            reg.append(np.asarray(block_idx, dtype=np.int64).ravel())
            return slice(start, start + reg[-1].size)

        self.sl_ep = add(np.concatenate(([0], self.idx_R)))

        self.node_info = []
        in_links = [[] for _ in range(graph.n_nodes)]
        out_links = [[] for _ in range(graph.n_nodes)]
        for l in range(L):
            out_links[graph.link_src[l]].append(l)
            in_links[graph.link_dst[l]].append(l)
        src_at = [[] for _ in range(graph.n_nodes)]
        dst_at = [[] for _ in range(graph.n_nodes)]
        for i, (s, d) in enumerate(graph.commodities):
            src_at[s].append(i)
            dst_at[d].append(i)
        for v in range(graph.n_nodes):
            lv = np.array(in_links[v] + out_links[v], dtype=np.int64)
            sign = np.concatenate([np.ones(len(in_links[v])), -np.ones(len(out_links[v]))])
            rcom = np.array(src_at[v] + dst_at[v], dtype=np.int64)
            rcoef = np.concatenate([np.ones(len(src_at[v])), -np.ones(len(dst_at[v]))])
            if lv.size == 0 and rcom.size == 0:
                continue
            sl = add(np.concatenate([self.IF[:, lv].ravel(), self.idx_R[rcom]]))
            self.node_info.append((v, sl, lv, sign, rcom, rcoef))

        wired_ids = np.arange(graph.n_wired)
        self.sl_wired = add(self.IF[:, wired_ids].T) if graph.n_wired else None

        self.tone_info = []
        for f in range(graph.tones):
            links = graph.tone_links[f]
            if len(links) == 0:
                continue
            gl = graph.n_wired + links  # global link ids of tone links
            block = np.concatenate(
                [self.IF[:, gl].T.ravel(), np.tile(self.idx_v[links], len(links))]
            )
            sl = add(block)
            self.tone_info.append((f, sl, links))

        self.bs_info = []
        for b in range(len(graph.bs_nodes)):
            lb = graph.bs_links(b)
            if len(lb) == 0:
                continue
            sl = add(self.idx_v[lb])
            self.bs_info.append((b, sl, lb))

        self.copy_global = np.concatenate(reg)
        self.n_copies = self.copy_global.size
        self.m = np.bincount(self.copy_global, minlength=self.n_g).astype(float)
        if np.any(self.m == 0):
            raise NumericError("ADMM registry left a global variable with no copy")
        self.x = np.zeros(self.n_copies)
        self.u = np.zeros(self.n_copies)
        self.z = np.zeros(self.n_g)
        self._executor = None

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=False)
            self._executor = None

    def seed_state(self, t, R, F, v):
        """Reset copies/duals to a consistent point (warm start)."""
        self.z[0] = t
        self.z[self.idx_R] = R
        self.z[1 + self.n_c : 1 + self.n_c + self.n_c * self.L] = F.ravel()
        self.z[self.idx_v] = v
        self.x = self.z[self.copy_global].copy()
        self.u[:] = 0.0

    # -- projections ---------------------------------------------------------

    def _proj_epigraph(self, loc):
        t0, R0 = loc[0], loc[1:]
        order = np.sort(R0)
        csum = np.cumsum(order)
        t = t0
        if order.size and t0 > order[0]:
            for k in range(1, order.size + 1):
                cand = (t0 + csum[k - 1]) / (1.0 + k)
                lo = order[k - 1]
                hi = order[k] if k < order.size else np.inf
                if lo <= cand <= hi:
                    t = cand
                    break
        out = np.empty_like(loc)
        out[0] = t
        out[1:] = np.maximum(R0, t)
        return out

    def _proj_node(self, loc, lv, sign, rcom, rcoef):
        nf = self.n_c * lv.size
        F = loc[:nf].reshape(self.n_c, lv.size)
        R = loc[nf:]
        resid = F @ sign if lv.size else np.zeros(self.n_c)
        denom = np.full(self.n_c, float(sign @ sign))
        np.add.at(resid, rcom, rcoef * R)
        np.add.at(denom, rcom, rcoef**2)
        scale = np.where(denom > 0, resid / np.maximum(denom, 1e-300), 0.0)
        out = np.empty_like(loc)
        out[:nf] = (F - scale[:, None] * sign[None, :]).ravel()
        out[nf:] = R - scale[rcom] * rcoef
        return out

    @staticmethod
    def _capped_simplex_rows(X, caps):
        """Rows projected onto {x >= 0, sum x <= cap} via theta bisection."""
        P = np.maximum(X, 0.0)
        over = P.sum(axis=1) > caps
        if not np.any(over):
            return P
        Xo = X[over]
        lo = np.zeros(Xo.shape[0])
        hi = np.max(Xo, axis=1)  # sum max(x - max(x), 0) = 0 <= cap
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            s = np.maximum(Xo - mid[:, None], 0.0).sum(axis=1)
            high = s > caps[over]
            lo = np.where(high, mid, lo)
            hi = np.where(high, hi, mid)
        P[over] = np.maximum(Xo - hi[:, None], 0.0)
        return P

    def _proj_wireless_rows(self, F0, V0, own_pos, c1, c2, c3):
        """Rows (link l of one tone): project (F[:, l], v copies) onto
        {F >= 0, sum F <= c1 + c2 v_l - sum_n c3_n v_n^2} by bisection on the
        constraint multiplier."""
        rows = F0.shape[0]
        arange = np.arange(rows)

        def point(nu):
            Fn = np.maximum(F0 - 0.5 * nu[:, None], 0.0)
            Vn = V0.copy()
            Vn[arange, own_pos] += 0.5 * nu * c2
            Vn /= 1.0 + nu[:, None] * c3
            return Fn, Vn

        def gval(Fn, Vn):
            return (
                Fn.sum(axis=1)
                - c2 * Vn[arange, own_pos]
                + np.sum(c3 * Vn**2, axis=1)
            )

        F_at0, V_at0 = point(np.zeros(rows))
        g0 = gval(F_at0, V_at0)
        need = g0 > c1
        if not np.any(need):
            return F_at0, V_at0

        # bisect the multiplier on the violating rows only
        sub = np.flatnonzero(need)
        F0s, V0s, owns = F0[sub], V0[sub], own_pos[sub]
        c1s, c2s, c3s = c1[sub], c2[sub], c3[sub]
        aidx = np.arange(len(sub))

        def point_sub(nu):
            Fn = np.maximum(F0s - 0.5 * nu[:, None], 0.0)
            Vn = V0s.copy()
            Vn[aidx, owns] += 0.5 * nu * c2s
            Vn /= 1.0 + nu[:, None] * c3s
            return Fn, Vn

        def gval_sub(Fn, Vn):
            return Fn.sum(axis=1) - c2s * Vn[aidx, owns] + np.sum(c3s * Vn**2, axis=1)

        nu_hi = np.ones(len(sub))
        for _ in range(200):
            Fh, Vh = point_sub(nu_hi)
            bad = gval_sub(Fh, Vh) > c1s
            if not np.any(bad):
                break
            nu_hi = np.where(bad, nu_hi * 2.0, nu_hi)
            if np.max(nu_hi) > 1e200:
                raise NumericError("wireless projection failed to bracket")
        lo = np.zeros(len(sub))
        hi = nu_hi
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            Fm, Vm = point_sub(mid)
            high = gval_sub(Fm, Vm) > c1s
            lo = np.where(high, mid, lo)
            hi = np.where(high, hi, mid)
        Fn, Vn = point_sub(hi)
        Fout, Vout = F_at0, V_at0
        Fout[sub], Vout[sub] = Fn, Vn
        return Fout, Vout

    def _proj_bs(self, loc, pbar):
        v = np.maximum(loc, 0.0)
        p = float(v @ v)
        if p > pbar:
            v *= np.sqrt(pbar / p)
        return v

    # -- iteration -----------------------------------------------------------

    def _x_update(self, coeffs):
        zl = self.z[self.copy_global]
        loc_all = zl - self.u

        self.x[self.sl_ep] = self._proj_epigraph(loc_all[self.sl_ep])

        def node_chunk(items):
            for v, sl, lv, sign, rcom, rcoef in items:
                self.x[sl] = self._proj_node(loc_all[sl], lv, sign, rcom, rcoef)

        self._run_chunks(node_chunk, self.node_info)

        if self.sl_wired is not None:
            loc = loc_all[self.sl_wired].reshape(self.graph.n_wired, self.n_c)
            self.x[self.sl_wired] = self._capped_simplex_rows(
                loc, self.graph.wired_capacity
            ).ravel()

        c1, c2, c3rows = coeffs

        def tone_chunk(items):
            for f, sl, links in items:
                nl = len(links)
                loc = loc_all[sl]
                F0 = loc[: self.n_c * nl].reshape(nl, self.n_c)
                V0 = loc[self.n_c * nl :].reshape(nl, nl)
                own = np.arange(nl)
                Fn, Vn = self._proj_wireless_rows(
                    F0, V0, own, c1[links], c2[links], c3rows[f]
                )
                self.x[sl] = np.concatenate([Fn.ravel(), Vn.ravel()])

        self._run_chunks(tone_chunk, self.tone_info)

        def bs_chunk(items):
            for b, sl, lb in items:
                self.x[sl] = self._proj_bs(loc_all[sl], self.graph.power_budget[b])

        self._run_chunks(bs_chunk, self.bs_info)

    def _run_chunks(self, fn, items):
        if self.workers <= 1 or len(items) <= 1:
            fn(items)
            return
        if self._executor is None:
            from concurrent.futures import ThreadPoolExecutor

            self._executor = ThreadPoolExecutor(max_workers=self.workers)
        w = min(self.workers, len(items))
        bounds = np.linspace(0, len(items), w + 1).astype(int)
        chunks = [items[bounds[j] : bounds[j + 1]] for j in range(w) if bounds[j] < bounds[j + 1]]
        list(self._executor.map(fn, chunks))

    def run(self, coeffs, max_iters, tol=1e-5, adapt_every=25):
        """Iterate until both RMS residuals fall below tol; returns info."""
        hit_cap = True
        r_rms = s_rms = np.inf
        for it in range(max_iters):
            self._x_update(coeffs)
            z_prev = self.z.copy()
            acc = np.bincount(self.copy_global, weights=self.x + self.u, minlength=self.n_g)
            self.z = acc / self.m
            self.z[0] += 1.0 / (self.rho * self.m[0])
            self.u += self.x - self.z[self.copy_global]
            r = self.x - self.z[self.copy_global]
            dz = self.z - z_prev
            r_rms = float(np.linalg.norm(r) / np.sqrt(self.n_copies))
            s_rms = float(self.rho * np.sqrt(np.sum(self.m * dz**2) / self.n_g))
            if r_rms < tol and s_rms < tol:
                hit_cap = False
                break
            if adapt_every and (it + 1) % adapt_every == 0:
                if r_rms > 10.0 * s_rms:
                    self.rho *= 2.0
                    self.u *= 0.5
                elif s_rms > 10.0 * r_rms:
                    self.rho *= 0.5
                    self.u *= 2.0
        return {
            "iterations": it + 1,
            "primal_rms": r_rms,
            "dual_rms": s_rms,
            "early_stop": hit_cap,
        }

    def solution(self):
        n_c, L = self.n_c, self.L
        t = float(self.z[0])
        R = self.z[self.idx_R].copy()
        F = self.z[1 + n_c : 1 + n_c + n_c * L].reshape(n_c, L).copy()
        # precoders from the BS-block copies: exactly power-feasible
        v = np.maximum(self.z[self.idx_v].copy(), 0.0)
        for b, sl, lb in self.bs_info:
            v[lb] = self.x[sl]
        return t, R, F, v


def solve_nmaxmin(
    graph: BackhaulGraph,
    instance=None,
    stop_rules=None,
    *,
    max_outer: int = 40,
    plateau_tol: float = 2e-4,
    patience: int = 2,
    inner_tol: float = 1e-5,
    inner_cap_warmup: int = 500,
    inner_cap: int = 2000,
    rho: float = 1.0,
    workers: int = 1,
):
    """Max-min commodity rate over joint routing and SISO precoding.

    Returns (FlowAllocation, precoders, SolveReport) where precoders is the
    (n_wl,) array of real beam amplitudes (one per wireless link).  Each
    outer iteration: closed-form u/w per wireless link, inner ADMM on the
    {v, R} block, then an exact LP re-solve of the flows against the true
    wireless rates at the new precoders.  The reported min-rate trace is
    therefore feasible, and nondecreasing up to inner-solve tolerance; if an
    LP value ever regresses, the inner solve is extended once before
    accepting it.

    `instance` may override the graph's wireless channels with a SISO
    NetworkInstance whose (q, i, f) channels map to (bs row, user row, tone).
    """
    if instance is not None:
        H = instance.channels
        if H.shape[4] != 1 or H.shape[5] != 1 or H.shape[3] != 1:
            raise ConfigurationError("nmaxmin expects SISO single-slot channels")
        gains = H[:, :, :, 0, 0, 0]
        if gains.shape != graph.gains.shape:
            raise ConfigurationError("instance channels do not match the graph dimensions")
        graph = BackhaulGraph(
            node_names=graph.node_names,
            node_kind=graph.node_kind,
            wired=graph.wired,
            wl_pairs=graph.wl_pairs,
            tones=graph.tones,
            gains=gains,
            commodities=graph.commodities,
            power_budget=instance.power_budget,
            noise_power=instance.noise_power,
        )
    if stop_rules is not None:
        max_outer = stop_rules.max_iters
        plateau_tol = stop_rules.rel_tol

    t0 = time.perf_counter()
    rep = SolveReport(algo="nmaxmin")
    n_wl = graph.n_wl

    # feasible start: equal power split per BS
    v = np.zeros(n_wl)
    for b in range(len(graph.bs_nodes)):
        lb = graph.bs_links(b)
        if len(lb):
            v[lb] = np.sqrt(graph.power_budget[b] / len(lb))

    admm = _ConsensusAdmm(graph, rho=rho, workers=workers)
    caps = wireless_link_rates(graph, v) if n_wl else np.zeros(0)
    flow = solve_flow_lp(graph, caps)
    admm.seed_state(flow.min_rate, flow.rates, flow.link_rates, v)

    best = float(flow.min_rate)
    inner_trace = []
    for outer in range(max_outer):
        if n_wl:
            # inner ADMM is warm-started across outer iterations (duals kept);
            # a candidate that regresses the polished min-rate is re-solved at
            # tighter tolerance and, failing that, rejected (monotone safeguard)
            coeffs = _link_coeffs(graph, v)
            cap_iters = inner_cap_warmup if outer < 5 else inner_cap
            iters_used = 0
            tol = inner_tol
            accepted = False
            for attempt in range(3):
                info = admm.run(coeffs, cap_iters, tol=tol)
                iters_used += info["iterations"]
                _, _, _, v_new = admm.solution()
                caps_new = wireless_link_rates(graph, v_new)
                lp = solve_flow_lp(graph, caps_new)
                if lp.min_rate >= best - 1e-12:
                    accepted = True
                    break
                tol *= 0.1
                cap_iters = inner_cap
            if info["early_stop"]:
                rep.flags.append(f"inner-early-stop@{outer}")
            if accepted:
                v, caps, flow = v_new, caps_new, lp
                best = float(lp.min_rate)
            else:
                rep.flags.append(f"outer-rejected@{outer}")
            inner_trace.append(iters_used)
            rep.residuals = {
                "admm_primal_rms": info["primal_rms"],
                "admm_dual_rms": info["dual_rms"],
            }
        else:
            flow = solve_flow_lp(graph, caps)
            inner_trace.append(0)
        rep.min_rate.append(float(flow.min_rate))
        rep.objective.append(float(flow.min_rate))
        rep.sum_rate.append(float(np.sum(flow.rates)))
        power_viol = 0.0
        for b in range(len(graph.bs_nodes)):
            lb = graph.bs_links(b)
            if len(lb):
                p = float(np.sum(v[lb] ** 2))
                power_viol = max(power_viol, (p - graph.power_budget[b]) / graph.power_budget[b])
        rep.max_power_violation.append(max(power_viol, 0.0))
        trace = rep.min_rate
        if len(trace) > patience:
            window = trace[-patience - 1 :]
            if abs(window[-1] - window[0]) <= plateau_tol * max(abs(window[-1]), 1e-12):
                rep.converged = True
                break
    else:
        rep.converged = n_wl == 0
        if not rep.converged:
            rep.flags.append("max-outer-iterations")
    admm.close()

    rep.final_rates = flow.rates
    rep.extra_columns["inner_iterations"] = inner_trace
    rep.residuals["conservation"] = float(np.max(np.abs(check_flow_conservation(graph, flow))))
    rep.residuals["capacity_violation"] = flow.capacity_violation(graph, caps)
    rep.wall_time = time.perf_counter() - t0
    return flow, v, rep


def _link_coeffs(graph: BackhaulGraph, v: np.ndarray):
    """Closed-form u, w per wireless link, then the rate-MSE coefficients."""
    c1 = np.zeros(graph.n_wl)
    c2 = np.zeros(graph.n_wl)
    c3rows = {}
    for f in range(graph.tones):
        links = graph.tone_links[f]
        if len(links) == 0:
            continue
        xg = graph.cross_gain_sq(f)  # (L_f, L_f)
        p = v[links] ** 2
        denom = xg @ p + graph.noise_power[graph.wl_user[links]]
        h = graph.wl_gain[links]
        u = h * v[links] / denom
        e = 1.0 - np.abs(h) ** 2 * p / denom
        e = np.maximum(e, 1e-300)
        w = 1.0 / e
        au2 = np.abs(u) ** 2
        c1[links] = 1.0 + np.log(w) - w * (1.0 + graph.noise_power[graph.wl_user[links]] * au2)
        c2[links] = 2.0 * w * np.real(np.conj(u) * h) * 1.0
        c3rows[f] = (w * au2)[:, None] * xg
    return c1, c2, c3rows
