"""Network problem data: topology, channel tensors, and channel-uncertainty models.

A NetworkInstance is immutable after construction and is the single source
of problem data for every solver.  Channel tensors are indexed
H[q, i, f, t] with shape (N, M): BS q to user i on tone f at slot t.

The hexagonal layout follows the usual wrap-around cluster geometry
(1, 7 or 19 cells, sectorized BSs at the cell centers).  Inter-site
distance, sector pattern, and the minimum BS-user drop distance are
config parameters with defaults (500 m, 120-degree parabolic sectors,
35 m); this is an approximation of the full 3GPP TR 36.814 methodology,
not a reproduction of it.  Long-term link powers use the (200/dist)^3
pathloss variance model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError
from .rng import rng_for

__all__ = [
    "NetworkInstance",
    "ChannelDistribution",
    "DistributionTable",
    "generate_hex_layout",
    "pathloss_variance",
    "sample_channels",
    "build_estimation_table",
    "random_instance",
]

# hex cluster shift coordinates (i, j) with N = i^2 + i*j + j^2
_CLUSTER_SHIFTS = {1: (1, 0), 7: (2, 1), 19: (3, 2)}


def pathloss_variance(dist: float) -> float:
    """Long-term channel power (200/dist)^3 of a link of length `dist` meters."""
    if dist <= 0:
        raise DomainError("distance must be positive")
    return (200.0 / float(dist)) ** 3


@dataclass(frozen=True)
class NetworkInstance:
    """Problem data shared by all solvers; validated on construction."""

    channels: np.ndarray          # (Q, I, F, T, N, M) complex128
    noise_power: np.ndarray       # (I,) watts
    power_budget: np.ndarray      # (Q,) watts
    serving_bs: np.ndarray        # (I,) int, default serving BS per user
    bs_positions: np.ndarray = None    # (Q, 2) meters
    user_positions: np.ndarray = None  # (I, 2) meters
    link_gain: np.ndarray = None       # (Q, I) long-term average entry power

    def __post_init__(self):
        H = np.asarray(self.channels, dtype=np.complex128)
        if H.ndim != 6:
            raise ConfigurationError("channels must have shape (Q, I, F, T, N, M)")
        Q, I = H.shape[0], H.shape[1]
        noise = np.asarray(self.noise_power, dtype=float).reshape(-1)
        pbar = np.asarray(self.power_budget, dtype=float).reshape(-1)
        if noise.shape != (I,):
            raise ConfigurationError(f"noise_power must have {I} entries")
        if pbar.shape != (Q,):
            raise ConfigurationError(f"power_budget must have {Q} entries")
        if np.any(noise <= 0):
            raise ConfigurationError("all noise powers must be > 0")
        if np.any(pbar <= 0):
            raise ConfigurationError("all power budgets must be > 0")
        if not np.all(np.isfinite(H.view(float))):
            raise ConfigurationError("channel tensor contains non-finite entries")
        serving = np.asarray(self.serving_bs, dtype=np.int64).reshape(-1)
        if serving.shape != (I,) or np.any(serving < 0) or np.any(serving >= Q):
            raise ConfigurationError("serving_bs must map every user to a BS index")
        gain = self.link_gain
        if gain is None:
            gain = np.mean(np.abs(H) ** 2, axis=(2, 3, 4, 5))
        gain = np.asarray(gain, dtype=float)
        if gain.shape != (Q, I):
            raise ConfigurationError("link_gain must have shape (Q, I)")
        object.__setattr__(self, "channels", H)
        object.__setattr__(self, "noise_power", noise)
        object.__setattr__(self, "power_budget", pbar)
        object.__setattr__(self, "serving_bs", serving)
        object.__setattr__(self, "link_gain", gain)
        for name in ("bs_positions", "user_positions"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        self.channels.setflags(write=False)

    @property
    def num_bs(self) -> int:
        return self.channels.shape[0]

    @property
    def num_users(self) -> int:
        return self.channels.shape[1]

    @property
    def tones(self) -> int:
        return self.channels.shape[2]

    @property
    def slots(self) -> int:
        return self.channels.shape[3]

    @property
    def rx_antennas(self) -> int:
        return self.channels.shape[4]

    @property
    def tx_antennas(self) -> int:
        return self.channels.shape[5]

    def with_channels(self, H) -> "NetworkInstance":
        return replace(self, channels=np.asarray(H, dtype=np.complex128))

    def with_slots(self, T: int) -> "NetworkInstance":
        """Repeat a single-slot channel tensor across T slots."""
        if self.slots != 1:
            raise ConfigurationError("with_slots expects a single-slot instance")
        H = np.repeat(self.channels, T, axis=3)
        return replace(self, channels=H)

    # -- serialization ----------------------------------------------------

    def to_config(self, include_channels: bool = True) -> dict:
        cfg = {
            "num_bs": self.num_bs,
            "num_users": self.num_users,
            "tx_antennas": self.tx_antennas,
            "rx_antennas": self.rx_antennas,
            "tones": self.tones,
            "slots": self.slots,
            "noise_power": self.noise_power.tolist(),
            "power_budget": self.power_budget.tolist(),
            "serving_bs": self.serving_bs.tolist(),
            "link_gain": self.link_gain.tolist(),
        }
        if self.bs_positions is not None:
            cfg["bs_positions"] = self.bs_positions.tolist()
        if self.user_positions is not None:
            cfg["user_positions"] = self.user_positions.tolist()
        if include_channels:
            flat = self.channels.reshape(-1)
            cfg["channels"] = {"re": flat.real.tolist(), "im": flat.imag.tolist()}
        return cfg

    @classmethod
    def from_config(cls, cfg: dict, seed: int | None = None) -> "NetworkInstance":
        """Rebuild an instance from its config dict.

        When explicit channel values are absent, Rayleigh channels are drawn
        from link_gain; this requires a seed.
        """
        try:
            shape = (
                cfg["num_bs"], cfg["num_users"], cfg["tones"], cfg["slots"],
                cfg["rx_antennas"], cfg["tx_antennas"],
            )
            noise = cfg["noise_power"]
            pbar = cfg["power_budget"]
            serving = cfg["serving_bs"]
        except KeyError as exc:
            raise ConfigurationError(f"instance config missing key {exc}")
        if "channels" in cfg:
            ch = cfg["channels"]
            H = (np.asarray(ch["re"], dtype=float) + 1j * np.asarray(ch["im"], dtype=float))
            if H.size != int(np.prod(shape)):
                raise ConfigurationError("channel value count does not match dimensions")
            H = H.reshape(shape)
        else:
            if seed is None:
                raise ConfigurationError("config has no channel values; a seed is required")
            gain = np.asarray(cfg.get("link_gain"), dtype=float)
            if gain.shape != shape[:2]:
                raise ConfigurationError("config without channels requires link_gain (Q, I)")
            H = _rayleigh_tensor(gain, shape, rng_for(seed, "config-channels"))
        return cls(
            channels=H,
            noise_power=noise,
            power_budget=pbar,
            serving_bs=serving,
            bs_positions=cfg.get("bs_positions"),
            user_positions=cfg.get("user_positions"),
            link_gain=cfg.get("link_gain"),
        )

    def save(self, path, include_channels: bool = True) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_config(include_channels), fh)

    @classmethod
    def load(cls, path, seed: int | None = None) -> "NetworkInstance":
        with open(path) as fh:
            return cls.from_config(json.load(fh), seed=seed)

    def dump_channels_csv(self, path) -> None:
        """Write the channel tensor as rows (q, i, f, t, rx, tx, re, im)."""
        H = self.channels
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["q", "i", "f", "t", "rx", "tx", "re", "im"])
            it = np.nditer(H, flags=["multi_index"])
            for val in it:
                q, i, f, t, n, m = it.multi_index
                writer.writerow([q, i, f, t, n, m, repr(float(val.real)), repr(float(val.imag))])


def load_channels_csv(path, shape) -> np.ndarray:
    """Inverse of NetworkInstance.dump_channels_csv."""
    H = np.zeros(shape, dtype=np.complex128)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:6] != ["q", "i", "f", "t", "rx", "tx"]:
            raise ConfigurationError("unexpected channel CSV header")
        for row in reader:
            q, i, f, t, n, m = (int(x) for x in row[:6])
            H[q, i, f, t, n, m] = float(row[6]) + 1j * float(row[7])
    return H


def _rayleigh_tensor(gain, shape, rng) -> np.ndarray:
    """CN(0, gain[q, i]) per entry, drawn in fixed (q, i, f, t, n, m) order."""
    x = rng.standard_normal(shape)
    y = rng.standard_normal(shape)
    std = np.sqrt(np.asarray(gain, dtype=float) / 2.0)[:, :, None, None, None, None]
    return std * (x + 1j * y)


# -- hexagonal layouts ----------------------------------------------------


def _hex_centers(cells: int, isd: float) -> np.ndarray:
    if cells not in _CLUSTER_SHIFTS:
        raise ConfigurationError("cells must be one of {1, 7, 19} (wrap-around layouts)")
    a1 = np.array([1.0, 0.0])
    a2 = np.array([0.5, np.sqrt(3.0) / 2.0])
    coords = [(0, 0)]
    if cells >= 7:
        coords += [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)]
    if cells == 19:
        coords += [
            (2, 0), (1, 1), (0, 2), (-1, 2), (-2, 2), (-2, 1),
            (-2, 0), (-1, -1), (0, -2), (1, -2), (2, -2), (2, -1),
        ]
    return np.array([isd * (i * a1 + j * a2) for i, j in coords])


def _wraparound_offsets(cells: int, isd: float) -> np.ndarray:
    """The 7 translation vectors (origin + 6 mirror clusters)."""
    i, j = _CLUSTER_SHIFTS[cells]
    a1 = np.array([1.0, 0.0])
    a2 = np.array([0.5, np.sqrt(3.0) / 2.0])
    base = isd * (i * a1 + j * a2)
    offsets = [np.zeros(2)]
    for k in range(6):
        ang = k * np.pi / 3.0
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        offsets.append(rot @ base)
    return np.array(offsets)


def _wrap_distance(bs_xy, user_xy, offsets) -> float:
    d = np.linalg.norm(user_xy[None, :] - (bs_xy[None, :] + offsets), axis=1)
    return float(np.min(d))


def _sector_gain_db(angle_off_deg, theta3db=70.0, front_back_db=25.0) -> float:
    a = abs((angle_off_deg + 180.0) % 360.0 - 180.0)
    return -min(12.0 * (a / theta3db) ** 2, front_back_db)


def generate_hex_layout(
    cells: int,
    sectors_per_cell: int,
    users_per_sector: int,
    seed: int,
    *,
    tx_antennas: int = 4,
    rx_antennas: int = 2,
    tones: int = 1,
    slots: int = 1,
    isd: float = 500.0,
    min_dist: float = 35.0,
    drop_radius: float | None = None,
    noise_power: float = 1.0,
    snr_db: float = 15.0,
    normalize: bool = True,
) -> NetworkInstance:
    """Wrap-around hexagonal layout with sectorized BSs and uniform user drops.

    Every sector counts as one BS (19 cells x 3 sectors = 57 BSs).  Users are
    dropped area-uniformly inside their sector wedge between min_dist and the
    cell circumradius, and served by their sector BS.  With normalize=True the
    long-term gains are scaled so the median direct-link gain is 1 and the
    power budget is 10^(snr_db/10) * noise_power.
    """
    if sectors_per_cell < 1 or users_per_sector < 1:
        raise ConfigurationError("sector and user counts must be >= 1")
    centers = _hex_centers(cells, isd)
    offsets = _wraparound_offsets(cells, isd)
    rng = rng_for(seed, "hex-layout")

    Q = cells * sectors_per_cell
    I = Q * users_per_sector
    sector_width = 360.0 / sectors_per_cell
    bs_pos = np.repeat(centers, sectors_per_cell, axis=0)
    bs_boresight = np.tile(
        np.arange(sectors_per_cell) * sector_width, cells
    )

    if drop_radius is None:
        drop_radius = isd / np.sqrt(3.0)
    user_pos = np.empty((I, 2))
    serving = np.empty(I, dtype=np.int64)
    for q in range(Q):
        for k in range(users_per_sector):
            i = q * users_per_sector + k
            theta = np.deg2rad(
                bs_boresight[q] + (rng.uniform() - 0.5) * sector_width
            )
            r = np.sqrt(min_dist**2 + rng.uniform() * (drop_radius**2 - min_dist**2))
            user_pos[i] = bs_pos[q] + r * np.array([np.cos(theta), np.sin(theta)])
            serving[i] = q

    gain = np.empty((Q, I))
    for q in range(Q):
        for i in range(I):
            d = max(_wrap_distance(bs_pos[q], user_pos[i], offsets), min_dist)
            g = pathloss_variance(d)
            if sectors_per_cell > 1:
                vec = user_pos[i] - bs_pos[q]
                ang = np.rad2deg(np.arctan2(vec[1], vec[0])) - bs_boresight[q]
                g *= 10.0 ** (_sector_gain_db(ang) / 10.0)
            gain[q, i] = g

    if normalize:
        direct = gain[serving, np.arange(I)]
        gain = gain / np.median(direct)
    pbar = np.full(Q, 10.0 ** (snr_db / 10.0) * noise_power)

    shape = (Q, I, tones, slots, rx_antennas, tx_antennas)
    H = _rayleigh_tensor(gain, shape, rng)
    return NetworkInstance(
        channels=H,
        noise_power=np.full(I, noise_power),
        power_budget=pbar,
        serving_bs=serving,
        bs_positions=bs_pos,
        user_positions=user_pos,
        link_gain=gain,
    )


def random_instance(
    num_bs: int,
    num_users: int,
    seed: int,
    *,
    tx_antennas: int = 1,
    rx_antennas: int = 1,
    tones: int = 1,
    slots: int = 1,
    noise_power: float = 1.0,
    power_budget: float = 1.0,
    channel_gain=None,
) -> NetworkInstance:
    """Unit-gain i.i.d. Rayleigh test instance; users served round-robin.

    channel_gain may be a (Q, I) array of long-term link powers.
    """
    gain = np.ones((num_bs, num_users)) if channel_gain is None else np.asarray(channel_gain, float)
    shape = (num_bs, num_users, tones, slots, rx_antennas, tx_antennas)
    H = _rayleigh_tensor(gain, shape, rng_for(seed, "random-instance"))
    return NetworkInstance(
        channels=H,
        noise_power=np.full(num_users, noise_power),
        power_budget=np.full(num_bs, power_budget),
        serving_bs=np.arange(num_users) % num_bs,
        link_gain=gain,
    )


# -- channel uncertainty --------------------------------------------------

_KINDS = ("deterministic", "rayleigh-pathloss", "estimated-gaussian")


@dataclass(frozen=True)
class ChannelDistribution:
    """Per-link channel model used by the stochastic solver.

    deterministic:       H = mean exactly.
    rayleigh-pathloss:   H ~ CN(0, pathloss_var) per entry.
    estimated-gaussian:  H ~ CN(mean, error_variance) per entry, with
                         error_variance = pathloss_var / (1 + gamma * snr).
    """

    kind: str
    pathloss_var: float = 1.0
    mean: np.ndarray | None = None
    error_variance: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigurationError(f"unknown channel distribution kind: {self.kind!r}")
        if self.error_variance < 0:
            raise ConfigurationError("error_variance must be >= 0")
        if self.kind in ("deterministic", "estimated-gaussian") and self.mean is None:
            raise ConfigurationError(f"{self.kind} distribution requires a mean")

    @classmethod
    def estimated(cls, mean, pathloss_var: float, gamma: float, snr_linear: float):
        return cls(
            kind="estimated-gaussian",
            pathloss_var=pathloss_var,
            mean=np.asarray(mean, dtype=np.complex128),
            error_variance=pathloss_var / (1.0 + gamma * snr_linear),
        )

    def entry_std(self) -> float:
        """Per-entry complex standard deviation of the draw."""
        if self.kind == "deterministic":
            return 0.0
        if self.kind == "rayleigh-pathloss":
            return float(np.sqrt(self.pathloss_var))
        return float(np.sqrt(self.error_variance))


class DistributionTable:
    """One ChannelDistribution per (q, i) link, in tensor form for sampling."""

    def __init__(self, mean: np.ndarray, std: np.ndarray, kinds: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.complex128)   # (Q, I, F, T, N, M)
        self.std = np.asarray(std, dtype=float)             # (Q, I)
        self.kinds = np.asarray(kinds)                      # (Q, I) of str
        if self.mean.ndim != 6 or self.std.shape != self.mean.shape[:2]:
            raise ConfigurationError("inconsistent distribution table shapes")

    @classmethod
    def from_entries(cls, entries, shape) -> "DistributionTable":
        """entries: nested (Q, I) structure of ChannelDistribution."""
        Q, I = shape[0], shape[1]
        mean = np.zeros(shape, dtype=np.complex128)
        std = np.zeros((Q, I))
        kinds = np.empty((Q, I), dtype=object)
        for q in range(Q):
            for i in range(I):
                dist = entries[q][i]
                kinds[q, i] = dist.kind
                std[q, i] = dist.entry_std()
                if dist.mean is not None:
                    mean[q, i] = np.broadcast_to(dist.mean, shape[2:])
        return cls(mean, std, kinds)

    def mean_channels(self) -> np.ndarray:
        return self.mean.copy()

    def fraction_estimated(self) -> float:
        return float(np.mean(self.kinds == "estimated-gaussian"))


def sample_channels(instance: NetworkInstance, table: DistributionTable, seed: int) -> np.ndarray:
    """Draw one channel tensor from the per-link distributions.

    A single stream drives the full tensor in (q, i, f, t, n, m) order, so
    the draw is reproducible per seed and independent of worker count.
    """
    shape = instance.channels.shape
    if table.mean.shape != shape:
        raise ConfigurationError("distribution table does not match instance dimensions")
    rng = rng_for(seed, "channel-sample")
    x = rng.standard_normal(shape)
    y = rng.standard_normal(shape)
    std = (table.std / np.sqrt(2.0))[:, :, None, None, None, None]
    return table.mean + std * (x + 1j * y)


def build_estimation_table(
    instance: NetworkInstance,
    seed: int,
    *,
    eta_db: float = 6.0,
    gamma: float = 1.0,
    snr_db: float = 15.0,
) -> DistributionTable:
    """Partial-CSI table: each user estimates its direct channel plus every
    interfering link whose long-term power is within eta_db of the direct
    one; all other links keep only their pathloss statistics.

    The eta rule is evaluated on long-term link powers, not instantaneous
    fades.  Estimates hhat are drawn once from the pathloss prior.
    """
    shape = instance.channels.shape
    Q, I = shape[0], shape[1]
    gain = instance.link_gain
    snr_linear = 10.0 ** (snr_db / 10.0)
    rng = rng_for(seed, "estimation-table")

    mean = np.zeros(shape, dtype=np.complex128)
    std = np.zeros((Q, I))
    kinds = np.empty((Q, I), dtype=object)
    thresh = gain[instance.serving_bs, np.arange(I)] * 10.0 ** (-eta_db / 10.0)
    hhat = _rayleigh_tensor(gain, shape, rng)
    for q in range(Q):
        for i in range(I):
            estimated = q == instance.serving_bs[i] or gain[q, i] >= thresh[i]
            if estimated:
                kinds[q, i] = "estimated-gaussian"
                mean[q, i] = hhat[q, i]
                std[q, i] = np.sqrt(gain[q, i] / (1.0 + gamma * snr_linear))
            else:
                kinds[q, i] = "rayleigh-pathloss"
                std[q, i] = np.sqrt(gain[q, i])
    return DistributionTable(mean, std, kinds)
