"""Seeded generation of single-cell full-duplex OFDMA network instances.

A network instance collects everything the optimizer needs about one channel
snapshot: linear UL/DL power gains per (UE, sub-carrier), residual
self-interference coefficients, noise powers, power budgets, QoS targets and
the power-consumption constants. Sampling is a pure function of the scenario
seed; independent sub-streams per (entity, index) keep draws stable when the
UE count grows.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Table-II sub-carrier bandwidth; only needed to convert the normalized
# bits/Joule/Hz outputs to absolute bits/Joule, never by the optimizer.
SUBCARRIER_BANDWIDTH_HZ = 180e3

# Sub-stream tags so each random quantity has its own deterministic stream.
_STREAM_POSITION = 1
_STREAM_SHADOWING = 2
_STREAM_FADING_UL = 3
_STREAM_FADING_DL = 4
_STREAM_SI_BS = 5
_STREAM_SI_UE = 6

_MIN_DISTANCE_KM = 1e-3  # path-loss model is not meant for d -> 0


def dbm_to_watt(level_dbm: float) -> float:
    """Convert a dBm level to watts."""
    return 10.0 ** ((level_dbm - 30.0) / 10.0)


def watt_to_dbm(power_w: float) -> float:
    """Convert watts to dBm. Requires power_w > 0."""
    if power_w <= 0.0:
        raise ValueError(f"power must be positive, got {power_w}")
    return 10.0 * math.log10(power_w) + 30.0


def path_loss_db(d_km: float, pl0: float, theta: float) -> float:
    """Distance-dependent path loss in dB; distance is in kilometers."""
    if d_km <= 0.0:
        raise ValueError(f"distance must be positive, got {d_km} km")
    return pl0 + 10.0 * theta * math.log10(d_km)


def link_gain(d_km: float, pl0: float, theta: float, shadow_db: float,
              fading: float) -> float:
    """Linear power gain of one link: path loss + shadowing (dB) and a
    multiplicative fading power factor."""
    return 10.0 ** (-(path_loss_db(d_km, pl0, theta) + shadow_db) / 10.0) * fading


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario parameters; the defaults reproduce the reference setup.

    Power-like fields are in dBm, SIC/shadowing/path-loss constants in dB,
    rate requirements in bps/Hz and amplifier efficiencies as fractions.
    """

    n_ues: int = 10
    n_subcarriers: int = 16
    cell_diameter: float = 250.0
    pl0: float = 128.1
    path_loss_exponent: float = 3.76
    shadowing_sigma: float = 8.0
    noise_power: float = -120.0
    max_power_bs: float = 42.0
    max_power_ue: float = 23.0
    sic_bs: float = -100.0
    sic_ue: float = -70.0
    rician_factor: float = 5.0
    rate_req_ul: float = 2.0
    rate_req_dl: float = 2.0
    circuit_power_bs: float = 30.0
    circuit_power_ue: float = 20.0
    amp_eff_bs: float = 0.3
    amp_eff_ue: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_ues < 1 or self.n_subcarriers < 1:
            raise ValueError("n_ues and n_subcarriers must be >= 1")
        if self.cell_diameter <= 0:
            raise ValueError("cell_diameter must be positive")
        for name in ("amp_eff_bs", "amp_eff_ue"):
            eff = getattr(self, name)
            if not 0.0 < eff < 1.0:
                raise ValueError(f"{name} must lie strictly in (0, 1), got {eff}")
        if self.shadowing_sigma < 0:
            raise ValueError("shadowing_sigma must be >= 0")
        if self.rate_req_ul < 0 or self.rate_req_dl < 0:
            raise ValueError("rate requirements must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class NetworkInstance:
    """One realized cell snapshot, immutable after construction.

    All values are linear/SI units: gains dimensionless, powers in watts,
    rate requirements in bps/Hz.
    """

    n_ues: int
    n_subcarriers: int
    h: np.ndarray          # (N, K) UL power gains
    g: np.ndarray          # (N, K) DL power gains
    si_bs: float           # residual SI coefficient at the BS receiver
    si_ue: np.ndarray      # (N,) residual SI coefficient at each UE receiver
    noise_bs: float
    noise_ue: np.ndarray   # (N,)
    p_max_bs: float
    p_max_ue: np.ndarray   # (N,)
    r_req_ul: np.ndarray   # (N,) bps/Hz
    r_req_dl: np.ndarray   # (N,)
    p_circ_total: float
    inv_eff_bs: float
    inv_eff_ue: float
    config: ScenarioConfig | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("h", "g", "si_ue", "noise_ue", "p_max_ue",
                     "r_req_ul", "r_req_dl"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            arr.setflags(write=False)
        n, k = self.n_ues, self.n_subcarriers
        if self.h.shape != (n, k) or self.g.shape != (n, k):
            raise ValueError("gain matrices must have shape (n_ues, n_subcarriers)")
        if not (np.all(self.h > 0) and np.all(self.g > 0)):
            raise ValueError("channel gains must be strictly positive")
        if self.si_bs < 0 or np.any(self.si_ue < 0):
            raise ValueError("SI coefficients must be >= 0")
        if self.noise_bs <= 0 or np.any(self.noise_ue <= 0):
            raise ValueError("noise powers must be strictly positive")
        if self.p_max_bs <= 0 or np.any(self.p_max_ue <= 0):
            raise ValueError("power budgets must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_ues, self.n_subcarriers)


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def ue_positions(seed: int, n_ues: int, cell_diameter: float) -> np.ndarray:
    """(N, 2) UE coordinates in meters, uniform in a square cell centred on
    the BS. The cell diameter is the full diagonal, so the worst-case
    BS-to-UE distance is cell_diameter / 2."""
    half_side = cell_diameter / (2.0 * math.sqrt(2.0))
    pos = np.empty((n_ues, 2))
    for n in range(n_ues):
        r = _rng(seed, _STREAM_POSITION, n)
        pos[n] = r.uniform(-half_side, half_side, size=2)
    return pos


def shadowing_draws(seed: int, n_ues: int, sigma_db: float) -> np.ndarray:
    """(N,) log-normal shadowing in dB, one per UE-BS link."""
    out = np.empty(n_ues)
    for n in range(n_ues):
        out[n] = _rng(seed, _STREAM_SHADOWING, n).normal(0.0, sigma_db)
    return out


def fading_draws(seed: int, n_ues: int, n_subcarriers: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-mean exponential (Rayleigh power) fading, (N, K) for UL and DL."""
    f_ul = np.empty((n_ues, n_subcarriers))
    f_dl = np.empty((n_ues, n_subcarriers))
    for n in range(n_ues):
        f_ul[n] = _rng(seed, _STREAM_FADING_UL, n).exponential(1.0, n_subcarriers)
        f_dl[n] = _rng(seed, _STREAM_FADING_DL, n).exponential(1.0, n_subcarriers)
    return f_ul, f_dl


def rician_power(rng: np.random.Generator, k_factor_db: float) -> float:
    """|l|^2 for a Rician-envelope channel with unit mean power."""
    k = 10.0 ** (k_factor_db / 10.0)
    mean = math.sqrt(k / (k + 1.0))
    sigma = math.sqrt(1.0 / (2.0 * (k + 1.0)))
    re = mean + rng.normal(0.0, sigma)
    im = rng.normal(0.0, sigma)
    return re * re + im * im


def si_magnitude_draws(seed: int, n_ues: int, k_factor_db: float) -> tuple[float, np.ndarray]:
    """(|l_bs|^2, (N,) |l_ue|^2) SI channel power draws."""
    bs = rician_power(_rng(seed, _STREAM_SI_BS, 0), k_factor_db)
    ue = np.empty(n_ues)
    for n in range(n_ues):
        ue[n] = rician_power(_rng(seed, _STREAM_SI_UE, n), k_factor_db)
    return bs, ue


def sample_instance(cfg: ScenarioConfig) -> NetworkInstance:
    """Draw one network instance; same config and seed give a bit-identical
    instance."""
    n, k = cfg.n_ues, cfg.n_subcarriers
    pos = ue_positions(cfg.seed, n, cfg.cell_diameter)
    d_km = np.maximum(np.hypot(pos[:, 0], pos[:, 1]) / 1000.0, _MIN_DISTANCE_KM)
    shadow = shadowing_draws(cfg.seed, n, cfg.shadowing_sigma)
    f_ul, f_dl = fading_draws(cfg.seed, n, k)

    large_scale = np.array([
        10.0 ** (-(path_loss_db(d, cfg.pl0, cfg.path_loss_exponent) + s) / 10.0)
        for d, s in zip(d_km, shadow)
    ])
    h = large_scale[:, None] * f_ul
    g = large_scale[:, None] * f_dl

    l_bs, l_ue = si_magnitude_draws(cfg.seed, n, cfg.rician_factor)
    si_bs = 10.0 ** (cfg.sic_bs / 10.0) * l_bs
    si_ue = 10.0 ** (cfg.sic_ue / 10.0) * l_ue

    return NetworkInstance(
        n_ues=n,
        n_subcarriers=k,
        h=h,
        g=g,
        si_bs=si_bs,
        si_ue=si_ue,
        noise_bs=dbm_to_watt(cfg.noise_power),
        noise_ue=np.full(n, dbm_to_watt(cfg.noise_power)),
        p_max_bs=dbm_to_watt(cfg.max_power_bs),
        p_max_ue=np.full(n, dbm_to_watt(cfg.max_power_ue)),
        r_req_ul=np.full(n, cfg.rate_req_ul),
        r_req_dl=np.full(n, cfg.rate_req_dl),
        p_circ_total=dbm_to_watt(cfg.circuit_power_bs) + n * dbm_to_watt(cfg.circuit_power_ue),
        inv_eff_bs=1.0 / cfg.amp_eff_bs,
        inv_eff_ue=1.0 / cfg.amp_eff_ue,
        config=cfg,
        seed=cfg.seed,
    )


def complete_sic_variant(inst: NetworkInstance) -> NetworkInstance:
    """Copy with all residual self-interference removed (upper-bound system)."""
    return dataclasses.replace(inst, si_bs=0.0, si_ue=np.zeros(inst.n_ues))


_INSTANCE_FORMAT = "fdee-instance-v1"


def save_instance(inst: NetworkInstance, path: str | Path) -> None:
    """Write one instance as a self-describing JSON document (SI units)."""
    doc = {
        "format": _INSTANCE_FORMAT,
        "provenance": {
            "config": inst.config.to_dict() if inst.config is not None else None,
            "seed": inst.seed,
        },
        "n_ues": inst.n_ues,
        "n_subcarriers": inst.n_subcarriers,
        "h": inst.h.tolist(),
        "g": inst.g.tolist(),
        "si_bs": inst.si_bs,
        "si_ue": inst.si_ue.tolist(),
        "noise_bs": inst.noise_bs,
        "noise_ue": inst.noise_ue.tolist(),
        "p_max_bs": inst.p_max_bs,
        "p_max_ue": inst.p_max_ue.tolist(),
        "r_req_ul": inst.r_req_ul.tolist(),
        "r_req_dl": inst.r_req_dl.tolist(),
        "p_circ_total": inst.p_circ_total,
        "inv_eff_bs": inst.inv_eff_bs,
        "inv_eff_ue": inst.inv_eff_ue,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_instance(path: str | Path) -> NetworkInstance:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _INSTANCE_FORMAT:
        raise ValueError(f"{path}: not a {_INSTANCE_FORMAT} document")
    prov = doc.get("provenance") or {}
    cfg = prov.get("config")
    return NetworkInstance(
        n_ues=doc["n_ues"],
        n_subcarriers=doc["n_subcarriers"],
        h=np.array(doc["h"]),
        g=np.array(doc["g"]),
        si_bs=doc["si_bs"],
        si_ue=np.array(doc["si_ue"]),
        noise_bs=doc["noise_bs"],
        noise_ue=np.array(doc["noise_ue"]),
        p_max_bs=doc["p_max_bs"],
        p_max_ue=np.array(doc["p_max_ue"]),
        r_req_ul=np.array(doc["r_req_ul"]),
        r_req_dl=np.array(doc["r_req_dl"]),
        p_circ_total=doc["p_circ_total"],
        inv_eff_bs=doc["inv_eff_bs"],
        inv_eff_ue=doc["inv_eff_ue"],
        config=ScenarioConfig.from_dict(cfg) if cfg else None,
        seed=prov.get("seed"),
    )
