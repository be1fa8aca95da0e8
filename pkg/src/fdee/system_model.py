"""Physical-layer evaluation on an allocation.

Everything here is a pure function of an immutable NetworkInstance and an
Allocation. Two model forms coexist:

* the auxiliary form, where the per-pair powers already absorb the
  assignment variable (used by the whole optimization pipeline), and
* the original coupled form, where SINRs carry the explicit assignment
  factor (used to verify and report final binary solutions).

Rates are base-2 logs, so everything is in bps/Hz and EE in bits/Joule/Hz.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .channel import NetworkInstance

LN2 = math.log(2.0)


class Direction(enum.Enum):
    UL = "ul"
    DL = "dl"


@dataclass
class Allocation:
    """Relaxed decision variables: assignment x in [0,1] and auxiliary
    per-pair powers in watts, all shaped (n_ues, n_subcarriers)."""

    x: np.ndarray
    pu: np.ndarray
    pd: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.pu = np.asarray(self.pu, dtype=float)
        self.pd = np.asarray(self.pd, dtype=float)
        if not (self.x.shape == self.pu.shape == self.pd.shape):
            raise ValueError("x, pu, pd must share one (N, K) shape")

    @classmethod
    def zeros(cls, inst: NetworkInstance) -> "Allocation":
        return cls(np.zeros(inst.shape), np.zeros(inst.shape), np.zeros(inst.shape))

    def copy(self) -> "Allocation":
        return Allocation(self.x.copy(), self.pu.copy(), self.pd.copy())


@dataclass
class RateReport:
    ul_rate: np.ndarray   # (N,) bps/Hz
    dl_rate: np.ndarray   # (N,)
    sum_rate: float       # bps/Hz
    total_power: float    # watts
    ee: float             # bits/Joule/Hz


def link_rate(sinr: float) -> float:
    """Shannon rate log2(1 + sinr) in bps/Hz."""
    if sinr < 0:
        raise ValueError(f"SINR must be >= 0, got {sinr}")
    return math.log1p(sinr) / LN2


def _denominators(inst: NetworkInstance, pu: np.ndarray, pd: np.ndarray):
    """The four positive log arguments of the DC decomposition.

    a_full = SI + noise + signal at the BS, a_int = SI + noise only;
    b_full / b_int are the UE-side analogues.
    """
    a_int = inst.si_bs * pd + inst.noise_bs
    a_full = a_int + pu * inst.h
    b_int = inst.si_ue[:, None] * pu + inst.noise_ue[:, None]
    b_full = b_int + pd * inst.g
    return a_full, a_int, b_full, b_int


def sinr_aux(inst: NetworkInstance, alloc: Allocation, n: int, k: int,
             direction: Direction) -> float:
    """Auxiliary-form SINR of pair (n, k); the assignment variable is already
    absorbed into the powers, so no x factor appears."""
    if direction is Direction.UL:
        return alloc.pu[n, k] * inst.h[n, k] / (
            inst.si_bs * alloc.pd[n, k] + inst.noise_bs)
    return alloc.pd[n, k] * inst.g[n, k] / (
        inst.si_ue[n] * alloc.pu[n, k] + inst.noise_ue[n])


def per_pair_rates(inst: NetworkInstance, pu: np.ndarray, pd: np.ndarray):
    """(N, K) UL and DL rates of the auxiliary model."""
    a_full, a_int, b_full, b_int = _denominators(inst, pu, pd)
    r_ul = np.log1p(pu * inst.h / a_int) / LN2
    r_dl = np.log1p(pd * inst.g / b_int) / LN2
    return r_ul, r_dl


def total_power(inst: NetworkInstance, pu: np.ndarray, pd: np.ndarray) -> float:
    """Circuit power plus amplifier-scaled transmit power (auxiliary form)."""
    return inst.p_circ_total + inst.inv_eff_ue * float(np.sum(pu)) \
        + inst.inv_eff_bs * float(np.sum(pd))


def rate_report(inst: NetworkInstance, alloc: Allocation) -> RateReport:
    """Per-UE rates, sum rate, total power and EE in the auxiliary form."""
    r_ul, r_dl = per_pair_rates(inst, alloc.pu, alloc.pd)
    ul = r_ul.sum(axis=1)
    dl = r_dl.sum(axis=1)
    power = total_power(inst, alloc.pu, alloc.pd)
    sum_rate = float(ul.sum() + dl.sum())
    return RateReport(ul, dl, sum_rate, power, sum_rate / power)


def coupled_report(inst: NetworkInstance, x: np.ndarray, pu: np.ndarray,
                   pd: np.ndarray) -> RateReport:
    """Rates/power/EE of the original coupled model, where SINRs and the
    power sum carry the explicit assignment factor."""
    xs = np.asarray(x, dtype=float)
    gamma_ul = pu * xs * inst.h / (inst.si_bs * pd * xs + inst.noise_bs)
    gamma_dl = pd * xs * inst.g / (inst.si_ue[:, None] * pu * xs + inst.noise_ue[:, None])
    ul = (np.log1p(gamma_ul) / LN2).sum(axis=1)
    dl = (np.log1p(gamma_dl) / LN2).sum(axis=1)
    power = inst.p_circ_total + float(
        np.sum(xs * (inst.inv_eff_ue * pu + inst.inv_eff_bs * pd)))
    sum_rate = float(ul.sum() + dl.sum())
    return RateReport(ul, dl, sum_rate, power, sum_rate / power)


def dc_parts(inst: NetworkInstance, alloc: Allocation) -> tuple[float, float]:
    """The concave pieces (f, g) with f - g equal to the auxiliary sum rate."""
    a_full, a_int, b_full, b_int = _denominators(inst, alloc.pu, alloc.pd)
    f = float(np.sum(np.log2(a_full)) + np.sum(np.log2(b_full)))
    g = float(np.sum(np.log2(a_int)) + np.sum(np.log2(b_int)))
    return f, g


@dataclass
class DcGradients:
    """Closed-form partials of f, g and the per-UE QoS pieces w.r.t. the
    auxiliary powers. All arrays are (N, K); row n of a QoS array is the
    gradient of that UE's row function."""

    df_dpu: np.ndarray
    df_dpd: np.ndarray
    dg_dpu: np.ndarray
    dg_dpd: np.ndarray
    df1u_dpu: np.ndarray
    df1u_dpd: np.ndarray
    df2u_dpd: np.ndarray   # df2u/dpu is identically zero
    df1d_dpu: np.ndarray
    df1d_dpd: np.ndarray
    df2d_dpu: np.ndarray   # df2d/dpd is identically zero


def grad_dc(inst: NetworkInstance, alloc: Allocation) -> DcGradients:
    a_full, a_int, b_full, b_int = _denominators(inst, alloc.pu, alloc.pd)
    si_ue = inst.si_ue[:, None]
    d_f1u_pu = inst.h / (a_full * LN2)
    d_f1u_pd = inst.si_bs / (a_full * LN2)
    d_f2u_pd = inst.si_bs / (a_int * LN2)
    d_f1d_pu = si_ue / (b_full * LN2)
    d_f1d_pd = inst.g / (b_full * LN2)
    d_f2d_pu = si_ue / (b_int * LN2)
    return DcGradients(
        df_dpu=d_f1u_pu + d_f1d_pu,
        df_dpd=d_f1u_pd + d_f1d_pd,
        dg_dpu=d_f2d_pu,
        dg_dpd=d_f2u_pd,
        df1u_dpu=d_f1u_pu,
        df1u_dpd=d_f1u_pd,
        df2u_dpd=d_f2u_pd,
        df1d_dpu=d_f1d_pu,
        df1d_dpd=d_f1d_pd,
        df2d_dpu=d_f2d_pu,
    )


def qos_parts(inst: NetworkInstance, pu: np.ndarray, pd: np.ndarray):
    """Per-UE values (f1u, f2u, f1d, f2d), each shaped (N,). The differences
    f1 - f2 are the per-UE UL/DL rates."""
    a_full, a_int, b_full, b_int = _denominators(inst, pu, pd)
    f1u = np.sum(np.log2(a_full), axis=1)
    f2u = np.sum(np.log2(a_int), axis=1)
    f1d = np.sum(np.log2(b_full), axis=1)
    f2d = np.sum(np.log2(b_int), axis=1)
    return f1u, f2u, f1d, f2d
