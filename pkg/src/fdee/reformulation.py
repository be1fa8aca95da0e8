"""Convex feasible region, penalty machinery and per-iteration surrogates.

The relaxed problem decouples assignment and power through auxiliary per-pair
powers; what remains non-convex is the difference-of-concave objective, the
QoS rows and the binariness of the assignment. Each MM iteration replaces
the subtracted concave pieces by their first-order expansions at the current
iterate, which yields a concave objective and conservative (inner) QoS rows.
A single quadratic penalty with a large factor drives the relaxed assignment
entries to {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import NetworkInstance
from .system_model import (
    LN2,
    Allocation,
    dc_parts,
    grad_dc,
    qos_parts,
    total_power,
)

VarKey = tuple[str, int, int]  # ("x"|"pu"|"pd", ue, subcarrier)


@dataclass(frozen=True)
class LinearRow:
    """One `sum(coeffs * vars) <= bound` row; `scale` normalizes violations."""

    kind: str
    coeffs: dict[VarKey, float]
    bound: float
    scale: float = 1.0

    def value(self, alloc: Allocation) -> float:
        arrays = {"x": alloc.x, "pu": alloc.pu, "pd": alloc.pd}
        return sum(c * arrays[v][n, k] for (v, n, k), c in self.coeffs.items())

    def violation(self, alloc: Allocation) -> float:
        return max(0.0, self.value(alloc) - self.bound) / self.scale


@dataclass(frozen=True)
class QosRow:
    """One linearized QoS row `f1 - f2_tilde >= r_req` for a single UE and
    direction.

    `signal_gain` multiplies the own-direction power inside f1, `si_coef`
    the interfering power; `const` and `lin_grad` are f2 and its gradient at
    the expansion point, so f2_tilde is affine in the interfering power and
    the whole left side is concave.
    """

    direction: str           # "ul" | "dl"
    ue: int
    r_req: float
    signal_gain: np.ndarray  # (K,)
    si_coef: float
    noise: float
    const: float             # f2 at the anchor
    lin_grad: np.ndarray     # (K,) anchor gradient of f2 w.r.t. interferer power
    anchor_interf: np.ndarray  # (K,) anchor value of the interfering power

    @property
    def active(self) -> bool:
        # A zero requirement is vacuous in the true problem (rates are >= 0).
        return self.r_req > 0.0

    def value(self, alloc: Allocation) -> float:
        """Left-hand side f1 - f2_tilde for this UE."""
        n = self.ue
        own, interf = (alloc.pu[n], alloc.pd[n]) if self.direction == "ul" \
            else (alloc.pd[n], alloc.pu[n])
        f1 = float(np.sum(np.log2(
            self.si_coef * interf + self.noise + own * self.signal_gain)))
        f2_tilde = self.const + float(np.sum(self.lin_grad * (interf - self.anchor_interf)))
        return f1 - f2_tilde

    def slack(self, alloc: Allocation) -> float:
        return (self.value(alloc) - self.r_req) / max(1.0, self.r_req)


@dataclass
class ConstraintSet:
    """The convex region D: structured linear rows plus (after surrogate
    construction) the linearized QoS rows. Box bounds x in [0,1] and
    pu, pd >= 0 are kept implicit as bounds, not rows."""

    linear_rows: list[LinearRow]
    qos_rows: list[QosRow] = field(default_factory=list)

    def rows_of_kind(self, kind: str) -> list[LinearRow]:
        return [r for r in self.linear_rows if r.kind == kind]


def build_constraints(inst: NetworkInstance) -> ConstraintSet:
    """Emit the linear rows of D (QoS rows are added per MM iteration)."""
    n_ues, n_sc = inst.shape
    rows: list[LinearRow] = []
    for k in range(n_sc):
        rows.append(LinearRow(
            "assign_excl", {("x", n, k): 1.0 for n in range(n_ues)}, 1.0))
    for n in range(n_ues):
        budget = float(inst.p_max_ue[n])
        rows.append(LinearRow(
            "ue_power_budget",
            {("pu", n, k): 1.0 for k in range(n_sc)}, budget, scale=budget))
    for n in range(n_ues):
        budget = float(inst.p_max_ue[n])
        for k in range(n_sc):
            rows.append(LinearRow(
                "ue_power_coupling",
                {("pu", n, k): 1.0, ("x", n, k): -budget}, 0.0, scale=budget))
    rows.append(LinearRow(
        "bs_power_budget",
        {("pd", n, k): 1.0 for n in range(n_ues) for k in range(n_sc)},
        inst.p_max_bs, scale=inst.p_max_bs))
    for n in range(n_ues):
        for k in range(n_sc):
            rows.append(LinearRow(
                "bs_power_coupling",
                {("pd", n, k): 1.0, ("x", n, k): -inst.p_max_bs}, 0.0,
                scale=inst.p_max_bs))
    return ConstraintSet(rows)


def penalty_value(x: np.ndarray) -> float:
    """sum(x - x^2); zero exactly when every entry is 0 or 1."""
    x = np.asarray(x, dtype=float)
    return float(np.sum(x) - np.sum(x * x))


def default_penalty_factor(inst: NetworkInstance) -> float:
    """Penalty factor 10^log10(P_bs / N_bs), i.e. the linear budget-to-noise
    ratio of the BS."""
    return inst.p_max_bs / inst.noise_bs


def lagrangian(inst: NetworkInstance, alloc: Allocation, q: float,
               lam: float) -> float:
    """Penalized subtractive objective f - g - q * P_total - lam * penalty."""
    f, g = dc_parts(inst, alloc)
    power = total_power(inst, alloc.pu, alloc.pd)
    return f - g - q * power - lam * penalty_value(alloc.x)


def max_violation(inst: NetworkInstance, cons: ConstraintSet,
                  alloc: Allocation) -> float:
    """Worst normalized violation over boxes, linear rows and active QoS
    rows. Power-like rows are normalized by their budget, QoS rows by
    max(1, r_req)."""
    x, pu, pd = alloc.x, alloc.pu, alloc.pd
    worst = max(
        float(np.max(-x, initial=0.0)),
        float(np.max(x - 1.0, initial=0.0)),
        float(np.max(-pu, initial=0.0)),
        float(np.max(-pd, initial=0.0)),
        float(np.max(x.sum(axis=0) - 1.0, initial=0.0)),
        float(np.max((pu.sum(axis=1) - inst.p_max_ue) / inst.p_max_ue,
                     initial=0.0)),
        (pd.sum() - inst.p_max_bs) / inst.p_max_bs,
        float(np.max((pu - x * inst.p_max_ue[:, None]) / inst.p_max_ue[:, None],
                     initial=0.0)),
        float(np.max((pd - x * inst.p_max_bs) / inst.p_max_bs, initial=0.0)),
    )
    for row in cons.qos_rows:
        if row.active:
            worst = max(worst, -row.slack(alloc))
    return worst


@dataclass
class SurrogateModel:
    """One MM iteration's concave model, anchored at `expansion`.

    The objective is e1 - e2_tilde where e2 (the subtracted concave part,
    g - lam * sum(x^2)) is linearized at the anchor; QoS rows subtract the
    linearization of their concave f2 part. Built once per MM iteration and
    immutable afterwards. `objective_kind` switches between the penalized
    rate-minus-q*power Lagrangian and plain power minimization; with
    `ul_enabled` false the uplink is switched off (powers pinned to zero by
    the solver, UL QoS rows vacuous).
    """

    inst: NetworkInstance
    expansion: Allocation
    q: float
    lam: float
    objective_kind: str = "lagrangian"   # or "power_min"
    ul_enabled: bool = True

    def __post_init__(self):
        inst, anchor = self.inst, self.expansion
        if np.any(anchor.x < -1e-12) or np.any(anchor.x > 1.0 + 1e-12) \
                or np.any(anchor.pu < -1e-12) or np.any(anchor.pd < -1e-12):
            raise ValueError("expansion point violates box bounds")
        grads = grad_dc(inst, anchor)
        _, f2u, _, f2d = qos_parts(inst, anchor.pu, anchor.pd)
        _, g0 = dc_parts(inst, anchor)
        self._g0 = g0
        self._dg_dpu0 = grads.dg_dpu
        self._dg_dpd0 = grads.dg_dpd
        self._f2u0 = f2u
        self._f2d0 = f2d
        self._cu = grads.df2u_dpd      # (N, K) anchor gradient of f2u w.r.t. pd
        self._cd = grads.df2d_dpu      # (N, K) anchor gradient of f2d w.r.t. pu
        self._sumsq_x0 = float(np.sum(anchor.x * anchor.x))
        self._x_grad = self.lam * (2.0 * anchor.x - 1.0)
        self._rate_weight = 0.0 if self.objective_kind == "power_min" else 1.0
        self._q_eff = 1.0 if self.objective_kind == "power_min" else self.q
        self._cons_cache: ConstraintSet | None = None

    # -- objective ---------------------------------------------------------

    def objective_value(self, x: np.ndarray, pu: np.ndarray,
                        pd: np.ndarray) -> float:
        inst, anchor = self.inst, self.expansion
        val = -self._q_eff * total_power(inst, pu, pd)
        if self._rate_weight:
            f, _ = dc_parts(inst, Allocation(x, pu, pd))
            val += f - self._g0 \
                - float(np.sum(self._dg_dpu0 * (pu - anchor.pu))) \
                - float(np.sum(self._dg_dpd0 * (pd - anchor.pd)))
        # the x terms are summed before the single multiplication by lam so
        # their exact cancellation at binary points survives in floating point
        x_part = 2.0 * float(np.sum(anchor.x * x)) - float(np.sum(x)) \
            - self._sumsq_x0
        return val + self.lam * x_part

    def objective_grad(self, x: np.ndarray, pu: np.ndarray, pd: np.ndarray):
        """(gx, gpu, gpd); gx is constant across the surrogate."""
        inst = self.inst
        if self._rate_weight:
            grads = grad_dc(inst, Allocation(x, pu, pd))
            gpu = grads.df_dpu - self._dg_dpu0 - self._q_eff * inst.inv_eff_ue
            gpd = grads.df_dpd - self._dg_dpd0 - self._q_eff * inst.inv_eff_bs
        else:
            gpu = np.full(inst.shape, -self._q_eff * inst.inv_eff_ue)
            gpd = np.full(inst.shape, -self._q_eff * inst.inv_eff_bs)
        return self._x_grad, gpu, gpd

    # -- QoS rows ----------------------------------------------------------

    def qos_lhs(self, pu: np.ndarray, pd: np.ndarray):
        """(ul_lhs, dl_lhs) both (N,): f1 - f2_tilde per UE and direction."""
        inst, anchor = self.inst, self.expansion
        f1u, _, f1d, _ = qos_parts(inst, pu, pd)
        ul = f1u - (self._f2u0 + np.sum(self._cu * (pd - anchor.pd), axis=1))
        dl = f1d - (self._f2d0 + np.sum(self._cd * (pu - anchor.pu), axis=1))
        return ul, dl

    def qos_slacks(self, pu: np.ndarray, pd: np.ndarray):
        """Normalized slacks of the active rows; inactive rows report +inf."""
        inst = self.inst
        ul, dl = self.qos_lhs(pu, pd)
        s_ul = (ul - inst.r_req_ul) / np.maximum(1.0, inst.r_req_ul)
        s_dl = (dl - inst.r_req_dl) / np.maximum(1.0, inst.r_req_dl)
        active_ul = (inst.r_req_ul > 0) if self.ul_enabled \
            else np.zeros(inst.n_ues, dtype=bool)
        s_ul = np.where(active_ul, s_ul, np.inf)
        s_dl = np.where(inst.r_req_dl > 0, s_dl, np.inf)
        return s_ul, s_dl

    def qos_grads(self, pu: np.ndarray, pd: np.ndarray):
        """Gradients of the normalized row LHS: (ul_pu, ul_pd, dl_pu, dl_pd),
        each (N, K) with row n belonging to UE n's row function."""
        inst = self.inst
        grads = grad_dc(inst, Allocation(np.zeros(inst.shape), pu, pd))
        wu = np.maximum(1.0, inst.r_req_ul)[:, None]
        wd = np.maximum(1.0, inst.r_req_dl)[:, None]
        ul_pu = grads.df1u_dpu / wu
        ul_pd = (grads.df1u_dpd - self._cu) / wu
        dl_pu = (grads.df1d_dpu - self._cd) / wd
        dl_pd = grads.df1d_dpd / wd
        return ul_pu, ul_pd, dl_pu, dl_pd

    # -- declarative view ----------------------------------------------------

    @property
    def constraints(self) -> ConstraintSet:
        if self._cons_cache is not None:
            return self._cons_cache
        cons = build_constraints(self.inst)
        inst, anchor = self.inst, self.expansion
        for n in range(inst.n_ues):
            cons.qos_rows.append(QosRow(
                "ul", n,
                float(inst.r_req_ul[n]) if self.ul_enabled else 0.0,
                inst.h[n].copy(), inst.si_bs, inst.noise_bs,
                float(self._f2u0[n]), self._cu[n].copy(), anchor.pd[n].copy()))
        for n in range(inst.n_ues):
            cons.qos_rows.append(QosRow(
                "dl", n, float(inst.r_req_dl[n]),
                inst.g[n].copy(), float(inst.si_ue[n]), float(inst.noise_ue[n]),
                float(self._f2d0[n]), self._cd[n].copy(), anchor.pu[n].copy()))
        self._cons_cache = cons
        return cons


def build_surrogate(inst: NetworkInstance, expansion: Allocation, q: float,
                    lam: float, objective_kind: str = "lagrangian",
                    ul_enabled: bool = True) -> SurrogateModel:
    """Anchor the MM surrogate at `expansion` for Dinkelbach parameter q and
    penalty factor lam."""
    return SurrogateModel(inst, expansion.copy(), q, lam,
                          objective_kind=objective_kind, ul_enabled=ul_enabled)
