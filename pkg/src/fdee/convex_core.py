"""Maximize one MM surrogate over its constraint set.

The surrogate objective is concave and smooth with cheap analytic gradients,
so the engine is a first-order method rather than an external conic solver:

* assignment variables move through an exact per-sub-carrier linear-program
  step (the surrogate is linear in x with a constant gradient);
* powers move by projected gradient ascent with Barzilai-Borwein steps and
  an Armijo safeguard, using exact Euclidean projections onto the capped
  simplices formed by the budget, coupling and non-negativity rows;
* the concave QoS rows are handled by a logarithmic barrier whose weight
  decreases geometrically across stages.

Powers are normalized by their budgets internally so every variable is O(1).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .reformulation import SurrogateModel, max_violation
from .system_model import LN2, Allocation


class SolveStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class SolveResult:
    point: Allocation
    objective: float
    status: SolveStatus
    stationarity_residual: float
    max_constraint_violation: float
    iterations: int


@dataclass
class SolverOptions:
    opt_tol: float = 1e-6
    feas_tol: float = 1e-8
    max_iters: int = 5000        # iteration cap per barrier stage
    barrier_start: float = 1.0
    barrier_end: float = 1e-8
    barrier_factor: float = 0.1
    block_rounds: int = 2
    x_frozen: bool = False


class InfeasibleStartError(ValueError):
    """The provided start point violates the solve contract."""


# ---------------------------------------------------------------------------
# exact projections
# ---------------------------------------------------------------------------

def project_capped_simplex_rows(w: np.ndarray, caps: np.ndarray,
                                total: float = 1.0) -> np.ndarray:
    """Row-wise Euclidean projection onto {0 <= u <= caps, sum(u) <= total}.

    Exact via the piecewise-linear water level; all rows are handled in one
    vectorized pass.
    """
    u = np.clip(w, 0.0, caps)
    sums = u.sum(axis=1)
    bad = sums > total
    if not np.any(bad):
        return u
    wb = w[bad]
    cb = caps[bad]
    u[bad] = _level_project(wb, cb, total)
    return u


def project_capped_simplex_flat(w: np.ndarray, caps: np.ndarray,
                                total: float = 1.0) -> np.ndarray:
    """Euclidean projection of one flat vector onto
    {0 <= u <= caps, sum(u) <= total}."""
    u = np.clip(w, 0.0, caps)
    if u.sum() <= total:
        return u
    return _level_project(w[None, :], caps[None, :], total)[0]


def _level_project(w: np.ndarray, caps: np.ndarray, total: float) -> np.ndarray:
    """Solve sum(clip(w - tau, 0, caps)) == total per row (rows known to
    exceed `total` after clipping)."""
    bps = np.concatenate([w - caps, w], axis=1)           # (R, 2K)
    bps.sort(axis=1)
    # sum at every breakpoint: (R, 2K)
    svals = np.clip(w[:, None, :] - bps[:, :, None], 0.0, caps[:, None, :]).sum(axis=2)
    out = np.empty_like(w)
    for r in range(w.shape[0]):
        sv = svals[r]
        # sv is non-increasing along ascending breakpoints
        j = int(np.searchsorted(-sv, -total, side="left"))
        if j == 0:
            # below the first breakpoint every coordinate sits at its cap
            cnt = max(int(np.count_nonzero(caps[r] > 0)), 1)
            tau = bps[r, 0] - (total - sv[0]) / cnt
        else:
            lo, hi = bps[r, j - 1], bps[r, j]
            s_lo, s_hi = sv[j - 1], sv[j]
            frac = 0.0 if s_lo == s_hi else (s_lo - total) / (s_lo - s_hi)
            tau = lo + frac * (hi - lo)
        out[r] = np.clip(w[r] - tau, 0.0, caps[r])
        excess = out[r].sum() - total
        if excess > 0.0:
            # nudge the level up to absorb rounding
            free = (out[r] > 0.0) & (out[r] < caps[r])
            cnt = max(int(np.count_nonzero(free)), 1)
            out[r] = np.clip(w[r] - (tau + excess / cnt), 0.0, caps[r])
    return out


def project_assignment_columns(x: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Project each column of x onto {lower <= x <= 1, sum_n x <= 1}."""
    shifted = (x - lower).T                       # columns become rows
    caps = np.maximum(1.0 - lower, 0.0).T
    budget = 1.0 - lower.sum(axis=0)
    out = np.empty_like(shifted)
    for i, total in enumerate(budget):
        t = max(float(total), 0.0)
        out[i] = project_capped_simplex_flat(shifted[i], caps[i], t)
    return out.T + lower


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------

class _Work:
    """Precomputed constants for one maximize() call; powers are handled in
    budget-normalized units."""

    def __init__(self, model: SurrogateModel):
        inst = model.inst
        self.model = model
        self.inst = inst
        self.pue = inst.p_max_ue[:, None]        # (N, 1)
        self.pbs = inst.p_max_bs
        self.h = inst.h
        self.g = inst.g
        self.si_bs = inst.si_bs
        self.si_ue = inst.si_ue[:, None]
        self.nb = inst.noise_bs
        self.nu = inst.noise_ue[:, None]
        self.rw = model._rate_weight
        self.q_eff = model._q_eff
        self.dgpu0 = model._dg_dpu0
        self.dgpd0 = model._dg_dpd0
        self.cu = model._cu
        self.cd = model._cd
        self.f2u0 = model._f2u0
        self.f2d0 = model._f2d0
        self.pu0 = model.expansion.pu
        self.pd0 = model.expansion.pd
        self.wu = np.maximum(1.0, inst.r_req_ul)
        self.wd = np.maximum(1.0, inst.r_req_dl)
        self.act_ul = (inst.r_req_ul > 0) & model.ul_enabled
        self.act_dl = inst.r_req_dl > 0
        self.has_qos = bool(np.any(self.act_ul) or np.any(self.act_dl))
        self.x_grad = model._x_grad

    def powers(self, big_u: np.ndarray, big_v: np.ndarray):
        return big_u * self.pue, big_v * self.pbs

    def value(self, big_u, big_v, mu):
        """Barrier objective (without the x terms, constant per stage) in
        scaled power variables; -inf when an active slack is non-positive.
        Returns (value, min_slack)."""
        pu, pd = self.powers(big_u, big_v)
        a_full = self.si_bs * pd + self.nb + pu * self.h
        b_full = self.si_ue * pu + self.nu + pd * self.g

        val = -self.q_eff * (self.inst.inv_eff_ue * pu.sum()
                             + self.inst.inv_eff_bs * pd.sum())
        log_af = log_bf = None
        if self.rw or self.has_qos:
            log_af = np.log2(a_full)
            log_bf = np.log2(b_full)
        if self.rw:
            val += log_af.sum() + log_bf.sum() \
                - (self.dgpu0 * pu).sum() - (self.dgpd0 * pd).sum()

        min_slack = np.inf
        if self.has_qos:
            lhs_u = log_af.sum(axis=1) - self.f2u0 \
                - (self.cu * (pd - self.pd0)).sum(axis=1)
            lhs_d = log_bf.sum(axis=1) - self.f2d0 \
                - (self.cd * (pu - self.pu0)).sum(axis=1)
            s_ul = (lhs_u - self.inst.r_req_ul) / self.wu
            s_dl = (lhs_d - self.inst.r_req_dl) / self.wd
            act_s = np.concatenate([s_ul[self.act_ul], s_dl[self.act_dl]])
            if act_s.size:
                min_slack = float(act_s.min())
                if mu > 0.0:
                    if min_slack <= 0.0:
                        return -np.inf, min_slack
                    val += mu * float(np.log(act_s).sum())
        return float(val), min_slack

    def grad(self, big_u, big_v, mu):
        """Gradient and curvature diagonal of the barrier objective in the
        scaled variables: (gU, gV, dU, dV). The diagonal collects the
        magnitudes of the analytic second derivatives of every log term, so
        dividing the gradient by it yields well-scaled Newton-like steps."""
        pu, pd = self.powers(big_u, big_v)
        a_full = self.si_bs * pd + self.nb + pu * self.h
        b_full = self.si_ue * pu + self.nu + pd * self.g
        inv_af = 1.0 / (a_full * LN2)
        inv_bf = 1.0 / (b_full * LN2)
        h_af = self.h * inv_af            # d f1u / d pu
        s_af = self.si_bs * inv_af        # d f1u / d pd
        e_bf = self.si_ue * inv_bf        # d f1d / d pu
        g_bf = self.g * inv_bf            # d f1d / d pd

        if self.rw:
            gpu = h_af + e_bf - self.dgpu0 - self.q_eff * self.inst.inv_eff_ue
            gpd = s_af + g_bf - self.dgpd0 - self.q_eff * self.inst.inv_eff_bs
            dpu = LN2 * (h_af * h_af + e_bf * e_bf)
            dpd = LN2 * (s_af * s_af + g_bf * g_bf)
        else:
            gpu = np.full(pu.shape, -self.q_eff * self.inst.inv_eff_ue)
            gpd = np.full(pd.shape, -self.q_eff * self.inst.inv_eff_bs)
            dpu = np.zeros(pu.shape)
            dpd = np.zeros(pd.shape)

        if self.has_qos and mu > 0.0:
            lhs_u = np.log2(a_full).sum(axis=1) - self.f2u0 \
                - (self.cu * (pd - self.pd0)).sum(axis=1)
            lhs_d = np.log2(b_full).sum(axis=1) - self.f2d0 \
                - (self.cd * (pu - self.pu0)).sum(axis=1)
            s_ul = (lhs_u - self.inst.r_req_ul) / self.wu
            s_dl = (lhs_d - self.inst.r_req_dl) / self.wd
            m_ul = np.where(self.act_ul & (s_ul > 0), mu / np.where(s_ul > 0, s_ul, 1.0), 0.0)
            m_dl = np.where(self.act_dl & (s_dl > 0), mu / np.where(s_dl > 0, s_dl, 1.0), 0.0)
            r_ul = (m_ul / self.wu)[:, None]
            r_dl = (m_dl / self.wd)[:, None]
            du_row = h_af / self.wu[:, None]              # d s_ul / d pu
            dd_row = (s_af - self.cu) / self.wu[:, None]  # d s_ul / d pd
            du2_row = (e_bf - self.cd) / self.wd[:, None]
            dd2_row = g_bf / self.wd[:, None]
            gpu = gpu + m_ul[:, None] * du_row + m_dl[:, None] * du2_row
            gpd = gpd + m_ul[:, None] * dd_row + m_dl[:, None] * dd2_row
            # Gauss-Newton style curvature of mu*log(s): (ds)^2 * mu / s^2
            # plus mu/s times the curvature of s itself
            q_ul = (m_ul / np.where(s_ul > 0, s_ul, 1.0))[:, None]
            q_dl = (m_dl / np.where(s_dl > 0, s_dl, 1.0))[:, None]
            dpu = dpu + q_ul * du_row * du_row + q_dl * du2_row * du2_row \
                + m_ul[:, None] * LN2 * h_af * h_af / self.wu[:, None] \
                + m_dl[:, None] * LN2 * e_bf * e_bf / self.wd[:, None]
            dpd = dpd + q_ul * dd_row * dd_row + q_dl * dd2_row * dd2_row \
                + m_ul[:, None] * LN2 * s_af * s_af / self.wu[:, None] \
                + m_dl[:, None] * LN2 * g_bf * g_bf / self.wd[:, None]

        g_u = gpu * self.pue
        g_v = gpd * self.pbs
        d_u = dpu * self.pue * self.pue
        d_v = dpd * self.pbs * self.pbs
        return g_u, g_v, d_u, d_v

    def grad2(self, big_u, big_v, mu):
        """Gradient plus the per-pair 2x2 curvature of the barrier
        objective in scaled variables: (gU, gV, m_uu, m_vv, m_uv, qos)
        with M the negated (positive definite) pair Hessian. The cross
        term captures the self-interference coupling inside each pair; the
        Gauss-Newton part of the barrier enters the diagonal only, which
        at worst understates curvature and is then caught by the Armijo
        backtrack. `qos` carries the row slacks and their scaled gradients
        (or None without active rows) so the caller can damp steps toward
        the walls."""
        pu, pd = self.powers(big_u, big_v)
        a_full = self.si_bs * pd + self.nb + pu * self.h
        b_full = self.si_ue * pu + self.nu + pd * self.g
        inv_af = 1.0 / (a_full * LN2)
        inv_bf = 1.0 / (b_full * LN2)
        h_af = self.h * inv_af
        s_af = self.si_bs * inv_af
        e_bf = self.si_ue * inv_bf
        g_bf = self.g * inv_bf

        w_u = np.full(self.inst.n_ues, self.rw)   # weight on log(a_full)
        w_d = np.full(self.inst.n_ues, self.rw)   # weight on log(b_full)
        gpu = -self.q_eff * self.inst.inv_eff_ue \
            - (self.dgpu0 if self.rw else 0.0)
        gpd = -self.q_eff * self.inst.inv_eff_bs \
            - (self.dgpd0 if self.rw else 0.0)
        gpu = np.broadcast_to(np.asarray(gpu), pu.shape).copy()
        gpd = np.broadcast_to(np.asarray(gpd), pd.shape).copy()
        extra_du = extra_dd = 0.0
        qos_info = None
        if self.has_qos and mu > 0.0:
            lhs_u = np.log2(a_full).sum(axis=1) - self.f2u0 \
                - (self.cu * (pd - self.pd0)).sum(axis=1)
            lhs_d = np.log2(b_full).sum(axis=1) - self.f2d0 \
                - (self.cd * (pu - self.pu0)).sum(axis=1)
            s_ul = (lhs_u - self.inst.r_req_ul) / self.wu
            s_dl = (lhs_d - self.inst.r_req_dl) / self.wd
            m_ul = np.where(self.act_ul & (s_ul > 0),
                            mu / np.where(s_ul > 0, s_ul, 1.0), 0.0) / self.wu
            m_dl = np.where(self.act_dl & (s_dl > 0),
                            mu / np.where(s_dl > 0, s_dl, 1.0), 0.0) / self.wd
            w_u = w_u + m_ul
            w_d = w_d + m_dl
            gpu = gpu - m_dl[:, None] * self.cd
            gpd = gpd - m_ul[:, None] * self.cu
            # Gauss-Newton diagonal of the barrier (row-rank-one exactly)
            q_ul = (m_ul / np.where(s_ul > 0, s_ul, 1.0))[:, None]
            q_dl = (m_dl / np.where(s_dl > 0, s_dl, 1.0))[:, None]
            du_row = h_af / self.wu[:, None]
            dd_row = (s_af - self.cu) / self.wu[:, None]
            du2_row = (e_bf - self.cd) / self.wd[:, None]
            dd2_row = g_bf / self.wd[:, None]
            extra_du = q_ul * du_row * du_row + q_dl * du2_row * du2_row
            extra_dd = q_ul * dd_row * dd_row + q_dl * dd2_row * dd2_row
            qos_info = (s_ul, s_dl,
                        du_row * self.pue, dd_row * self.pbs,
                        du2_row * self.pue, dd2_row * self.pbs)
        wu_c = w_u[:, None]
        wd_c = w_d[:, None]
        gpu = gpu + wu_c * h_af + wd_c * e_bf
        gpd = gpd + wu_c * s_af + wd_c * g_bf
        m_uu = LN2 * (wu_c * h_af * h_af + wd_c * e_bf * e_bf) + extra_du
        m_vv = LN2 * (wu_c * s_af * s_af + wd_c * g_bf * g_bf) + extra_dd
        m_uv = LN2 * (wu_c * h_af * s_af + wd_c * e_bf * g_bf)
        return (gpu * self.pue, gpd * self.pbs,
                m_uu * self.pue * self.pue,
                m_vv * self.pbs * self.pbs,
                m_uv * self.pue * self.pbs, qos_info)

    def slack_grads(self, big_u, big_v):
        """Gradients (scaled variables) of every active normalized QoS slack,
        plus the slack values. Rows ordered: active UL UEs then active DL."""
        pu, pd = self.powers(big_u, big_v)
        a_full = self.si_bs * pd + self.nb + pu * self.h
        b_full = self.si_ue * pu + self.nu + pd * self.g
        inv_af = 1.0 / (a_full * LN2)
        inv_bf = 1.0 / (b_full * LN2)
        f1u = np.log2(a_full).sum(axis=1)
        f1d = np.log2(b_full).sum(axis=1)
        lhs_u = f1u - self.f2u0 - (self.cu * (pd - self.pd0)).sum(axis=1)
        lhs_d = f1d - self.f2d0 - (self.cd * (pu - self.pu0)).sum(axis=1)
        s_ul = (lhs_u - self.inst.r_req_ul) / self.wu
        s_dl = (lhs_d - self.inst.r_req_dl) / self.wd
        rows = []
        for n in np.flatnonzero(self.act_ul):
            gu = np.zeros(self.inst.shape)
            gv = np.zeros(self.inst.shape)
            gu[n] = (self.h[n] * inv_af[n]) / self.wu[n] * self.pue[n]
            gv[n] = ((self.si_bs * inv_af[n] - self.cu[n]) / self.wu[n]) * self.pbs
            rows.append((float(s_ul[n]), gu, gv))
        for n in np.flatnonzero(self.act_dl):
            gu = np.zeros(self.inst.shape)
            gv = np.zeros(self.inst.shape)
            gu[n] = ((self.si_ue[n, 0] * inv_bf[n] - self.cd[n]) / self.wd[n]) * self.pue[n, 0]
            gv[n] = (self.g[n] * inv_bf[n]) / self.wd[n] * self.pbs
            rows.append((float(s_dl[n]), gu, gv))
        return rows


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _x_lp_step(work: _Work, x: np.ndarray, big_u: np.ndarray,
               big_v: np.ndarray) -> np.ndarray:
    """Exact maximizer of the (linear) x part over the x-section of D.

    Lower bounds come from the coupling rows; among LP optima the one with
    the largest total assignment mass is returned so caps never shrink
    needlessly when the x gradient vanishes.
    """
    c = work.x_grad
    lower = np.minimum(np.maximum(np.maximum(big_u, big_v), 0.0), 1.0)
    n_ues, n_sc = x.shape
    x_new = lower.copy()
    for k in range(n_sc):
        cap = 1.0 - float(lower[:, k].sum())
        if cap <= 1e-15:
            continue
        col = c[:, k]
        pos = np.flatnonzero(col > 0)
        order = list(pos[np.argsort(-col[pos], kind="stable")])
        order += list(np.flatnonzero(col == 0))
        for n in order:
            room = 1.0 - x_new[n, k]
            add = min(room, cap)
            if add > 0:
                x_new[n, k] += add
                cap -= add
            if cap <= 1e-15:
                break
    return x_new


def _project_uv(big_u, big_v, caps_u, caps_v):
    u = project_capped_simplex_rows(big_u, caps_u, 1.0)
    v = project_capped_simplex_flat(big_v.ravel(), caps_v.ravel(), 1.0)
    return u, v.reshape(big_v.shape)


_SEED = 1e-12       # scaled power injected so zero coordinates can grow
_FLUSH = 1e-11      # scaled power below which a coordinate is snapped to 0
_LOG_STEP_CAP = 1.3862943611198906  # ln 4: at most 4x per step and coordinate


def _log_direction_rows(g: np.ndarray, d: np.ndarray, z: np.ndarray,
                        caps: np.ndarray, totals: np.ndarray) -> np.ndarray:
    """Multiplicative ascent directions, one sum-constrained group per row.

    The problem's log terms make power scales span many decades, so moves
    are taken in log space: the result is the per-coordinate relative
    change. The log-space gradient is g*z and the curvature estimate
    d*z^2 + |g*z|; on rows whose sum constraint is tight, a multiplier on
    the constraint normal (z itself in log space) is subtracted, which
    preserves ascent by Cauchy-Schwarz in the diagonal metric."""
    gy = g * z
    dy = np.maximum(d * z * z + np.abs(gy), 1e-30)
    movable = (z > 0.0) & ~((g > 0.0) & (z >= caps - 1e-14))
    gy = np.where(movable, gy, 0.0)
    tight = z.sum(axis=1) >= totals * (1.0 - 1e-12)
    if np.any(tight):
        w = np.where(movable, z * z / dy, 0.0)
        denom = w.sum(axis=1)
        num = np.where(movable, gy * z / dy, 0.0).sum(axis=1)
        nu = np.where((denom > 0.0) & tight, num / np.where(denom > 0, denom, 1.0), 0.0)
        nu = np.maximum(nu, 0.0)
        gy = np.where(movable, gy - nu[:, None] * z, 0.0)
    return np.clip(gy / dy, -_LOG_STEP_CAP, _LOG_STEP_CAP)


def _power_stage(work: _Work, big_u, big_v, caps_u, caps_v, mu,
                 max_iters, gain_atol) -> tuple[np.ndarray, np.ndarray, int]:
    """Projected multiplicative ascent on the mu-barrier objective with x
    fixed. Each coordinate moves by a factor exp(a*s); the projection back
    onto the budget rows keeps iterates exactly feasible and an Armijo
    backtrack keeps every accepted step an ascent."""
    # seed silent assigned coordinates so they can grow multiplicatively;
    # seeds must neither exceed the budgets (a projection afterwards could
    # shave QoS-critical coordinates) nor break an interior start
    raw_u, raw_v = big_u, big_v
    seed_u = (caps_u > 10.0 * _SEED) & (big_u < _SEED) & work.model.ul_enabled
    seed_v = (caps_v > 10.0 * _SEED) & (big_v < _SEED)
    big_u = np.where(seed_u, _SEED, big_u)
    big_v = np.where(seed_v, _SEED, big_v)
    room_u = 1.0 - raw_u.sum(axis=1)
    bad_rows = big_u.sum(axis=1) - raw_u.sum(axis=1) > room_u - 1e-9
    if np.any(bad_rows):
        big_u[bad_rows] = raw_u[bad_rows]
    if big_v.sum() - raw_v.sum() > 1.0 - raw_v.sum() - 1e-9:
        big_v = raw_v
    f_cur, ms = work.value(big_u, big_v, mu)
    if not np.isfinite(f_cur):
        big_u, big_v = raw_u, raw_v
        f_cur, ms = work.value(big_u, big_v, mu)
        if not np.isfinite(f_cur):
            return big_u, big_v, 0
    it = 0
    window_mark = f_cur
    window_at = 0
    n_ues = big_u.shape[0]
    while it < max_iters:
        it += 1
        g_u, g_v, m1, m2, mc, qos = work.grad2(big_u, big_v, mu)
        # exact per-pair Newton step (the SI coupling makes the pair move
        # together); ill-conditioned pairs fall back to the diagonal
        det = m1 * m2 - mc * mc
        ok = det > 1e-9 * (m1 * m2 + 1e-300)
        safe_det = np.where(ok, det, 1.0)
        n_u = np.where(ok, (m2 * g_u - mc * g_v) / safe_det,
                       g_u / np.maximum(m1, 1e-30))
        n_v = np.where(ok, (m1 * g_v - mc * g_u) / safe_det,
                       g_v / np.maximum(m2, 1e-30))
        n_u = np.clip(n_u, -1.0, 1.0)
        n_v = np.clip(n_v, -1.0, 1.0)
        if qos is not None:
            # fraction-to-boundary damping per UE row: the rank-one barrier
            # cross terms are outside the pair Hessian, so an undamped
            # Newton step routinely overshoots a wall and wastes backtracks
            s_ul, s_dl, du_r, dd_r, du2_r, dd2_r = qos
            drop_ul = -((du_r * n_u + dd_r * n_v).sum(axis=1))
            drop_dl = -((du2_r * n_u + dd2_r * n_v).sum(axis=1))
            damp = np.minimum(
                np.where(work.act_ul & (drop_ul > 0),
                         0.8 * np.maximum(s_ul, 0.0) / np.where(drop_ul > 0, drop_ul, 1.0), 1.0),
                np.where(work.act_dl & (drop_dl > 0),
                         0.8 * np.maximum(s_dl, 0.0) / np.where(drop_dl > 0, drop_dl, 1.0), 1.0))
            damp = np.clip(damp, 1e-8, 1.0)[:, None]
            n_u = n_u * damp
            n_v = n_v * damp
        # rows pinned to an active budget face move in log space instead,
        # where the face-tangent correction is exact in the diagonal metric
        tight_u = big_u.sum(axis=1) >= 1.0 - 1e-12
        tight_v = big_v.sum() >= 1.0 - 1e-12
        if np.any(tight_u):
            l_u = _log_direction_rows(g_u, m1, big_u, caps_u, np.ones(n_ues))
        if tight_v:
            l_v = _log_direction_rows(
                g_v.reshape(1, -1), m2.reshape(1, -1), big_v.reshape(1, -1),
                caps_v.reshape(1, -1), np.ones(1)).reshape(big_v.shape)
        accepted = False
        a = 1.0  # Newton steps are affine-invariant: always try full first
        for _ in range(40):
            trial_u = big_u + a * n_u
            if np.any(tight_u):
                trial_u[tight_u] = (big_u * np.exp(a * l_u))[tight_u]
            trial_v = big_v + a * n_v if not tight_v \
                else big_v * np.exp(a * l_v)
            u1, v1 = _project_uv(trial_u, trial_v, caps_u, caps_v)
            du, dv = u1 - big_u, v1 - big_v
            if max(float(np.abs(du).max(initial=0.0)),
                   float(np.abs(dv).max(initial=0.0))) == 0.0:
                break
            gain_lin = float((g_u * du).sum() + (g_v * dv).sum())
            f1, _ = work.value(u1, v1, mu)
            if np.isfinite(f1) and f1 >= f_cur + 1e-4 * max(gain_lin, 0.0) \
                    and f1 >= f_cur:
                accepted = True
                break
            a *= 0.25
            if a < 1e-16:
                break
        if not accepted:
            break
        big_u, big_v, f_cur = u1, v1, f1
        # windowed stop on absolute gains: the objective carries a large
        # constant offset from the noise-scale logs, so relative-to-|F|
        # tests misfire, and per-step gains can oscillate around the bar
        if it - window_at >= 8:
            if f_cur - window_mark <= 8.0 * gain_atol:
                break
            window_mark = f_cur
            window_at = it
    # snap negligible coordinates to exact zero when that stays feasible
    flush_u = (big_u > 0.0) & (big_u < _FLUSH)
    flush_v = (big_v > 0.0) & (big_v < _FLUSH)
    if np.any(flush_u) or np.any(flush_v):
        u1 = np.where(flush_u, 0.0, big_u)
        v1 = np.where(flush_v, 0.0, big_v)
        f1, ms = work.value(u1, v1, mu)
        if np.isfinite(f1) and (not work.has_qos or ms > 0.0):
            big_u, big_v = u1, v1
    return big_u, big_v, it


def _barrier_schedule(opts: SolverOptions):
    mus = []
    mu = opts.barrier_start
    while mu > opts.barrier_end:
        mus.append(mu)
        mu *= opts.barrier_factor
    mus.append(opts.barrier_end)
    return mus


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def _scale_in(work: _Work, alloc: Allocation):
    return (alloc.x.copy(),
            alloc.pu / work.pue,
            alloc.pd / work.pbs)


def _scale_out(work: _Work, x, big_u, big_v) -> Allocation:
    return Allocation(x.copy(), big_u * work.pue, (big_v * work.pbs).copy())


def maximize(model: SurrogateModel, start: Allocation, opt_tol: float = 1e-6,
             feas_tol: float = 1e-8, max_iters: int = 5000,
             options: SolverOptions | None = None) -> SolveResult:
    """Ascend the surrogate objective from a feasible start.

    Never returns a point with a lower surrogate objective than `start`;
    reports Optimal only when the stationarity residual and constraint
    violation meet their tolerances.
    """
    opts = options or SolverOptions()
    opts = replace(opts, opt_tol=opt_tol, feas_tol=feas_tol, max_iters=max_iters)
    work = _Work(model)
    inst = model.inst

    start_violation = max_violation(inst, model.constraints, start)
    if start_violation > max(10.0 * opts.feas_tol, 1e-6):
        raise InfeasibleStartError(
            f"start violates constraints by {start_violation:.3e}")

    x, big_u, big_v = _scale_in(work, start)
    big_u = np.clip(big_u, 0.0, np.minimum(x, 1.0))
    big_v = np.clip(big_v, 0.0, np.minimum(x, 1.0))
    if not work.model.ul_enabled:
        big_u[:] = 0.0

    def true_objective(xc, uc, vc):
        pu, pd = work.powers(uc, vc)
        return model.objective_value(xc, pu, pd)

    best = (true_objective(x, big_u, big_v), x.copy(), big_u.copy(), big_v.copy())
    total_iters = 0

    for rnd in range(opts.block_rounds):
        if not opts.x_frozen:
            x_new = _x_lp_step(work, x, big_u, big_v)
            if rnd > 0 and np.array_equal(x_new, x):
                break  # nothing left for another power pass to see
            x = x_new
        elif rnd > 0:
            break
        caps_u = np.minimum(x, 1.0) if model.ul_enabled else np.zeros_like(x)
        caps_v = np.minimum(x, 1.0)
        big_u = np.minimum(big_u, caps_u)
        big_v = np.minimum(big_v, caps_v)

        if work.has_qos:
            _, ms = work.value(big_u, big_v, 0.0)
            if ms <= 0.0:
                big_u, big_v, ok = _interior_nudge(work, big_u, big_v,
                                                   caps_u, caps_v)
                if not ok:
                    # cannot reach the strict interior from here: keep the
                    # best feasible point instead of running the barrier
                    break
            schedule = _barrier_schedule(opts)
            for mu in schedule:
                final = mu == schedule[-1]
                big_u, big_v, its = _power_stage(
                    work, big_u, big_v, caps_u, caps_v, mu,
                    min(opts.max_iters, 600 if final else 150),
                    1e-7 if final else 1e-4)
                total_iters += its
        else:
            big_u, big_v, its = _power_stage(
                work, big_u, big_v, caps_u, caps_v, 0.0,
                min(opts.max_iters, 600), 1e-7)
            total_iters += its

        obj = true_objective(x, big_u, big_v)
        if obj > best[0]:
            best = (obj, x.copy(), big_u.copy(), big_v.copy())
        elif rnd > 0:
            break

    obj, xb, ub, vb = best
    point = _scale_out(work, xb, ub, vb)
    residual = kkt_residual(model, point)
    violation = max_violation(inst, model.constraints, point)
    scale = max(1.0, abs(obj))
    if residual <= opts.opt_tol * scale and violation <= opts.feas_tol:
        status = SolveStatus.OPTIMAL
    else:
        status = SolveStatus.ITERATION_LIMIT
    return SolveResult(point, obj, status, residual, violation, total_iters)


def _interior_nudge(work: _Work, big_u, big_v, caps_u, caps_v,
                    target: float = 1e-12, iters: int = 120):
    """Push the minimum QoS slack strictly positive without leaving the
    linear set (subgradient ascent on the softmin of the slacks)."""
    for _ in range(iters):
        rows = work.slack_grads(big_u, big_v)
        if not rows:
            return big_u, big_v, True
        slacks = np.array([r[0] for r in rows])
        worst = slacks.min()
        if worst > target:
            return big_u, big_v, True
        tau = max(1e-3, float(np.std(slacks)) * 0.1 + 1e-9)
        wts = np.exp(-(slacks - worst) / tau)
        wts /= wts.sum()
        g_u = sum(w * r[1] for w, r in zip(wts, rows))
        g_v = sum(w * r[2] for w, r in zip(wts, rows))
        norm = max(float(np.abs(g_u).max(initial=0.0)),
                   float(np.abs(g_v).max(initial=0.0)), 1e-30)
        step = 0.05 / norm
        improved = False
        for _ in range(40):
            u1 = project_capped_simplex_rows(big_u + step * g_u, caps_u, 1.0)
            v1 = project_capped_simplex_flat(
                (big_v + step * g_v).ravel(), caps_v.ravel(), 1.0
            ).reshape(big_v.shape)
            s1 = _min_slack(work, u1, v1)
            if s1 > worst:
                big_u, big_v = u1, v1
                improved = True
                break
            step *= 0.5
        if not improved:
            return big_u, big_v, False
    return big_u, big_v, _min_slack(work, big_u, big_v) > target


def _min_slack(work: _Work, big_u, big_v) -> float:
    _, ms = work.value(big_u, big_v, 0.0)
    return ms


def phase1_start(model: SurrogateModel, start: Allocation | None = None,
                 feas_tol: float = 1e-8, max_iters: int = 400) -> Allocation | None:
    """Find a point of D with every active QoS row satisfied with slack, or
    None when the maximized minimum slack stays negative.

    Assignment variables are kept where the candidate start put them; the
    search maximizes the minimum normalized slack over the powers (standard
    phase-1), so a caller that wants a different assignment must supply it
    in `start`.
    """
    work = _Work(model)
    inst = model.inst
    if start is None:
        start = Allocation.zeros(inst)
    x = np.clip(start.x, 0.0, 1.0)
    x = project_assignment_columns(x, np.zeros_like(x))
    caps_u = np.minimum(x, 1.0) if model.ul_enabled else np.zeros_like(x)
    caps_v = np.minimum(x, 1.0)
    big_u = np.clip(start.pu / work.pue, 0.0, caps_u)
    big_v = np.clip(start.pd / work.pbs, 0.0, caps_v)
    big_u = project_capped_simplex_rows(big_u, caps_u, 1.0)
    big_v = project_capped_simplex_flat(
        big_v.ravel(), caps_v.ravel(), 1.0).reshape(big_v.shape)

    if not work.has_qos or _min_slack(work, big_u, big_v) >= feas_tol:
        return _scale_out(work, x, big_u, big_v)

    best_u, best_v = big_u, big_v
    best_slack = _min_slack(work, big_u, big_v)
    for _ in range(max_iters):
        rows = work.slack_grads(big_u, big_v)
        slacks = np.array([r[0] for r in rows])
        worst = float(slacks.min())
        if worst >= feas_tol:
            return _scale_out(work, x, big_u, big_v)
        tau = max(1e-3, float(np.std(slacks)) * 0.2 + 1e-9)
        wts = np.exp(-(slacks - worst) / tau)
        wts /= wts.sum()
        g_u = sum(w * r[1] for w, r in zip(wts, rows))
        g_v = sum(w * r[2] for w, r in zip(wts, rows))
        norm = max(float(np.abs(g_u).max(initial=0.0)),
                   float(np.abs(g_v).max(initial=0.0)), 1e-30)
        step = 0.2 / norm
        improved = False
        for _ in range(50):
            u1 = project_capped_simplex_rows(big_u + step * g_u, caps_u, 1.0)
            v1 = project_capped_simplex_flat(
                (big_v + step * g_v).ravel(), caps_v.ravel(), 1.0
            ).reshape(big_v.shape)
            s1 = _min_slack(work, u1, v1)
            if s1 > worst + 1e-15:
                big_u, big_v = u1, v1
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        cur = _min_slack(work, big_u, big_v)
        if cur > best_slack:
            best_slack, best_u, best_v = cur, big_u.copy(), big_v.copy()
    if best_slack >= feas_tol:
        return _scale_out(work, x, best_u, best_v)
    return None


def kkt_residual(model: SurrogateModel, point: Allocation) -> float:
    """Scaled first-order optimality measure at `point`.

    Power components: norm of the movement produced by a small projected
    composite-gradient step (objective plus barrier-style multipliers on the
    near-active QoS rows), divided by the step and the objective scale.
    Assignment components: optimality gap of the exact per-column LP,
    normalized by the penalty factor. Coupling directions (raising x and a
    capped power together) are checked explicitly.
    """
    work = _Work(model)
    x, big_u, big_v = _scale_in(work, point)
    caps_u = np.minimum(x, 1.0) if model.ul_enabled else np.zeros_like(x)
    caps_v = np.minimum(x, 1.0)
    big_u = np.minimum(big_u, caps_u)
    big_v = np.minimum(big_v, caps_v)

    val, _ = work.value(big_u, big_v, 0.0)
    g_u, g_v, _, _ = work.grad(big_u, big_v, 0.0)
    scale = max(1.0, abs(val))

    # fold near-active QoS rows in with their estimated multipliers
    if work.has_qos:
        rows = work.slack_grads(big_u, big_v)
        for _ in range(3):
            for slack, ru, rv in rows:
                if slack > 1e-4:
                    continue
                denom = float((ru * ru).sum() + (rv * rv).sum())
                if denom <= 0:
                    continue
                nu = float((g_u * ru).sum() + (g_v * rv).sum()) / denom
                if nu < 0.0:
                    g_u = g_u - nu * ru
                    g_v = g_v - nu * rv

    t = 1e-7 / max(1.0, float(np.abs(g_u).max(initial=0.0)),
                   float(np.abs(g_v).max(initial=0.0)))
    u1 = project_capped_simplex_rows(big_u + t * g_u, caps_u, 1.0)
    v1 = project_capped_simplex_flat(
        (big_v + t * g_v).ravel(), caps_v.ravel(), 1.0).reshape(big_v.shape)
    res_power = max(float(np.abs(u1 - big_u).max(initial=0.0)),
                    float(np.abs(v1 - big_v).max(initial=0.0))) / t / scale

    x_lp = _x_lp_step(work, x, big_u, big_v)
    gap = float((work.x_grad * (x_lp - x)).sum())
    res_x = max(0.0, gap) / max(1.0, model.lam) / max(1.0, float(x.size) ** 0.5)

    # joint coupling directions: raise x together with a cap-blocked power
    col_room = 1.0 - x.sum(axis=0)
    room = np.maximum(np.minimum(col_room[None, :], 1.0 - x), 0.0)
    blocked_u = (caps_u - big_u < 1e-12) & (room > 1e-9) & model.ul_enabled
    blocked_v = (caps_v - big_v < 1e-12) & (room > 1e-9)
    res_couple = 0.0
    if np.any(blocked_u):
        joint = g_u[blocked_u] + work.x_grad[blocked_u]
        res_couple = max(res_couple, float(np.max(joint, initial=0.0)) / scale)
    if np.any(blocked_v):
        joint = g_v[blocked_v] + work.x_grad[blocked_v]
        res_couple = max(res_couple, float(np.max(joint, initial=0.0)) / scale)

    return max(res_power, res_x, res_couple)
