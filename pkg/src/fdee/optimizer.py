"""Full resource-allocation pipeline: initialization, the majorize-maximize
inner loop, the Dinkelbach outer loop and binary recovery.

The outer loop turns the EE ratio into a sequence of subtractive problems
R - q * P; each is attacked by re-anchored concave surrogates solved by the
convex core. The penalty factor drives the relaxed assignment binary, so by
construction the recovered solution is an implementable exclusive
sub-carrier assignment whose report is evaluated with the original coupled
model.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import NetworkInstance
from . import convex_core
from .convex_core import SolveStatus, SolverOptions
from .reformulation import (
    build_surrogate,
    default_penalty_factor,
    lagrangian,
    max_violation,
    penalty_value,
)
from .system_model import (
    Allocation,
    RateReport,
    coupled_report,
    per_pair_rates,
    rate_report,
    total_power,
)


class Status:
    CONVERGED = "Converged"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass
class OptimizerOptions:
    delta: float = 1e-4          # Dinkelbach stopping tolerance, bits/Joule/Hz
    outer_cap: int = 30
    t_max: int = 50              # MM iteration cap
    mm_rel_tol: float = 1e-5
    mm_abs_tol: float = 1e-5     # callers widen this to what their q needs
    objective_kind: str = "lagrangian"
    ul_enabled: bool = True
    warm_barrier_start: float = 1e-2
    qos_margin: float = 1.05     # headroom multiplier used by the repair fit
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass
class DinkelbachIteration:
    q: float
    inner_objective: float       # R - q * P at the inner solution
    mm_iterations: int
    penalty_residual: float
    wall_time: float


@dataclass
class DinkelbachTrace:
    iterations: list[DinkelbachIteration] = field(default_factory=list)
    final_q: float = 0.0
    inner_iterations_total: int = 0

    @property
    def q_values(self) -> list[float]:
        return [it.q for it in self.iterations] + [self.final_q]


@dataclass
class Solution:
    allocation: Allocation
    report: RateReport
    trace: DinkelbachTrace
    feasible: bool
    status: str
    penalty_residual: float = 0.0
    fractional_residual: float = 0.0


@dataclass
class MmStats:
    iterations: int = 0
    inner_iterations: int = 0
    last_objective: float = 0.0


# ---------------------------------------------------------------------------
# water-filling and initialization
# ---------------------------------------------------------------------------

def water_filling(gains: np.ndarray, noise: float, budget: float) -> np.ndarray:
    """Spread `budget` over parallel channels: p_i = max(0, mu - noise/g_i)
    with the level found by bisection."""
    gains = np.asarray(gains, dtype=float)
    if gains.size == 0:
        raise ValueError("water_filling needs at least one channel")
    return fill_to_levels(noise / gains, budget)


def fill_to_levels(floors: np.ndarray, budget: float) -> np.ndarray:
    """p_i = max(0, mu - floors_i) with sum(p) = budget (bisection on mu)."""
    floors = np.asarray(floors, dtype=float)
    if budget <= 0.0:
        return np.zeros_like(floors)
    lo = float(floors.min())
    hi = float(floors.min()) + budget
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        total = float(np.maximum(mid - floors, 0.0).sum())
        if total < budget:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * budget:
            break
    mu = 0.5 * (lo + hi)
    p = np.maximum(mu - floors, 0.0)
    excess = p.sum() - budget
    if excess > 0.0:
        # shave the excess so the budget row holds exactly
        active = p > 0
        p[active] -= excess / active.sum()
        p = np.maximum(p, 0.0)
    return p


def initial_point(inst: NetworkInstance, ul_enabled: bool = True) -> Allocation:
    """Greedy start: each sub-carrier to the UE with the largest combined
    gain (ties to the lowest index), then per-direction water-filling with
    self-interference ignored."""
    score = inst.h + inst.g if ul_enabled else inst.g
    owner = np.argmax(score, axis=0)
    x = np.zeros(inst.shape)
    x[owner, np.arange(inst.n_subcarriers)] = 1.0

    pu = np.zeros(inst.shape)
    pd = np.zeros(inst.shape)
    for n in range(inst.n_ues):
        cols = np.flatnonzero(owner == n)
        if cols.size == 0:
            continue
        if ul_enabled:
            pu[n, cols] = water_filling(inst.h[n, cols], inst.noise_bs,
                                        float(inst.p_max_ue[n]))
    rows = owner
    cols = np.arange(inst.n_subcarriers)
    floors = inst.noise_ue[rows] / inst.g[rows, cols]
    pd[rows, cols] = fill_to_levels(floors, inst.p_max_bs)
    return Allocation(x, pu, pd)


# ---------------------------------------------------------------------------
# feasibility construction
# ---------------------------------------------------------------------------

def _sinr_target(rate: float) -> float:
    return 2.0 ** rate - 1.0


def _joint_single_carrier_powers(inst: NetworkInstance, n: int, k: int,
                                 gu: float, gd: float):
    """Minimal (pu, pd) meeting both SINR targets on one carrier, or None."""
    h, g = inst.h[n, k], inst.g[n, k]
    det = h * g - gu * gd * inst.si_bs * inst.si_ue[n]
    if det <= 0.0:
        return None
    a = (gu * inst.noise_bs * g + gu * inst.si_bs * gd * inst.noise_ue[n]) / det
    b = (gd * inst.noise_ue[n] * h + gd * inst.si_ue[n] * gu * inst.noise_bs) / det
    if gu == 0.0:
        a = 0.0
    if gd == 0.0:
        b = 0.0
    return a, b


def _max_bipartite_matching(pref: list[list[int]], n_right: int) -> dict[int, int]:
    """Augmenting-path maximum matching; returns {left_index: right_index}.
    `pref[i]` lists right nodes acceptable to left node i, best first."""
    match_r = [-1] * n_right
    match_l: dict[int, int] = {}

    def try_assign(i, seen):
        for k in pref[i]:
            if seen[k]:
                continue
            seen[k] = True
            if match_r[k] == -1 or try_assign(match_r[k], seen):
                match_r[k] = i
                match_l[i] = k
                return True
        return False

    for i in range(len(pref)):
        try_assign(i, [False] * n_right)
    return match_l


def coverage_start(inst: NetworkInstance, ul_enabled: bool = True,
                   qos_margin: float = 1.05) -> Allocation | None:
    """Construct a binary assignment plus powers meeting every active QoS
    row with headroom.

    A UE either gets one carrier strong enough for both directions at once
    (single-carrier joint operation is power limited by the gain product
    against the SI coefficients) or one UL-dedicated and one DL-dedicated
    carrier. A maximum bipartite matching decides which UEs can be served
    jointly, which minimizes the total carrier demand; the remaining
    carriers go to the greedy owner. Returns None when no cover exists
    within the budgets.
    """
    n_ues, n_sc = inst.shape
    need_ul = (inst.r_req_ul > 0) & ul_enabled
    need_dl = inst.r_req_dl > 0
    gu_t = _sinr_target(qos_margin * inst.r_req_ul) * need_ul
    gd_t = _sinr_target(qos_margin * inst.r_req_dl) * need_dl

    pd_cap = inst.p_max_bs / 4.0
    ul_alone = np.log1p(inst.p_max_ue[:, None] * inst.h / inst.noise_bs) / math.log(2)
    dl_alone = np.log1p(pd_cap * inst.g / inst.noise_ue[:, None]) / math.log(2)
    ul_ok = ul_alone >= qos_margin * inst.r_req_ul[:, None]
    dl_ok = dl_alone >= qos_margin * inst.r_req_dl[:, None]

    joint_powers = {}
    joint_ok = np.zeros(inst.shape, dtype=bool)
    for n in range(n_ues):
        if not (need_ul[n] or need_dl[n]):
            continue
        for k in range(n_sc):
            res = _joint_single_carrier_powers(inst, n, k, gu_t[n], gd_t[n])
            if res is None:
                continue
            a, b = res
            if a <= inst.p_max_ue[n] and b <= pd_cap:
                joint_ok[n, k] = True
                joint_powers[(n, k)] = (a, b)

    demanding = [n for n in range(n_ues) if need_ul[n] or need_dl[n]]
    dual = [n for n in demanding if need_ul[n] and need_dl[n]]
    # joint service saves one carrier per dual-direction UE; a maximum
    # matching on (UE, carrier) pairs keeps the total demand as low as the
    # capability pattern allows
    pref = []
    for n in dual:
        cols = list(np.flatnonzero(joint_ok[n]))
        cols.sort(key=lambda kk: -(inst.h[n, kk] * inst.g[n, kk]))
        pref.append(cols)
    matching = _max_bipartite_matching(pref, n_sc)
    joint_assign = {dual[i]: k for i, k in matching.items()}

    free = set(range(n_sc)) - set(joint_assign.values())
    plan: dict[int, tuple[str, tuple[int, ...]]] = {
        n: ("joint", (k,)) for n, k in joint_assign.items()}
    rest = [n for n in demanding if n not in joint_assign]
    rest.sort(key=lambda n: (int(ul_ok[n].sum() + dl_ok[n].sum()), n))
    for n in rest:
        ku = kd = None
        if need_ul[n]:
            cand = [k for k in free if ul_ok[n, k]]
            if not cand:
                return None
            ku = max(cand, key=lambda kk: inst.h[n, kk])
            free.discard(ku)
        if need_dl[n]:
            cand = [k for k in free if dl_ok[n, k]]
            if not cand:
                return None
            kd = max(cand, key=lambda kk: inst.g[n, kk])
            free.discard(kd)
        cols = tuple(k for k in (ku, kd) if k is not None)
        plan[n] = ("split", cols)

    x = np.zeros(inst.shape)
    pu = np.zeros(inst.shape)
    pd = np.zeros(inst.shape)
    for n, (mode, cols) in plan.items():
        if mode == "joint":
            k = cols[0]
            x[n, k] = 1.0
            a, b = joint_powers[(n, k)]
            # scale both powers up together: a common factor raises both
            # SINRs, moving the pair off the razor-thin minimal-power point
            # where the QoS rows have enormous curvature
            scale_room = [1e7]
            if a > 0.0:
                scale_room.append(0.25 * float(inst.p_max_ue[n]) / a)
            if b > 0.0:
                scale_room.append(0.25 * pd_cap / b)
            t = max(1.0, min(scale_room))
            pu[n, k], pd[n, k] = a * t, b * t
        else:
            it = iter(cols)
            if need_ul[n]:
                ku = next(it)
                x[n, ku] = 1.0
                pu[n, ku] = min(
                    inst.noise_bs * _sinr_target(qos_margin * inst.r_req_ul[n])
                    / inst.h[n, ku],
                    float(inst.p_max_ue[n]))
            if need_dl[n]:
                kd = next(it)
                x[n, kd] = 1.0
                pd[n, kd] = min(
                    inst.noise_ue[n] * _sinr_target(qos_margin * inst.r_req_dl[n])
                    / inst.g[n, kd],
                    pd_cap)

    # hand the leftover carriers to their greedy owners at zero power
    score = inst.h + inst.g if ul_enabled else inst.g
    for k in sorted(free):
        x[int(np.argmax(score[:, k])), k] = 1.0

    if pd.sum() > inst.p_max_bs:
        return None

    # Spread the unused budgets over pairs whose opposite direction is
    # silent: those additions can only increase every rate sum, so the QoS
    # fit survives and the solver starts decades closer to the optimum.
    if ul_enabled:
        for n in range(n_ues):
            cols = np.flatnonzero((x[n] > 0) & (pd[n] == 0.0))
            left = float(inst.p_max_ue[n]) - pu[n].sum()
            if cols.size and left > 0:
                pu[n, cols] += fill_to_levels(
                    inst.noise_bs / inst.h[n, cols], left)
    rows, cols = np.nonzero((x > 0) & (pu == 0.0))
    left = inst.p_max_bs - pd.sum()
    if rows.size and left > 0:
        add = fill_to_levels(inst.noise_ue[rows] / inst.g[rows, cols], left)
        pd[rows, cols] += add
    return Allocation(x, pu, pd)


def _qos_satisfied(inst: NetworkInstance, alloc: Allocation,
                   ul_enabled: bool, slack: float = 1e-6) -> bool:
    r_ul, r_dl = per_pair_rates(inst, alloc.pu, alloc.pd)
    ul = r_ul.sum(axis=1)
    dl = r_dl.sum(axis=1)
    ok_dl = np.all(dl >= inst.r_req_dl * (1 - 1e-12) + slack * (inst.r_req_dl > 0))
    if not ul_enabled:
        return bool(ok_dl)
    ok_ul = np.all(ul >= inst.r_req_ul * (1 - 1e-12) + slack * (inst.r_req_ul > 0))
    return bool(ok_ul and ok_dl)


def feasible_start(inst: NetworkInstance, lam: float,
                   opt: OptimizerOptions) -> Allocation | None:
    """Initial point of the pipeline: greedy start, then coverage repair and
    a phase-1 power polish when the QoS rows are not already slack."""
    z = initial_point(inst, opt.ul_enabled)
    if _qos_satisfied(inst, z, opt.ul_enabled):
        return z
    z2 = coverage_start(inst, opt.ul_enabled, opt.qos_margin)
    if z2 is not None and _qos_satisfied(inst, z2, opt.ul_enabled):
        return z2
    candidate = z2 if z2 is not None else z
    model = build_surrogate(inst, candidate, 0.0, lam,
                            objective_kind=opt.objective_kind,
                            ul_enabled=opt.ul_enabled)
    return convex_core.phase1_start(model, candidate,
                                    feas_tol=opt.solver.feas_tol)


# ---------------------------------------------------------------------------
# MM inner loop
# ---------------------------------------------------------------------------

def _true_objective(inst: NetworkInstance, alloc: Allocation, q: float,
                    lam: float, kind: str) -> float:
    if kind == "power_min":
        return -total_power(inst, alloc.pu, alloc.pd) \
            - lam * penalty_value(alloc.x)
    return lagrangian(inst, alloc, q, lam)


def mm_solve(inst: NetworkInstance, q: float, lam: float, init: Allocation,
             t_max: int = 50, rel_tol: float = 1e-5,
             opt: OptimizerOptions | None = None,
             x_frozen: bool = False) -> tuple[Allocation, MmStats]:
    """Iterate surrogate construction and convex maximization until the
    penalized objective stalls. The objective never decreases across
    iterations because each solve starts at its own anchor."""
    opt = opt or OptimizerOptions()
    z = init.copy()
    stats = MmStats()
    obj_prev = _true_objective(inst, z, q, lam, opt.objective_kind)
    for t in range(1, t_max + 1):
        model = build_surrogate(inst, z, q, lam,
                                objective_kind=opt.objective_kind,
                                ul_enabled=opt.ul_enabled)
        if t == 1:
            barrier_start = opt.solver.barrier_start
        else:
            # warm re-anchored solves stay near the walls the previous one
            # established: restart the cascade at the current wall distance
            # instead of re-inflating the barrier from scratch
            s_ul, s_dl = model.qos_slacks(z.pu, z.pd)
            tightest = float(min(s_ul.min(initial=np.inf),
                                 s_dl.min(initial=np.inf)))
            barrier_start = min(opt.warm_barrier_start,
                                max(opt.solver.barrier_end,
                                    0.3 * max(tightest, 0.0)))
        sopts = replace(opt.solver, barrier_start=barrier_start,
                        x_frozen=x_frozen or opt.solver.x_frozen)
        res = convex_core.maximize(model, z, opt_tol=sopts.opt_tol,
                                   feas_tol=sopts.feas_tol,
                                   max_iters=sopts.max_iters, options=sopts)
        stats.iterations = t
        stats.inner_iterations += res.iterations
        z = res.point
        obj = _true_objective(inst, z, q, lam, opt.objective_kind)
        stats.last_objective = obj
        if res.status is SolveStatus.INFEASIBLE:
            break
        if abs(obj - obj_prev) <= max(rel_tol * max(1.0, abs(obj)),
                                      opt.mm_abs_tol):
            break
        obj_prev = obj
    return z, stats


# ---------------------------------------------------------------------------
# binary recovery and verification
# ---------------------------------------------------------------------------

def round_assignment(x: np.ndarray) -> np.ndarray:
    """Round to {0,1} keeping at most one assignment per column (largest
    entry wins; entries below one half round to zero)."""
    out = np.zeros_like(x)
    owner = np.argmax(x, axis=0)
    cols = np.arange(x.shape[1])
    keep = x[owner, cols] >= 0.5
    out[owner[cols[keep]], cols[keep]] = 1.0
    return out


def round_and_recover(inst: NetworkInstance, alloc: Allocation, q: float,
                      lam: float, opt: OptimizerOptions | None = None) -> Allocation:
    """Binary assignment via per-column rounding, then one power-only MM
    re-solve with the assignment frozen."""
    opt = opt or OptimizerOptions()
    x_bin = round_assignment(alloc.x)
    pu = np.where(x_bin > 0, alloc.pu, 0.0)
    pd = np.where(x_bin > 0, alloc.pd, 0.0)
    z = Allocation(x_bin, pu, pd)
    model = build_surrogate(inst, z, q, lam,
                            objective_kind=opt.objective_kind,
                            ul_enabled=opt.ul_enabled)
    if not _qos_satisfied(inst, z, opt.ul_enabled, slack=0.0):
        repaired = convex_core.phase1_start(model, z,
                                            feas_tol=opt.solver.feas_tol)
        if repaired is None:
            return z  # caller flags the solution infeasible
        z = Allocation(x_bin, repaired.pu, repaired.pd)
    z2, _ = mm_solve(inst, q, lam, z, t_max=min(opt.t_max, 25),
                     rel_tol=opt.mm_rel_tol, opt=opt, x_frozen=True)
    return Allocation(x_bin, z2.pu, z2.pd)


def check_original_feasibility(inst: NetworkInstance, alloc: Allocation,
                               ul_enabled: bool = True,
                               tol: float = 1e-6) -> bool:
    """Verify the coupled-model constraints at a binary allocation."""
    x, pu, pd = alloc.x, alloc.pu, alloc.pd
    if not np.all((x == 0.0) | (x == 1.0)):
        return False
    if np.any(x.sum(axis=0) > 1.0 + tol):
        return False
    if np.any(pu < -tol) or np.any(pd < -tol):
        return False
    if np.any((pu * x).sum(axis=1) > inst.p_max_ue * (1 + tol)):
        return False
    if (pd * x).sum() > inst.p_max_bs * (1 + tol):
        return False
    rep = coupled_report(inst, x, pu, pd)
    rate_tol = tol * np.maximum(1.0, inst.r_req_dl)
    if np.any(rep.dl_rate < inst.r_req_dl - rate_tol):
        return False
    if ul_enabled:
        rate_tol = tol * np.maximum(1.0, inst.r_req_ul)
        if np.any(rep.ul_rate < inst.r_req_ul - rate_tol):
            return False
    return True


def _zero_report(inst: NetworkInstance) -> RateReport:
    return RateReport(np.zeros(inst.n_ues), np.zeros(inst.n_ues), 0.0,
                      inst.p_circ_total, 0.0)


def infeasible_solution(inst: NetworkInstance) -> Solution:
    return Solution(Allocation.zeros(inst), _zero_report(inst),
                    DinkelbachTrace(), feasible=False, status=Status.INFEASIBLE)


# ---------------------------------------------------------------------------
# Dinkelbach outer loop
# ---------------------------------------------------------------------------

def dinkelbach(inst: NetworkInstance, delta: float = 1e-4,
               lam: float | None = None, t_max: int = 50,
               opt: OptimizerOptions | None = None) -> Solution:
    """Maximize EE: q starts at zero and is updated to the achieved
    rate-to-power ratio until the improvement drops below delta."""
    opt = opt or OptimizerOptions()
    opt = replace(opt, delta=delta, t_max=t_max)
    if lam is None:
        lam = default_penalty_factor(inst)

    start = feasible_start(inst, lam, opt)
    if start is None:
        return infeasible_solution(inst)

    trace = DinkelbachTrace()
    z = start
    q = 0.0
    status = Status.ITERATION_LIMIT
    final_q = 0.0
    last_power = total_power(inst, z.pu, z.pd)
    for _ in range(opt.outer_cap):
        tic = time.perf_counter()
        # the q update only resolves changes of delta * P, so the inner
        # loop need not refine the objective much further than that
        opt_i = replace(opt, mm_abs_tol=max(opt.mm_abs_tol,
                                            0.2 * opt.delta * last_power))
        z_new, mm = mm_solve(inst, q, lam, z, t_max=opt.t_max,
                             rel_tol=opt.mm_rel_tol, opt=opt_i)
        rep = rate_report(inst, z_new)
        last_power = rep.total_power
        f_val = rep.sum_rate - q * rep.total_power
        pen = penalty_value(z_new.x)
        trace.iterations.append(DinkelbachIteration(
            q, f_val, mm.iterations, pen, time.perf_counter() - tic))
        trace.inner_iterations_total += mm.inner_iterations
        q_new = rep.sum_rate / rep.total_power
        if q_new < q:
            # numerically failed to improve: keep the previous solution
            status = Status.CONVERGED
            final_q = q
            break
        z = z_new
        final_q = q_new
        if q_new - q <= delta:
            status = Status.CONVERGED
            break
        q = q_new
    trace.final_q = final_q

    pre_round = z
    frac = float(np.max(np.minimum(pre_round.x, 1.0 - pre_round.x), initial=0.0))
    pen = penalty_value(pre_round.x)

    recovered = round_and_recover(inst, pre_round, final_q, lam, opt)
    feasible = check_original_feasibility(inst, recovered, opt.ul_enabled)
    report = coupled_report(inst, recovered.x, recovered.pu, recovered.pd) \
        if feasible else _zero_report(inst)
    if not feasible:
        status = Status.INFEASIBLE
    return Solution(recovered, report, trace, feasible, status,
                    penalty_residual=pen, fractional_residual=frac)
