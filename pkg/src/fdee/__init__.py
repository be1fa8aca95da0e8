"""Energy-efficient joint sub-carrier assignment and power control for
single-cell in-band full-duplex OFDMA networks, plus the baselines and the
Monte Carlo experiment harness used to evaluate it."""

from .channel import (
    NetworkInstance,
    ScenarioConfig,
    complete_sic_variant,
    dbm_to_watt,
    load_instance,
    path_loss_db,
    sample_instance,
    save_instance,
    watt_to_dbm,
)
from .system_model import (
    Allocation,
    Direction,
    RateReport,
    coupled_report,
    dc_parts,
    grad_dc,
    link_rate,
    rate_report,
    sinr_aux,
)
from .reformulation import (
    ConstraintSet,
    SurrogateModel,
    build_constraints,
    build_surrogate,
    default_penalty_factor,
    lagrangian,
    penalty_value,
)
from .convex_core import (
    SolveResult,
    SolveStatus,
    SolverOptions,
    kkt_residual,
    maximize,
    phase1_start,
)
from .optimizer import (
    DinkelbachTrace,
    OptimizerOptions,
    Solution,
    dinkelbach,
    initial_point,
    mm_solve,
    round_and_recover,
    water_filling,
)

__all__ = [name for name in dir() if not name.startswith("_")]
