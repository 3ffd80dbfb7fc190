"""Multi-objective inventory allocation for guaranteed-delivery display advertising."""

from .errors import GdallocError, InfeasibleError, NonConvergenceError, StructuralError, UndefinedGammaError
from .feasibility import TrimReport, certify_feasible, make_feasible
from .goal import (
    Context,
    KnobConfig,
    RunResult,
    StageTrace,
    extract_frontier,
    run,
    run_baseline,
    run_single,
    run_three_step,
    run_two_step_a,
    run_two_step_b,
    run_two_step_c,
    sweep,
)
from .metrics import MetricsRow, compute_metrics, emit_frontier, normalize
from .model import (
    Allocation,
    AllocationGraph,
    Campaign,
    PenaltySpec,
    SupplyNode,
    TargetingPredicate,
    build_graph,
    compute_edge_values,
    compute_targets,
    evaluate_eligibility,
    validate_allocation,
)
from .netflow import FlowProblem, FlowSolution, SideConstraint, solve_min_cost_flow, solve_with_side_constraints
from .qp import (
    DualSolution,
    Floor,
    QpStageSpec,
    kkt_residuals,
    primal_from_duals,
    recover_gamma,
    solve_f1_with_floors,
    solve_weighted,
)
from .sampling import sample_reweight

__version__ = "0.1.0"
