"""Certifiably correct range-aided SLAM.

Assembles a sparse quadratic relaxation of the range-aided SLAM estimation
problem, solves its rank-restricted form with a preconditioned Riemannian
trust-region method, certifies global optimality from the KKT certificate
matrix, and reports a refined estimate with a suboptimality bound.
"""

from .assembly import (
    ConstraintSet,
    DataMatrix,
    RankDSolution,
    assemble_constraints,
    assemble_data_matrix,
    evaluate_lifted_cost,
    evaluate_map_cost,
    evaluate_qcqp_cost_direct,
    euclidean_gradient,
)
from .certify import (
    CertResult,
    MultiplierVector,
    adjoint_constraint_jacobian,
    build_certificate,
    certify_solution,
    check_psd,
    compute_multipliers,
    min_eigenpair,
    saddle_direction,
)
from .manifold import LiftedManifold
from .metrics import TrajectoryMetrics, trajectory_metrics
from .problem import (
    GroundTruth,
    Problem,
    RangeMeasurement,
    RelativePoseMeasurement,
    VariableOrdering,
    build_ordering,
    random_feasible_state,
    validate,
)
from .rtr import (
    Preconditioner,
    RtrOptions,
    RtrStats,
    apply_preconditioner,
    build_preconditioner,
    solve_rtr,
)
from .staircase import (
    SolveReport,
    StaircaseOptions,
    cora_solve,
    escape_saddle,
    lift_state,
    refine,
    round_solution,
    suboptimality,
)
from .synthetic import GeneratorConfig, SweepConfig, generate_synthetic, run_sweep

__version__ = "0.1.0"
