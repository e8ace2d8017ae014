"""Harm-aware recommendation policies under multinomial-logit choice and
attraction preference dynamics.

The library solves the stationary-profile fixed point induced by a
recommendation policy, differentiates through it implicitly, optimizes
policies by projected gradient ascent over the feasible polytopes, and
benchmarks against top-k / alternating / uniform baselines.
"""

from .errors import (
    CalibrationError,
    ConfigurationError,
    DegenerateDynamicsError,
    HarmrecError,
    IFTSolveError,
    OptimizationError,
    RescaleInfeasibleError,
    ScoreOverflowError,
    UndefinedRatioError,
)
from .model import (
    BoundedPolicy,
    CandidateCollection,
    DynamicsParams,
    IndependentPolicy,
    Instance,
    ItemCatalog,
    click_and_harm_probs,
    click_prob_given_set,
    flatten_policy,
    item_prob_given_rec,
    policy_from_flat,
    score,
    scores,
    selection_probs,
    static_objective,
    subset_menu,
    total_score,
    validate_policy,
    with_params,
)
from .dynamics import (
    ContractionReport,
    StationaryResult,
    Trajectory,
    contraction_condition,
    drift,
    fixed_point_map,
    profile_update,
    rescale_to_contraction,
    simulate_evolution,
    solve_stationary,
)
from .baselines import (
    AlternatingTrace,
    alternating_optimization,
    alternating_trap_instance,
    static_optimal_policy,
    top_k_policy,
    uniform_policy,
)
from .gradients import (
    GradientReport,
    gradient_check,
    fixed_point_jacobians,
    multilinear_estimate,
    multilinear_grad_estimate,
    objective_gradient,
    pipage_round,
    profile_update_jacobian,
    selection_jacobian_u,
    stationary_jacobian,
    utility_gradients,
)
from .optimize import (
    OptimizeConfig,
    OptimizeResult,
    multi_start,
    pga,
    project_capped_simplex,
    project_policy,
    project_simplex,
)
from .data import (
    CalibrationResult,
    MfModel,
    RatingsTable,
    SyntheticSpec,
    assemble_instances,
    calibrate_c,
    fit_mf,
    generate_batch,
    generate_synthetic,
    load_harm_labels,
)
from .experiments import (
    ExperimentConfig,
    ExperimentReport,
    run_compare,
    run_convergence,
    run_counterexample,
    run_sweep,
)
from .serialize import (
    instance_from_dict,
    instance_to_dict,
    load_instances,
    policy_from_dict,
    policy_to_dict,
    save_instances,
)

__version__ = "0.1.0"
