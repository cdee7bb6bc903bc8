"""Evaluation harness for subgroup-identification challenges.

Scores team-submitted subgroups against a holdout randomized trial,
analyzes the round and simulates synthetic challenges with known truth.
"""

from .analysis import (
    AnalysisBundle,
    DistanceMatrix,
    Embedding2D,
    classical_mds,
    compute_analyses,
    emit_report,
    pairwise_jaccard_matrix,
    prediction_error_report,
    spearman,
    variable_frequency,
)
from .inference import (
    DesignMatrix,
    FitConfig,
    FitDiagnostics,
    FittedModel,
    ModelSpec,
    SingularModelError,
    bootstrap_sd,
    build_design_matrix,
    fit_firth_logistic,
    interaction_statistic,
    standardized_risk_difference,
)
from .scoring import (
    AltScoreConfig,
    CellCounts,
    ScoreBoard,
    ScoringError,
    Submission,
    TeamScore,
    ValidityReport,
    check_validity,
    final_scores,
    rank_average,
    rank_teams,
    robust_standardize,
    score_alt,
    score_round,
    score_s1,
    score_s2,
)
from .simulate import (
    GeneratorConfig,
    SimulationReport,
    bundled_config,
    generate_trial,
    naive_cutpoint_search,
    run_challenge_simulation,
)
from .subgroup_expr import (
    EvalError,
    MembershipVector,
    ParseError,
    SubgroupExpr,
    TriState,
    evaluate,
    format_expr,
    jaccard_distance,
    membership,
    parse,
    variables_used,
)
from .trial_data import (
    CovariateSchema,
    CovariateSpec,
    DataFormatError,
    DatasetSummary,
    SubjectRecord,
    TrialDataset,
    apply_composite_nonresponse,
    load_dataset,
    load_schema,
    pool_studies,
    save_dataset,
    summarize,
)

__version__ = "0.1.0"
