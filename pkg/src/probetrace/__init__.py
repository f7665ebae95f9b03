"""Learned probing vectors for matrix-free trace estimation."""
__version__ = "0.1.0"

from ._backend import BACKEND
from .evaluation import (
    CorrectedEstimator,
    DeviationSample,
    DeviationStats,
    calibrate_bias,
    corrected_estimate,
    deviation,
    deviation_stats,
    unbiased_from_values,
    unbiased_function_expectation,
)
from .hutchinson import HutchinsonResult, hutchinson_trace, rademacher_vector, variance_scan
from .operators import (
    CyclicTridiagonalMatrix,
    DenseMatrix,
    IdentityOperator,
    InverseOperator,
    LinearOperator,
    MatrixSpec,
    SolverFailure,
    apply,
    apply_transpose,
    bicgstab_solve,
    dense_realize,
    exact_trace,
    generate_random_matrix,
)
from .pool import MatrixPool, pool_pick
from .probing import (
    ProbingVectorSet,
    cost,
    cost_gradient,
    init_probing_vectors,
    line_search_gamma,
    probe_estimate,
    schedule_gamma,
)
from .training import (
    TrainerState,
    TrainingConfig,
    checkpoint_load,
    checkpoint_save,
    train,
    training_step,
)
