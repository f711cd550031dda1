"""Streaming Gaussian-process regression on sequentially factored kernels."""

from .errors import (
    ConfigError,
    ConstraintError,
    DataError,
    DimensionError,
    NonSymmetricError,
    SeqGpError,
    SingularSystemError,
    SketchWidthError,
)
from .rla import (
    BorderedOperator,
    RangeResult,
    SketchParams,
    SymEigFactor,
    approx_eig,
    bordered_apply,
    dense_factor,
    empty_factor,
    load_factor,
    range_finder,
    save_factor,
    seq_update,
)
from .kernels import (
    DistancePowerSet,
    KernelSpec,
    PolyDistance,
    PolyKernelOperator,
    SquaredExponential,
    cross_distances,
    hadamard_power,
    pairwise_distances,
    poly_distance_kernel,
    se_kernel,
)
from .gp import (
    Engine,
    GpState,
    Labeling,
    Prediction,
    load_checkpoint,
    save_checkpoint,
    stream_run,
)
from .hyperopt import (
    HyperState,
    OptConfig,
    OptMode,
    OptResult,
    chained_inverse_apply,
    default_initial_coeffs,
    optimize_hypers,
    run_mode,
    training_objective,
    update_distance_factors,
)
from .data import (
    CsvSchema,
    Dataset,
    StandardizeRecord,
    StreamPlan,
    load_csv,
    make_stream,
    standardize,
)
from .metrics import BatchRecord, StreamMetrics

__version__ = "0.1.0"
