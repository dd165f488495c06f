"""Learned kernels for conditional Kaplan-Meier survival estimation, with conformal intervals for survival times."""

from .conformal import (
    CalibrationScores,
    PredictionSet,
    calibrate,
    local_quantile,
    marginal_quantile,
    nonconformity,
    prediction_set,
)
from .data import (
    CsvSchema,
    DataError,
    SurvivalDataset,
    SyntheticSpec,
    TimeGrid,
    build_time_grid,
    generate_synthetic,
    load_csv,
    snap_to_grid,
    split,
)
from .estimator import (
    ConditionalKaplanMeier,
    SurvivalCurve,
    conditional_km,
    kaplan_meier,
    kernel_hazard,
    mean_survival_time,
    median_survival_time,
)
from .kernel import (
    BoxKernel,
    ConstantKernel,
    GaussianEmbeddingKernel,
    PrecomputedKernel,
    evaluate,
    load_kernel_matrix,
    matrix,
)

__version__ = "0.1.0"
