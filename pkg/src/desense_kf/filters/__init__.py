from .continuous import (
    ContinuousFilterState,
    continuous_gain_adkf,
    continuous_gain_kf,
    continuous_gain_ksdkf,
    derivatives,
    integrate_step,
    run_continuous,
    simulate_truth_em,
)
from .discrete import (
    FilterRun,
    compute_gain,
    cost_adkf,
    cost_ksdkf,
    gain_adkf,
    gain_cost,
    gain_kf,
    gain_ksdkf,
    innovation_covariance,
    innovation_matrix,
    ksdkf_residual,
    measurement_update,
    run_filter,
    scheme_cost,
    step,
    time_update,
)
from .state import (
    Adkf,
    Conventional,
    FilterState,
    Ksdkf,
    StepRecord,
    WeightingScheme,
    check_scheme,
)

__all__ = [
    "Adkf",
    "ContinuousFilterState",
    "Conventional",
    "FilterRun",
    "FilterState",
    "Ksdkf",
    "StepRecord",
    "WeightingScheme",
    "check_scheme",
    "compute_gain",
    "continuous_gain_adkf",
    "continuous_gain_kf",
    "continuous_gain_ksdkf",
    "cost_adkf",
    "cost_ksdkf",
    "derivatives",
    "gain_adkf",
    "gain_cost",
    "gain_kf",
    "gain_ksdkf",
    "innovation_covariance",
    "innovation_matrix",
    "integrate_step",
    "ksdkf_residual",
    "measurement_update",
    "run_continuous",
    "run_filter",
    "scheme_cost",
    "simulate_truth_em",
    "step",
    "time_update",
]
