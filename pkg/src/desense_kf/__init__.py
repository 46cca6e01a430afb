__version__ = "0.1.0"

from .config import DesenseConfig, IntegratorConfig, NumericsConfig, get_config, set_config
from .exceptions import (
    ConfigError,
    DesenseError,
    DimensionError,
    ExperimentFailure,
    NumericFailure,
    SingularEquationError,
    SingularInnovationError,
)
from .filters import (
    Adkf,
    Conventional,
    FilterRun,
    FilterState,
    Ksdkf,
    StepRecord,
    WeightingScheme,
    run_continuous,
    run_filter,
    step,
)
from .logging import debug_log, logger
from .model import (
    AffineModel,
    CallableModel,
    ModelDescription,
    ParametricLinearModel,
    load_model,
    make_benchmark,
)
from .montecarlo import ExperimentConfig, ExperimentReport, SchemeConfig, run_experiment
from .oracle import fd_cost_gradient, fd_sensitivity

__all__ = [
    "Adkf",
    "AffineModel",
    "CallableModel",
    "ConfigError",
    "Conventional",
    "DesenseConfig",
    "DesenseError",
    "DimensionError",
    "ExperimentConfig",
    "ExperimentFailure",
    "ExperimentReport",
    "FilterRun",
    "FilterState",
    "IntegratorConfig",
    "Ksdkf",
    "ModelDescription",
    "NumericFailure",
    "NumericsConfig",
    "ParametricLinearModel",
    "SchemeConfig",
    "SingularEquationError",
    "SingularInnovationError",
    "StepRecord",
    "WeightingScheme",
    "__version__",
    "debug_log",
    "fd_cost_gradient",
    "fd_sensitivity",
    "get_config",
    "load_model",
    "logger",
    "make_benchmark",
    "run_continuous",
    "run_experiment",
    "run_filter",
    "set_config",
    "step",
]
