"""Seeded Monte-Carlo comparison of weighting schemes on uncertain-parameter systems.

Every case draws its true parameters, truth trajectory and measurement noise
from counter-based substreams keyed by (seed, case_index), and every scheme
in the configuration filters that same measurement sequence. Results do not
depend on how cases are scheduled across workers.
"""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import Field, field_validator, model_validator

from .exceptions import DesenseError, ExperimentFailure
from .filters.discrete import cost_adkf, run_filter
from .filters.state import Adkf, Conventional, Ksdkf, WeightingScheme, check_scheme
from .linalg import asymmetry_ratio, covariance_is_healthy, min_eigen_ratio
from .logging import debug_log, logger
from .model import ParametricLinearModel, load_model, make_benchmark
from .types import (
    BaseModel,
    FloatArray,
    MatrixField,
    VectorField,
    as_vector,
    is_symmetric_psd,
)

U64_MAX = 2**64 - 1
BENCHMARK_BOUNDS: tuple[tuple[float, float], ...] = make_benchmark()[1].param_bounds

# substream slots within one case
_PARAMS, _NOISE, _INIT = 0, 1, 2

# per-epoch columns of the cost table; the ref_ pair scores every scheme on
# Tr(P⁺) + Tr(S⁺ W_ref S⁺ᵀ) with the shared reference weight
COST_METRICS = ("mean_cost", "mean_penalty", "mean_ref_cost", "mean_ref_penalty")


class SchemeConfig(BaseModel):
    """One filter to run on every case"""

    name: str = Field(..., min_length=1, description="Label used in the output tables")
    kind: Literal["conventional", "adkf", "ksdkf"] = Field(
        ..., description="Gain computation"
    )
    w_a: MatrixField | None = Field(
        default=None, description="ℓ×ℓ stacked sensitivity weight (adkf)"
    )
    w_list: list[MatrixField] | None = Field(
        default=None, description="One n×n weight per parameter (ksdkf)"
    )

    @model_validator(mode="after")
    def validate_weights(self):
        if self.kind == "adkf":
            if self.w_a is None:
                raise ValueError(f"scheme {self.name!r}: adkf needs w_a")
            if not is_symmetric_psd(np.array(self.w_a)):
                raise ValueError(
                    f"scheme {self.name!r}: w_a must be symmetric positive semidefinite"
                )
        elif self.kind == "ksdkf":
            if not self.w_list:
                raise ValueError(f"scheme {self.name!r}: ksdkf needs w_list")
            for i, w in enumerate(self.w_list):
                if not is_symmetric_psd(np.array(w)):
                    raise ValueError(
                        f"scheme {self.name!r}: w_list[{i}] must be symmetric "
                        "positive semidefinite"
                    )
        return self

    def to_scheme(self) -> WeightingScheme:
        if self.kind == "adkf":
            return Adkf(np.array(self.w_a), name=self.name)
        if self.kind == "ksdkf":
            return Ksdkf(tuple(np.array(w) for w in self.w_list or ()), name=self.name)
        return Conventional(name=self.name)


class UniformBounds(BaseModel):
    low: float
    high: float

    @model_validator(mode="after")
    def validate_order(self):
        if not self.low < self.high:
            raise ValueError(f"uniform bounds need low < high, got [{self.low}, {self.high}]")
        return self


def _benchmark_field(attr: str):
    def factory():
        return getattr(make_benchmark()[1], attr).tolist()

    return factory


class ExperimentConfig(BaseModel):
    """Monte-Carlo experiment; defaults reproduce the two-state benchmark"""

    n_cases: int = Field(default=5000, ge=1, description="Number of Monte-Carlo cases")
    n_epochs: int = Field(default=50, ge=1, description="Measurements per case")
    seed: int | None = Field(
        default=None,
        ge=0,
        le=U64_MAX,
        description="Root seed; the CLI also accepts --seed and DESENSE_KF_SEED",
    )
    x0: VectorField = Field(
        default_factory=_benchmark_field("x0"), description="True initial state"
    )
    p0_cov: MatrixField = Field(
        default_factory=_benchmark_field("p0_cov"), description="Initial covariance P₀"
    )
    nominal: VectorField = Field(
        default_factory=_benchmark_field("nominal"), description="Nominal parameters p̂"
    )
    param_dists: list[UniformBounds] = Field(
        default_factory=lambda: [UniformBounds(low=lo, high=hi) for lo, hi in BENCHMARK_BOUNDS],
        description="Uniform distribution of each true parameter",
    )
    schemes: list[SchemeConfig] = Field(
        ..., min_length=1, description="Filters compared on identical noise"
    )
    init_error_draw: bool = Field(
        default=False, description="Start each filter at x̂₀ ~ N(x₀, P₀) instead of x₀"
    )
    model_path: Path | None = Field(
        default=None, description="JSON model description; the benchmark when absent"
    )
    reference_weight: MatrixField | None = Field(
        default=None,
        description="ℓ×ℓ W_ref of the common cost reported for every scheme; "
        "0.9 × the parameter variances when absent",
    )

    @field_validator("schemes")
    @classmethod
    def validate_unique_names(cls, schemes: list[SchemeConfig]) -> list[SchemeConfig]:
        names = [s.name for s in schemes]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate scheme names: {', '.join(duplicates)}")
        return schemes

    @model_validator(mode="after")
    def validate_dimensions(self):
        if len(self.nominal) != len(self.param_dists):
            raise ValueError(
                f"nominal has {len(self.nominal)} entries but param_dists has "
                f"{len(self.param_dists)}"
            )
        n = len(self.x0)
        if len(self.p0_cov) != n or len(self.p0_cov[0]) != n:
            raise ValueError(f"p0_cov must be {n}x{n}")
        if not is_symmetric_psd(np.array(self.p0_cov)):
            raise ValueError("p0_cov must be symmetric positive semidefinite")
        if self.reference_weight is not None:
            ell = len(self.param_dists)
            w_ref = np.array(self.reference_weight)
            if w_ref.shape != (ell, ell) or not is_symmetric_psd(w_ref):
                raise ValueError(
                    f"reference_weight must be a symmetric positive semidefinite {ell}x{ell} matrix"
                )
        return self

    @property
    def bounds(self) -> tuple[tuple[float, float], ...]:
        return tuple((b.low, b.high) for b in self.param_dists)

    @property
    def reference_matrix(self) -> FloatArray:
        if self.reference_weight is not None:
            return np.array(self.reference_weight)
        variances = [(b.high - b.low) ** 2 / 12.0 for b in self.param_dists]
        return np.diag(0.9 * np.array(variances))

    def build_model(self) -> ParametricLinearModel:
        model = load_model(self.model_path) if self.model_path else make_benchmark()[0]
        model.require_domain("discrete")
        if model.n_params != len(self.nominal):
            raise DesenseError(
                f"model has {model.n_params} parameters, config gives {len(self.nominal)}"
            )
        if model.n_states != len(self.x0):
            raise DesenseError(
                f"model has {model.n_states} states, x0 has {len(self.x0)} entries"
            )
        return model

    def to_schemes(self, model: ParametricLinearModel) -> list[WeightingScheme]:
        schemes = [s.to_scheme() for s in self.schemes]
        for scheme in schemes:
            check_scheme(scheme, model.n_states, model.n_params)
        return schemes


def case_rng(seed: int, case_index: int, slot: int) -> np.random.Generator:
    """Philox generator for one (case, purpose) slot; independent of every other slot."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(case_index, slot)))
    )


def draw_parameters(
    rng: np.random.Generator,
    bounds: Sequence[tuple[float, float]] = BENCHMARK_BOUNDS,
) -> FloatArray:
    """Independent uniform draws, one per parameter, held fixed for the whole case."""
    low, high = np.array(bounds, dtype=np.float64).T
    return rng.uniform(low, high)


def simulate_truth(
    model: ParametricLinearModel,
    p_true: FloatArray,
    x0: FloatArray,
    rng: np.random.Generator,
    n_epochs: int,
) -> tuple[FloatArray, FloatArray]:
    """x_{k+1} = Φ(p)x_k + w_k and z_k = H(p)x_k + v_k.

    Returns:
        (states (n_epochs+1)×n with x₀ first, measurements n_epochs×m for epochs 1..N)
    """
    x0 = as_vector(x0, "x0")
    n, m = model.n_states, model.n_measurements
    w = rng.multivariate_normal(np.zeros(n), model.q, size=n_epochs)
    v = rng.multivariate_normal(np.zeros(m), model.r, size=n_epochs)
    states = np.empty((n_epochs + 1, n))
    measurements = np.empty((n_epochs, m))
    states[0] = x0
    for k in range(n_epochs):
        phi = model.phi(p_true, k)
        states[k + 1] = phi @ states[k] + w[k]
        measurements[k] = model.h(p_true, k + 1) @ states[k + 1] + v[k]
    return states, measurements


def _digest(*arrays: FloatArray) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass
class CaseResult:
    """Per-scheme trajectories of one case; the arrays are None when the case failed."""

    case_index: int
    p_true: FloatArray
    digest: str
    sq_error: FloatArray | None = None  # schemes × epochs × states
    cost: FloatArray | None = None  # schemes × epochs
    penalty: FloatArray | None = None
    trace_p: FloatArray | None = None
    ref_cost: FloatArray | None = None  # schemes × epochs, scored with W_ref
    ref_penalty: FloatArray | None = None
    max_asymmetry: float = 0.0
    min_eigen_ratio: float = np.inf
    unhealthy_epochs: int = 0
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_case(
    cfg: ExperimentConfig,
    case_index: int,
    model: ParametricLinearModel | None = None,
    seed: int | None = None,
) -> CaseResult:
    """Run every scheme of `cfg` on one simulated case.

    A numeric failure in any scheme fails the whole case so the remaining
    schemes stay paired.
    """
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ValueError("no seed given")
    model = model or cfg.build_model()
    schemes = cfg.to_schemes(model)
    nominal = np.array(cfg.nominal)
    x0 = np.array(cfg.x0)
    p0 = np.array(cfg.p0_cov)

    p_true = draw_parameters(case_rng(seed, case_index, _PARAMS), cfg.bounds)
    states, measurements = simulate_truth(
        model, p_true, x0, case_rng(seed, case_index, _NOISE), cfg.n_epochs
    )
    xhat0 = (
        case_rng(seed, case_index, _INIT).multivariate_normal(x0, p0)
        if cfg.init_error_draw
        else x0
    )
    result = CaseResult(
        case_index=case_index,
        p_true=p_true,
        digest=_digest(p_true, states, measurements),
    )

    n_schemes, n_epochs = len(schemes), cfg.n_epochs
    sq_error = np.empty((n_schemes, n_epochs, model.n_states))
    cost = np.empty((n_schemes, n_epochs))
    penalty = np.empty((n_schemes, n_epochs))
    trace_p = np.empty((n_schemes, n_epochs))
    ref_cost = np.empty((n_schemes, n_epochs))
    ref_penalty = np.empty((n_schemes, n_epochs))
    w_ref = cfg.reference_matrix
    for j, scheme in enumerate(schemes):
        try:
            run = run_filter(model, nominal, xhat0, p0, measurements, scheme)
        except DesenseError as e:
            result.error = f"{scheme.name}: {e}"
            return result
        sq_error[j] = (run.estimates - states[1:]) ** 2
        cost[j] = [r.cost_total for r in run.records]
        penalty[j] = [r.cost_penalty for r in run.records]
        trace_p[j] = [r.trace_p for r in run.records]
        ref_cost[j], ref_penalty[j] = np.array([cost_adkf(s, w_ref) for s in run.states]).T
        for state in run.states:
            result.max_asymmetry = max(result.max_asymmetry, asymmetry_ratio(state.p_cov))
            result.min_eigen_ratio = min(result.min_eigen_ratio, min_eigen_ratio(state.p_cov))
            if not covariance_is_healthy(state.p_cov):
                result.unhealthy_epochs += 1
    result.sq_error = sq_error
    result.cost = cost
    result.penalty = penalty
    result.trace_p = trace_p
    result.ref_cost = ref_cost
    result.ref_penalty = ref_penalty
    if result.unhealthy_epochs:
        debug_log(f"case {case_index}: {result.unhealthy_epochs} unhealthy covariance(s)")
    return result


def _run_chunk(cfg: ExperimentConfig, seed: int, indices: list[int]) -> list[CaseResult]:
    model = cfg.build_model()
    return [run_case(cfg, i, model, seed) for i in indices]


@dataclass
class ExperimentReport:
    """Aggregates over the successful cases, epochs 1..n_epochs."""

    scheme_names: list[str]
    rms: FloatArray  # schemes × epochs × states
    mean_cost: FloatArray  # schemes × epochs
    mean_penalty: FloatArray
    mean_trace_p: FloatArray
    mean_ref_cost: FloatArray
    mean_ref_penalty: FloatArray
    n_ok: int
    failed_cases: dict[int, str] = field(default_factory=dict)
    case_digests: list[str] = field(default_factory=list)
    max_asymmetry: float = 0.0
    min_eigen_ratio: float = np.inf
    unhealthy_cases: list[int] = field(default_factory=list)

    @property
    def n_epochs(self) -> int:
        return self.rms.shape[1]

    def to_frames(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        """Long-format (rms, cost) tables; epochs and state indices count from 1."""
        n_schemes, n_epochs, n_states = self.rms.shape
        schemes = np.array(self.scheme_names, dtype=object)
        epochs = np.arange(1, n_epochs + 1)
        rms = pd.DataFrame(
            {
                "epoch": np.tile(np.repeat(epochs, n_states), n_schemes),
                "scheme": np.repeat(schemes, n_epochs * n_states),
                "state_index": np.tile(np.arange(1, n_states + 1), n_schemes * n_epochs),
                "rms": self.rms.reshape(-1),
            }
        )
        cost = pd.DataFrame(
            {
                "epoch": np.tile(epochs, n_schemes),
                "scheme": np.repeat(schemes, n_epochs),
                "mean_cost": self.mean_cost.reshape(-1),
                "mean_penalty": self.mean_penalty.reshape(-1),
                "mean_ref_cost": self.mean_ref_cost.reshape(-1),
                "mean_ref_penalty": self.mean_ref_penalty.reshape(-1),
            }
        )
        return rms, cost


def run_experiment(
    cfg: ExperimentConfig, jobs: int = 1, seed: int | None = None
) -> ExperimentReport:
    """Run all cases and reduce them in case order.

    Args:
        cfg: experiment configuration
        jobs: worker processes; results are identical for any value
        seed: overrides cfg.seed

    Raises:
        ExperimentFailure: every case failed
    """
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ValueError("no seed given")
    model = cfg.build_model()
    cfg.to_schemes(model)
    logger.info(
        f"Running {cfg.n_cases} cases x {cfg.n_epochs} epochs, "
        f"{len(cfg.schemes)} schemes, seed {seed}, {jobs} job(s)"
    )

    indices = list(range(cfg.n_cases))
    if jobs <= 1:
        results = []
        for i in indices:
            results.append(run_case(cfg, i, model, seed))
            if (i + 1) % 500 == 0:
                debug_log(f"{i + 1}/{cfg.n_cases} cases done")
    else:
        chunk = max(1, -(-cfg.n_cases // (jobs * 4)))
        chunks = [indices[i : i + chunk] for i in range(0, cfg.n_cases, chunk)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = [
                r
                for part in pool.map(_run_chunk, [cfg] * len(chunks), [seed] * len(chunks), chunks)
                for r in part
            ]

    failed = {r.case_index: r.error or "" for r in results if r.failed}
    for idx, error in failed.items():
        logger.warning(f"Case {idx} failed and is excluded: {error}")
    ok = [r for r in results if not r.failed]
    if not ok:
        raise ExperimentFailure(f"all {cfg.n_cases} cases failed", failed_cases=len(failed))

    sq_error = np.stack([r.sq_error for r in ok])  # type: ignore[arg-type]
    report = ExperimentReport(
        scheme_names=[s.name for s in cfg.schemes],
        rms=np.sqrt(sq_error.mean(axis=0)),
        mean_cost=np.stack([r.cost for r in ok]).mean(axis=0),  # type: ignore[arg-type]
        mean_penalty=np.stack([r.penalty for r in ok]).mean(axis=0),  # type: ignore[arg-type]
        mean_trace_p=np.stack([r.trace_p for r in ok]).mean(axis=0),  # type: ignore[arg-type]
        mean_ref_cost=np.stack([r.ref_cost for r in ok]).mean(axis=0),  # type: ignore[arg-type]
        mean_ref_penalty=np.stack([r.ref_penalty for r in ok]).mean(axis=0),  # type: ignore[arg-type]
        n_ok=len(ok),
        failed_cases=failed,
        case_digests=[r.digest for r in results],
        max_asymmetry=max(r.max_asymmetry for r in ok),
        min_eigen_ratio=min(r.min_eigen_ratio for r in ok),
        unhealthy_cases=[r.case_index for r in ok if r.unhealthy_epochs],
    )
    if report.unhealthy_cases:
        logger.warning(
            f"{len(report.unhealthy_cases)} case(s) produced a covariance outside the "
            "symmetry/PSD tolerances"
        )
    logger.info(f"Finished: {report.n_ok} cases aggregated, {len(failed)} failed")
    return report


def epoch_summary(
    rms: pd.DataFrame, cost: pd.DataFrame, first_epoch: int = 10
) -> pd.DataFrame:
    """Mean of each metric over epochs first_epoch..N, one row per (scheme, metric)."""
    rms = rms[rms["epoch"] >= first_epoch]
    cost = cost[cost["epoch"] >= first_epoch]
    rms_part = (
        rms.assign(metric="rms_x" + rms["state_index"].astype(str))
        .groupby(["scheme", "metric"], sort=False)["rms"]
        .mean()
        .rename("epoch_mean")
        .reset_index()
    )
    cost_part = (
        cost.melt(
            id_vars=["epoch", "scheme"],
            value_vars=[c for c in COST_METRICS if c in cost.columns],
            var_name="metric",
            value_name="value",
        )
        .groupby(["scheme", "metric"], sort=False)["value"]
        .mean()
        .rename("epoch_mean")
        .reset_index()
    )
    return pd.concat([rms_part, cost_part], ignore_index=True)


def write_frame(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
