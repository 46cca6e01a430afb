"""Parametric linear system models.

A model maps an uncertain parameter vector ``p`` (length ℓ) to the system
matrices Φ(p) (n×n) and H(p) (m×n), and supplies their derivatives with
respect to each parameter. The same classes serve discrete-time models
(Φ is a transition matrix, Q/R are covariances) and continuous-time models
(Φ is the ODE system matrix, Q/R are spectral densities); ``time_domain``
tells the filters which one they were handed.

Parameter indices are zero-based throughout the package.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import Field, model_validator
from typing_extensions import Self

from .config import get_config
from .exceptions import DimensionError
from .types import (
    BaseModel,
    FloatArray,
    MatrixField,
    VectorField,
    as_matrix,
    as_vector,
    is_symmetric_psd,
)

TimeDomain = Literal["discrete", "continuous"]
MatrixFunction = Callable[[FloatArray], FloatArray]
DerivativeFunction = Callable[[FloatArray, int], FloatArray]


def finite_difference_derivative(
    fn: MatrixFunction, p: FloatArray, i: int, step: float
) -> FloatArray:
    """Central difference of a matrix-valued function along parameter `i`."""
    forward = p.copy()
    backward = p.copy()
    forward[i] += step
    backward[i] -= step
    return (as_matrix(fn(forward)) - as_matrix(fn(backward))) / (2.0 * step)


@dataclass(frozen=True)
class Linearization:
    """Φ, H and their derivative stacks evaluated at one (p, epoch)."""

    phi: FloatArray
    h: FloatArray
    dphi: FloatArray  # ℓ×n×n
    dh: FloatArray  # ℓ×m×n

    def phi_action(self, x: FloatArray) -> FloatArray:
        """n×ℓ matrix whose column i is (∂Φ/∂p_i) x."""
        return np.einsum("ijk,k->ji", self.dphi, x)

    def h_action(self, x: FloatArray) -> FloatArray:
        return np.einsum("ijk,k->ji", self.dh, x)


class ParametricLinearModel(ABC):
    """Base class of Φ(p), H(p) models with derivative stacks and noise levels.

    Instances are immutable after construction, so a single model can be
    shared by concurrent filter runs.
    """

    time_domain: TimeDomain
    # subclasses whose matrices ignore `epoch` set this, letting a run
    # evaluate them once
    time_invariant: bool = False

    def __init__(
        self,
        q: FloatArray,
        r: FloatArray,
        n_params: int,
        time_domain: TimeDomain = "discrete",
    ) -> None:
        q = as_matrix(q, "q")
        r = as_matrix(r, "r")
        if n_params < 1:
            raise DimensionError("a parametric model needs at least one parameter")
        if not is_symmetric_psd(q):
            raise ValueError("q must be symmetric positive semidefinite")
        if not is_symmetric_psd(r):
            raise ValueError("r must be symmetric positive semidefinite")
        q.setflags(write=False)
        r.setflags(write=False)
        self._q = q
        self._r = r
        self._n_params = n_params
        self.time_domain = time_domain

    @property
    def q(self) -> FloatArray:
        return self._q

    @property
    def r(self) -> FloatArray:
        return self._r

    @property
    def n_states(self) -> int:
        return self._q.shape[0]

    @property
    def n_measurements(self) -> int:
        return self._r.shape[0]

    @property
    def n_params(self) -> int:
        return self._n_params

    def check_parameters(self, p: FloatArray) -> FloatArray:
        p = as_vector(p, "parameter vector")
        if p.shape[0] != self._n_params:
            raise DimensionError(
                f"parameter vector has length {p.shape[0]}, model expects {self._n_params}"
            )
        if not np.all(np.isfinite(p)):
            raise ValueError("parameter vector entries must be finite")
        return p

    def check_measurement(self, z: FloatArray) -> FloatArray:
        z = as_vector(z, "measurement")
        if z.shape[0] != self.n_measurements:
            raise DimensionError(
                f"measurement has length {z.shape[0]}, model expects {self.n_measurements}"
            )
        return z

    def require_domain(self, domain: TimeDomain) -> None:
        if self.time_domain != domain:
            raise DimensionError(
                f"expected a {domain}-time model, got a {self.time_domain}-time one"
            )

    @abstractmethod
    def phi(self, p: FloatArray, epoch: int = 0) -> FloatArray:
        """Φ(p); `epoch` is accepted for time-varying models and may be ignored."""

    @abstractmethod
    def h(self, p: FloatArray, epoch: int = 0) -> FloatArray: ...

    @abstractmethod
    def dphi(self, p: FloatArray, i: int, epoch: int = 0) -> FloatArray:
        """∂Φ/∂p_i at p."""

    @abstractmethod
    def dh(self, p: FloatArray, i: int, epoch: int = 0) -> FloatArray: ...

    def phi_jacobian_action(
        self, p: FloatArray, x: FloatArray, epoch: int = 0
    ) -> FloatArray:
        """n×ℓ matrix whose column i is (∂Φ/∂p_i) x."""
        p = self.check_parameters(p)
        x = self._check_state(x)
        return np.column_stack(
            [self.dphi(p, i, epoch) @ x for i in range(self._n_params)]
        )

    def h_jacobian_action(
        self, p: FloatArray, x: FloatArray, epoch: int = 0
    ) -> FloatArray:
        """m×ℓ matrix whose column i is (∂H/∂p_i) x."""
        p = self.check_parameters(p)
        x = self._check_state(x)
        return np.column_stack([self.dh(p, i, epoch) @ x for i in range(self._n_params)])

    def linearize(self, p: FloatArray, epoch: int = 0) -> Linearization:
        p = self.check_parameters(p)
        return Linearization(
            phi=self.phi(p, epoch),
            h=self.h(p, epoch),
            dphi=np.stack([self.dphi(p, i, epoch) for i in range(self._n_params)]),
            dh=np.stack([self.dh(p, i, epoch) for i in range(self._n_params)]),
        )

    def check_derivatives(self, p: FloatArray, step: float = 1e-5) -> float:
        """Largest normalized gap between analytic and central-difference derivatives.

        Each gap is divided by 1 + max|analytic|; values ≤ 1e-6 mean the
        derivative stacks agree with Φ(p) and H(p).
        """
        p = self.check_parameters(p)
        worst = 0.0
        for i in range(self._n_params):
            for fn, dfn in ((self.phi, self.dphi), (self.h, self.dh)):
                analytic = dfn(p, i)
                numeric = finite_difference_derivative(fn, p, i, step)
                gap = float(np.max(np.abs(analytic - numeric)))
                worst = max(worst, gap / (1.0 + float(np.max(np.abs(analytic)))))
        return worst

    def _check_state(self, x: FloatArray) -> FloatArray:
        x = as_vector(x, "state vector")
        if x.shape[0] != self.n_states:
            raise DimensionError(
                f"state vector has length {x.shape[0]}, model has {self.n_states} states"
            )
        return x


class AffineModel(ParametricLinearModel):
    """Φ(p) = Φ₀ + Σ p_i Φ_i and H(p) = H₀ + Σ p_i H_i, with exact derivatives."""

    time_invariant = True

    def __init__(
        self,
        phi0: FloatArray,
        h0: FloatArray,
        q: FloatArray,
        r: FloatArray,
        phi_coeffs: FloatArray | list[FloatArray] | None = None,
        h_coeffs: FloatArray | list[FloatArray] | None = None,
        n_params: int | None = None,
        time_domain: TimeDomain = "discrete",
    ) -> None:
        phi0 = as_matrix(phi0, "phi0")
        h0 = as_matrix(h0, "h0")
        n, m = phi0.shape[0], h0.shape[0]
        if phi0.shape != (n, n):
            raise DimensionError(f"phi0 must be square, got {phi0.shape}")
        if h0.shape[1] != n:
            raise DimensionError(f"h0 must have {n} columns, got {h0.shape}")
        if n_params is None:
            n_params = len(phi_coeffs) if phi_coeffs is not None else (
                len(h_coeffs) if h_coeffs is not None else 0
            )
        self._phi_coeffs = self._stack(phi_coeffs, n_params, (n, n), "phi_coeffs")
        self._h_coeffs = self._stack(h_coeffs, n_params, (m, n), "h_coeffs")
        super().__init__(q, r, n_params, time_domain)
        if self.q.shape != (n, n):
            raise DimensionError(f"q must be {n}x{n}, got {self.q.shape}")
        if self.r.shape != (m, m):
            raise DimensionError(f"r must be {m}x{m}, got {self.r.shape}")
        phi0.setflags(write=False)
        h0.setflags(write=False)
        self._phi0 = phi0
        self._h0 = h0

    @staticmethod
    def _stack(
        coeffs: FloatArray | list[FloatArray] | None,
        n_params: int,
        shape: tuple[int, int],
        name: str,
    ) -> FloatArray:
        if coeffs is None or len(coeffs) == 0:
            stacked = np.zeros((n_params, *shape))
        else:
            stacked = np.stack([as_matrix(c, name) for c in coeffs])
        if stacked.shape != (n_params, *shape):
            raise DimensionError(
                f"{name} must hold {n_params} matrices of shape {shape}, got {stacked.shape}"
            )
        stacked.setflags(write=False)
        return stacked

    def phi(self, p: FloatArray, epoch: int = 0) -> FloatArray:
        p = self.check_parameters(p)
        return self._phi0 + np.tensordot(p, self._phi_coeffs, axes=1)

    def h(self, p: FloatArray, epoch: int = 0) -> FloatArray:
        p = self.check_parameters(p)
        return self._h0 + np.tensordot(p, self._h_coeffs, axes=1)

    def dphi(self, p: FloatArray, i: int, epoch: int = 0) -> FloatArray:
        return self._phi_coeffs[i]

    def dh(self, p: FloatArray, i: int, epoch: int = 0) -> FloatArray:
        return self._h_coeffs[i]

    def phi_jacobian_action(
        self, p: FloatArray, x: FloatArray, epoch: int = 0
    ) -> FloatArray:
        self.check_parameters(p)
        return np.einsum("ijk,k->ji", self._phi_coeffs, self._check_state(x))

    def h_jacobian_action(
        self, p: FloatArray, x: FloatArray, epoch: int = 0
    ) -> FloatArray:
        self.check_parameters(p)
        return np.einsum("ijk,k->ji", self._h_coeffs, self._check_state(x))

    def linearize(self, p: FloatArray, epoch: int = 0) -> Linearization:
        return Linearization(
            phi=self.phi(p), h=self.h(p), dphi=self._phi_coeffs, dh=self._h_coeffs
        )


class CallableModel(ParametricLinearModel):
    """Model built from user callables Φ(p), H(p) and optional derivative callables.

    Derivatives that are not supplied fall back to central differences with
    `NumericsConfig.fd_step`.
    """

    # the callables only see p
    time_invariant = True

    def __init__(
        self,
        phi_fn: MatrixFunction,
        h_fn: MatrixFunction,
        q: FloatArray,
        r: FloatArray,
        n_params: int,
        dphi_fn: DerivativeFunction | None = None,
        dh_fn: DerivativeFunction | None = None,
        time_domain: TimeDomain = "discrete",
        fd_step: float | None = None,
    ) -> None:
        super().__init__(q, r, n_params, time_domain)
        self._phi_fn = phi_fn
        self._h_fn = h_fn
        self._dphi_fn = dphi_fn
        self._dh_fn = dh_fn
        self._fd_step = fd_step or get_config().numerics.fd_step

    @classmethod
    def with_finite_differences(
        cls,
        phi_fn: MatrixFunction,
        h_fn: MatrixFunction,
        q: FloatArray,
        r: FloatArray,
        n_params: int,
        time_domain: TimeDomain = "discrete",
        fd_step: float | None = None,
    ) -> Self:
        return cls(
            phi_fn, h_fn, q, r, n_params, time_domain=time_domain, fd_step=fd_step
        )

    @property
    def uses_finite_differences(self) -> bool:
        return self._dphi_fn is None or self._dh_fn is None

    def phi(self, p: FloatArray, epoch: int = 0) -> FloatArray:
        return as_matrix(self._phi_fn(self.check_parameters(p)), "phi")

    def h(self, p: FloatArray, epoch: int = 0) -> FloatArray:
        return as_matrix(self._h_fn(self.check_parameters(p)), "h")

    def dphi(self, p: FloatArray, i: int, epoch: int = 0) -> FloatArray:
        p = self.check_parameters(p)
        if self._dphi_fn is not None:
            return as_matrix(self._dphi_fn(p, i), "dphi")
        return finite_difference_derivative(self._phi_fn, p, i, self._fd_step)

    def dh(self, p: FloatArray, i: int, epoch: int = 0) -> FloatArray:
        p = self.check_parameters(p)
        if self._dh_fn is not None:
            return as_matrix(self._dh_fn(p, i), "dh")
        return finite_difference_derivative(self._h_fn, p, i, self._fd_step)


def eval_phi(model: ParametricLinearModel, p: FloatArray, epoch: int = 0) -> FloatArray:
    return model.phi(p, epoch)


def eval_h(model: ParametricLinearModel, p: FloatArray, epoch: int = 0) -> FloatArray:
    return model.h(p, epoch)


def phi_jacobian_action(
    model: ParametricLinearModel, p: FloatArray, x: FloatArray, epoch: int = 0
) -> FloatArray:
    return model.phi_jacobian_action(p, x, epoch)


def h_jacobian_action(
    model: ParametricLinearModel, p: FloatArray, x: FloatArray, epoch: int = 0
) -> FloatArray:
    return model.h_jacobian_action(p, x, epoch)


@dataclass(frozen=True)
class BenchmarkConstants:
    """Experiment constants of the two-state uncertain-parameter benchmark."""

    nominal: FloatArray
    x0: FloatArray
    p0_cov: FloatArray
    param_bounds: tuple[tuple[float, float], ...]

    @property
    def param_variances(self) -> FloatArray:
        """Variances of the uniform parameter distributions, (high − low)²/12."""
        return np.array([(hi - lo) ** 2 / 12.0 for lo, hi in self.param_bounds])

    @property
    def referential_weight(self) -> FloatArray:
        """W_a = diag(0.003, 0.075): ninety percent of the parameter variances, rounded."""
        return np.diag(np.round(0.9 * self.param_variances, 3))


def make_benchmark() -> tuple[AffineModel, BenchmarkConstants]:
    """Two-state system Φ(α, β) = [[1, 0.1 + α], [β − 0.5, 0.9]], H = I.

    Q = 0.1·I, R = I, nominal (α̂, β̂) = (0, 0), x₀ = [10, −10], P₀ = 0.1·I,
    α ~ U(−0.1, 0.1), β ~ U(−0.5, 0.5).
    """
    d_alpha = np.array([[0.0, 1.0], [0.0, 0.0]])
    d_beta = np.array([[0.0, 0.0], [1.0, 0.0]])
    model = AffineModel(
        phi0=np.array([[1.0, 0.1], [-0.5, 0.9]]),
        h0=np.eye(2),
        q=0.1 * np.eye(2),
        r=np.eye(2),
        phi_coeffs=[d_alpha, d_beta],
        n_params=2,
    )
    constants = BenchmarkConstants(
        nominal=np.zeros(2),
        x0=np.array([10.0, -10.0]),
        p0_cov=0.1 * np.eye(2),
        param_bounds=((-0.1, 0.1), (-0.5, 0.5)),
    )
    return model, constants


class ModelDescription(BaseModel):
    """JSON description of an affine model"""

    time_domain: TimeDomain = Field(
        default="discrete", description="Discrete transition or continuous ODE model"
    )
    phi: MatrixField = Field(..., description="Φ₀ (n×n)")
    h: MatrixField = Field(..., description="H₀ (m×n)")
    q: MatrixField = Field(..., description="Process noise covariance (n×n)")
    r: MatrixField = Field(..., description="Measurement noise covariance (m×m)")
    phi_derivatives: list[MatrixField] = Field(
        default_factory=list, description="∂Φ/∂p_i for each parameter (n×n each)"
    )
    h_derivatives: list[MatrixField] = Field(
        default_factory=list, description="∂H/∂p_i for each parameter (m×n each)"
    )
    n_params: int | None = Field(
        default=None,
        ge=1,
        description="Parameter count when no derivative lists are given",
    )

    @model_validator(mode="after")
    def validate_params(self):
        counts = {len(self.phi_derivatives), len(self.h_derivatives)} - {0}
        if len(counts) > 1:
            raise ValueError("phi_derivatives and h_derivatives differ in length")
        if counts and self.n_params is not None and self.n_params not in counts:
            raise ValueError("n_params disagrees with the derivative lists")
        if not counts and self.n_params is None:
            raise ValueError("give n_params or per-parameter derivative matrices")
        return self

    def build(self) -> AffineModel:
        return AffineModel(
            phi0=np.array(self.phi),
            h0=np.array(self.h),
            q=np.array(self.q),
            r=np.array(self.r),
            phi_coeffs=[np.array(m) for m in self.phi_derivatives] or None,
            h_coeffs=[np.array(m) for m in self.h_derivatives] or None,
            n_params=self.n_params,
            time_domain=self.time_domain,
        )


def load_model(path: Path) -> AffineModel:
    with path.open("r", encoding="utf-8") as f:
        data = json.load(f)
    return ModelDescription.model_validate(data).build()
