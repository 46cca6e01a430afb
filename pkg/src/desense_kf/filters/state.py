from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from typing_extensions import Self

from ..exceptions import DimensionError
from ..types import FloatArray, as_matrix, as_vector, is_symmetric_psd


def _freeze(*arrays: FloatArray) -> None:
    for arr in arrays:
        arr.setflags(write=False)


@dataclass(frozen=True)
class FilterState:
    """Estimate x̂, covariance P and sensitivity S = ∂x̂/∂p at one epoch.

    A value: every filter step consumes a state and returns a new one.
    """

    xhat: FloatArray
    p_cov: FloatArray
    s: FloatArray
    epoch: int = 0

    def __post_init__(self):
        n = self.xhat.shape[0]
        if self.p_cov.shape != (n, n) or self.s.ndim != 2 or self.s.shape[0] != n:
            raise DimensionError(
                f"inconsistent state shapes: xhat {self.xhat.shape}, "
                f"p_cov {self.p_cov.shape}, s {self.s.shape}"
            )
        _freeze(self.xhat, self.p_cov, self.s)

    @classmethod
    def initial(cls, x0: FloatArray, p0: FloatArray, n_params: int) -> Self:
        """Initial state with S₀ = 0: x̂₀ is chosen independently of p."""
        x0 = as_vector(x0, "x0").copy()
        return cls(
            xhat=x0,
            p_cov=as_matrix(p0, "p0").copy(),
            s=np.zeros((x0.shape[0], n_params)),
            epoch=0,
        )

    @property
    def n_states(self) -> int:
        return self.xhat.shape[0]

    @property
    def n_params(self) -> int:
        return self.s.shape[1]


@dataclass(frozen=True)
class Conventional:
    """Plain Kalman gain, minimizing Tr(P⁺)."""

    name: str = "KF"


@dataclass(frozen=True)
class Adkf:
    """Analytical-gain desensitized filter, penalty Tr(S⁺ W_a S⁺ᵀ)."""

    w_a: FloatArray
    name: str = "ADKF"

    def __post_init__(self):
        w_a = as_matrix(self.w_a, "w_a").copy()
        if not is_symmetric_psd(w_a):
            raise ValueError(f"{self.name}: w_a must be symmetric positive semidefinite")
        _freeze(w_a)
        object.__setattr__(self, "w_a", w_a)

    @property
    def n_params(self) -> int:
        return self.w_a.shape[0]


@dataclass(frozen=True)
class Ksdkf:
    """Per-parameter desensitized filter, penalty Σ σ_iᵀ W_i σ_i, gain from a linear equation."""

    w_list: tuple[FloatArray, ...]
    name: str = "KSDKF"

    def __post_init__(self):
        weights = tuple(as_matrix(w, "w_i").copy() for w in self.w_list)
        if not weights:
            raise ValueError(f"{self.name}: w_list needs one matrix per parameter")
        for i, w in enumerate(weights):
            if not is_symmetric_psd(w):
                raise ValueError(
                    f"{self.name}: W_{i} must be symmetric positive semidefinite"
                )
        _freeze(*weights)
        object.__setattr__(self, "w_list", weights)

    @property
    def n_params(self) -> int:
        return len(self.w_list)


WeightingScheme = Conventional | Adkf | Ksdkf


def check_scheme(scheme: WeightingScheme, n_states: int, n_params: int) -> None:
    if isinstance(scheme, Adkf) and scheme.w_a.shape != (n_params, n_params):
        raise DimensionError(
            f"{scheme.name}: w_a must be {n_params}x{n_params}, got {scheme.w_a.shape}"
        )
    if isinstance(scheme, Ksdkf):
        if len(scheme.w_list) != n_params:
            raise DimensionError(
                f"{scheme.name}: expected {n_params} weights, got {len(scheme.w_list)}"
            )
        for w in scheme.w_list:
            if w.shape != (n_states, n_states):
                raise DimensionError(
                    f"{scheme.name}: each W_i must be {n_states}x{n_states}, got {w.shape}"
                )


@dataclass(frozen=True)
class StepRecord:
    """Diagnostics of one measurement update.

    cost_total = trace_p + cost_penalty.
    """

    gain: FloatArray
    innovation: FloatArray
    gamma: FloatArray
    cost_total: float
    cost_penalty: float
    trace_p: float
    epoch: int = 0
