"""Discrete-time desensitized Kalman filtering.

One cycle is ``time_update`` → gain (``gain_kf``, ``gain_adkf`` or
``gain_ksdkf``) → ``measurement_update``; ``step`` composes them and
``run_filter`` drives ``step`` over a measurement sequence.

The gain is treated as independent of the parameters (∂K/∂p = 0) when the
sensitivities are propagated.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..exceptions import DimensionError
from ..linalg import ensure_finite, solve_linear, solve_spd_right, symmetrize
from ..model import Linearization, ParametricLinearModel
from ..types import FloatArray
from .state import (
    Adkf,
    Conventional,
    FilterState,
    Ksdkf,
    StepRecord,
    WeightingScheme,
    check_scheme,
)


def _predict(state: FilterState, lin: Linearization, q: FloatArray) -> FilterState:
    phi = lin.phi
    xhat = phi @ state.xhat
    p_cov = symmetrize(phi @ state.p_cov @ phi.T + q)
    # Ψ̄ is taken at the old estimate
    s = phi @ state.s + lin.phi_action(state.xhat)
    epoch = state.epoch + 1
    ensure_finite(xhat, p_cov, s, what="time update", epoch=epoch)
    return FilterState(xhat=xhat, p_cov=p_cov, s=s, epoch=epoch)


def _gamma(prior: FilterState, lin: Linearization) -> FloatArray:
    return lin.h @ prior.s + lin.h_action(prior.xhat)


def _xi(prior: FilterState, h: FloatArray, r: FloatArray) -> FloatArray:
    return h @ prior.p_cov @ h.T + r


def time_update(
    state: FilterState, model: ParametricLinearModel, p_hat: FloatArray
) -> FilterState:
    """Propagate x̂, P and S one epoch through Φ̄ = Φ(p̂).

    S⁻ = Φ̄ S⁺ + Ψ̄ with Ψ̄ = (∂Φ̄/∂p) x̂⁺ taken at the old estimate.
    """
    model.require_domain("discrete")
    return _predict(state, model.linearize(p_hat, state.epoch), model.q)


def innovation_matrix(
    prior: FilterState, model: ParametricLinearModel, p_hat: FloatArray
) -> FloatArray:
    """γ = H̄ S⁻ + (∂H̄/∂p) x̂⁻; column i is the per-parameter γ_i."""
    return _gamma(prior, model.linearize(p_hat, prior.epoch))


def innovation_covariance(
    prior: FilterState, model: ParametricLinearModel, p_hat: FloatArray
) -> FloatArray:
    """Ξ̄ = H̄ P⁻ H̄ᵀ + R."""
    return _xi(prior, model.h(p_hat, prior.epoch), model.r)


def _gain_kf(prior: FilterState, h: FloatArray, xi: FloatArray) -> FloatArray:
    return solve_spd_right(prior.p_cov @ h.T, xi, epoch=prior.epoch)


def gain_kf(
    prior: FilterState, model: ParametricLinearModel, p_hat: FloatArray
) -> FloatArray:
    """Minimum-variance gain K = P⁻H̄ᵀ Ξ̄⁻¹."""
    h = model.h(p_hat, prior.epoch)
    return _gain_kf(prior, h, _xi(prior, h, model.r))


def _gain_adkf(
    prior: FilterState,
    gamma: FloatArray,
    w_a: FloatArray,
    h: FloatArray,
    xi: FloatArray,
) -> FloatArray:
    return solve_spd_right(
        prior.p_cov @ h.T + prior.s @ w_a @ gamma.T,
        xi + gamma @ w_a @ gamma.T,
        what="desensitized innovation matrix",
        epoch=prior.epoch,
    )


def gain_adkf(
    prior: FilterState,
    gamma: FloatArray,
    w_a: FloatArray,
    model: ParametricLinearModel,
    p_hat: FloatArray,
) -> FloatArray:
    """Closed-form desensitized gain K = (P⁻H̄ᵀ + S⁻W_aγᵀ)(Ξ̄ + γW_aγᵀ)⁻¹.

    With W_a = 0 this is exactly `gain_kf`.
    """
    h = model.h(p_hat, prior.epoch)
    return _gain_adkf(prior, gamma, w_a, h, _xi(prior, h, model.r))


def _ksdkf_terms(
    prior: FilterState,
    gamma: FloatArray,
    w_list: Sequence[FloatArray],
    h: FloatArray,
) -> FloatArray:
    rhs = prior.p_cov @ h.T
    for i, w in enumerate(w_list):
        rhs = rhs + w @ np.outer(prior.s[:, i], gamma[:, i])
    return rhs


def _gain_ksdkf(
    prior: FilterState,
    gamma: FloatArray,
    w_list: Sequence[FloatArray],
    h: FloatArray,
    xi: FloatArray,
) -> FloatArray:
    if len(w_list) != gamma.shape[1]:
        raise DimensionError(
            f"expected {gamma.shape[1]} sensitivity weights, got {len(w_list)}"
        )
    n, m = prior.n_states, gamma.shape[0]
    # vec(W K G) = (Gᵀ ⊗ W) vec(K) with column-major vec
    system = np.kron(xi.T, np.eye(n))
    for i, w in enumerate(w_list):
        g = gamma[:, i]
        system += np.kron(np.outer(g, g).T, w)
    rhs = _ksdkf_terms(prior, gamma, w_list, h)
    vec_k = solve_linear(
        system,
        rhs.reshape(-1, order="F"),
        what="vectorized KSDKF gain equation",
        epoch=prior.epoch,
    )
    return vec_k.reshape((n, m), order="F")


def gain_ksdkf(
    prior: FilterState,
    gamma: FloatArray,
    w_list: Sequence[FloatArray],
    model: ParametricLinearModel,
    p_hat: FloatArray,
) -> FloatArray:
    """Gain solving K Ξ̄ + Σ W_i K γ_iγ_iᵀ = P⁻H̄ᵀ + Σ W_i σ⁻_i γ_iᵀ.

    The matrix equation is vectorized into a dense (nm)×(nm) system.

    Raises:
        SingularEquationError: the vectorized system is singular.
    """
    h = model.h(p_hat, prior.epoch)
    return _gain_ksdkf(prior, gamma, w_list, h, _xi(prior, h, model.r))


def ksdkf_residual(
    gain: FloatArray,
    prior: FilterState,
    gamma: FloatArray,
    w_list: Sequence[FloatArray],
    model: ParametricLinearModel,
    p_hat: FloatArray,
) -> float:
    """Relative Frobenius residual of the KSDKF gain equation at `gain`."""
    h = model.h(p_hat, prior.epoch)
    lhs = gain @ _xi(prior, h, model.r)
    for i, w in enumerate(w_list):
        g = gamma[:, i]
        lhs = lhs + w @ gain @ np.outer(g, g)
    rhs = _ksdkf_terms(prior, gamma, w_list, h)
    scale = float(np.linalg.norm(rhs))
    return float(np.linalg.norm(lhs - rhs)) / (scale if scale > 0.0 else 1.0)


def _gain(
    prior: FilterState,
    gamma: FloatArray,
    scheme: WeightingScheme,
    h: FloatArray,
    xi: FloatArray,
) -> FloatArray:
    if isinstance(scheme, Conventional):
        return _gain_kf(prior, h, xi)
    if isinstance(scheme, Adkf):
        return _gain_adkf(prior, gamma, scheme.w_a, h, xi)
    return _gain_ksdkf(prior, gamma, scheme.w_list, h, xi)


def compute_gain(
    prior: FilterState,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
    gamma: FloatArray | None = None,
) -> FloatArray:
    lin = model.linearize(p_hat, prior.epoch)
    if gamma is None:
        gamma = _gamma(prior, lin)
    return _gain(prior, gamma, scheme, lin.h, _xi(prior, lin.h, model.r))


def cost_adkf(posterior: FilterState, w_a: FloatArray) -> tuple[float, float]:
    """(Tr(P⁺) + Tr(S⁺W_aS⁺ᵀ), Tr(S⁺W_aS⁺ᵀ))."""
    penalty = float(np.trace(posterior.s @ w_a @ posterior.s.T))
    return float(np.trace(posterior.p_cov)) + penalty, penalty


def cost_ksdkf(
    posterior: FilterState, w_list: Sequence[FloatArray]
) -> tuple[float, float]:
    """(Tr(P⁺) + Σ σ⁺_iᵀW_iσ⁺_i, Σ σ⁺_iᵀW_iσ⁺_i)."""
    penalty = float(
        sum(posterior.s[:, i] @ w @ posterior.s[:, i] for i, w in enumerate(w_list))
    )
    return float(np.trace(posterior.p_cov)) + penalty, penalty


def scheme_cost(posterior: FilterState, scheme: WeightingScheme) -> tuple[float, float]:
    """Cost and penalty a scheme minimizes; Conventional has no penalty."""
    if isinstance(scheme, Adkf):
        return cost_adkf(posterior, scheme.w_a)
    if isinstance(scheme, Ksdkf):
        return cost_ksdkf(posterior, scheme.w_list)
    return float(np.trace(posterior.p_cov)), 0.0


def _posterior_moments(
    prior: FilterState,
    gain: FloatArray,
    h: FloatArray,
    r: FloatArray,
    gamma: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    # Joseph form holds for any gain, not only the minimum-variance one
    i_kh = np.eye(prior.n_states) - gain @ h
    p_cov = symmetrize(i_kh @ prior.p_cov @ i_kh.T + gain @ r @ gain.T)
    s = prior.s - gain @ gamma
    return p_cov, s


def gain_cost(
    gain: FloatArray,
    prior: FilterState,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
) -> float:
    """Total posterior cost of `scheme` as a function of an arbitrary gain."""
    lin = model.linearize(p_hat, prior.epoch)
    p_cov, s = _posterior_moments(prior, gain, lin.h, model.r, _gamma(prior, lin))
    posterior = FilterState(xhat=prior.xhat.copy(), p_cov=p_cov, s=s, epoch=prior.epoch)
    return scheme_cost(posterior, scheme)[0]


def _update(
    prior: FilterState,
    gain: FloatArray,
    z: FloatArray,
    h: FloatArray,
    r: FloatArray,
    gamma: FloatArray,
    scheme: WeightingScheme,
) -> tuple[FilterState, StepRecord]:
    ensure_finite(gain, what="gain", epoch=prior.epoch)
    innovation = z - h @ prior.xhat
    xhat = prior.xhat + gain @ innovation
    p_cov, s = _posterior_moments(prior, gain, h, r, gamma)
    ensure_finite(xhat, p_cov, s, what="measurement update", epoch=prior.epoch)
    posterior = FilterState(xhat=xhat, p_cov=p_cov, s=s, epoch=prior.epoch)
    total, penalty = scheme_cost(posterior, scheme)
    record = StepRecord(
        gain=gain,
        innovation=innovation,
        gamma=gamma,
        cost_total=total,
        cost_penalty=penalty,
        trace_p=float(np.trace(p_cov)),
        epoch=prior.epoch,
    )
    return posterior, record


def measurement_update(
    prior: FilterState,
    gain: FloatArray,
    z: FloatArray,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
) -> tuple[FilterState, StepRecord]:
    """Blend the prior with z using `gain`; P⁺ by the Joseph form, S⁺ = S⁻ − Kγ."""
    z = model.check_measurement(z)
    lin = model.linearize(p_hat, prior.epoch)
    return _update(prior, gain, z, lin.h, model.r, _gamma(prior, lin), scheme)


def _step(
    state: FilterState,
    z: FloatArray,
    lin_old: Linearization,
    lin_new: Linearization,
    model: ParametricLinearModel,
    scheme: WeightingScheme,
) -> tuple[FilterState, StepRecord]:
    # Φ̄ belongs to the old epoch, H̄ to the new one
    prior = _predict(state, lin_old, model.q)
    gamma = _gamma(prior, lin_new)
    h = lin_new.h
    gain = _gain(prior, gamma, scheme, h, _xi(prior, h, model.r))
    return _update(prior, gain, z, h, model.r, gamma, scheme)


def step(
    state: FilterState,
    z: FloatArray,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
) -> tuple[FilterState, StepRecord]:
    """One predict-update cycle."""
    model.require_domain("discrete")
    z = model.check_measurement(z)
    return _step(
        state,
        z,
        model.linearize(p_hat, state.epoch),
        model.linearize(p_hat, state.epoch + 1),
        model,
        scheme,
    )


@dataclass(frozen=True)
class FilterRun:
    """Posterior states and step records of a run, epochs 1..N."""

    initial: FilterState
    states: list[FilterState]
    records: list[StepRecord]

    @property
    def estimates(self) -> FloatArray:
        return np.array([s.xhat for s in self.states])

    @property
    def gains(self) -> list[FloatArray]:
        return [r.gain for r in self.records]


def run_filter(
    model: ParametricLinearModel,
    p_hat: FloatArray,
    x0: FloatArray,
    p0: FloatArray,
    measurements: Sequence[FloatArray] | FloatArray,
    scheme: WeightingScheme,
) -> FilterRun:
    """Filter a measurement sequence z_1..z_N starting from (x̂₀, P₀, S₀ = 0).

    Time-invariant models are linearized once for the whole run.
    """
    model.require_domain("discrete")
    p_hat = model.check_parameters(p_hat)
    check_scheme(scheme, model.n_states, model.n_params)
    fixed = model.linearize(p_hat) if model.time_invariant else None
    state = initial = FilterState.initial(x0, p0, model.n_params)
    states: list[FilterState] = []
    records: list[StepRecord] = []
    for z in measurements:
        z = model.check_measurement(z)
        if fixed is not None:
            lin_old = lin_new = fixed
        else:
            lin_old = model.linearize(p_hat, state.epoch)
            lin_new = model.linearize(p_hat, state.epoch + 1)
        state, record = _step(state, z, lin_old, lin_new, model, scheme)
        states.append(state)
        records.append(record)
    return FilterRun(initial=initial, states=states, records=records)
