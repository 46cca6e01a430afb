"""Continuous-time desensitized Kalman filtering.

The estimate, covariance and sensitivity obey the coupled ODEs

    dx̂/dt = Φ̄x̂ + K(z − H̄x̂)
    dP/dt = (Φ̄ − KH̄)P + P(Φ̄ − KH̄)ᵀ + Q + KRKᵀ
    dS/dt = Φ̄S + (∂Φ̄/∂p)x̂ − Kγ,   γ = H̄S + (∂H̄/∂p)x̂

with the gain recomputed from the current (P, S) at every evaluation. They
are integrated with fixed-step RK4 and the measurement held constant over
each step.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..config import IntegratorConfig, get_config
from ..exceptions import DimensionError
from ..linalg import ensure_finite, solve_spd_right, symmetrize
from ..model import ParametricLinearModel
from ..types import FloatArray, as_matrix, as_vector
from .state import Adkf, Conventional, WeightingScheme, check_scheme

Rates = tuple[FloatArray, FloatArray, FloatArray]


@dataclass(frozen=True)
class ContinuousFilterState:
    t: float
    xhat: FloatArray
    p_cov: FloatArray
    s: FloatArray

    @classmethod
    def initial(
        cls, x0: FloatArray, p0: FloatArray, n_params: int, t0: float = 0.0
    ) -> ContinuousFilterState:
        x0 = as_vector(x0, "x0").copy()
        return cls(
            t=t0,
            xhat=x0,
            p_cov=as_matrix(p0, "p0").copy(),
            s=np.zeros((x0.shape[0], n_params)),
        )


def continuous_gain_kf(
    p_cov: FloatArray, h: FloatArray, r: FloatArray, time: float | None = None
) -> FloatArray:
    """Kalman–Bucy gain P H̄ᵀ R⁻¹."""
    return solve_spd_right(p_cov @ h.T, r, what="measurement noise density", time=time)


def continuous_gain_adkf(
    p_cov: FloatArray,
    s: FloatArray,
    gamma: FloatArray,
    w_a: FloatArray,
    h: FloatArray,
    r: FloatArray,
    time: float | None = None,
) -> FloatArray:
    """K = (P H̄ᵀ + S W_a γᵀ) R⁻¹.

    The S W_a γᵀ ordering is the one with an n×m result.
    """
    return solve_spd_right(
        p_cov @ h.T + s @ w_a @ gamma.T, r, what="measurement noise density", time=time
    )


def continuous_gain_ksdkf(
    p_cov: FloatArray,
    sigmas: FloatArray,
    gammas: FloatArray,
    w_list: Sequence[FloatArray],
    h: FloatArray,
    r: FloatArray,
    time: float | None = None,
) -> FloatArray:
    """K = (P H̄ᵀ + Σ W_i σ_i γ_iᵀ) R⁻¹; σ_i, γ_i are the columns of `sigmas`, `gammas`."""
    if len(w_list) != sigmas.shape[1]:
        raise DimensionError(
            f"expected {sigmas.shape[1]} sensitivity weights, got {len(w_list)}"
        )
    numerator = p_cov @ h.T
    for i, w in enumerate(w_list):
        numerator = numerator + w @ np.outer(sigmas[:, i], gammas[:, i])
    return solve_spd_right(numerator, r, what="measurement noise density", time=time)


def _rates(
    xhat: FloatArray,
    p_cov: FloatArray,
    s: FloatArray,
    z: FloatArray,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
    time: float,
) -> Rates:
    phi = model.phi(p_hat)
    h = model.h(p_hat)
    gamma = h @ s + model.h_jacobian_action(p_hat, xhat)
    if isinstance(scheme, Conventional):
        gain = continuous_gain_kf(p_cov, h, model.r, time)
    elif isinstance(scheme, Adkf):
        gain = continuous_gain_adkf(p_cov, s, gamma, scheme.w_a, h, model.r, time)
    else:
        gain = continuous_gain_ksdkf(p_cov, s, gamma, scheme.w_list, h, model.r, time)
    a = phi - gain @ h
    dxhat = phi @ xhat + gain @ (z - h @ xhat)
    dp = a @ p_cov + p_cov @ a.T + model.q + gain @ model.r @ gain.T
    ds = phi @ s + model.phi_jacobian_action(p_hat, xhat) - gain @ gamma
    return dxhat, dp, ds


def derivatives(
    state: ContinuousFilterState,
    z: FloatArray,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
) -> Rates:
    """(dx̂/dt, dP/dt, dS/dt) at `state` for measurement `z`."""
    model.require_domain("continuous")
    return _rates(
        state.xhat, state.p_cov, state.s, model.check_measurement(z),
        model, p_hat, scheme, state.t,
    )


def integrate_step(
    state: ContinuousFilterState,
    z: FloatArray,
    model: ParametricLinearModel,
    p_hat: FloatArray,
    scheme: WeightingScheme,
    cfg: IntegratorConfig | None = None,
) -> ContinuousFilterState:
    """Advance one RK4 step of size cfg.dt with z held constant."""
    model.require_domain("continuous")
    cfg = cfg or get_config().integrator
    dt = cfg.dt
    z = model.check_measurement(z)
    t = state.t
    y0 = (state.xhat, state.p_cov, state.s)

    def shifted(k: Rates, scale: float) -> Rates:
        return tuple(y + scale * dy for y, dy in zip(y0, k))  # type: ignore[return-value]

    k1 = _rates(*y0, z, model, p_hat, scheme, t)
    k2 = _rates(*shifted(k1, dt / 2), z, model, p_hat, scheme, t + dt / 2)
    k3 = _rates(*shifted(k2, dt / 2), z, model, p_hat, scheme, t + dt / 2)
    k4 = _rates(*shifted(k3, dt), z, model, p_hat, scheme, t + dt)
    xhat, p_cov, s = (
        y + dt / 6.0 * (a + 2.0 * b + 2.0 * c + d)
        for y, a, b, c, d in zip(y0, k1, k2, k3, k4)
    )
    p_cov = symmetrize(p_cov)
    ensure_finite(xhat, p_cov, s, what="continuous filter state", time=t + dt)
    return ContinuousFilterState(t=t + dt, xhat=xhat, p_cov=p_cov, s=s)


def run_continuous(
    model: ParametricLinearModel,
    p_hat: FloatArray,
    x0: FloatArray,
    p0: FloatArray,
    measurements: Sequence[FloatArray] | FloatArray,
    scheme: WeightingScheme,
    cfg: IntegratorConfig | None = None,
    t0: float = 0.0,
) -> list[ContinuousFilterState]:
    """Integrate over len(measurements) steps; sample k is held on [t_k, t_k + dt)."""
    model.require_domain("continuous")
    p_hat = model.check_parameters(p_hat)
    check_scheme(scheme, model.n_states, model.n_params)
    state = ContinuousFilterState.initial(x0, p0, model.n_params, t0)
    trajectory = [state]
    for z in measurements:
        state = integrate_step(state, z, model, p_hat, scheme, cfg)
        trajectory.append(state)
    return trajectory


def simulate_truth_em(
    model: ParametricLinearModel,
    p_true: FloatArray,
    x0: FloatArray,
    rng: np.random.Generator,
    dt: float,
    n_steps: int,
) -> tuple[FloatArray, FloatArray]:
    """Euler–Maruyama truth x(t_k) and sampled measurements z_k.

    The white measurement noise of density R is sampled as N(0, R/dt).

    Returns:
        (states (n_steps+1)×n, measurements n_steps×m); z_k belongs to [t_k, t_k + dt)
    """
    model.require_domain("continuous")
    phi = model.phi(p_true)
    h = model.h(p_true)
    n, m = model.n_states, model.n_measurements
    states = np.empty((n_steps + 1, n))
    measurements = np.empty((n_steps, m))
    states[0] = as_vector(x0, "x0")
    for k in range(n_steps):
        x = states[k]
        measurements[k] = h @ x + rng.multivariate_normal(np.zeros(m), model.r / dt)
        w = rng.multivariate_normal(np.zeros(n), model.q * dt)
        states[k + 1] = x + dt * (phi @ x) + w
    return states, measurements
