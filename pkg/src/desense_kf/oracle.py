"""Finite-difference oracles for the analytic sensitivities and gain costs.

The sensitivity oracle replays a nominal run with its recorded gains held
fixed while the parameter is perturbed, which is what the analytic
propagation assumes (∂K/∂p = 0). Recomputing the gains in the perturbed runs
would measure a different quantity.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .filters.discrete import FilterRun
from .model import ParametricLinearModel
from .types import FloatArray, as_vector


@dataclass(frozen=True)
class FrozenGainReplay:
    gains: tuple[FloatArray, ...]
    measurements: tuple[FloatArray, ...]
    p_perturbed: FloatArray

    def __post_init__(self):
        if len(self.gains) != len(self.measurements):
            raise ValueError(
                f"{len(self.gains)} gains but {len(self.measurements)} measurements"
            )


def record_replay(
    run: FilterRun, measurements: Sequence[FloatArray], p: FloatArray
) -> FrozenGainReplay:
    return FrozenGainReplay(
        gains=tuple(run.gains),
        measurements=tuple(as_vector(z) for z in measurements),
        p_perturbed=as_vector(p),
    )


def replay_estimates(
    model: ParametricLinearModel, x0: FloatArray, replay: FrozenGainReplay
) -> FloatArray:
    """Posterior estimates x̂_1..x̂_N of the frozen-gain filter at replay.p_perturbed."""
    p = model.check_parameters(replay.p_perturbed)
    xhat = as_vector(x0, "x0")
    estimates = np.empty((len(replay.gains), xhat.shape[0]))
    for k, (gain, z) in enumerate(zip(replay.gains, replay.measurements)):
        prior = model.phi(p, k) @ xhat
        xhat = prior + gain @ (z - model.h(p, k + 1) @ prior)
        estimates[k] = xhat
    return estimates


def fd_sensitivity(
    model: ParametricLinearModel,
    p_hat: FloatArray,
    x0: FloatArray,
    gains: Sequence[FloatArray],
    measurements: Sequence[FloatArray],
    delta: float = 1e-6,
) -> list[FloatArray]:
    """Central-difference ∂x̂_k/∂p for every epoch, gains and measurements frozen.

    Returns:
        list of n×ℓ matrices, one per epoch 1..N
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    p_hat = model.check_parameters(p_hat)
    columns = []
    for i in range(model.n_params):
        shift = np.zeros_like(p_hat)
        shift[i] = delta
        plus, minus = (
            replay_estimates(
                model,
                x0,
                FrozenGainReplay(tuple(gains), tuple(measurements), p_hat + sign * shift),
            )
            for sign in (1.0, -1.0)
        )
        columns.append((plus - minus) / (2.0 * delta))
    # columns[i] is N×n; regroup into per-epoch n×ℓ
    return list(np.stack(columns, axis=2))


def sensitivity_relative_error(
    analytic: Sequence[FloatArray], numeric: Sequence[FloatArray], floor: float = 1e-8
) -> float:
    """Worst per-epoch max|S − S_fd| / max|S| over a trajectory."""
    worst = 0.0
    for a, f in zip(analytic, numeric, strict=True):
        scale = max(float(np.max(np.abs(a))), floor)
        worst = max(worst, float(np.max(np.abs(a - f))) / scale)
    return worst


def fd_cost_gradient(
    cost: Callable[[FloatArray], float], gain: FloatArray, eps: float = 1e-6
) -> FloatArray:
    """Entrywise central difference of `cost` at `gain`."""
    grad = np.zeros_like(gain, dtype=np.float64)
    for idx in np.ndindex(gain.shape):
        plus = gain.astype(np.float64)
        minus = gain.astype(np.float64)
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (cost(plus) - cost(minus)) / (2.0 * eps)
    return grad


def trace_identity_residuals(
    rng: np.random.Generator, n_pairs: int = 10, eps: float = 1e-6
) -> dict[str, float]:
    """Largest relative error of the trace derivative rules on random matrices.

    ∂Tr(KP)/∂K = Pᵀ, ∂Tr(PKᵀ)/∂K = P, ∂Tr(KPKᵀ)/∂K = KPᵀ + KP.
    """
    worst = {"tr_kp": 0.0, "tr_pkt": 0.0, "tr_kpkt": 0.0}

    def rel(a: FloatArray, b: FloatArray) -> float:
        return float(np.max(np.abs(a - b))) / (1.0 + float(np.max(np.abs(b))))

    for _ in range(n_pairs):
        n, m = rng.integers(1, 5, size=2)
        k = rng.standard_normal((n, m))
        p_lin = rng.standard_normal((m, n))
        p_same = rng.standard_normal((n, m))
        p_sq = rng.standard_normal((m, m))
        worst["tr_kp"] = max(
            worst["tr_kp"],
            rel(fd_cost_gradient(lambda g: float(np.trace(g @ p_lin)), k, eps), p_lin.T),
        )
        worst["tr_pkt"] = max(
            worst["tr_pkt"],
            rel(fd_cost_gradient(lambda g: float(np.trace(p_same @ g.T)), k, eps), p_same),
        )
        worst["tr_kpkt"] = max(
            worst["tr_kpkt"],
            rel(
                fd_cost_gradient(lambda g: float(np.trace(g @ p_sq @ g.T)), k, eps),
                k @ p_sq.T + k @ p_sq,
            ),
        )
    return worst
