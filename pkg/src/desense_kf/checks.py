"""Numerical self-checks behind ``desense-kf verify``.

Each check exercises one property of the gains or the sensitivity
propagation on random priors or the benchmark and reports its worst
observed margin against a tolerance.
"""

from __future__ import annotations

import time
from collections.abc import Callable

import numpy as np

from .filters.discrete import (
    gain_adkf,
    gain_cost,
    gain_kf,
    gain_ksdkf,
    innovation_matrix,
    ksdkf_residual,
    run_filter,
    time_update,
)
from .filters.state import Adkf, FilterState, Ksdkf
from .logging import debug_log, logger
from .model import AffineModel, make_benchmark
from .montecarlo import simulate_truth
from .oracle import fd_cost_gradient, fd_sensitivity, sensitivity_relative_error, trace_identity_residuals
from .types import BaseModel, FloatArray

CheckOutcome = tuple[float, str]


class CheckReport(BaseModel):
    name: str  # Check name
    passed: bool
    margin: float  # Worst observed error measure, compared against tolerance
    tolerance: float
    detail: str = ""
    time_used: float


def random_psd(rng: np.random.Generator, n: int, scale: float = 1.0) -> FloatArray:
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T) / n


def random_model(
    rng: np.random.Generator,
    n_states: int | None = None,
    n_measurements: int | None = None,
    n_params: int | None = None,
) -> AffineModel:
    """Random affine model with a stable Φ₀ (spectral radius 0.9) and R ⪰ 0.5·I."""
    n = n_states or int(rng.integers(1, 5))
    m = n_measurements or int(rng.integers(1, 4))
    ell = n_params or int(rng.integers(1, 4))
    phi0 = rng.standard_normal((n, n))
    phi0 *= 0.9 / max(float(np.max(np.abs(np.linalg.eigvals(phi0)))), 1e-3)
    return AffineModel(
        phi0=phi0,
        h0=rng.standard_normal((m, n)),
        q=random_psd(rng, n, 0.1),
        r=random_psd(rng, m) + 0.5 * np.eye(m),
        phi_coeffs=list(0.1 * rng.standard_normal((ell, n, n))),
        h_coeffs=list(0.1 * rng.standard_normal((ell, m, n))),
        n_params=ell,
    )


def random_prior(
    rng: np.random.Generator, model: AffineModel
) -> tuple[FilterState, FloatArray]:
    """A prior (x̂⁻, P⁻, S⁻) at epoch 1 and a nominal parameter vector."""
    n, ell = model.n_states, model.n_params
    prior = FilterState(
        xhat=5.0 * rng.standard_normal(n),
        p_cov=random_psd(rng, n) + 0.1 * np.eye(n),
        s=rng.standard_normal((n, ell)),
        epoch=1,
    )
    return prior, 0.1 * rng.standard_normal(ell)


def _gain_scale(gain: FloatArray) -> float:
    return max(1.0, float(np.max(np.abs(gain))))


def check_reduction(rng: np.random.Generator, n_priors: int = 1000) -> CheckOutcome:
    worst = 0.0
    for _ in range(n_priors):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        gamma = innovation_matrix(prior, model, p_hat)
        k_kf = gain_kf(prior, model, p_hat)
        ell, n = model.n_params, model.n_states
        k_a = gain_adkf(prior, gamma, np.zeros((ell, ell)), model, p_hat)
        k_s = gain_ksdkf(prior, gamma, [np.zeros((n, n))] * ell, model, p_hat)
        gap = max(np.max(np.abs(k_a - k_kf)), np.max(np.abs(k_s - k_kf)))
        worst = max(worst, float(gap) / _gain_scale(k_kf))
    return worst, f"{n_priors} random priors, W = 0 against the Kalman gain"


def check_stationarity(
    rng: np.random.Generator, n_priors: int = 100, perturb_gain: float = 0.0
) -> CheckOutcome:
    worst = 0.0
    for _ in range(n_priors):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        gamma = innovation_matrix(prior, model, p_hat)
        ell, n = model.n_params, model.n_states
        adkf = Adkf(random_psd(rng, ell))
        ksdkf = Ksdkf(tuple(random_psd(rng, n) for _ in range(ell)))
        candidates = (
            (adkf, gain_adkf(prior, gamma, adkf.w_a, model, p_hat)),
            (ksdkf, gain_ksdkf(prior, gamma, ksdkf.w_list, model, p_hat)),
        )
        for scheme, gain in candidates:
            gain = gain + perturb_gain

            def cost(k: FloatArray, scheme=scheme) -> float:
                return gain_cost(k, prior, model, p_hat, scheme)

            grad = fd_cost_gradient(cost, gain, eps=1e-5)
            worst = max(worst, float(np.max(np.abs(grad))) / (1.0 + abs(cost(gain))))
    return worst, f"{n_priors} random priors, ADKF and KSDKF cost gradients"


def check_ksdkf_residual(rng: np.random.Generator, n_priors: int = 100) -> CheckOutcome:
    worst = 0.0
    for _ in range(n_priors):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        gamma = innovation_matrix(prior, model, p_hat)
        w_list = [random_psd(rng, model.n_states) for _ in range(model.n_params)]
        gain = gain_ksdkf(prior, gamma, w_list, model, p_hat)
        worst = max(worst, ksdkf_residual(gain, prior, gamma, w_list, model, p_hat))
    return worst, f"{n_priors} random priors, relative Frobenius residual"


def check_scalar_equivalence(rng: np.random.Generator, n_models: int = 100) -> CheckOutcome:
    worst = 0.0
    for _ in range(n_models):
        model = random_model(rng, n_params=1)
        prior, p_hat = random_prior(rng, model)
        gamma = innovation_matrix(prior, model, p_hat)
        w = float(rng.uniform(0.01, 2.0))
        k_s = gain_ksdkf(prior, gamma, [w * np.eye(model.n_states)], model, p_hat)
        k_a = gain_adkf(prior, gamma, np.array([[w]]), model, p_hat)
        worst = max(worst, float(np.max(np.abs(k_s - k_a))) / _gain_scale(k_a))
    return worst, f"{n_models} scalar-parameter models, W_1 = w·I against W_a = [w]"


def _sensitivity_gap(
    rng: np.random.Generator,
    model: AffineModel,
    p_hat: FloatArray,
    x0: FloatArray,
    p0: FloatArray,
    scheme: Adkf,
    n_epochs: int,
) -> float:
    _, measurements = simulate_truth(model, p_hat, x0, rng, n_epochs)
    run = run_filter(model, p_hat, x0, p0, measurements, scheme)
    numeric = fd_sensitivity(model, p_hat, x0, run.gains, list(measurements), delta=1e-6)
    return sensitivity_relative_error([s.s for s in run.states], numeric)


def check_sensitivity_oracle(
    rng: np.random.Generator, n_models: int = 20, n_epochs: int = 50
) -> CheckOutcome:
    model, constants = make_benchmark()
    worst = _sensitivity_gap(
        rng,
        model,
        constants.nominal,
        constants.x0,
        constants.p0_cov,
        Adkf(constants.referential_weight),
        n_epochs,
    )
    for _ in range(n_models):
        model = random_model(rng)
        _, p_hat = random_prior(rng, model)
        worst = max(
            worst,
            _sensitivity_gap(
                rng,
                model,
                p_hat,
                5.0 * rng.standard_normal(model.n_states),
                0.1 * np.eye(model.n_states),
                Adkf(0.1 * np.eye(model.n_params)),
                n_epochs,
            ),
        )
    return worst, f"benchmark and {n_models} random models, {n_epochs} epochs, δ = 1e-6"


def check_one_step_optimality(rng: np.random.Generator, n_epochs: int = 50) -> CheckOutcome:
    """J_a after an ADKF update never exceeds J_a after a KF update from the same prior."""
    model, constants = make_benchmark()
    scheme = Adkf(constants.referential_weight)
    _, measurements = simulate_truth(model, constants.nominal, constants.x0, rng, n_epochs)
    run = run_filter(
        model, constants.nominal, constants.x0, constants.p0_cov, measurements, scheme
    )
    worst = -np.inf
    not_strict = 0
    for posterior in [run.initial, *run.states[:-1]]:
        prior = time_update(posterior, model, constants.nominal)
        gamma = innovation_matrix(prior, model, constants.nominal)
        j_adkf = gain_cost(
            gain_adkf(prior, gamma, scheme.w_a, model, constants.nominal),
            prior, model, constants.nominal, scheme,
        )
        j_kf = gain_cost(
            gain_kf(prior, model, constants.nominal), prior, model, constants.nominal, scheme
        )
        worst = max(worst, (j_adkf - j_kf) / (1.0 + abs(j_kf)))
        if np.any(prior.s != 0.0) and not j_adkf < j_kf:
            not_strict += 1
    detail = f"benchmark, {n_epochs} epochs"
    if not_strict:
        # report a violation even if the margin looks fine
        return float("inf"), f"{detail}; {not_strict} epochs without strict improvement"
    return float(worst), detail


def check_trace_identities(rng: np.random.Generator, n_pairs: int = 10) -> CheckOutcome:
    residuals = trace_identity_residuals(rng, n_pairs)
    detail = ", ".join(f"{k} {v:.2e}" for k, v in residuals.items())
    return max(residuals.values()), f"{n_pairs} random pairs each: {detail}"


def _timed(
    name: str, tolerance: float, check: Callable[[], CheckOutcome]
) -> CheckReport:
    time_start = time.perf_counter()
    try:
        margin, detail = check()
        passed = bool(margin <= tolerance)
    except Exception as e:
        logger.opt(exception=e).warning(f"Check {name} raised")
        margin, detail, passed = float("inf"), f"{type(e).__name__}: {e}", False
    time_used = time.perf_counter() - time_start
    debug_log(f"{name}: margin {margin:.3e} (tolerance {tolerance:.1e}), {time_used:.2f}s")
    return CheckReport(
        name=name,
        passed=passed,
        margin=margin,
        tolerance=tolerance,
        detail=detail,
        time_used=time_used,
    )


def run_all_checks(seed: int = 0, perturb_gain: float = 0.0) -> list[CheckReport]:
    """Run every verification suite with its own generator derived from `seed`.

    Args:
        seed: root seed
        perturb_gain: added to every entry of the gains in the stationarity
            check; any nonzero value must make that check fail

    Returns:
        list[CheckReport]: one report per suite, in a fixed order
    """
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(7)]
    suites: list[tuple[str, float, Callable[[], CheckOutcome]]] = [
        ("fd-sensitivity", 1e-4, lambda: check_sensitivity_oracle(streams[0])),
        (
            "gain-stationarity",
            1e-5,
            lambda: check_stationarity(streams[1], perturb_gain=perturb_gain),
        ),
        ("ksdkf-equation-residual", 1e-9, lambda: check_ksdkf_residual(streams[2])),
        ("scalar-parameter-equivalence", 1e-9, lambda: check_scalar_equivalence(streams[3])),
        ("reduction-identities", 1e-12, lambda: check_reduction(streams[4])),
        ("trace-identities", 1e-6, lambda: check_trace_identities(streams[5])),
        ("one-step-optimality", 1e-12, lambda: check_one_step_optimality(streams[6])),
    ]
    reports = [_timed(name, tol, fn) for name, tol, fn in suites]
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.warning(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    else:
        logger.info(f"All {len(reports)} checks passed")
    return reports
