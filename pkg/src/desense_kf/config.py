from __future__ import annotations

from typing import Literal

from pydantic import Field

from desense_kf.types import BaseModel


class NumericsConfig(BaseModel):
    """Tolerances shared by the filters and the covariance health checks"""

    condition_threshold: float = Field(
        default=1e12,
        gt=1.0,
        description="Condition estimate above which a gain solve is treated as singular",
    )
    symmetry_rtol: float = Field(
        default=1e-10,
        ge=0.0,
        description="Relative asymmetry tolerated in covariance matrices",
    )
    psd_rtol: float = Field(
        default=1e-10,
        ge=0.0,
        description="Minimum eigenvalue tolerated as a fraction of the trace (negated)",
    )
    fd_step: float = Field(
        default=1e-5,
        gt=0.0,
        description="Central-difference step for models without analytic derivatives",
    )


class IntegratorConfig(BaseModel):
    """Fixed-step integration settings for the continuous-time filters"""

    dt: float = Field(default=0.01, gt=0.0, description="Step size (s)")
    method: Literal["rk4"] = Field(
        default="rk4", description="Integration method (only fixed-step RK4)"
    )


class DesenseConfig(BaseModel):
    numerics: NumericsConfig = Field(
        default_factory=NumericsConfig, description="Numerical tolerances"
    )
    integrator: IntegratorConfig = Field(
        default_factory=IntegratorConfig,
        description="Default continuous-time integrator",
    )


__config = DesenseConfig()


def get_config() -> DesenseConfig:
    """Get the global desense_kf config.

    Defaults apply until `set_config` is called.

    Returns:
        DesenseConfig: Current configuration
    """
    return __config


def set_config(config: DesenseConfig):
    """Override the global config.

    Args:
        config (DesenseConfig): Configuration object to set
    """
    global __config
    __config = config
