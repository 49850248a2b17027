import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..errors import DomainError
from .signal_core import (
    ModulationConfig,
    Phasor,
    SampledTrace,
    TraceConfig,
    depth_to_phase,
    superpose,
    trace_length,
)

GAMMA_R_DEFAULT = 0.1794


@dataclass(frozen=True)
class TwoPathScene:
    gamma_r: float
    d_as: float
    d_ab: float
    rho_sas: float
    rho_sab: float
    rho_aba: float
    rho_bas: float

    def __post_init__(self):
        if not self.gamma_r > 0:
            raise DomainError(f"gamma_r must be > 0, got {self.gamma_r}")
        if not self.d_as > 0:
            raise DomainError(f"d_as must be > 0, got {self.d_as}")
        if not self.d_ab >= 0:
            raise DomainError(f"d_ab must be >= 0, got {self.d_ab}")
        for name in ("rho_sas", "rho_sab", "rho_aba", "rho_bas"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {value}")

    @property
    def rho_multipath(self) -> float:
        return self.rho_sab * self.rho_aba * self.rho_bas


class Bounds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    min: float
    max: float

    @model_validator(mode="after")
    def _ordered(self) -> "Bounds":
        if self.min > self.max:
            raise ValueError(f"bounds min {self.min} exceeds max {self.max}")
        return self

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.min, self.max))


class SceneRanges(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma_r: float = Field(default=GAMMA_R_DEFAULT, gt=0)
    d_as: Bounds = Bounds(min=1.4, max=2.4)
    d_ab: Bounds = Bounds(min=0.0, max=0.15)
    rho_sas: Bounds = Bounds(min=0.0, max=1.0)
    rho_sab: Bounds = Bounds(min=0.0, max=1.0)
    rho_aba: Bounds = Bounds(min=0.0, max=1.0)
    rho_bas: Bounds = Bounds(min=0.0, max=1.0)

    @model_validator(mode="after")
    def _within_scene_domain(self) -> "SceneRanges":
        if self.d_as.min <= 0:
            raise ValueError("d_as range must be strictly positive")
        if self.d_ab.min < 0:
            raise ValueError("d_ab range must be non-negative")
        for name in ("rho_sas", "rho_sab", "rho_aba", "rho_bas"):
            bounds = getattr(self, name)
            if bounds.min < 0 or bounds.max > 1:
                raise ValueError(f"{name} range must lie within [0, 1]")
        return self


def _multipath_gain(scene: TwoPathScene) -> float:
    # Detour attenuation enters only through the BRDF product and d_AS;
    # swap this function to model d_AB-dependent loss.
    return scene.rho_multipath / scene.d_as**2


def direct_phasor(scene: TwoPathScene, cfg: ModulationConfig) -> Phasor:
    amplitude = scene.gamma_r * scene.rho_sas / scene.d_as**2
    return Phasor(amplitude, depth_to_phase(scene.d_as, cfg))


def multipath_phasor(scene: TwoPathScene, cfg: ModulationConfig) -> Phasor:
    amplitude = scene.gamma_r * _multipath_gain(scene)
    return Phasor(amplitude, depth_to_phase(scene.d_as + scene.d_ab, cfg))


def net_phasor(scene: TwoPathScene, cfg: ModulationConfig) -> Phasor:
    return superpose([direct_phasor(scene, cfg), multipath_phasor(scene, cfg)])


def sample_scene(rng: np.random.Generator, ranges: SceneRanges) -> TwoPathScene:
    # draw order is part of the determinism contract
    return TwoPathScene(
        gamma_r=ranges.gamma_r,
        d_as=ranges.d_as.draw(rng),
        d_ab=ranges.d_ab.draw(rng),
        rho_sas=ranges.rho_sas.draw(rng),
        rho_sab=ranges.rho_sab.draw(rng),
        rho_aba=ranges.rho_aba.draw(rng),
        rho_bas=ranges.rho_bas.draw(rng),
    )


def path_weights(scene: TwoPathScene) -> Tuple[float, float]:
    """Relative optical weights of the direct and detour paths (per unit p0)."""
    return scene.rho_sas / scene.d_as**2, _multipath_gain(scene)


def optical_power_trace(
    scene: TwoPathScene,
    cfg: ModulationConfig,
    p0: float,
    trace_cfg: TraceConfig,
) -> SampledTrace:
    if not p0 > 0:
        raise DomainError(f"calibration power p0 must be > 0, got {p0}")
    n = trace_length(trace_cfg, cfg)
    t = np.arange(n) * trace_cfg.sample_interval
    direct, detour = path_weights(scene)
    power = direct * (1.0 + cfg.alpha * np.cos(cfg.w * (t - 2.0 * scene.d_as / cfg.c)))
    if detour > 0.0:
        delay = 2.0 * (scene.d_as + scene.d_ab) / cfg.c
        power = power + detour * (1.0 + cfg.alpha * np.cos(cfg.w * (t - delay)))
    return SampledTrace(trace_cfg.sample_interval, np.maximum(p0 * power, 0.0))


def max_path_phase_difference(ranges: SceneRanges, cfg: ModulationConfig) -> float:
    return 4.0 * math.pi * cfg.f * ranges.d_ab.max / cfg.c
