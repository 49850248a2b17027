import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Literal, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import ConfigurationError, DomainError, ZeroSignalError

SPEED_OF_LIGHT = 3.0e8
TWO_PI = 2.0 * math.pi

# Demodulation phase shifts of the fixed four-tap scheme.
TAP_PHASES = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)

# Two phasors that cancel to within this fraction of their summed magnitude are
# reported as a zero-amplitude phasor.
_CANCELLATION_RTOL = 1e-12

# Largest denominator considered when finding the whole-period sample block.
_MAX_PERIOD_DENOMINATOR = 10**6

ArrayLike = Union[float, np.ndarray]


class ModulationConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    f: float = Field(gt=0)
    alpha: float = Field(default=1.0, gt=0, le=1)
    m: float = Field(default=0.4785, gt=0)
    c: float = Field(default=SPEED_OF_LIGHT, gt=0)
    n_tap: Literal[4] = 4

    @property
    def w(self) -> float:
        return TWO_PI * self.f

    @property
    def period(self) -> float:
        return 1.0 / self.f

    @property
    def unambiguous_range(self) -> float:
        return self.c / (2.0 * self.f)


class TraceConfig(BaseModel):
    """Sampling of a time trace: sample spacing and target integration time.

    The effective trace length is rounded to the nearest sample count that
    spans a whole number of modulation periods (see ``trace_length``).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    sample_interval: float = Field(default=6e-9, gt=0)
    t_int: float = Field(default=16e-6, gt=0)

    @classmethod
    def per_period(cls, f: float, periods: int = 200, samples_per_period: int = 64) -> "TraceConfig":
        return cls(sample_interval=1.0 / (f * samples_per_period), t_int=periods / f)


@dataclass(frozen=True)
class Phasor:
    amplitude: float
    phase: float

    def __post_init__(self):
        if not self.amplitude >= 0.0:
            raise DomainError(f"phasor amplitude must be >= 0, got {self.amplitude}")
        if not 0.0 <= self.phase < TWO_PI:
            raise DomainError(f"phasor phase must lie in [0, 2pi), got {self.phase}")

    @property
    def complex(self) -> complex:
        return self.amplitude * complex(math.cos(self.phase), math.sin(self.phase))


@dataclass(frozen=True)
class TapSet:
    c0: float
    c1: float
    c2: float
    c3: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.c0, self.c1, self.c2, self.c3)):
            raise DomainError("tap values must be finite")

    def as_tuple(self):
        return (self.c0, self.c1, self.c2, self.c3)


@dataclass(frozen=True)
class SampledTrace:
    sample_interval: float
    values: np.ndarray

    def __post_init__(self):
        if not self.sample_interval > 0:
            raise DomainError("sample_interval must be > 0")
        if np.ndim(self.values) != 1 or len(self.values) < 2:
            raise DomainError("a trace needs at least two samples")

    @property
    def t_int(self) -> float:
        return self.sample_interval * len(self.values)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.sample_interval


def wrap_phase(phi: float) -> float:
    wrapped = math.fmod(phi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    # fmod of a tiny negative value plus 2pi can round up to 2pi itself
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


def depth_to_phase(d: float, cfg: ModulationConfig) -> float:
    if not (math.isfinite(d) and d >= 0.0):
        raise DomainError(f"distance must be finite and >= 0, got {d}")
    return wrap_phase(4.0 * math.pi * cfg.f * d / cfg.c)


def phase_to_depth(phi: float, cfg: ModulationConfig) -> float:
    if not 0.0 <= phi < TWO_PI:
        raise DomainError(f"phase must lie in [0, 2pi), got {phi}")
    return cfg.c * phi / (4.0 * math.pi * cfg.f)


def four_tap_phase(taps: TapSet) -> float:
    y = taps.c3 - taps.c1
    x = taps.c0 - taps.c2
    if x == 0.0 and y == 0.0:
        raise ZeroSignalError("taps carry no modulated signal")
    return wrap_phase(math.atan2(y, x))


def four_tap_amplitude(taps: TapSet) -> float:
    return math.hypot(taps.c3 - taps.c1, taps.c2 - taps.c0) / 2.0


def phasor_to_taps(p: Phasor) -> TapSet:
    return TapSet(*(p.amplitude * math.cos(shift + p.phase) for shift in TAP_PHASES))


def superpose(components: Sequence[Phasor]) -> Phasor:
    if not components:
        raise DomainError("superpose needs at least one phasor")
    total = sum((p.complex for p in components), 0j)
    scale = sum(p.amplitude for p in components)
    amplitude = abs(total)
    if amplitude <= _CANCELLATION_RTOL * scale:
        return Phasor(0.0, 0.0)
    return Phasor(amplitude, wrap_phase(math.atan2(total.imag, total.real)))


def whole_period_block(sample_interval: float, f: float) -> int:
    """Smallest sample count whose span is an integer number of periods."""
    cycles_per_sample = Fraction(sample_interval * f).limit_denominator(_MAX_PERIOD_DENOMINATOR)
    if cycles_per_sample > Fraction(1, 2):
        raise ConfigurationError(
            f"sample interval {sample_interval} s gives fewer than 2 samples per period at {f} Hz"
        )
    return cycles_per_sample.denominator


def trace_length(trace_cfg: TraceConfig, cfg: ModulationConfig) -> int:
    block = whole_period_block(trace_cfg.sample_interval, cfg.f)
    n_blocks = max(1, round(trace_cfg.t_int / trace_cfg.sample_interval / block))
    return n_blocks * block


def _check_whole_periods(received: SampledTrace, cfg: ModulationConfig) -> None:
    if received.sample_interval * cfg.f > 0.5:
        raise ConfigurationError("trace has fewer than 2 samples per modulation period")
    periods = received.t_int * cfg.f
    if periods < 1.0 - 1e-9 or abs(periods - round(periods)) > 1e-6:
        raise ConfigurationError(
            f"trace spans {periods:.6f} modulation periods; an integer number is required"
        )


def demodulate_trace(received: SampledTrace, cfg: ModulationConfig, tau_n: float) -> float:
    _check_whole_periods(received, cfg)
    reference = cfg.m * np.cos(cfg.w * (received.times + tau_n))
    # rectangle rule: (1/T_int) * sum(r * s * dt) == mean(r * s)
    return float(np.mean(received.values * reference))


def demodulate_taps(received: SampledTrace, cfg: ModulationConfig) -> TapSet:
    return TapSet(*(demodulate_trace(received, cfg, shift / cfg.w) for shift in TAP_PHASES))
