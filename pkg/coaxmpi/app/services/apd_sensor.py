import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import DomainError
from .light_transport import TwoPathScene, net_phasor, optical_power_trace, path_weights
from .signal_core import (
    SPEED_OF_LIGHT,
    ModulationConfig,
    SampledTrace,
    TapSet,
    TraceConfig,
    demodulate_taps,
    four_tap_amplitude,
    four_tap_phase,
    phase_to_depth,
    phasor_to_taps,
    trace_length,
)

logger = logging.getLogger(__name__)

ELECTRON_VOLT = 1.602176634e-19

MeasurementMode = Literal["trace", "analytic"]
Counts = Union[float, np.ndarray]


class SensorParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    eta: float = Field(default=0.67, gt=0, le=1)
    m_gain: float = Field(default=50.0, gt=0)
    f_excess: float = Field(default=4.862, ge=1)
    q: float = Field(default=1.60217663e-19, gt=0)
    t_transit: float = Field(default=6e-9, gt=0)
    p_a: float = Field(default=0.7854e-2, gt=0)  # cm^2 (0.7854 mm^2)
    i_fm: float = Field(default=1e-9, gt=0)  # A/cm^2
    temp: float = Field(default=297.0, gt=0)
    e_g: float = Field(default=1.1116 * ELECTRON_VOLT, gt=0)
    k_b: float = Field(default=1.380649e-23, gt=0)
    bw: float = Field(default=50e6, ge=0)
    s_tia: float = Field(default=4.314e-24, ge=0)
    r_load: float = Field(default=50.0, gt=0)
    g_tia: float = Field(default=50e3, gt=0)
    wavelength: float = Field(default=852e-9, gt=0)
    h_planck: float = Field(default=6.62606896e-34, gt=0)
    eps_back_sigma: float = Field(default=0.0, ge=0)
    eps_rand_sigma: float = Field(default=0.0, ge=0)

    @property
    def photon_energy(self) -> float:
        return self.h_planck * SPEED_OF_LIGHT / self.wavelength

    @property
    def volts_per_electron(self) -> float:
        return self.q / self.t_transit * self.g_tia


class NoiseToggles(BaseModel):
    """Independent switches for each stage of the sensor noise chain.

    ``quantization`` controls the integer rounding of counts; it is not a noise
    source but with only a few photons per sample it biases a noise-free
    measurement, so ``none()`` switches it off as well.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    shot: bool = True
    avalanche: bool = True
    dark: bool = True
    tia: bool = True
    thermal: bool = True
    background: bool = True
    residual: bool = True
    quantization: bool = True

    @classmethod
    def all_on(cls) -> "NoiseToggles":
        return cls()

    @classmethod
    def none(cls) -> "NoiseToggles":
        return cls(
            shot=False,
            avalanche=False,
            dark=False,
            tia=False,
            thermal=False,
            background=False,
            residual=False,
            quantization=False,
        )

    @property
    def any_stochastic(self) -> bool:
        return any((self.shot, self.avalanche, self.dark, self.tia, self.thermal, self.background, self.residual))


@dataclass(frozen=True)
class MeasurementRecord:
    depth: float
    amplitude: float
    f: float


def _round_clamped(values: Counts, quantize: bool) -> Counts:
    if quantize:
        values = np.rint(values)
    return np.maximum(values, 0.0)


def photon_count(p_opt: Counts, params: SensorParams, quantize: bool = True) -> Counts:
    if np.any(np.asarray(p_opt) < 0):
        raise DomainError("optical power must be >= 0")
    n = np.asarray(p_opt, dtype=float) * params.t_transit / params.photon_energy
    n = np.rint(n) if quantize else n
    return float(n) if np.ndim(n) == 0 else n


def apply_shot_noise(n: Counts, rng: np.random.Generator) -> Counts:
    draws = np.asarray(rng.poisson(n), dtype=float)
    return float(draws) if np.ndim(draws) == 0 else draws


def background_electrons(params: SensorParams, rng: np.random.Generator, size=None) -> Counts:
    """Unclamped background-light electron offsets (Gaussian, zero mean)."""
    return rng.normal(0.0, params.eps_back_sigma, size=size)


def photoelectron_count(
    n_shot: Counts,
    params: SensorParams,
    rng: Optional[np.random.Generator] = None,
    background: bool = True,
    quantize: bool = True,
) -> Counts:
    electrons = np.asarray(n_shot, dtype=float) * params.eta
    if background and params.eps_back_sigma > 0 and rng is not None:
        electrons = electrons + background_electrons(params, rng, size=np.shape(electrons) or None)
    electrons = _round_clamped(electrons, quantize)
    return float(electrons) if np.ndim(electrons) == 0 else electrons


def avalanche_multiply(
    n_e: Counts,
    params: SensorParams,
    rng: Optional[np.random.Generator] = None,
    randomness: bool = True,
    quantize: bool = True,
) -> Counts:
    n_e = np.asarray(n_e, dtype=float)
    mean = params.m_gain * n_e
    if randomness and rng is not None:
        std = params.m_gain * np.sqrt(params.f_excess * n_e)
        amplified = rng.normal(mean, std)
    else:
        amplified = mean
    amplified = _round_clamped(amplified, quantize)
    return float(amplified) if np.ndim(amplified) == 0 else amplified


def electrons_to_voltage(n: Counts, params: SensorParams) -> Counts:
    return n * params.q / params.t_transit * params.g_tia


def dark_electron_mean(params: SensorParams, quantize: bool = True) -> float:
    charge = (
        params.p_a
        * params.i_fm
        * params.temp**1.5
        * params.t_transit
        * math.exp(-params.e_g / (2.0 * params.k_b * params.temp))
    )
    electrons = charge / params.q
    return float(round(electrons)) if quantize else electrons


def dark_electron_count(
    params: SensorParams,
    rng: np.random.Generator,
    size=None,
    shot: bool = True,
    quantize: bool = True,
) -> Counts:
    mean = dark_electron_mean(params, quantize)
    if not shot:
        return np.full(size, mean) if size is not None else mean
    draws = np.asarray(rng.poisson(mean, size=size), dtype=float)
    return float(draws) if np.ndim(draws) == 0 else draws


def tia_noise_std(params: SensorParams) -> float:
    return params.t_transit * math.sqrt(params.s_tia * params.bw) / params.q


def tia_noise_electrons(params: SensorParams, rng: np.random.Generator, size=None, quantize: bool = True) -> Counts:
    draws = rng.normal(0.0, tia_noise_std(params), size=size)
    return np.rint(draws) if quantize else draws


def thermal_noise_std(params: SensorParams) -> float:
    current = math.sqrt(4.0 * params.k_b * params.temp * params.bw / params.r_load)
    return params.g_tia * current


def thermal_noise_voltage(params: SensorParams, rng: np.random.Generator, size=None) -> Counts:
    return rng.normal(0.0, thermal_noise_std(params), size=size)


def apd_voltage_sample(
    p_opt: Counts,
    params: SensorParams,
    toggles: NoiseToggles,
    rng: np.random.Generator,
) -> Counts:
    """Total APD/TIA output voltage for the given instantaneous optical power.

    Accepts a scalar or a whole trace of powers; random draws happen stage by
    stage in a fixed order so a seeded stream reproduces the same voltages.
    """
    quantize = toggles.quantization
    size = np.shape(p_opt) or None

    n_ph = photon_count(p_opt, params, quantize)
    if toggles.shot:
        n_ph = apply_shot_noise(n_ph, rng)
    n_e = photoelectron_count(n_ph, params, rng, background=toggles.background, quantize=quantize)
    n_apd = avalanche_multiply(n_e, params, rng, randomness=toggles.avalanche, quantize=quantize)
    voltage = electrons_to_voltage(n_apd, params)

    if toggles.dark:
        voltage = voltage + electrons_to_voltage(dark_electron_count(params, rng, size, quantize=quantize), params)
    if toggles.tia and params.s_tia > 0:
        voltage = voltage + electrons_to_voltage(tia_noise_electrons(params, rng, size, quantize), params)
    if toggles.thermal and params.bw > 0:
        voltage = voltage + thermal_noise_voltage(params, rng, size)
    if toggles.residual and params.eps_rand_sigma > 0:
        voltage = voltage + rng.normal(0.0, params.eps_rand_sigma, size=size)
    return voltage


def calibrate(params: SensorParams, gamma_r: float, alpha: float = 1.0, m: float = 0.4785) -> float:
    """Optical power p0 whose noise-free chain output reproduces gamma_r.

    The reference scene is a unit-reflectance target at 1 m. Without count
    rounding the chain is linear, so the demodulated amplitude is
    alpha*m/2 * p0 * eta*M*q*G/E_p and p0 follows in closed form.
    """
    volts_per_watt = params.eta * params.m_gain * params.q * params.g_tia / params.photon_energy
    return 2.0 * gamma_r / (alpha * m * volts_per_watt)


def default_trace_config(params: SensorParams) -> TraceConfig:
    return TraceConfig(sample_interval=params.t_transit)


def sample_voltage_variance(mean_power: float, params: SensorParams, toggles: NoiseToggles) -> float:
    """Per-sample output voltage variance implied by the enabled noise stages."""
    n_ph = mean_power * params.t_transit / params.photon_energy
    var_ph = n_ph if toggles.shot else 0.0
    var_e = params.eta**2 * var_ph
    if toggles.background:
        var_e += params.eps_back_sigma**2
    var_apd = params.m_gain**2 * var_e
    if toggles.avalanche:
        var_apd += params.m_gain**2 * params.f_excess * params.eta * n_ph

    var_electrons = var_apd
    if toggles.dark:
        var_electrons += dark_electron_mean(params, toggles.quantization)
    if toggles.tia:
        var_electrons += tia_noise_std(params) ** 2

    variance = var_electrons * params.volts_per_electron**2
    if toggles.thermal:
        variance += thermal_noise_std(params) ** 2
    if toggles.residual:
        variance += params.eps_rand_sigma**2
    return variance


def analytic_tap_noise_std(
    scene: TwoPathScene,
    cfg: ModulationConfig,
    params: SensorParams,
    toggles: NoiseToggles,
    trace_cfg: Optional[TraceConfig] = None,
) -> float:
    trace_cfg = trace_cfg or default_trace_config(params)
    n = trace_length(trace_cfg, cfg)
    direct, detour = path_weights(scene)
    mean_power = calibrate(params, scene.gamma_r, cfg.alpha, cfg.m) * (direct + detour)
    # each tap averages n samples weighted by m*cos(.), whose mean square is m^2/2
    return math.sqrt(sample_voltage_variance(mean_power, params, toggles) * cfg.m**2 / (2.0 * n))


def _record_from_taps(taps: TapSet, cfg: ModulationConfig) -> MeasurementRecord:
    phase = four_tap_phase(taps)
    depth = phase_to_depth(phase, cfg)
    return MeasurementRecord(depth=depth, amplitude=four_tap_amplitude(taps), f=cfg.f)


def simulate_measurement(
    scene: TwoPathScene,
    cfg: ModulationConfig,
    params: SensorParams,
    toggles: NoiseToggles,
    rng: np.random.Generator,
    mode: MeasurementMode = "trace",
    trace_cfg: Optional[TraceConfig] = None,
    noise_scale: float = 1.0,
) -> MeasurementRecord:
    trace_cfg = trace_cfg or default_trace_config(params)

    if mode == "trace":
        p0 = calibrate(params, scene.gamma_r, cfg.alpha, cfg.m)
        power = optical_power_trace(scene, cfg, p0, trace_cfg)
        voltage = apd_voltage_sample(power.values, params, toggles, rng)
        taps = demodulate_taps(SampledTrace(power.sample_interval, np.asarray(voltage, dtype=float)), cfg)
        return _record_from_taps(taps, cfg)

    if mode == "analytic":
        taps = phasor_to_taps(net_phasor(scene, cfg))
        if toggles.any_stochastic:
            std = noise_scale * analytic_tap_noise_std(scene, cfg, params, toggles, trace_cfg)
            # taps half a period apart demodulate the same samples, so their noise is exactly opposite
            e0, e1 = rng.normal(0.0, std, size=2).tolist()
            taps = TapSet(taps.c0 + e0, taps.c1 + e1, taps.c2 - e0, taps.c3 - e1)
        return _record_from_taps(taps, cfg)

    raise DomainError(f"unknown measurement mode: {mode!r}")


def compare_analytic_noise(
    scene: TwoPathScene,
    cfg: ModulationConfig,
    params: SensorParams,
    toggles: NoiseToggles,
    n: int = 1000,
    seed: int = 0,
    trace_cfg: Optional[TraceConfig] = None,
) -> float:
    """Ratio of trace-mode to analytic-mode depth-error std on one scene.

    A value near 1 means the analytic tap variances match the full chain; the
    ratio can be fed back as ``noise_scale``.
    """
    seeds = np.random.SeedSequence(seed)
    trace_rng, analytic_rng = (np.random.default_rng(s) for s in seeds.spawn(2))
    trace_depths = [
        simulate_measurement(scene, cfg, params, toggles, trace_rng, "trace", trace_cfg).depth for _ in range(n)
    ]
    analytic_depths = [
        simulate_measurement(scene, cfg, params, toggles, analytic_rng, "analytic", trace_cfg).depth
        for _ in range(n)
    ]
    ratio = float(np.std(trace_depths) / np.std(analytic_depths))
    logger.info("analytic noise check at %.2f MHz: trace/analytic depth std ratio %.3f", cfg.f / 1e6, ratio)
    return ratio
