import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import DomainError, ModelFormatError, ZeroSignalError
from .apd_sensor import MeasurementMode, NoiseToggles, SensorParams, default_trace_config, simulate_measurement
from .dataset_gen import FEATURE_COLUMNS, N_FREQUENCIES, default_modulations, substream
from .dispersion import MODEL_COLUMNS, check_frequencies, corrected_depth
from .evalkit import MM_PER_M, ErrorStats, error_stats
from .gbtree import BoosterModel
from .light_transport import GAMMA_R_DEFAULT, TwoPathScene
from .signal_core import ModulationConfig, TraceConfig

logger = logging.getLogger(__name__)

SEAM_HALF_WIDTH = 5
OUTER_FRACTION = 0.25


class CornerScene(BaseModel):
    """Two vertical planes meeting in a concave seam straight ahead of the sensor.

    The sensor sits at the origin looking along +z; the seam is the vertical line
    x = 0, z = distance. ``falloff_length`` sets the scale of the
    1/(1 + |AB|/falloff_length)^2 attenuation folded into the inter-plane
    reflectance; 1.0 gives the plain metre-based form.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    distance: float = Field(default=2.1, gt=0)
    opening_angle: float = Field(default=math.pi / 2, gt=0, lt=math.pi)
    rho_left: float = Field(default=0.8, ge=0, le=1)
    rho_right: float = Field(default=0.8, ge=0, le=1)
    width: int = Field(default=128, ge=2)
    height: int = Field(default=128, ge=2)
    fov_h: float = Field(default=math.radians(40.0), gt=0, lt=math.pi)
    fov_v: float = Field(default=math.radians(40.0), gt=0, lt=math.pi)
    gamma_r: float = Field(default=GAMMA_R_DEFAULT, gt=0)
    multipath: bool = True
    falloff: bool = True
    falloff_length: float = Field(default=0.03, gt=0)


@dataclass
class DepthMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DomainError(f"map {self.values.shape} and mask {self.mask.shape} must be matching 2-D grids")
        self.values = np.where(self.mask, self.values, np.nan)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def valid_values(self) -> np.ndarray:
        return self.values[self.mask]


@dataclass
class SceneGrid:
    """Per-pixel two-path scenes of a traced corner, row-major; None where masked."""

    shape: Tuple[int, int]
    scenes: List[Optional[TwoPathScene]]
    mask: np.ndarray
    d_as: np.ndarray
    ab_distance: np.ndarray

    @property
    def truth(self) -> DepthMap:
        return DepthMap(self.d_as, self.mask)


@dataclass
class RenderedMaps:
    raw: List[DepthMap]
    amplitude: List[DepthMap]
    truth: DepthMap
    frequencies: List[float] = field(default_factory=list)

    def features(self) -> Tuple[np.ndarray, np.ndarray]:
        """(valid-pixel mask, feature matrix in canonical column order)."""
        mask = self.truth.mask.copy()
        for m in self.raw + self.amplitude:
            mask &= m.mask
        columns = [m.values[mask] for m in self.raw] + [m.values[mask] for m in self.amplitude]
        return mask, np.column_stack(columns)


def _pixel_rays(scene: CornerScene) -> np.ndarray:
    cols = (np.arange(scene.width) + 0.5) / scene.width * scene.fov_h - 0.5 * scene.fov_h
    rows = 0.5 * scene.fov_v - (np.arange(scene.height) + 0.5) / scene.height * scene.fov_v
    azimuth, elevation = np.meshgrid(cols, rows)
    rays_d = np.stack(
        [np.sin(azimuth) * np.cos(elevation), np.sin(elevation), np.cos(azimuth) * np.cos(elevation)], axis=-1
    )
    return rays_d.reshape(-1, 3)


def _planes(scene: CornerScene):
    half = 0.5 * scene.opening_angle
    s, c = math.sin(half), math.cos(half)
    seam = np.array([0.0, 0.0, scene.distance])
    # along-plane direction away from the seam, and the normal facing the sensor
    left = (np.array([-s, 0.0, -c]), np.array([c, 0.0, -s]), scene.rho_left)
    right = (np.array([s, 0.0, -c]), np.array([-c, 0.0, -s]), scene.rho_right)
    return seam, (left, right)


def trace_corner(scene: CornerScene) -> SceneGrid:
    rays_d = _pixel_rays(scene)
    seam, planes = _planes(scene)
    n_pix = len(rays_d)

    best_t = np.full(n_pix, np.inf)
    hit_plane = np.full(n_pix, -1)
    for p, (along, normal, _) in enumerate(planes):
        denom = rays_d @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(denom < 0.0, (seam @ normal) / denom, np.inf)
        points = t[:, None] * rays_d
        on_half_plane = ((points - seam) @ along >= 0.0) & np.isfinite(t) & (t > 0.0)
        closer = on_half_plane & (t < best_t)
        best_t[closer] = t[closer]
        hit_plane[closer] = p

    mask = hit_plane >= 0
    d_as = np.where(mask, best_t, np.nan)
    hits = np.where(mask[:, None], best_t[:, None] * rays_d, 0.0)

    scenes: List[Optional[TwoPathScene]] = [None] * n_pix
    ab = np.full(n_pix, np.nan)
    for i in np.flatnonzero(mask):
        along, normal, rho_hit = planes[hit_plane[i]]
        other_along, _, rho_other = planes[1 - hit_plane[i]]
        a = hits[i]
        # nearest point of the opposite half-plane; the seam is its edge
        s_b = max(0.0, float((a - seam) @ other_along))
        b = seam + s_b * other_along + np.array([0.0, a[1], 0.0])
        d_ab = float(np.linalg.norm(a - b))
        ab[i] = d_ab

        cos_incidence = abs(float(rays_d[i] @ normal))
        falloff = 1.0 / (1.0 + d_ab / scene.falloff_length) ** 2 if scene.falloff else 1.0
        mpi = 1.0 if scene.multipath else 0.0
        scenes[i] = TwoPathScene(
            gamma_r=scene.gamma_r,
            d_as=float(d_as[i]),
            d_ab=d_ab,
            rho_sas=rho_hit * cos_incidence,
            rho_sab=mpi * rho_hit,
            rho_aba=mpi * rho_other * falloff,
            rho_bas=mpi * rho_hit,
        )

    shape = (scene.height, scene.width)
    logger.debug("traced %d of %d pixels onto the corner", int(mask.sum()), n_pix)
    return SceneGrid(shape, scenes, mask.reshape(shape), d_as.reshape(shape), ab.reshape(shape))


@dataclass(frozen=True)
class _RenderJob:
    scenes: Tuple[Optional[TwoPathScene], ...]
    modulations: Tuple[ModulationConfig, ...]
    params: SensorParams
    toggles: NoiseToggles
    seed: int
    mode: MeasurementMode
    trace: TraceConfig


def _render_pixels(job: _RenderJob, start: int, stop: int) -> np.ndarray:
    """Rows of (depth_1..depth_4, amp_1..amp_4); NaN for masked or signal-free pixels."""
    out = np.full((stop - start, 2 * len(job.modulations)), np.nan)
    for p in range(start, stop):
        scene = job.scenes[p]
        if scene is None:
            continue
        try:
            records = [
                simulate_measurement(
                    scene, cfg, job.params, job.toggles, substream(job.seed, p, k + 1), job.mode, job.trace
                )
                for k, cfg in enumerate(job.modulations)
            ]
        except ZeroSignalError:
            continue
        out[p - start] = [r.depth for r in records] + [r.amplitude for r in records]
    return out


def render_maps(
    grid: SceneGrid,
    modulations: Optional[Sequence[ModulationConfig]] = None,
    params: Optional[SensorParams] = None,
    toggles: Optional[NoiseToggles] = None,
    seed: int = 0,
    mode: MeasurementMode = "trace",
    trace_cfg: Optional[TraceConfig] = None,
    workers: int = 1,
) -> RenderedMaps:
    modulations = tuple(modulations or default_modulations())
    params = params or SensorParams()
    toggles = toggles if toggles is not None else NoiseToggles.all_on()
    job = _RenderJob(
        tuple(grid.scenes), modulations, params, toggles, seed, mode, trace_cfg or default_trace_config(params)
    )

    n_pix = len(grid.scenes)
    edges = np.linspace(0, n_pix, max(1, workers) * 4 + 1).round().astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    started = time.perf_counter()
    if workers <= 1:
        parts = [_render_pixels(job, a, b) for a, b in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_render_pixels, [job] * len(chunks), *zip(*chunks)))
    pixels = np.vstack(parts)
    logger.info("rendered %d pixels at %d frequencies in %.1fs", n_pix, len(modulations), time.perf_counter() - started)

    n_f = len(modulations)
    valid = grid.mask.ravel() & np.all(np.isfinite(pixels), axis=1)

    def as_map(column: np.ndarray) -> DepthMap:
        return DepthMap(column.reshape(grid.shape), valid.reshape(grid.shape))

    return RenderedMaps(
        raw=[as_map(pixels[:, k]) for k in range(n_f)],
        amplitude=[as_map(pixels[:, n_f + k]) for k in range(n_f)],
        truth=grid.truth,
        frequencies=[cfg.f for cfg in modulations],
    )


def correction_domain(grid: SceneGrid, max_detour: float) -> np.ndarray:
    """Traced pixels whose inter-plane distance stays inside the detour range a model was trained on."""
    with np.errstate(invalid="ignore"):
        return grid.mask & (grid.ab_distance <= max_detour)


def correct_map(
    model: Union[BoosterModel, Callable[[np.ndarray], np.ndarray]],
    maps: RenderedMaps,
    domain: Optional[np.ndarray] = None,
) -> DepthMap:
    """Apply ``model`` to every valid pixel, or only to those inside ``domain``; the rest stay masked."""
    if len(maps.raw) != N_FREQUENCIES or len(maps.amplitude) != N_FREQUENCIES:
        raise ModelFormatError(f"correction needs {N_FREQUENCIES} depth and amplitude maps")
    predict = model
    if isinstance(model, BoosterModel):
        if model.feature_names and tuple(model.feature_names) not in (FEATURE_COLUMNS, MODEL_COLUMNS):
            raise ModelFormatError(f"model features {list(model.feature_names)} do not match {list(FEATURE_COLUMNS)}")
        check_frequencies(model, maps.frequencies)
        predict = partial(corrected_depth, model)

    mask, features = maps.features()
    if domain is not None:
        if domain.shape != mask.shape:
            raise DomainError(f"domain {domain.shape} does not match the maps {mask.shape}")
        features = features[domain[mask]]
        mask = mask & domain
    corrected = np.full(mask.shape, np.nan)
    if features.size:
        corrected[mask] = np.asarray(predict(features), dtype=float)
    return DepthMap(corrected, mask)


def error_map(depth: DepthMap, truth: DepthMap) -> DepthMap:
    if depth.shape != truth.shape:
        raise DomainError(f"map shapes differ: {depth.shape} vs {truth.shape}")
    mask = depth.mask & truth.mask
    return DepthMap((depth.values - truth.values) * MM_PER_M, mask)


def seam_column(grid: SceneGrid) -> int:
    """Column whose pixels lie closest to the opposite plane on average."""
    with np.errstate(all="ignore"):
        per_column = np.nanmean(np.where(grid.mask, grid.ab_distance, np.nan), axis=0)
    return int(np.nanargmin(per_column))


def seam_region(shape: Tuple[int, int], seam: int, half_width: int = SEAM_HALF_WIDTH) -> np.ndarray:
    columns = np.arange(shape[1])
    return np.broadcast_to(np.abs(columns - seam) <= half_width, shape)


def outer_region(shape: Tuple[int, int], seam: int, fraction: float = OUTER_FRACTION) -> np.ndarray:
    """The fraction of columns farthest from the seam."""
    columns = np.arange(shape[1])
    n_outer = max(1, math.ceil(fraction * shape[1]))
    farthest = np.argsort(-np.abs(columns - seam), kind="stable")[:n_outer]
    selected = np.zeros(shape[1], dtype=bool)
    selected[farthest] = True
    return np.broadcast_to(selected, shape)


def region_mae(errors: DepthMap, region: np.ndarray) -> float:
    values = np.abs(errors.values[errors.mask & region])
    return float(values.mean()) if values.size else float("nan")


def _stats_mm(errors: DepthMap) -> ErrorStats:
    return error_stats(errors.valid_values() / MM_PER_M, np.zeros(int(errors.mask.sum())))


def scene_metrics(raw_errors: DepthMap, corrected_errors: Optional[DepthMap], seam: int) -> Dict[str, object]:
    """Error summary of a rendered scene.

    With a corrected map, ``raw_on_corrected`` restricts the raw errors to the
    corrected pixels so ``corrected_to_raw_mae`` compares like with like.
    """
    seam_px = seam_region(raw_errors.shape, seam)
    outer_px = outer_region(raw_errors.shape, seam)
    metrics: Dict[str, object] = {
        "seam_column": seam,
        "raw": _stats_mm(raw_errors).to_dict(),
        "raw_seam_mae_mm": region_mae(raw_errors, seam_px),
        "raw_outer_mae_mm": region_mae(raw_errors, outer_px),
    }
    if corrected_errors is not None:
        corrected = _stats_mm(corrected_errors)
        raw_on_corrected = _stats_mm(DepthMap(raw_errors.values, raw_errors.mask & corrected_errors.mask))
        metrics["corrected"] = corrected.to_dict()
        metrics["raw_on_corrected"] = raw_on_corrected.to_dict()
        metrics["corrected_to_raw_mae"] = corrected.mae / raw_on_corrected.mae if raw_on_corrected.mae > 0 else math.nan
        metrics["corrected_seam_mae_mm"] = region_mae(corrected_errors, seam_px)
        metrics["corrected_outer_mae_mm"] = region_mae(corrected_errors, outer_px)
    return metrics
