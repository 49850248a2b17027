import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..errors import ConfigurationError, DatasetFormatError, DomainError
from .apd_sensor import (
    MeasurementMode,
    NoiseToggles,
    SensorParams,
    default_trace_config,
    simulate_measurement,
    thermal_noise_std,
    tia_noise_std,
)
from .artifacts import read_json, write_json
from .evalkit import ErrorStats, error_stats
from .light_transport import SceneRanges, sample_scene
from .signal_core import ModulationConfig, TraceConfig, trace_length

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_FREQUENCIES = (12.5e6, 18.75e6, 25e6, 31.25e6)
FEATURE_COLUMNS = ("d1_m", "d2_m", "d3_m", "d4_m", "a1_v2", "a2_v2", "a3_v2", "a4_v2")
TARGET_COLUMN = "target_m"
CSV_HEADER = FEATURE_COLUMNS + (TARGET_COLUMN,)
N_FREQUENCIES = 4


@dataclass(frozen=True)
class FeatureVector:
    depths: Tuple[float, float, float, float]
    amplitudes: Tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.depths) != N_FREQUENCIES or len(self.amplitudes) != N_FREQUENCIES:
            raise DomainError("a feature vector holds exactly four depths and four amplitudes")
        if not all(math.isfinite(v) for v in self.depths + self.amplitudes):
            raise DomainError("feature values must be finite")
        if any(d < 0.0 for d in self.depths):
            raise DomainError("measured depths must be >= 0")
        if any(a < 0.0 for a in self.amplitudes):
            raise DomainError("amplitudes must be >= 0")

    def as_list(self) -> List[float]:
        return list(self.depths) + list(self.amplitudes)


@dataclass(frozen=True)
class LabeledSample:
    features: FeatureVector
    target: float


class DatasetMeta(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = SCHEMA_VERSION
    n: int = Field(ge=0)
    seed: int = Field(ge=0)
    mode: MeasurementMode
    sampling: Literal["independent-uniform"] = "independent-uniform"
    ranges: SceneRanges
    params: SensorParams
    toggles: NoiseToggles
    modulations: List[ModulationConfig]
    trace: TraceConfig
    # multiplies the analytic-mode tap noise; trace mode ignores it
    noise_scale: float = Field(default=1.0, ge=0)
    tia_sample_std_v: float = 0.0
    thermal_sample_std_v: float = 0.0

    @property
    def frequencies(self) -> List[float]:
        return [cfg.f for cfg in self.modulations]

    def to_flat(self) -> Dict[str, Any]:
        return _flatten(self.model_dump(mode="json"))

    @classmethod
    def from_flat(cls, doc: Dict[str, Any]) -> "DatasetMeta":
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DatasetFormatError(f"unsupported dataset schema_version {version!r}")
        try:
            return cls.model_validate(_unflatten(doc))
        except ValidationError as e:
            raise DatasetFormatError(f"invalid dataset metadata: {e}") from e


def _flatten(doc: Any, prefix: str = "") -> Dict[str, Any]:
    if isinstance(doc, dict):
        items = doc.items()
    elif isinstance(doc, list) and doc and all(isinstance(v, dict) for v in doc):
        items = ((str(i), v) for i, v in enumerate(doc))
    else:
        return {prefix: doc}
    flat: Dict[str, Any] = {}
    for key, value in items:
        flat.update(_flatten(value, f"{prefix}.{key}" if prefix else key))
    return flat


def _unflatten(flat: Dict[str, Any]) -> Dict[str, Any]:
    root: Dict[str, Any] = {}
    for dotted, value in flat.items():
        node = root
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return _lists_from_index_keys(root)


def _lists_from_index_keys(node: Any) -> Any:
    if not isinstance(node, dict):
        return node
    node = {k: _lists_from_index_keys(v) for k, v in node.items()}
    if node and all(k.isdigit() for k in node):
        return [node[k] for k in sorted(node, key=int)]
    return node


def default_modulations(alpha: float = 1.0, m: float = 0.4785) -> List[ModulationConfig]:
    return [ModulationConfig(f=f, alpha=alpha, m=m) for f in DEFAULT_FREQUENCIES]


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one sample (key=(i,)) or one of its measurements (key=(i, k + 1))."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass(frozen=True)
class _GenerationJob:
    seed: int
    ranges: SceneRanges
    params: SensorParams
    toggles: NoiseToggles
    mode: MeasurementMode
    modulations: Tuple[ModulationConfig, ...]
    trace: TraceConfig
    noise_scale: float


def _sample_at(job: _GenerationJob, i: int) -> LabeledSample:
    scene = sample_scene(substream(job.seed, i), job.ranges)
    records = [
        simulate_measurement(
            scene, cfg, job.params, job.toggles, substream(job.seed, i, k + 1), job.mode, job.trace, job.noise_scale
        )
        for k, cfg in enumerate(job.modulations)
    ]
    features = FeatureVector(
        depths=tuple(r.depth for r in records),
        amplitudes=tuple(r.amplitude for r in records),
    )
    return LabeledSample(features=features, target=scene.d_as)


def _generate_chunk(job: _GenerationJob, start: int, stop: int) -> List[LabeledSample]:
    logger.debug("generating samples [%d, %d)", start, stop)
    return [_sample_at(job, i) for i in range(start, stop)]


def _chunk_bounds(n: int, workers: int) -> List[Tuple[int, int]]:
    n_chunks = max(1, min(n, workers * 4))
    edges = np.linspace(0, n, n_chunks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _check_generation_config(
    n: int,
    seed: int,
    mode: str,
    modulations: Sequence[ModulationConfig],
    trace_cfg: TraceConfig,
    noise_scale: float = 1.0,
) -> None:
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {n}")
    if seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed}")
    if mode not in ("trace", "analytic"):
        raise ConfigurationError(f"unknown generation mode: {mode!r}")
    if not (math.isfinite(noise_scale) and noise_scale >= 0.0):
        raise ConfigurationError(f"noise_scale must be a finite non-negative number, got {noise_scale}")
    if len(modulations) != N_FREQUENCIES:
        raise ConfigurationError(f"expected {N_FREQUENCIES} modulation frequencies, got {len(modulations)}")
    freqs = [cfg.f for cfg in modulations]
    if freqs != sorted(freqs) or len(set(freqs)) != len(freqs):
        raise ConfigurationError(f"modulation frequencies must be strictly ascending, got {freqs}")
    if mode == "trace":
        for cfg in modulations:
            trace_length(trace_cfg, cfg)


def generate(
    n: int,
    seed: int,
    ranges: Optional[SceneRanges] = None,
    params: Optional[SensorParams] = None,
    toggles: Optional[NoiseToggles] = None,
    mode: MeasurementMode = "trace",
    modulations: Optional[Sequence[ModulationConfig]] = None,
    trace_cfg: Optional[TraceConfig] = None,
    workers: int = 1,
    noise_scale: float = 1.0,
) -> Tuple[List[LabeledSample], DatasetMeta]:
    """Build n labeled samples; the output depends only on (seed, n, config).

    Sample i draws its scene from substream (i,) and its measurement at
    frequency index k from substream (i, k + 1), so chunking across worker
    processes never changes the result.
    """
    ranges = ranges or SceneRanges()
    params = params or SensorParams()
    toggles = toggles if toggles is not None else NoiseToggles.all_on()
    modulations = tuple(modulations or default_modulations())
    trace_cfg = trace_cfg or default_trace_config(params)
    _check_generation_config(n, seed, mode, modulations, trace_cfg, noise_scale)

    job = _GenerationJob(seed, ranges, params, toggles, mode, modulations, trace_cfg, noise_scale)
    chunks = _chunk_bounds(n, max(1, workers))
    started = time.perf_counter()
    if workers <= 1 or len(chunks) == 1:
        parts = [_generate_chunk(job, a, b) for a, b in chunks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            # map yields in submission order, i.e. by sample index
            parts = list(pool.map(_generate_chunk, [job] * len(chunks), *zip(*chunks)))
    samples = [s for part in parts for s in part]
    logger.info(
        "generated %d samples (%s mode, %d workers) in %.1fs", n, mode, max(1, workers), time.perf_counter() - started
    )

    meta = DatasetMeta(
        n=n,
        seed=seed,
        mode=mode,
        ranges=ranges,
        params=params,
        toggles=toggles,
        modulations=list(modulations),
        trace=trace_cfg,
        noise_scale=noise_scale,
        tia_sample_std_v=tia_noise_std(params) * params.volts_per_electron if toggles.tia else 0.0,
        thermal_sample_std_v=thermal_noise_std(params) if toggles.thermal else 0.0,
    )
    return samples, meta


def split_indices(n: int, fraction: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of range(n) cut into ceil(n * fraction) train and the remaining test indices."""
    if n < 1:
        raise DomainError("cannot split an empty dataset")
    if not 0.0 < fraction < 1.0:
        raise DomainError(f"train fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.ceil(n * fraction - 1e-9)
    return order[:n_train], order[n_train:]


def split_train_test(
    samples: Sequence[LabeledSample], fraction: float = 0.8, seed: int = 0
) -> Tuple[List[LabeledSample], List[LabeledSample]]:
    train_idx, test_idx = split_indices(len(samples), fraction, seed)
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def to_arrays(samples: Sequence[LabeledSample]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.array([s.features.as_list() for s in samples], dtype=float).reshape(len(samples), len(FEATURE_COLUMNS))
    y = np.array([s.target for s in samples], dtype=float)
    return x, y


def meta_path_for(path: Path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.meta.json")


def write_csv(samples: Sequence[LabeledSample], meta: Optional[DatasetMeta], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in samples:
            # repr gives the shortest text that round-trips exactly
            writer.writerow([repr(float(v)) for v in s.features.as_list()] + [repr(float(s.target))])
    if meta is not None:
        write_json(meta_path_for(path), meta.to_flat())
    logger.info("wrote %d samples to %s", len(samples), path)
    return path


def _parse_row(row: List[str], row_number: int) -> LabeledSample:
    if len(row) != len(CSV_HEADER):
        raise DatasetFormatError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", row=row_number)
    try:
        values = [float(v) for v in row]
    except ValueError as e:
        raise DatasetFormatError(f"not a number: {e}", row=row_number) from e
    if not all(math.isfinite(v) for v in values):
        raise DatasetFormatError("non-finite value", row=row_number)
    try:
        features = FeatureVector(tuple(values[:N_FREQUENCIES]), tuple(values[N_FREQUENCIES : 2 * N_FREQUENCIES]))
    except DomainError as e:
        raise DatasetFormatError(str(e), row=row_number) from e
    return LabeledSample(features=features, target=values[-1])


def read_csv(path: Path) -> Tuple[List[LabeledSample], Optional[DatasetMeta]]:
    """Parse a dataset CSV and its sidecar; row numbers in errors are file line numbers."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise DatasetFormatError(f"header must be {','.join(CSV_HEADER)}", row=1)
        samples = [_parse_row(row, i) for i, row in enumerate(reader, start=2)]

    meta = None
    sidecar = meta_path_for(path)
    if sidecar.exists():
        try:
            doc = read_json(sidecar)
        except ValueError as e:
            raise DatasetFormatError(f"{sidecar.name} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise DatasetFormatError(f"{sidecar.name} must hold a JSON object")
        meta = DatasetMeta.from_flat(doc)
    return samples, meta


def raw_error_stats(
    samples: Sequence[LabeledSample], frequencies: Sequence[float] = DEFAULT_FREQUENCIES
) -> Dict[float, ErrorStats]:
    """Uncorrected depth error at every modulation frequency."""
    x, y = to_arrays(samples)
    return {f: error_stats(x[:, k], y) for k, f in enumerate(frequencies)}


def check_feature_bounds(samples: Sequence[LabeledSample], modulations: Sequence[ModulationConfig]) -> List[int]:
    """Indices of samples whose depth features fall outside [0, c/(2f))."""
    x, _ = to_arrays(samples)
    limits = np.array([cfg.unambiguous_range for cfg in modulations])
    depths = x[:, :N_FREQUENCIES]
    bad = np.any((depths < 0.0) | (depths >= limits), axis=1)
    return np.flatnonzero(bad).tolist()
