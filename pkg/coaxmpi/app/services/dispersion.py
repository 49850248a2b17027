"""Multi-frequency dispersion features for the depth-correction booster.

A two-path return moves the measured depth by nearly the same amount at every
modulation frequency, so the raw depths alone say little about the detour.
What does change with frequency is small: with k = (4*pi*f/c)^2, depth and
log-amplitude both bend in k, and for a direct path plus one detour of
length L carrying a fraction p of the light

    depth(k)         = d + L*p - V*k/6 + O(k^2)
    log amplitude(k) = const  - W*k/2 + O(k^2)

with V = L^3 p(1-p)(1-2p) and W = L^2 p(1-p). A quadratic fit in k over the
four frequencies gives V and W, and the bias L*p is the positive root of
b^2 + (V/W) b - W = 0. Without noise this recovers the true depth almost
exactly; with sensor noise the estimate degrades and the booster learns how
far to trust it.
"""

from typing import Sequence, Tuple, Union

import numpy as np

from ..errors import DomainError, ModelFormatError
from .dataset_gen import FEATURE_COLUMNS, N_FREQUENCIES
from .gbtree import BoosterModel, TrainConfig, fit
from .signal_core import SPEED_OF_LIGHT

DISPERSION_COLUMNS = (
    "depth_curvature_m3",
    "amplitude_curvature_m2",
    "two_path_bias_m",
    "two_path_depth_m",
    "range_scaled_amplitude",
)
MODEL_COLUMNS = FEATURE_COLUMNS + DISPERSION_COLUMNS
RESIDUAL_BASE_COLUMN = FEATURE_COLUMNS.index("d4_m")
# estimates beyond this are noise, not geometry
MAX_BIAS_ESTIMATE = 1.0
_TINY_AMPLITUDE = 1e-300


def _fit_operator(frequencies: Sequence[float]) -> np.ndarray:
    f = np.asarray(frequencies, dtype=float)
    if f.shape != (N_FREQUENCIES,) or not np.all(np.isfinite(f)) or np.any(f <= 0.0):
        raise DomainError(f"need {N_FREQUENCIES} positive modulation frequencies, got {list(f)}")
    if np.any(np.diff(f) <= 0.0):
        raise DomainError("modulation frequencies must be strictly ascending")
    k = (4.0 * np.pi * f / SPEED_OF_LIGHT) ** 2
    design = np.column_stack([np.ones_like(k), k, k**2])
    return np.linalg.pinv(design)


def bias_from_curvatures(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Positive root of b^2 + (V/W) b - W = 0, written without cancellation; 0 where W <= 0."""
    v, w = np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(w, dtype=float))
    bias = np.zeros(v.shape)
    ok = w > 0.0
    ratio = v[ok] / w[ok]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        root = 2.0 * w[ok] / (ratio + np.sqrt(ratio**2 + 4.0 * w[ok]))
    bias[ok] = np.where(np.isfinite(root), root, MAX_BIAS_ESTIMATE)
    return np.clip(bias, 0.0, MAX_BIAS_ESTIMATE)


def dispersion_features(x: np.ndarray, frequencies: Sequence[float]) -> np.ndarray:
    """Columns of DISPERSION_COLUMNS for every row of a canonical feature matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != len(FEATURE_COLUMNS):
        raise DomainError(f"expected {len(FEATURE_COLUMNS)} feature columns, got {x.shape[1]}")
    depth, amplitude = x[:, :N_FREQUENCIES], x[:, N_FREQUENCIES:]
    operator = _fit_operator(frequencies)

    # fitted relative to the last frequency; only the intercept needs the offset back
    depth_coef = (depth - depth[:, -1:]) @ operator.T
    log_amp = np.log(np.maximum(amplitude, _TINY_AMPLITUDE))
    log_amp_coef = (log_amp - log_amp[:, -1:]) @ operator.T
    v = -6.0 * depth_coef[:, 1]
    w = -2.0 * log_amp_coef[:, 1]
    bias = bias_from_curvatures(v, w)
    return np.column_stack([v, w, bias, depth_coef[:, 0] + depth[:, -1] - bias, amplitude[:, -1] * depth[:, -1] ** 2])


def expand_features(x: np.ndarray, frequencies: Sequence[float]) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.hstack([x, dispersion_features(x, frequencies)])


def fit_corrector(
    x: np.ndarray, y: np.ndarray, cfg: TrainConfig, frequencies: Sequence[float], threads: int = 1
) -> BoosterModel:
    """Booster on the expanded features, learning the residual over the highest-frequency raw depth."""
    return fit(
        expand_features(x, frequencies),
        y,
        cfg,
        MODEL_COLUMNS,
        offset_feature=RESIDUAL_BASE_COLUMN,
        modulation_hz=frequencies,
        threads=threads,
    )


def model_inputs(model: BoosterModel, x: np.ndarray) -> np.ndarray:
    """Canonical features rearranged into what ``model`` was trained on."""
    names = tuple(model.feature_names)
    if not names or names == FEATURE_COLUMNS:
        return np.atleast_2d(np.asarray(x, dtype=float))
    if names != MODEL_COLUMNS:
        raise ModelFormatError(f"model features {list(names)} match neither known column layout")
    if len(model.modulation_hz) != N_FREQUENCIES:
        raise ModelFormatError("model trained on dispersion features does not record its modulation frequencies")
    return expand_features(x, model.modulation_hz)


def corrected_depth(model: BoosterModel, x: np.ndarray) -> Union[float, np.ndarray]:
    single = np.ndim(x) == 1
    prediction = model.predict(model_inputs(model, x))
    return float(np.atleast_1d(prediction)[0]) if single else prediction


def check_frequencies(model: BoosterModel, frequencies: Sequence[float]) -> Tuple[float, ...]:
    """The model's recorded frequencies, when they agree with ``frequencies`` to 1 Hz."""
    recorded = tuple(model.modulation_hz)
    if recorded and (len(recorded) != len(frequencies) or not np.allclose(recorded, frequencies, rtol=0.0, atol=1.0)):
        raise ModelFormatError(
            f"model was trained at {[f / 1e6 for f in recorded]} MHz but the data is at "
            f"{[f / 1e6 for f in frequencies]} MHz"
        )
    return recorded
