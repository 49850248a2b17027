import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import ndtr
from scipy.stats import truncnorm

from ..errors import DomainError
from .artifacts import write_rows_csv

logger = logging.getLogger(__name__)

EPS = 1e-12

ParamKind = Literal["uniform", "log_uniform", "int_uniform"]
ParamValue = Union[int, float]
Params = Dict[str, ParamValue]
Objective = Callable[[Params], float]


class ParamSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    kind: ParamKind
    min: float
    max: float

    @model_validator(mode="after")
    def _valid_bounds(self) -> "ParamSpec":
        if not self.min < self.max:
            raise ValueError(f"{self.name}: min {self.min} must be < max {self.max}")
        if self.kind == "log_uniform" and self.min <= 0:
            raise ValueError(f"{self.name}: log_uniform needs min > 0")
        if self.kind == "int_uniform" and not (float(self.min).is_integer() and float(self.max).is_integer()):
            raise ValueError(f"{self.name}: int_uniform bounds must be integers")
        return self

    # Internal representation: log space for log_uniform, a continuous range
    # widened by half a step on each side for int_uniform.

    @property
    def internal_low(self) -> float:
        if self.kind == "log_uniform":
            return math.log(self.min)
        if self.kind == "int_uniform":
            return self.min - 0.5
        return self.min

    @property
    def internal_high(self) -> float:
        if self.kind == "log_uniform":
            return math.log(self.max)
        if self.kind == "int_uniform":
            return self.max + 0.5
        return self.max

    def contains(self, x: float) -> bool:
        if self.kind == "int_uniform" and not float(x).is_integer():
            return False
        return self.min <= x <= self.max

    def to_internal(self, x: float) -> float:
        return math.log(x) if self.kind == "log_uniform" else float(x)

    def to_external(self, z: float) -> ParamValue:
        if self.kind == "log_uniform":
            return float(min(max(math.exp(z), self.min), self.max))
        if self.kind == "int_uniform":
            return int(min(max(round(z), self.min), self.max))
        return float(min(max(z, self.min), self.max))

    def sample_prior(self, rng: np.random.Generator) -> ParamValue:
        if self.kind == "int_uniform":
            return int(rng.integers(int(self.min), int(self.max) + 1))
        return self.to_external(float(rng.uniform(self.internal_low, self.internal_high)))


@dataclass
class Trial:
    iteration: int
    params: Params
    loss: Optional[float]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.loss is not None


class TpeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mu_th: int = Field(default=30, ge=1)
    n_startup: int = Field(default=10, ge=0)
    gamma_quantile: float = Field(default=0.25, gt=0, lt=1)
    n_candidates: int = Field(default=24, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _startup_below_budget(self) -> "TpeConfig":
        if self.n_startup >= self.mu_th:
            raise ValueError(f"n_startup ({self.n_startup}) must be < mu_th ({self.mu_th})")
        return self


@dataclass
class OptimizationResult:
    best_params: Params
    best_loss: float
    history: List[Trial] = field(default_factory=list)


GBTREE_SEARCH_SPACE = (
    ParamSpec(name="k_trees", kind="int_uniform", min=100, max=1000),
    ParamSpec(name="max_depth", kind="int_uniform", min=3, max=12),
    ParamSpec(name="learning_rate", kind="log_uniform", min=0.01, max=0.3),
    ParamSpec(name="lambda_reg", kind="log_uniform", min=1e-3, max=10.0),
    ParamSpec(name="gamma_reg", kind="uniform", min=0.0, max=5.0),
    ParamSpec(name="min_child_weight", kind="log_uniform", min=1.0, max=100.0),
    ParamSpec(name="subsample", kind="uniform", min=0.5, max=1.0),
)

KNN_SEARCH_SPACE = (ParamSpec(name="k", kind="int_uniform", min=1, max=50),)


class ParzenEstimator:
    """Equal-weight truncated Gaussian mixture over one parameter's internal range.

    One prior component sits at the middle of the range. Each component's
    bandwidth is the larger of the distance to its nearest neighbour and
    range / sqrt(number of components).
    """

    def __init__(self, points: Sequence[float], spec: ParamSpec):
        self.spec = spec
        self.low, self.high = spec.internal_low, spec.internal_high
        span = self.high - self.low
        self.mus = np.append(np.asarray(points, dtype=float), 0.5 * (self.low + self.high))
        floor = span / math.sqrt(len(self.mus))
        if len(self.mus) > 1:
            gaps = np.abs(self.mus[:, None] - self.mus[None, :])
            np.fill_diagonal(gaps, np.inf)
            self.sigmas = np.maximum(gaps.min(axis=1), floor)
        else:
            self.sigmas = np.array([floor])
        self.masses = ndtr((self.high - self.mus) / self.sigmas) - ndtr((self.low - self.mus) / self.sigmas)

    def _cdf(self, z: np.ndarray) -> np.ndarray:
        """Mixture CDF on the internal axis, one row per query value."""
        z = np.asarray(z, dtype=float)[..., None]
        below = ndtr((z - self.mus) / self.sigmas) - ndtr((self.low - self.mus) / self.sigmas)
        return np.mean(below / self.masses, axis=-1)

    def internal_pdf(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)[..., None]
        u = (z - self.mus) / self.sigmas
        kernels = np.exp(-0.5 * u**2) / (math.sqrt(2.0 * math.pi) * self.sigmas * self.masses)
        return np.mean(kernels, axis=-1)

    def density(self, x: np.ndarray) -> np.ndarray:
        """Density of external values (a probability mass for int_uniform)."""
        x = np.asarray(x, dtype=float)
        if self.spec.kind == "int_uniform":
            return self._cdf(x + 0.5) - self._cdf(x - 0.5)
        if self.spec.kind == "log_uniform":
            return self.internal_pdf(np.log(x)) / x
        return self.internal_pdf(x)

    def log_score(self, z: np.ndarray) -> np.ndarray:
        """Log density of internal candidates, on the lattice for int_uniform."""
        z = np.asarray(z, dtype=float)
        if self.spec.kind == "int_uniform":
            k = np.clip(np.round(z), self.spec.min, self.spec.max)
            values = self._cdf(k + 0.5) - self._cdf(k - 0.5)
        else:
            values = self.internal_pdf(z)
        return np.log(values + EPS)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        which = rng.integers(0, len(self.mus), size=size)
        mu, sigma = self.mus[which], self.sigmas[which]
        a, b = (self.low - mu) / sigma, (self.high - mu) / sigma
        return truncnorm.rvs(a, b, loc=mu, scale=sigma, size=size, random_state=rng)


def parzen_pdf(points: Sequence[ParamValue], spec: ParamSpec, x: ParamValue) -> float:
    if not spec.contains(x):
        raise DomainError(f"{spec.name}={x} lies outside [{spec.min}, {spec.max}]")
    estimator = ParzenEstimator([spec.to_internal(p) for p in points], spec)
    return float(estimator.density(np.array([x]))[0])


class TpeSampler:
    def __init__(self, space: Sequence[ParamSpec], cfg: TpeConfig):
        if not space:
            raise DomainError("search space is empty")
        self.space = list(space)
        self.cfg = cfg

    def _sample_prior(self, rng: np.random.Generator) -> Params:
        return {spec.name: spec.sample_prior(rng) for spec in self.space}

    def _split_trials(self, trials: List[Trial]):
        order = sorted(range(len(trials)), key=lambda i: trials[i].loss)
        n_good = max(1, math.ceil(self.cfg.gamma_quantile * len(trials)))
        good = [trials[i] for i in order[:n_good]]
        bad = [trials[i] for i in order[n_good:]]
        return good, bad

    def _build_parzen_estimator(self, spec: ParamSpec, trials: List[Trial]) -> ParzenEstimator:
        return ParzenEstimator([spec.to_internal(t.params[spec.name]) for t in trials], spec)

    def suggest(self, history: Sequence[Trial], rng: np.random.Generator) -> Params:
        completed = [t for t in history if t.ok]
        if len(history) < self.cfg.n_startup or not completed:
            return self._sample_prior(rng)

        good, bad = self._split_trials(completed)
        candidates: Dict[str, np.ndarray] = {}
        acquisition = np.zeros(self.cfg.n_candidates)
        for spec in self.space:
            mpe_good = self._build_parzen_estimator(spec, good)
            mpe_bad = self._build_parzen_estimator(spec, bad)
            samples = mpe_good.sample(rng, self.cfg.n_candidates)
            candidates[spec.name] = samples
            acquisition += mpe_good.log_score(samples) - mpe_bad.log_score(samples)

        best = int(np.argmax(acquisition))
        return {spec.name: spec.to_external(float(candidates[spec.name][best])) for spec in self.space}


def suggest(
    history: Sequence[Trial], space: Sequence[ParamSpec], cfg: TpeConfig, rng: np.random.Generator
) -> Params:
    return TpeSampler(space, cfg).suggest(history, rng)


def _run_trial(objective: Objective, params: Params, iteration: int) -> Trial:
    try:
        loss = float(objective(params))
        if not math.isfinite(loss):
            raise ValueError(f"objective returned non-finite loss {loss}")
    except Exception as e:
        logger.warning("trial %d failed: %s", iteration, e)
        return Trial(iteration=iteration, params=params, loss=None, error=str(e))
    return Trial(iteration=iteration, params=params, loss=loss)


def _finish(history: List[Trial]) -> OptimizationResult:
    completed = [t for t in history if t.ok]
    if not completed:
        raise RuntimeError(f"all {len(history)} trials failed")
    best = min(completed, key=lambda t: t.loss)
    return OptimizationResult(best_params=dict(best.params), best_loss=best.loss, history=history)


def optimize(objective: Objective, space: Sequence[ParamSpec], cfg: Optional[TpeConfig] = None) -> OptimizationResult:
    """Run exactly ``mu_th`` sequential trials and return the lowest-loss one."""
    cfg = cfg or TpeConfig()
    sampler = TpeSampler(space, cfg)
    rng = np.random.default_rng(cfg.seed)
    history: List[Trial] = []
    for t in range(cfg.mu_th):
        params = sampler.suggest(history, rng)
        trial = _run_trial(objective, params, t)
        history.append(trial)
        if trial.ok:
            logger.info("trial %d/%d: loss %.6g %s", t + 1, cfg.mu_th, trial.loss, params)
    return _finish(history)


def random_search(objective: Objective, space: Sequence[ParamSpec], n_trials: int, seed: int = 0) -> OptimizationResult:
    rng = np.random.default_rng(seed)
    history = [_run_trial(objective, {s.name: s.sample_prior(rng) for s in space}, t) for t in range(n_trials)]
    return _finish(history)


def best_so_far(history: Sequence[Trial]) -> List[Optional[float]]:
    running: List[Optional[float]] = []
    best: Optional[float] = None
    for trial in history:
        if trial.ok and (best is None or trial.loss < best):
            best = trial.loss
        running.append(best)
    return running


def write_history_csv(history: Sequence[Trial], space: Sequence[ParamSpec], path: Path) -> Path:
    header = ["iteration", "loss"] + [spec.name for spec in space] + ["best_so_far"]
    rows = [
        [t.iteration, "" if t.loss is None else t.loss]
        + [t.params[spec.name] for spec in space]
        + ["" if running is None else running]
        for t, running in zip(history, best_so_far(history))
    ]
    return write_rows_csv(path, header, rows)
