import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..errors import DegenerateError, DomainError, ModelFormatError
from .artifacts import write_json

logger = logging.getLogger(__name__)

MODEL_SCHEMA_VERSION = 1
LEAF = -1
# nodes smaller than this scan their features on the calling thread
PARALLEL_MIN_ROWS = 4096


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k_trees: int = Field(default=100, ge=0)
    max_depth: int = Field(default=6, ge=0)
    learning_rate: float = Field(default=0.1, gt=0, le=1)
    lambda_reg: float = Field(default=1.0, ge=0)
    gamma_reg: float = Field(default=0.0, ge=0)
    min_child_weight: float = Field(default=1.0, ge=0)
    subsample: float = Field(default=1.0, gt=0, le=1)
    seed: int = Field(default=0, ge=0)


@dataclass(frozen=True)
class GradHessPair:
    g: Union[float, np.ndarray]
    h: Union[float, np.ndarray]


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    gain: float


def squared_loss_grad_hess(y, yhat) -> GradHessPair:
    """Derivatives of L = (y - yhat)^2 with respect to yhat."""
    if np.ndim(y) == 0 and np.ndim(yhat) == 0:
        return GradHessPair(2.0 * (float(yhat) - float(y)), 2.0)
    g = 2.0 * (np.asarray(yhat, dtype=float) - np.asarray(y, dtype=float))
    return GradHessPair(g, np.full_like(g, 2.0))


def leaf_weight(g_sum: float, h_sum: float, lambda_reg: float) -> float:
    denom = h_sum + lambda_reg
    if denom <= 0.0:
        raise DegenerateError(f"leaf has h_sum + lambda = {denom}; the weight is undefined")
    if g_sum == 0.0:
        return 0.0
    return -g_sum / denom


def split_gain(gl: float, hl: float, gr: float, hr: float, lambda_reg: float, gamma_reg: float) -> float:
    left = gl**2 / (hl + lambda_reg)
    right = gr**2 / (hr + lambda_reg)
    parent = (gl + gr) ** 2 / (hl + hr + lambda_reg)
    return 0.5 * (left + right - parent) - gamma_reg


def _midpoint(a: float, b: float) -> float:
    threshold = 0.5 * (a + b)
    # adjacent floats: the midpoint rounds onto a
    if not a < threshold <= b:
        threshold = b
    return threshold


def _presort(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Row indices ordered by each feature: shape (n_features, len(rows)), ties kept in row order."""
    rows = np.asarray(rows, dtype=np.int64)
    order = np.argsort(x[rows], axis=0, kind="stable")
    return np.ascontiguousarray(rows[order].T)


def _partition(sorted_rows: np.ndarray, goes_left: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Split every feature order by ``goes_left`` (indexed by row id); each side stays sorted."""
    keep = goes_left[sorted_rows]
    n_features, n_rows = sorted_rows.shape
    n_left = int(np.count_nonzero(keep[0]))
    return (
        sorted_rows[keep].reshape(n_features, n_left),
        sorted_rows[~keep].reshape(n_features, n_rows - n_left),
    )


def _scan_features(
    x: np.ndarray,
    sorted_rows: np.ndarray,
    features: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    g_total: float,
    h_total: float,
    cfg: TrainConfig,
) -> Optional[SplitCandidate]:
    block = sorted_rows[features]
    v = x[block, features[:, None]]
    gl = np.cumsum(g[block], axis=1)[:, :-1]
    hl = np.cumsum(h[block], axis=1)[:, :-1]
    gr, hr = g_total - gl, h_total - hl

    valid = (v[:, :-1] < v[:, 1:]) & (hl >= cfg.min_child_weight) & (hr >= cfg.min_child_weight)
    if not valid.any():
        return None
    parent_score = g_total**2 / (h_total + cfg.lambda_reg)
    with np.errstate(divide="ignore", invalid="ignore"):
        gains = 0.5 * (gl**2 / (hl + cfg.lambda_reg) + gr**2 / (hr + cfg.lambda_reg) - parent_score) - cfg.gamma_reg
    gains = np.where(valid, gains, -np.inf)
    # row-major argmax: lowest feature first, then the lowest threshold
    j, i = divmod(int(np.argmax(gains)), gains.shape[1])
    return SplitCandidate(int(features[j]), _midpoint(float(v[j, i]), float(v[j, i + 1])), float(gains[j, i]))


def _best_presorted_split(
    x: np.ndarray,
    sorted_rows: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    cfg: TrainConfig,
    pool: Optional[ThreadPoolExecutor] = None,
    threads: int = 1,
) -> Optional[SplitCandidate]:
    n_features, n_rows = sorted_rows.shape
    if n_rows < 2:
        return None
    g_total, h_total = math.fsum(g[sorted_rows[0]]), math.fsum(h[sorted_rows[0]])
    features = np.arange(n_features)
    if pool is None or threads < 2 or n_rows < PARALLEL_MIN_ROWS:
        blocks = [features]
    else:
        blocks = [b for b in np.array_split(features, threads) if len(b)]

    def scan(block: np.ndarray) -> Optional[SplitCandidate]:
        return _scan_features(x, sorted_rows, block, g, h, g_total, h_total, cfg)

    found = list(pool.map(scan, blocks)) if len(blocks) > 1 else [scan(blocks[0])]
    best: Optional[SplitCandidate] = None
    for candidate in found:
        if candidate is not None and (best is None or candidate.gain > best.gain):
            best = candidate
    if best is None or not best.gain > 0.0:
        return None
    return best


def find_best_split(
    x: np.ndarray, rows: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: TrainConfig
) -> Optional[SplitCandidate]:
    """Exact greedy split over every feature and every gap between distinct values.

    Ties go to the lower feature index, then the lower threshold.
    """
    if len(rows) < 2:
        return None
    x = np.asarray(x, dtype=float)
    return _best_presorted_split(x, _presort(x, rows), np.asarray(g, dtype=float), np.asarray(h, dtype=float), cfg)


@dataclass
class RegressionTree:
    """Binary tree in flat preorder arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: Optional[int] = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=float)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=float)
        self._check_structure()

    def _check_structure(self) -> None:
        n = len(self.feature)
        if n == 0:
            raise ModelFormatError("tree has no nodes")
        if not all(len(a) == n for a in (self.threshold, self.left, self.right, self.value)):
            raise ModelFormatError("tree node arrays differ in length")
        parents = np.zeros(n, dtype=int)
        for i in range(n):
            if self.feature[i] == LEAF:
                if not math.isfinite(self.value[i]):
                    raise ModelFormatError(f"node {i}: leaf weight is not finite")
                continue
            if self.feature[i] < 0 or (self.n_features is not None and self.feature[i] >= self.n_features):
                raise ModelFormatError(f"node {i}: feature index {self.feature[i]} out of range")
            if not math.isfinite(self.threshold[i]):
                raise ModelFormatError(f"node {i}: threshold is not finite")
            for child in (self.left[i], self.right[i]):
                # preorder storage: children always follow their parent
                if not i < child < n:
                    raise ModelFormatError(f"node {i}: child index {child} is invalid")
                parents[child] += 1
        if parents[0] != 0 or np.any(parents[1:] != 1):
            raise ModelFormatError("tree nodes do not form a single binary tree")

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature == LEAF))

    @property
    def depth(self) -> int:
        depths = np.zeros(len(self.feature), dtype=int)
        for i in range(len(self.feature)):
            if self.feature[i] != LEAF:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    @property
    def leaf_weights(self) -> np.ndarray:
        return self.value[self.feature == LEAF]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of x (left when feature < threshold)."""
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            current = node[idx]
            go_left = x[idx, self.feature[current]] < self.threshold[current]
            node[idx] = np.where(go_left, self.left[current], self.right[current])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]


class _TreeBuilder:
    def __init__(
        self,
        x: np.ndarray,
        g: np.ndarray,
        h: np.ndarray,
        cfg: TrainConfig,
        pool: Optional[ThreadPoolExecutor] = None,
        threads: int = 1,
    ):
        self.x, self.g, self.h, self.cfg = x, g, h, cfg
        self.pool, self.threads = pool, threads
        # scratch side flags, only read back for the rows of the node being split
        self.goes_left = np.zeros(len(x), dtype=bool)
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[float] = []

    def _new_node(self) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(0.0)
        return len(self.feature) - 1

    def grow(self, sorted_rows: np.ndarray, depth: int) -> int:
        node = self._new_node()
        rows = sorted_rows[0]
        split = None
        if depth < self.cfg.max_depth:
            split = _best_presorted_split(self.x, sorted_rows, self.g, self.h, self.cfg, self.pool, self.threads)
        if split is None:
            self.value[node] = leaf_weight(math.fsum(self.g[rows]), math.fsum(self.h[rows]), self.cfg.lambda_reg)
            return node
        self.goes_left[rows] = self.x[rows, split.feature] < split.threshold
        left_rows, right_rows = _partition(sorted_rows, self.goes_left)
        self.feature[node] = split.feature
        self.threshold[node] = split.threshold
        self.left[node] = self.grow(left_rows, depth + 1)
        self.right[node] = self.grow(right_rows, depth + 1)
        return node

    def tree(self) -> RegressionTree:
        return RegressionTree(
            np.array(self.feature),
            np.array(self.threshold),
            np.array(self.left),
            np.array(self.right),
            np.array(self.value),
            n_features=self.x.shape[1],
        )


def _grow_presorted(
    x: np.ndarray,
    sorted_rows: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    cfg: TrainConfig,
    pool: Optional[ThreadPoolExecutor] = None,
    threads: int = 1,
) -> RegressionTree:
    builder = _TreeBuilder(x, g, h, cfg, pool, threads)
    builder.grow(sorted_rows, 0)
    return builder.tree()


def grow_tree(x: np.ndarray, rows: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: TrainConfig) -> RegressionTree:
    if len(rows) == 0:
        raise DomainError("cannot grow a tree on zero rows")
    x = np.asarray(x, dtype=float)
    return _grow_presorted(x, _presort(x, rows), np.asarray(g, dtype=float), np.asarray(h, dtype=float), cfg)


@dataclass
class BoosterModel:
    """Additive tree ensemble.

    With ``offset_feature`` set, that input column is added to every prediction,
    so the trees model a residual on top of it. ``modulation_hz`` records the
    modulation frequencies of the depth features the model was trained on.
    """

    base_score: float
    learning_rate: float
    trees: List[RegressionTree] = field(default_factory=list)
    config: TrainConfig = field(default_factory=TrainConfig)
    feature_names: Tuple[str, ...] = ()
    offset_feature: Optional[int] = None
    modulation_hz: Tuple[float, ...] = ()

    def predict(self, x: np.ndarray) -> Union[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if not np.all(np.isfinite(x)):
            raise DomainError("features must be finite")
        if self.feature_names and x.shape[1] != len(self.feature_names):
            raise DomainError(f"model expects {len(self.feature_names)} features, got {x.shape[1]}")
        if self.offset_feature is not None and not 0 <= self.offset_feature < x.shape[1]:
            raise DomainError(f"offset feature {self.offset_feature} is outside {x.shape[1]} features")
        prediction = np.full(len(x), self.base_score)
        if self.offset_feature is not None:
            prediction += x[:, self.offset_feature]
        for tree in self.trees:
            prediction += self.learning_rate * tree.predict(x)
        return float(prediction[0]) if single else prediction

    def __call__(self, x: np.ndarray) -> Union[float, np.ndarray]:
        return self.predict(x)


def _check_training_data(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or len(x) != len(y):
        raise DomainError(f"feature matrix {x.shape} does not match {len(y)} targets")
    if len(y) == 0:
        raise DomainError("cannot fit on an empty training set")
    if x.shape[1] == 0:
        raise DomainError("cannot fit without features")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("training features and targets must be finite")


def fit(
    x: np.ndarray,
    y: np.ndarray,
    cfg: Optional[TrainConfig] = None,
    feature_names: Sequence[str] = (),
    offset_feature: Optional[int] = None,
    modulation_hz: Sequence[float] = (),
    threads: int = 1,
) -> BoosterModel:
    """Second-order boosting on squared loss.

    Each feature is sorted once; every tree partitions those orders down its
    nodes instead of sorting again. ``threads > 1`` scans blocks of features
    concurrently on large nodes.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    _check_training_data(x, y)
    if offset_feature is not None and not 0 <= offset_feature < x.shape[1]:
        raise DomainError(f"offset feature {offset_feature} is outside {x.shape[1]} features")

    n = len(y)
    offset = x[:, offset_feature] if offset_feature is not None else np.zeros(n)
    base_score = math.fsum(y - offset) / n
    prediction = offset + base_score
    rng = np.random.default_rng(cfg.seed)
    n_sub = max(1, round(cfg.subsample * n))
    in_sample = np.zeros(n, dtype=bool)
    trees: List[RegressionTree] = []
    started = time.perf_counter()
    sorted_all = _presort(x, np.arange(n))

    with ThreadPoolExecutor(max_workers=threads) if threads > 1 else nullcontext() as pool:
        for t in range(cfg.k_trees):
            gh = squared_loss_grad_hess(y, prediction)
            sorted_rows = sorted_all
            if cfg.subsample < 1.0:
                in_sample[:] = False
                in_sample[rng.choice(n, size=n_sub, replace=False)] = True
                sorted_rows, _ = _partition(sorted_all, in_sample)
            tree = _grow_presorted(x, sorted_rows, gh.g, gh.h, cfg, pool, threads)
            trees.append(tree)
            prediction += cfg.learning_rate * tree.predict(x)
            if (t + 1) % 50 == 0:
                rmse = math.sqrt(np.mean((y - prediction) ** 2))
                logger.info("round %d/%d: train RMSE %.6g m", t + 1, cfg.k_trees, rmse)

    logger.info("fitted %d trees on %d rows in %.1fs", len(trees), n, time.perf_counter() - started)
    return BoosterModel(
        base_score, cfg.learning_rate, trees, cfg, tuple(feature_names), offset_feature, tuple(modulation_hz)
    )


def predict(model: BoosterModel, x: np.ndarray) -> Union[float, np.ndarray]:
    return model.predict(x)


def objective_value(model: BoosterModel, x: np.ndarray, y: np.ndarray) -> float:
    """Squared error plus gamma*T + lambda/2*sum(w^2) summed over every tree."""
    y = np.asarray(y, dtype=float).ravel()
    residual = y - np.atleast_1d(model.predict(np.atleast_2d(x)))
    loss = math.fsum(residual**2)
    penalty = math.fsum(
        model.config.gamma_reg * tree.n_leaves + 0.5 * model.config.lambda_reg * math.fsum(tree.leaf_weights**2)
        for tree in model.trees
    )
    return loss + penalty


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

class SplitNodeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    feature: int
    threshold: float
    left: int
    right: int


class LeafNodeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    leaf_weight: float


class TreeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nodes: List[Union[SplitNodeDoc, LeafNodeDoc]]


class ModelDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int
    base_score: float
    learning_rate: float
    feature_names: List[str] = []
    offset_feature: Optional[int] = None
    modulation_hz: List[float] = []
    config: TrainConfig = TrainConfig()
    trees: List[TreeDoc]


def _tree_to_doc(tree: RegressionTree) -> TreeDoc:
    nodes: List[Union[SplitNodeDoc, LeafNodeDoc]] = []
    for i in range(len(tree.feature)):
        if tree.feature[i] == LEAF:
            nodes.append(LeafNodeDoc(leaf_weight=float(tree.value[i])))
        else:
            nodes.append(
                SplitNodeDoc(
                    feature=int(tree.feature[i]),
                    threshold=float(tree.threshold[i]),
                    left=int(tree.left[i]),
                    right=int(tree.right[i]),
                )
            )
    return TreeDoc(nodes=nodes)


def _tree_from_doc(doc: TreeDoc, n_features: Optional[int]) -> RegressionTree:
    n = len(doc.nodes)
    feature, threshold = np.full(n, LEAF), np.zeros(n)
    left, right, value = np.full(n, LEAF), np.full(n, LEAF), np.zeros(n)
    for i, node in enumerate(doc.nodes):
        if isinstance(node, LeafNodeDoc):
            value[i] = node.leaf_weight
        else:
            feature[i], threshold[i], left[i], right[i] = node.feature, node.threshold, node.left, node.right
    return RegressionTree(feature, threshold, left, right, value, n_features=n_features)


def save_model(model: BoosterModel, path: Path) -> Path:
    doc = ModelDoc(
        schema_version=MODEL_SCHEMA_VERSION,
        base_score=model.base_score,
        learning_rate=model.learning_rate,
        feature_names=list(model.feature_names),
        offset_feature=model.offset_feature,
        modulation_hz=list(model.modulation_hz),
        config=model.config,
        trees=[_tree_to_doc(tree) for tree in model.trees],
    )
    return write_json(path, doc.model_dump(mode="json"))


def load_model(path: Path) -> BoosterModel:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not a JSON document ({e})") from e
    if not isinstance(raw, dict):
        raise ModelFormatError(f"{path}: model file must hold a JSON object")
    if raw.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model schema_version {raw.get('schema_version')!r}, expected {MODEL_SCHEMA_VERSION}"
        )
    try:
        doc = ModelDoc.model_validate(raw)
    except ValidationError as e:
        raise ModelFormatError(f"{path}: invalid model file: {e}") from e
    if not (math.isfinite(doc.base_score) and 0.0 < doc.learning_rate <= 1.0):
        raise ModelFormatError(f"{path}: base_score must be finite and learning_rate in (0, 1]")

    n_features = len(doc.feature_names) or None
    offset = doc.offset_feature
    if offset is not None and (offset < 0 or (n_features is not None and offset >= n_features)):
        raise ModelFormatError(f"{path}: offset_feature {doc.offset_feature} is not a feature index")
    if not all(math.isfinite(f) and f > 0.0 for f in doc.modulation_hz):
        raise ModelFormatError(f"{path}: modulation frequencies must be positive and finite")
    trees = []
    for t, tree_doc in enumerate(doc.trees):
        try:
            trees.append(_tree_from_doc(tree_doc, n_features))
        except ModelFormatError as e:
            raise ModelFormatError(f"{path}: tree {t}: {e}") from e
    return BoosterModel(
        doc.base_score,
        doc.learning_rate,
        trees,
        doc.config,
        tuple(doc.feature_names),
        doc.offset_feature,
        tuple(doc.modulation_hz),
    )
