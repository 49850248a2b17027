import logging
import time
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel

from ..config import RunConfig
from ..errors import ConfigurationError, DatasetFormatError, ModelFormatError
from ..services import artifacts, dataset_gen, dispersion, evalkit, gbtree, scene_studio, tpe_opt

logger = logging.getLogger(__name__)

HYPERPARAMS_SCHEMA_VERSION = 1


class GenerateResult(BaseModel):
    command: str = "generate"
    dataset: str
    n: int
    seed: int
    raw_mae_mm: Dict[str, float]


class TuneResult(BaseModel):
    command: str = "tune"
    hyperparams: str
    trials: int
    best_loss: float
    best_params: dict
    knn_k: Optional[int] = None


class TrainResult(BaseModel):
    command: str = "train"
    model: str
    n_trees: int
    mae_train_mm: float
    mae_test_mm: float
    train_time_s: float


class EvalResult(BaseModel):
    command: str = "eval"
    metrics: str
    raw_test: dict
    corrected_test: dict


class SceneResult(BaseModel):
    command: str = "scene"
    files: List[str]
    metrics: dict


class ReportResult(BaseModel):
    command: str = "report"
    report_csv: str
    report_text: str
    rows: List[evalkit.ReportRow]
    acceptance: List[evalkit.AcceptanceCheck] = []


def mhz_label(f: float) -> str:
    return f"{f / 1e6:g}MHz"


def _load_split(config: RunConfig, dataset: Path):
    """Train and test arrays of a dataset file, plus the modulation frequencies its features were measured at."""
    samples, meta = dataset_gen.read_csv(dataset)
    if not samples:
        raise DatasetFormatError(f"{dataset}: the dataset holds no samples")
    train, test = dataset_gen.split_train_test(samples, config.dataset.train_fraction, config.seed)
    if not train or not test:
        raise DatasetFormatError(
            f"{dataset}: {len(samples)} samples leave {len(train)} for training and {len(test)} for testing "
            f"at train_fraction {config.dataset.train_fraction}; both need at least one"
        )
    frequencies = meta.frequencies if meta is not None else [cfg.f for cfg in config.modulations]
    return dataset_gen.to_arrays(train), dataset_gen.to_arrays(test), frequencies


def _load_hyperparams(path: Optional[Path]) -> dict:
    if path is None or not Path(path).exists():
        return {}
    doc = artifacts.read_json(path)
    if not isinstance(doc, dict) or doc.get("schema_version") != HYPERPARAMS_SCHEMA_VERSION:
        raise ModelFormatError(f"{path}: unsupported hyperparameter file")
    return doc


def _train_config(config: RunConfig, hyperparams: dict) -> gbtree.TrainConfig:
    tuned = hyperparams.get("gbtree", {})
    return gbtree.TrainConfig.model_validate({**config.train.model_dump(), **tuned, "seed": config.seed})


def _knn_k(config: RunConfig, hyperparams: dict) -> int:
    return int(hyperparams.get("knn", {}).get("k", config.knn_k))


def cmd_generate(config: RunConfig, out: Path, n: Optional[int] = None, threads: int = 1) -> GenerateResult:
    out = Path(out)
    n = n or config.dataset.n
    samples, meta = dataset_gen.generate(
        n,
        config.seed,
        ranges=config.ranges,
        params=config.sensor,
        toggles=config.toggles,
        mode=config.dataset.mode,
        modulations=config.modulations,
        trace_cfg=config.trace,
        workers=threads,
        noise_scale=config.dataset.noise_scale,
    )
    out_of_range = dataset_gen.check_feature_bounds(samples, config.modulations)
    if out_of_range:
        raise DatasetFormatError(
            f"{len(out_of_range)} samples have depth features outside [0, c/2f)", row=out_of_range[0] + 2
        )

    dataset = dataset_gen.write_csv(samples, meta, out / config.paths.dataset)
    raw = dataset_gen.raw_error_stats(samples, meta.frequencies)
    x, y = dataset_gen.to_arrays(samples)
    raw_err_mm = (x[:, evalkit.RAW_DEPTH_COLUMN] - y) * evalkit.MM_PER_M
    histogram = evalkit.write_histogram_csv(
        evalkit.histogram(raw_err_mm, config.histogram_bin_mm), out / "raw_error_histogram.csv"
    )
    summary = artifacts.write_json(
        out / "dataset_summary.json",
        {"n": n, "seed": config.seed, "raw": {mhz_label(f): s.to_dict() for f, s in raw.items()}},
    )
    written = [dataset, dataset_gen.meta_path_for(dataset), histogram, summary]
    artifacts.update_manifest(out, "generate", config.digest(), config.seed, written)
    return GenerateResult(
        dataset=str(dataset), n=n, seed=config.seed, raw_mae_mm={mhz_label(f): s.mae for f, s in raw.items()}
    )


def _tuning_rows(config: RunConfig, dataset: Path):
    (x_train, y_train), _, frequencies = _load_split(config, dataset)
    rows = min(len(y_train), config.tune.max_rows)
    x_train, y_train = x_train[:rows], y_train[:rows]
    fit_idx, val_idx = dataset_gen.split_indices(rows, 1.0 - config.tune.validation_fraction, config.seed)
    if len(val_idx) == 0:
        raise DatasetFormatError(f"{dataset}: {rows} training rows leave none for tuning validation")
    return (x_train[fit_idx], y_train[fit_idx]), (x_train[val_idx], y_train[val_idx]), frequencies


def cmd_tune(config: RunConfig, out: Path, dataset: Optional[Path] = None, threads: int = 1) -> TuneResult:
    out = Path(out)
    dataset = dataset or out / config.paths.dataset
    (x_fit, y_fit), (x_val, y_val), frequencies = _tuning_rows(config, dataset)
    logger.info("tuning on %d rows, validating on %d", len(y_fit), len(y_val))
    expanded_fit = dispersion.expand_features(x_fit, frequencies)
    expanded_val = dispersion.expand_features(x_val, frequencies)

    def booster_objective(params: dict) -> float:
        cfg = gbtree.TrainConfig(**params, seed=config.seed)
        model = gbtree.fit(
            expanded_fit,
            y_fit,
            cfg,
            dispersion.MODEL_COLUMNS,
            offset_feature=dispersion.RESIDUAL_BASE_COLUMN,
            threads=threads,
        )
        return gbtree.objective_value(model, expanded_val, y_val)

    booster = tpe_opt.optimize(booster_objective, tpe_opt.GBTREE_SEARCH_SPACE, config.tpe)
    history = [tpe_opt.write_history_csv(booster.history, tpe_opt.GBTREE_SEARCH_SPACE, out / "tune_history.csv")]

    doc = {
        "schema_version": HYPERPARAMS_SCHEMA_VERSION,
        "gbtree": booster.best_params,
        "gbtree_loss": booster.best_loss,
        "gbtree_search_space": [spec.model_dump() for spec in tpe_opt.GBTREE_SEARCH_SPACE],
        "tpe": config.tpe.model_dump(),
    }
    knn_k = None
    if config.tune.tune_knn:

        def knn_objective(params: dict) -> float:
            model = evalkit.knn_fit(x_fit, y_fit, int(params["k"]), n_jobs=threads)
            return evalkit.error_stats(model.predict(x_val), y_val).mae

        knn = tpe_opt.optimize(knn_objective, tpe_opt.KNN_SEARCH_SPACE, config.tpe)
        history.append(tpe_opt.write_history_csv(knn.history, tpe_opt.KNN_SEARCH_SPACE, out / "tune_history_knn.csv"))
        knn_k = int(knn.best_params["k"])
        doc.update({"knn": {"k": knn_k}, "knn_loss": knn.best_loss})

    path = artifacts.write_json(out / config.paths.hyperparams, doc)
    artifacts.update_manifest(out, "tune", config.digest(), config.seed, [path] + history)
    return TuneResult(
        hyperparams=str(path),
        trials=len(booster.history),
        best_loss=booster.best_loss,
        best_params=booster.best_params,
        knn_k=knn_k,
    )


def cmd_train(
    config: RunConfig,
    out: Path,
    dataset: Optional[Path] = None,
    hyperparams: Optional[Path] = None,
    threads: int = 1,
) -> TrainResult:
    out = Path(out)
    dataset = dataset or out / config.paths.dataset
    hyperparams = hyperparams or out / config.paths.hyperparams
    (x_train, y_train), (x_test, y_test), frequencies = _load_split(config, dataset)
    cfg = _train_config(config, _load_hyperparams(hyperparams))

    started = time.perf_counter()
    model = dispersion.fit_corrector(x_train, y_train, cfg, frequencies, threads=threads)
    elapsed = time.perf_counter() - started
    train_stats = evalkit.error_stats(dispersion.corrected_depth(model, x_train), y_train)
    test_stats = evalkit.error_stats(dispersion.corrected_depth(model, x_test), y_test)

    model_path = gbtree.save_model(model, out / config.paths.model)
    report = artifacts.write_json(
        out / "train_report.json",
        {
            "train_config": cfg.model_dump(),
            "train": train_stats.to_dict(),
            "test": test_stats.to_dict(),
            "train_time_s": elapsed,
        },
    )
    artifacts.update_manifest(out, "train", config.digest(), config.seed, [model_path, report])
    return TrainResult(
        model=str(model_path),
        n_trees=len(model.trees),
        mae_train_mm=train_stats.mae,
        mae_test_mm=test_stats.mae,
        train_time_s=elapsed,
    )


def cmd_eval(config: RunConfig, out: Path, model: Optional[Path] = None, dataset: Optional[Path] = None) -> EvalResult:
    out = Path(out)
    booster = gbtree.load_model(model or out / config.paths.model)
    (x_train, y_train), (x_test, y_test), frequencies = _load_split(config, dataset or out / config.paths.dataset)
    dispersion.check_frequencies(booster, frequencies)

    rows: List[Tuple[str, str, evalkit.ErrorStats]] = []
    for split, x, y in (("train", x_train, y_train), ("test", x_test, y_test)):
        rows.append(("raw", split, evalkit.error_stats(evalkit.raw_depth_predictor(x), y)))
        rows.append(("gbtree", split, evalkit.error_stats(dispersion.corrected_depth(booster, x), y)))
    metrics = artifacts.write_rows_csv(
        out / "eval_metrics.csv",
        ("model", "split", "mae_mm", "rmse_mm", "bias_mm", "max_abs_mm", "n"),
        [(name, split, s.mae, s.rmse, s.bias, s.max_abs, s.n) for name, split, s in rows],
    )

    raw_err = (evalkit.raw_depth_predictor(x_test) - y_test) * evalkit.MM_PER_M
    corrected_err = (dispersion.corrected_depth(booster, x_test) - y_test) * evalkit.MM_PER_M
    files = [
        metrics,
        evalkit.write_histogram_csv(
            evalkit.histogram(raw_err, config.histogram_bin_mm), out / "eval_raw_histogram.csv"
        ),
        evalkit.write_histogram_csv(
            evalkit.histogram(corrected_err, config.histogram_bin_mm), out / "eval_corrected_histogram.csv"
        ),
    ]
    artifacts.update_manifest(out, "eval", config.digest(), config.seed, files)
    by_key = {(name, split): s for name, split, s in rows}
    return EvalResult(
        metrics=str(metrics),
        raw_test=by_key[("raw", "test")].to_dict(),
        corrected_test=by_key[("gbtree", "test")].to_dict(),
    )


def cmd_scene(config: RunConfig, out: Path, model: Optional[Path] = None, threads: int = 1) -> SceneResult:
    out = Path(out)
    booster = gbtree.load_model(model) if model is not None else None
    grid = scene_studio.trace_corner(config.corner)
    domain = None
    if booster is not None:
        dispersion.check_frequencies(booster, [cfg.f for cfg in config.modulations])
        # pixels whose detour exceeds the training range stay uncorrected and masked
        domain = scene_studio.correction_domain(grid, config.ranges.d_ab.max)
        if not domain.any():
            raise ConfigurationError(
                f"no corner pixel has an inter-plane distance within the training range of {config.ranges.d_ab.max} m"
            )
    maps = scene_studio.render_maps(
        grid,
        config.modulations,
        config.sensor,
        config.scene.toggles,
        config.seed,
        mode=config.scene.mode,
        trace_cfg=config.trace,
        workers=threads,
    )
    label = mhz_label(maps.frequencies[-1])
    raw_depth = maps.raw[-1]
    raw_errors = scene_studio.error_map(raw_depth, maps.truth)

    files = [
        artifacts.write_pfm(out / "truth_depth.pfm", maps.truth.values),
        artifacts.write_pgm(out / "mask.pgm", raw_depth.mask),
        artifacts.write_pfm(out / f"amplitude_{label}.pfm", maps.amplitude[-1].values),
        artifacts.write_grid_csv(out / f"raw_depth_{label}.csv", raw_depth.values),
        artifacts.write_pfm(out / f"raw_error_{label}.pfm", raw_errors.values),
        artifacts.write_grid_csv(out / f"raw_error_{label}.csv", raw_errors.values),
        evalkit.write_histogram_csv(
            evalkit.histogram(raw_errors.valid_values(), config.histogram_bin_mm), out / "scene_raw_histogram.csv"
        ),
    ]
    for f, depth in zip(maps.frequencies, maps.raw):
        files.append(artifacts.write_pfm(out / f"raw_depth_{mhz_label(f)}.pfm", depth.values))

    corrected_errors = None
    if booster is not None:
        corrected = scene_studio.correct_map(booster, maps, domain)
        corrected_errors = scene_studio.error_map(corrected, maps.truth)
        files += [
            artifacts.write_pgm(out / "correction_mask.pgm", corrected.mask),
            artifacts.write_pfm(out / "corrected_depth.pfm", corrected.values),
            artifacts.write_grid_csv(out / "corrected_depth.csv", corrected.values),
            artifacts.write_pfm(out / "corrected_error.pfm", corrected_errors.values),
            artifacts.write_grid_csv(out / "corrected_error.csv", corrected_errors.values),
            evalkit.write_histogram_csv(
                evalkit.histogram(corrected_errors.valid_values(), config.histogram_bin_mm),
                out / "scene_corrected_histogram.csv",
            ),
        ]

    metrics = scene_studio.scene_metrics(raw_errors, corrected_errors, scene_studio.seam_column(grid))
    files.append(artifacts.write_json(out / "scene_metrics.json", metrics))
    artifacts.update_manifest(out, "scene", config.digest(), config.seed, files)
    return SceneResult(files=[Path(f).name for f in files], metrics=metrics)


def cmd_report(config: RunConfig, artifacts_dir: Path, threads: int = 1) -> ReportResult:
    """Retrain the booster and the KNN baseline on the shared split, tabulate both, and check the targets."""
    artifacts_dir = Path(artifacts_dir)
    (x_train, y_train), (x_test, y_test), frequencies = _load_split(config, artifacts_dir / config.paths.dataset)
    hyperparams = _load_hyperparams(artifacts_dir / config.paths.hyperparams)
    cfg = _train_config(config, hyperparams)
    k = min(_knn_k(config, hyperparams), len(y_train))

    def train_booster(x, y):
        return partial(dispersion.corrected_depth, dispersion.fit_corrector(x, y, cfg, frequencies, threads=threads))

    raw_test = evalkit.error_stats(evalkit.raw_depth_predictor(x_test), y_test)
    rows = evalkit.comparison_report(
        {
            "gbtree": train_booster,
            "knn": lambda x, y: evalkit.knn_fit(x, y, k, n_jobs=threads).predict,
        },
        x_train,
        y_train,
        x_test,
        y_test,
        raw_test_mae_mm=raw_test.mae,
    )

    text = evalkit.format_report_text(rows)
    raw_label = mhz_label(frequencies[-1])
    text += f"\nraw {raw_label} test MAE {raw_test.mae:.3f} mm, RMSE {raw_test.rmse:.3f} mm\n"
    text += f"gbtree settings: {cfg.model_dump()}\nknn k: {k}\n"
    scene_ratio = None
    scene_file = artifacts_dir / "scene_metrics.json"
    if scene_file.exists():
        scene = artifacts.read_json(scene_file)
        text += f"scene: raw MAE {scene['raw']['mae']:.3f} mm"
        if "raw_on_corrected" in scene:
            scene_ratio = scene["corrected_to_raw_mae"]
            text += (
                f"; on the {scene['corrected']['n']} corrected pixels raw MAE "
                f"{scene['raw_on_corrected']['mae']:.3f} mm, corrected MAE {scene['corrected']['mae']:.3f} mm"
            )
        text += "\n"

    checks = evalkit.acceptance_checks(rows[0], scene_ratio)
    text += "\n" + evalkit.format_acceptance_text(rows[0].model, checks)
    for check in checks:
        if not check.passed:
            logger.warning(
                "%s: %s is %.3f, target %s %g",
                rows[0].model,
                check.name,
                check.achieved,
                check.comparison,
                check.target,
            )

    report_csv = evalkit.write_report_csv(rows, artifacts_dir / "report.csv")
    report_txt = artifacts_dir / "report.txt"
    report_txt.write_text(text, encoding="utf-8")
    artifacts.update_manifest(artifacts_dir, "report", config.digest(), config.seed, [report_csv, report_txt])
    return ReportResult(report_csv=str(report_csv), report_text=str(report_txt), rows=rows, acceptance=checks)
