"""Experiment orchestration: cross-validated training, baselines,
urban/rural stratification, country hold-out, fine-tune sweeps, exports.

Every run writes into its own output directory:

    metrics.csv       one row per outcome (report column order)
    predictions.csv   geocode,lat,lon,outcome,score,label,fold
    sweep.csv         finetune sweeps only: outcome,fraction,auroc,n_tune,n_test
    checkpoint_*.gick trained fold/base models
    run_manifest.txt  config hash, seed, resolved settings, warnings

Reruns with the same resolved config and seed reproduce metrics.csv byte
for byte. The config hash covers every result-affecting field (seed and
output directory excluded) and is whitespace-insensitive because it is
computed from parsed values, never raw text.

Desk-scale defaults (micro model, small batches, learning rate 1e-3)
keep runs in the minutes range; the full-scale recipe (resnet18, batch
128, learning rate 1e-4 with L2 1e-3) remains reachable through the same
knobs.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from geoinfra.autodiff import Tensor, _sigmoid_stable
from geoinfra.baselines import (
    FeatureStandardizer,
    LabeledPoint,
    fit_logistic,
    get_classifier,
    load_osm_csv,
    nearest_neighbor_predict_many,
    nightlights_features,
    oracle_fit,
    osm_raw_features,
)
from geoinfra.data import (
    FRACTION,
    FRACTION_TEST,
    FRACTION_TUNE,
    HOLDOUT,
    HOLDOUT_TEST,
    HOLDOUT_TRAIN,
    KFOLD,
    NormalizationStats,
    RasterSource,
    SurveyRecord,
    load_manifest,
    load_raster,
    load_survey,
    make_splits,
    normalize_array,
)
from geoinfra.errors import DataError
from geoinfra.metrics import (
    REPORT_HEADER,
    FoldPredictions,
    aggregate_kfold,
    auroc,
    compute_report,
)
from geoinfra.models import (
    NetworkConfig,
    build_network,
    save_checkpoint,
)
from geoinfra.optim import AdamConfig, AdamState, train_epoch
from geoinfra.rng import RngState

PREDICTION_HEADER = "geocode,lat,lon,outcome,score,label,fold"
SWEEP_HEADER = "outcome,fraction,auroc,n_tune,n_test"

DEFAULT_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    survey: str
    manifest: str
    out_dir: str
    seed: int
    outcomes: tuple = ("electricity", "sewerage", "piped_water", "road")
    variant: str = "micro"
    input_size: int = 0  # 0: use patches at their native size
    crop: str = "center"  # center | random (training-time augmentation)
    k_folds: int = 5
    epochs: int = 6
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-3
    lr_decay: float = 1.0
    threshold: float = 0.5
    label_mode: str = "multi"  # multi | single (one model per outcome)
    early_stop_patience: int = 0
    baseline_kind: str = ""
    osm: str = ""
    band: int = 0  # band used when deriving nightlights views from multiband rasters
    nightlights_style: str = "dmsp"  # dmsp | viirs window size
    classifier: str = "logistic"  # feature-baseline classifier (plug-in registry)
    country: str = ""
    fractions: tuple = DEFAULT_FRACTIONS
    holdout_weight_decay: float = 0.01  # the documented "strong regularization"
    finetune_l2: float = 0.1

    def adam(self, weight_decay: Optional[float] = None) -> AdamConfig:
        return AdamConfig(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            weight_decay=self.weight_decay if weight_decay is None else weight_decay,
            lr_decay_per_epoch=self.lr_decay)

    def validate_paths(self) -> None:
        for label, p in (("survey", self.survey), ("manifest", self.manifest)):
            if not p or not Path(p).exists():
                raise DataError(f"{label} file not found: {p!r}")
        if self.osm and not Path(self.osm).exists():
            raise DataError(f"osm file not found: {self.osm!r}")
        bad = [f for f in self.fractions if f not in DEFAULT_FRACTIONS]
        if bad:
            raise ValueError(f"fractions must be within {DEFAULT_FRACTIONS}, got {bad}")


_HASH_EXCLUDED = {"seed", "out_dir"}


def config_hash(config: ExperimentConfig) -> str:
    parts = []
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        if f.name in _HASH_EXCLUDED:
            continue
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        parts.append(f"{f.name}={value}")
    return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()


def parse_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment; blanks ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line_num, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise DataError(f"{path} line {line_num}: expected key = value")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


_TUPLE_FLOAT_FIELDS = {"fractions"}
_TUPLE_STR_FIELDS = {"outcomes"}


def config_from_mappings(defaults: dict, *layers: dict) -> ExperimentConfig:
    """Later layers win; values arrive as strings from files/CLI."""
    merged = dict(defaults)
    for layer in layers:
        for k, v in layer.items():
            if v is not None:
                merged[k] = v
    coerced = {}
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    for key, value in merged.items():
        if key not in by_name:
            raise DataError(f"unknown config key {key!r}")
        if isinstance(value, str):
            if key in _TUPLE_FLOAT_FIELDS:
                value = tuple(float(v) for v in value.split(",") if v.strip())
            elif key in _TUPLE_STR_FIELDS:
                value = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                target = by_name[key].type
                if target in ("int",):
                    value = int(value)
                elif target in ("float",):
                    value = float(value)
        coerced[key] = value
    return ExperimentConfig(**coerced)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class Arrays:
    x: np.ndarray  # (n, bands, s, s) float32, raw (not normalized)
    labels: np.ndarray  # (n, k) float32, missing as 0
    mask: np.ndarray  # (n, k) float32, 0 where missing
    records: list


def _load_dataset(config: ExperimentConfig):
    records = load_survey(config.survey)
    manifest = load_manifest(config.manifest)
    patches = {}
    for r in records:
        if r.geocode in patches:
            continue
        if r.geocode not in manifest:
            raise DataError(f"geocode {r.geocode!r} has no raster in the manifest")
        source_map = manifest[r.geocode]
        patches[r.geocode] = load_raster(next(iter(source_map.values())))
    return records, patches


def _center_crop_array(x: np.ndarray, side: int) -> np.ndarray:
    s = x.shape[2]
    if side <= 0 or side == s:
        return x
    if side > s:
        raise DataError(f"input_size {side} exceeds patch size {s}")
    top = (s - side) // 2
    return x[:, :, top:top + side, top:top + side]


def _build_arrays(records: Sequence[SurveyRecord], patches: dict,
                  outcomes: Sequence[str]) -> Arrays:
    if not records:
        raise ValueError("no records")
    x = np.stack([patches[r.geocode].pixels for r in records])
    k = len(outcomes)
    labels = np.zeros((len(records), k), dtype=np.float32)
    mask = np.zeros((len(records), k), dtype=np.float32)
    for i, r in enumerate(records):
        for j, name in enumerate(outcomes):
            v = r.outcomes.get(name)
            if v is not None:
                labels[i, j] = v
                mask[i, j] = 1.0
    return Arrays(x=x, labels=labels, mask=mask, records=list(records))


def _random_crop_batch(x: np.ndarray, side: int, rng: RngState) -> np.ndarray:
    n, _, s, _ = x.shape
    if side >= s:
        return x
    tops = rng.integers(0, s - side + 1, size=n)
    lefts = rng.integers(0, s - side + 1, size=n)
    out = np.empty((n, x.shape[1], side, side), dtype=x.dtype)
    for i in range(n):
        out[i] = x[i, :, tops[i]:tops[i] + side, lefts[i]:lefts[i] + side]
    return out


def _predict_scores(model, x: np.ndarray, batch: int = 64) -> np.ndarray:
    chunks = []
    for start in range(0, x.shape[0], batch):
        logits = model.forward(Tensor(x[start:start + batch]), training=False)
        chunks.append(_sigmoid_stable(logits.data))
    return np.concatenate(chunks, axis=0)


@dataclass
class _FoldResult:
    rows: list  # (geocode, lat, lon, outcome, score, label, fold)
    model: object
    stats: NormalizationStats


def _unique_geocode_only(test_records, all_records):
    """Only points with a unique geocode are eligible for test sets;
    spatially overlapping (shared-geocode) areas may train but never score."""
    counts: dict = {}
    for r in all_records:
        counts[r.geocode] = counts.get(r.geocode, 0) + 1
    kept = [r for r in test_records if counts[r.geocode] == 1]
    return kept, len(test_records) - len(kept)


def _train_model(config: ExperimentConfig, train: Arrays, rng: RngState,
                 outcomes: Sequence[str], weight_decay: Optional[float] = None):
    """Train one classifier on raw arrays; returns (model, stats)."""
    val = None
    if config.early_stop_patience > 0:
        # geocode-safe 85/15 carve for the early-stopping signal
        geocodes = sorted({r.geocode for r in train.records})
        shuffled = rng.split(3).shuffle(geocodes)
        val_geos = set(shuffled[: max(1, len(shuffled) * 15 // 100)])
        val_idx = np.array([r.geocode in val_geos for r in train.records])
        val = Arrays(train.x[val_idx], train.labels[val_idx], train.mask[val_idx],
                     [r for r, v in zip(train.records, val_idx) if v])
        train = Arrays(train.x[~val_idx], train.labels[~val_idx], train.mask[~val_idx],
                       [r for r, v in zip(train.records, val_idx) if not v])

    bands = train.x.shape[1]
    crop_side = config.input_size if config.input_size else train.x.shape[2]
    x_raw = train.x if config.crop == "random" else _center_crop_array(train.x, crop_side)
    stats = NormalizationStats.from_array(_center_crop_array(train.x, crop_side))
    net_config = NetworkConfig(config.variant, bands, len(outcomes),
                               input_size=crop_side)
    model = build_network(net_config, rng.split(1))
    adam = config.adam(weight_decay)
    state = AdamState()
    stream = rng.split(2)

    best_val = -np.inf
    best_params = None
    stall = 0
    x_val = None
    if val is not None:
        x_val = normalize_array(_center_crop_array(val.x, crop_side), stats)

    for _epoch in range(config.epochs):
        if config.crop == "random":
            x_epoch = normalize_array(
                _random_crop_batch(x_raw, crop_side, stream), stats)
        else:
            x_epoch = normalize_array(x_raw, stats)
        train_epoch(model, x_epoch, train.labels, train.mask, state, adam,
                    stream, batch_size=config.batch_size)
        if x_val is not None:
            scores = _predict_scores(model, x_val)
            vals = []
            for j in range(len(outcomes)):
                sel = val.mask[:, j] == 1
                if sel.sum() and np.unique(val.labels[sel, j]).size == 2:
                    vals.append(auroc(scores[sel, j], val.labels[sel, j]))
            score = float(np.mean(vals)) if vals else -np.inf
            if score > best_val:
                best_val = score
                best_params = {p: t.data.copy() for p, t in model.params.items()}
                stall = 0
            else:
                stall += 1
                if stall >= config.early_stop_patience:
                    break
    if best_params is not None:
        for p, t in model.params.items():
            t.data[...] = best_params[p]
    return model, stats


def _eval_rows(config: ExperimentConfig, model, stats, test: Arrays,
               outcomes: Sequence[str], fold: int) -> list:
    crop_side = config.input_size if config.input_size else test.x.shape[2]
    x_test = normalize_array(_center_crop_array(test.x, crop_side), stats)
    scores = _predict_scores(model, x_test)
    rows = []
    for i, r in enumerate(test.records):
        for j, name in enumerate(outcomes):
            if test.mask[i, j] == 1:
                rows.append((r.geocode, r.lat, r.lon, name,
                             float(scores[i, j]), int(test.labels[i, j]), fold))
    return rows


def _train_eval_fold(config: ExperimentConfig, train_records, test_records,
                     patches, fold: int, rng: RngState,
                     weight_decay: Optional[float] = None):
    """Train per config (multi or per-outcome single models), score the fold."""
    results = []
    if config.label_mode == "single":
        for j, name in enumerate(config.outcomes):
            sub_train = _build_arrays(train_records, patches, [name])
            keep = sub_train.mask[:, 0] == 1
            sub_train = Arrays(sub_train.x[keep], sub_train.labels[keep],
                               sub_train.mask[keep],
                               [r for r, k in zip(sub_train.records, keep) if k])
            model, stats = _train_model(config, sub_train, rng.split(1000 + j),
                                        [name], weight_decay)
            fold_rows = []
            if test_records:
                sub_test = _build_arrays(test_records, patches, [name])
                fold_rows = _eval_rows(config, model, stats, sub_test, [name], fold)
            results.append((name, _FoldResult(fold_rows, model, stats)))
        rows = [row for _n, res in results for row in res.rows]
        return rows, [(f"{n}", res.model) for n, res in results], results[0][1].stats
    train = _build_arrays(train_records, patches, config.outcomes)
    model, stats = _train_model(config, train, rng, config.outcomes, weight_decay)
    rows = []
    if test_records:
        test = _build_arrays(test_records, patches, config.outcomes)
        rows = _eval_rows(config, model, stats, test, config.outcomes, fold)
    return rows, [("", model)], stats


# ---------------------------------------------------------------------------
# artifacts


@dataclass
class RunArtifacts:
    out_dir: Path
    metrics_path: Path
    predictions_path: Path
    checkpoint_paths: list
    run_manifest_path: Path
    reports: dict
    warnings: list
    sweep_path: Optional[Path] = None


def _write_predictions(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(PREDICTION_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        for geocode, lat, lon, outcome, score, label, fold in rows:
            writer.writerow([geocode, repr(float(lat)), repr(float(lon)),
                             outcome, f"{score:.6f}", label, fold])


def _reports_from_rows(config: ExperimentConfig, rows, kfold_check: bool,
                       report_outcomes: Optional[Sequence[str]] = None):
    """Per-outcome reports; degenerate outcomes come back as warnings."""
    reports: dict = {}
    warnings: list = []
    for name in (report_outcomes or config.outcomes):
        outcome_rows = [r for r in rows if r[3] == name]
        if not outcome_rows:
            warnings.append(f"{name}: no test predictions; skipped")
            continue
        try:
            if kfold_check:
                by_fold: dict = {}
                for geocode, _lat, _lon, _o, score, label, fold in outcome_rows:
                    by_fold.setdefault(fold, []).append((geocode, score, label))
                fold_preds = [
                    FoldPredictions(
                        fold=f,
                        geocodes=tuple(g for g, _s, _l in items),
                        scores=tuple(s for _g, s, _l in items),
                        labels=tuple(l for _g, _s, l in items))
                    for f, items in sorted(by_fold.items())]
                reports[name] = aggregate_kfold(name, fold_preds,
                                                threshold=config.threshold)
            else:
                scores = [r[4] for r in outcome_rows]
                labels = [r[5] for r in outcome_rows]
                reports[name] = compute_report(name, scores, labels,
                                               threshold=config.threshold)
        except ValueError as e:
            warnings.append(f"{name}: {e}")
    return reports, warnings


def _write_metrics(path: Path, outcome_order: Sequence[str], reports: dict,
                   warnings: list) -> None:
    lines = [REPORT_HEADER]
    skipped = {w.split(":", 1)[0] for w in warnings}
    for name in outcome_order:
        if name in reports:
            lines.append(reports[name].csv_row())
        elif name in skipped:
            lines.append(f"{name},,,,,,")  # warning row: metrics unavailable
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_run_manifest(path: Path, config: ExperimentConfig, warnings: list,
                        artifact_names: list) -> None:
    lines = [f"config_hash = {config_hash(config)}", f"seed = {config.seed}"]
    for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
        if f.name == "seed":
            continue
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    for name in artifact_names:
        lines.append(f"artifact = {name}")
    for w in warnings:
        lines.append(f"warning = {w}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _finalize(config: ExperimentConfig, out: Path, rows, checkpoints,
              kfold_check: bool, sweep_rows=None, extra_warnings=(),
              report_outcomes: Optional[Sequence[str]] = None):
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r[3], r[0], r[6]))
    predictions_path = out / "predictions.csv"
    _write_predictions(predictions_path, rows)
    reports, warnings = _reports_from_rows(config, rows, kfold_check, report_outcomes)
    warnings = list(extra_warnings) + warnings
    metrics_path = out / "metrics.csv"
    _write_metrics(metrics_path, report_outcomes or config.outcomes, reports, warnings)
    checkpoint_paths = []
    for name, model in checkpoints:
        p = out / f"checkpoint_{name}.gick"
        save_checkpoint(model, p)
        checkpoint_paths.append(p)
    sweep_path = None
    if sweep_rows is not None:
        sweep_path = out / "sweep.csv"
        with open(sweep_path, "w", encoding="utf-8") as fh:
            fh.write(SWEEP_HEADER + "\n")
            for outcome, fraction, score, n_tune, n_test in sweep_rows:
                score_txt = "" if score is None else f"{score:.6f}"
                fh.write(f"{outcome},{fraction},{score_txt},{n_tune},{n_test}\n")
    manifest_path = out / "run_manifest.txt"
    _write_run_manifest(manifest_path, config, warnings,
                        [p.name for p in checkpoint_paths])
    return RunArtifacts(out, metrics_path, predictions_path, checkpoint_paths,
                        manifest_path, reports, warnings, sweep_path)


# ---------------------------------------------------------------------------
# experiment kinds


def run_train_cv(config: ExperimentConfig) -> RunArtifacts:
    """K-fold training of the classifier; pooled evaluation."""
    config.validate_paths()
    records, patches = _load_dataset(config)
    split = make_splits(records, seed=config.seed, mode=KFOLD, k=config.k_folds)
    root = RngState(config.seed)
    rows = []
    checkpoints = []
    excluded = 0
    for fold in range(config.k_folds):
        test_records = [r for r in records if split.fold_of(r.geocode) == fold]
        test_records, n_shared = _unique_geocode_only(test_records, records)
        excluded += n_shared
        train_records = [r for r in records if split.fold_of(r.geocode) != fold]
        fold_rows, fold_models, _stats = _train_eval_fold(
            config, train_records, test_records, patches, fold, root.split(fold))
        rows.extend(fold_rows)
        for tag, model in fold_models:
            name = f"fold{fold}_{tag}" if tag else f"fold{fold}"
            checkpoints.append((name, model))
    extra = ([f"unique-geocode rule: {excluded} shared-geocode records excluded from test"]
             if excluded else [])
    return _finalize(config, Path(config.out_dir), rows, checkpoints,
                     kfold_check=True, extra_warnings=extra)


def run_urban_rural(config: ExperimentConfig):
    """Independent CV runs inside the urban and the rural stratum."""
    config.validate_paths()
    records, patches = _load_dataset(config)
    strata = {
        "urban": [r for r in records if r.urban is True],
        "rural": [r for r in records if r.urban is False],
    }
    skipped = [r for r in records if r.urban is None]
    results = {}
    for stratum_id, (name, stratum_records) in enumerate(strata.items(), start=1):
        if not stratum_records:
            raise DataError(f"empty {name} stratum")
        split = make_splits(stratum_records, seed=config.seed, mode=KFOLD,
                            k=config.k_folds)
        root = RngState(config.seed).split(stratum_id)
        rows = []
        checkpoints = []
        for fold in range(config.k_folds):
            test_records = [r for r in stratum_records
                            if split.fold_of(r.geocode) == fold]
            test_records, _n_shared = _unique_geocode_only(test_records, stratum_records)
            train_records = [r for r in stratum_records
                             if split.fold_of(r.geocode) != fold]
            fold_rows, fold_models, _stats = _train_eval_fold(
                config, train_records, test_records, patches, fold, root.split(fold))
            rows.extend(fold_rows)
            for tag, model in fold_models:
                cname = f"fold{fold}_{tag}" if tag else f"fold{fold}"
                checkpoints.append((cname, model))
        extra = ([f"{len(skipped)} records with unknown urban flag excluded"]
                 if skipped else [])
        results[name] = _finalize(
            config, Path(config.out_dir) / name, rows, checkpoints,
            kfold_check=True, extra_warnings=extra)
    return results["urban"], results["rural"]


def run_holdout(config: ExperimentConfig, country: Optional[str] = None) -> RunArtifacts:
    """Train on every other country, evaluate on the held-out one.

    Training applies the documented strong-regularization override
    (holdout_weight_decay) instead of the standard weight decay.
    """
    config.validate_paths()
    country = country or config.country
    if not country:
        raise ValueError("holdout needs a country")
    records, patches = _load_dataset(config)
    split = make_splits(records, seed=config.seed, mode=HOLDOUT, country=country)
    train_records = [r for r in records if split.fold_of(r.geocode) == HOLDOUT_TRAIN]
    test_records = [r for r in records if split.fold_of(r.geocode) == HOLDOUT_TEST
                    and r.country == country]
    test_records, n_shared = _unique_geocode_only(test_records, records)
    if not train_records:
        raise DataError(f"no training records outside {country!r}")
    rows, models, _stats = _train_eval_fold(
        config, train_records, test_records, patches, HOLDOUT_TEST,
        RngState(config.seed), weight_decay=config.holdout_weight_decay)
    checkpoints = [(f"base_{tag}" if tag else "base", model) for tag, model in models]
    extra = ([f"unique-geocode rule: {n_shared} shared-geocode records excluded from test"]
             if n_shared else [])
    return _finalize(config, Path(config.out_dir), rows, checkpoints,
                     kfold_check=False, extra_warnings=extra)


def run_finetune_sweep(config: ExperimentConfig, country: Optional[str] = None,
                       fractions: Optional[Sequence[float]] = None) -> RunArtifacts:
    """Freeze the holdout-trained backbone; refit a logistic head on
    growing fractions of the held-out country.

    Head features are the final pre-head activations. Head training uses
    L2 regularization finetune_l2 on standardized features. Fraction 0
    reuses the base model's own head: by construction it equals the plain
    holdout evaluation.
    """
    config.validate_paths()
    country = country or config.country
    fractions = tuple(fractions if fractions is not None else config.fractions)
    if not country:
        raise ValueError("finetune sweep needs a country")
    records, patches = _load_dataset(config)

    # base model: hold-out training on the other countries
    split = make_splits(records, seed=config.seed, mode=HOLDOUT, country=country)
    train_records = [r for r in records if split.fold_of(r.geocode) == HOLDOUT_TRAIN]
    train = _build_arrays(train_records, patches, config.outcomes)
    base_model, stats = _train_model(config, train, RngState(config.seed),
                                     config.outcomes,
                                     weight_decay=config.holdout_weight_decay)

    crop_side = config.input_size if config.input_size else train.x.shape[2]
    sweep_rows = []
    rows = []
    warnings = []
    for j, outcome in enumerate(config.outcomes):
        for fraction in fractions:
            fsplit = make_splits(records, seed=config.seed + int(fraction * 10),
                                 mode=FRACTION, country=country, fraction=fraction,
                                 stratify_outcome=outcome)
            tune_records = [r for r in records
                            if fsplit.fold_of(r.geocode) == FRACTION_TUNE
                            and r.outcomes.get(outcome) is not None]
            test_records = [r for r in records
                            if fsplit.fold_of(r.geocode) == FRACTION_TEST
                            and r.outcomes.get(outcome) is not None]
            test_records, _n_shared = _unique_geocode_only(test_records, records)
            if not test_records:
                warnings.append(f"{outcome} f={fraction}: empty test stratum")
                sweep_rows.append((outcome, fraction, None, len(tune_records), 0))
                continue
            test = _build_arrays(test_records, patches, [outcome])
            x_test = normalize_array(_center_crop_array(test.x, crop_side), stats)
            y_test = test.labels[:, 0]

            if fraction == 0 or not tune_records:
                scores = _predict_scores(base_model, x_test)[:, j]
            else:
                tune = _build_arrays(tune_records, patches, [outcome])
                x_tune = normalize_array(_center_crop_array(tune.x, crop_side), stats)
                feats_tune = _features_of(base_model, x_tune)
                y_tune = tune.labels[:, 0]
                if np.unique(y_tune).size < 2:
                    warnings.append(
                        f"{outcome} f={fraction}: single-class tune set, base head kept")
                    scores = _predict_scores(base_model, x_test)[:, j]
                else:
                    head = fit_logistic(feats_tune, y_tune, l2=config.finetune_l2,
                                        standardize=True)
                    scores = head.predict_proba(_features_of(base_model, x_test))
            score = None
            if np.unique(y_test).size == 2:
                score = auroc(scores, y_test)
            else:
                warnings.append(f"{outcome} f={fraction}: single-class test set")
            sweep_rows.append((outcome, fraction, score,
                               len(tune_records), len(test_records)))
            frac_tag = int(round(fraction * 100))
            for i, r in enumerate(test.records):
                rows.append((r.geocode, r.lat, r.lon, f"{outcome}@f{frac_tag}",
                             float(scores[i]), int(y_test[i]), 0))

    report_outcomes = tuple(
        f"{o}@f{int(round(f * 100))}" for o in config.outcomes for f in fractions)
    return _finalize(config, Path(config.out_dir), rows, [("base", base_model)],
                     kfold_check=False, sweep_rows=sweep_rows,
                     extra_warnings=warnings, report_outcomes=report_outcomes)


def _features_of(model, x: np.ndarray, batch: int = 64) -> np.ndarray:
    chunks = []
    for start in range(0, x.shape[0], batch):
        feats = model.features(Tensor(x[start:start + batch]), training=False)
        chunks.append(feats.data.astype(np.float64))
    return np.concatenate(chunks, axis=0)


# ---------------------------------------------------------------------------
# baselines


def run_baseline(config: ExperimentConfig, kind: Optional[str] = None) -> RunArtifacts:
    kind = kind or config.baseline_kind
    if kind == "spatial":
        return _baseline_spatial(config)
    if kind == "oracle":
        return _baseline_oracle(config)
    if kind == "nightlights":
        return _baseline_features(config, feature_source="nightlights")
    if kind == "osm":
        return _baseline_features(config, feature_source="osm")
    raise ValueError(f"unknown baseline kind {kind!r}")


def _baseline_spatial(config: ExperimentConfig) -> RunArtifacts:
    """Nearest-neighbor interpolation under the pooled K-fold protocol."""
    config.validate_paths()
    records = load_survey(config.survey)
    split = make_splits(records, seed=config.seed, mode=KFOLD, k=config.k_folds)
    rows = []
    for outcome in config.outcomes:
        for fold in range(config.k_folds):
            train = [r for r in records if split.fold_of(r.geocode) != fold
                     and r.outcomes.get(outcome) is not None]
            test = [r for r in records if split.fold_of(r.geocode) == fold
                    and r.outcomes.get(outcome) is not None]
            test, _n_shared = _unique_geocode_only(test, records)
            if not train or not test:
                continue
            points = [LabeledPoint(r.lat, r.lon, r.outcomes[outcome], r.geocode)
                      for r in train]
            preds = nearest_neighbor_predict_many(
                points, [r.lat for r in test], [r.lon for r in test])
            for r, p in zip(test, preds):
                rows.append((r.geocode, r.lat, r.lon, outcome, float(p),
                             int(r.outcomes[outcome]), fold))
    return _finalize(config, Path(config.out_dir), rows, [], kfold_check=True)


def _baseline_oracle(config: ExperimentConfig) -> RunArtifacts:
    """Cross-label oracle on its 80/20 geocode-safe split (fold 0 = test)."""
    config.validate_paths()
    records = load_survey(config.survey)
    rows = []
    warnings = []
    for outcome in config.outcomes:
        usable = [r for r in records if r.outcomes.get(outcome) is not None]
        if not usable:
            warnings.append(f"{outcome}: no labeled records")
            continue
        try:
            model = oracle_fit(usable, outcome, seed=config.seed)
        except ValueError as e:
            warnings.append(f"{outcome}: {e}")
            continue
        split = make_splits(usable, seed=config.seed, mode=KFOLD, k=5)
        test = [r for r in usable if split.fold_of(r.geocode) == 0]
        test, _n_shared = _unique_geocode_only(test, usable)
        for r in test:
            rows.append((r.geocode, r.lat, r.lon, outcome,
                         model.predict(r), int(r.outcomes[outcome]), 0))
    return _finalize(config, Path(config.out_dir), rows, [], kfold_check=False,
                     extra_warnings=warnings)


def _nightlights_view(patch, band: int):
    """Single-band view of a raster for nightlights-style features."""
    if patch.bands == 1:
        return patch
    pixels = patch.pixels[band:band + 1]
    return replace(patch, source=RasterSource.synthetic, pixels=pixels.copy())


def _baseline_features(config: ExperimentConfig, feature_source: str) -> RunArtifacts:
    """Logistic baseline over engineered features, pooled K-fold protocol."""
    config.validate_paths()
    records = load_survey(config.survey)

    if feature_source == "nightlights":
        manifest = load_manifest(config.manifest)
        window_source = (RasterSource.dmsp if config.nightlights_style == "dmsp"
                         else RasterSource.viirs)
        feats_by_geocode = {}
        for r in records:
            if r.geocode in feats_by_geocode:
                continue
            if r.geocode not in manifest:
                raise DataError(f"geocode {r.geocode!r} missing from manifest")
            patch = load_raster(next(iter(manifest[r.geocode].values())))
            view = replace(_nightlights_view(patch, config.band), source=window_source)
            feats_by_geocode[r.geocode] = nightlights_features(view, window_source)
    elif feature_source == "osm":
        if not config.osm:
            raise DataError("osm baseline needs an osm feature CSV (config key 'osm')")
        osm_rows = load_osm_csv(config.osm)
        feats_by_geocode = {}
        for r in records:
            if r.geocode not in osm_rows:
                raise DataError(f"geocode {r.geocode!r} missing from {config.osm}")
            feats_by_geocode[r.geocode] = osm_raw_features(osm_rows[r.geocode])
    else:
        raise ValueError(feature_source)

    fit_classifier = get_classifier(config.classifier)
    split = make_splits(records, seed=config.seed, mode=KFOLD, k=config.k_folds)
    rows = []
    warnings = []
    for outcome in config.outcomes:
        for fold in range(config.k_folds):
            train = [r for r in records if split.fold_of(r.geocode) != fold
                     and r.outcomes.get(outcome) is not None]
            test = [r for r in records if split.fold_of(r.geocode) == fold
                    and r.outcomes.get(outcome) is not None]
            test, _n_shared = _unique_geocode_only(test, records)
            if not train or not test:
                continue
            x_train = np.array([feats_by_geocode[r.geocode] for r in train])
            y_train = np.array([r.outcomes[outcome] for r in train], dtype=np.float64)
            if np.unique(y_train).size < 2:
                warnings.append(f"{outcome} fold {fold}: single-class training labels")
                continue
            std = FeatureStandardizer.fit(x_train)
            model = fit_classifier(std.transform(x_train), y_train,
                                   seed=config.seed + fold)
            x_test = std.transform(np.array([feats_by_geocode[r.geocode] for r in test]))
            scores = model.predict_proba(x_test)
            for r, s in zip(test, scores):
                rows.append((r.geocode, r.lat, r.lon, outcome, float(s),
                             int(r.outcomes[outcome]), fold))
    return _finalize(config, Path(config.out_dir), rows, [], kfold_check=True,
                     extra_warnings=warnings)


# ---------------------------------------------------------------------------
# GeoJSON export


def emit_prediction_geojson(predictions_path, outcome: str, out_path,
                            threshold: float = 0.5) -> int:
    """Write the prediction table for one outcome as a GeoJSON
    FeatureCollection of Points; returns the feature count."""
    features = []
    missing = []
    with open(predictions_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = PREDICTION_HEADER.split(",")
        if reader.fieldnames != expected:
            raise DataError(
                f"{predictions_path}: header must be {PREDICTION_HEADER}")
        for row in reader:
            if row["outcome"] != outcome:
                continue
            if not row["lat"] or not row["lon"]:
                missing.append(row["geocode"])
                continue
            score = float(row["score"])
            features.append({
                "type": "Feature",
                "geometry": {
                    "type": "Point",
                    "coordinates": [float(row["lon"]), float(row["lat"])],
                },
                "properties": {
                    "geocode": row["geocode"],
                    "outcome": row["outcome"],
                    "score": score,
                    "label": int(row["label"]),
                    "predicted": int(score >= threshold),
                },
            })
    if missing:
        raise DataError(f"rows without coordinates for geocodes: {missing}")
    collection = {"type": "FeatureCollection", "features": features}
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(collection, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return len(features)


def evaluate_predictions(predictions_path, out_path, threshold: float = 0.5) -> dict:
    """Recompute pooled per-outcome metrics from a prediction table."""
    by_outcome: dict = {}
    with open(predictions_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTION_HEADER.split(","):
            raise DataError(f"{predictions_path}: header must be {PREDICTION_HEADER}")
        for row in reader:
            by_outcome.setdefault(row["outcome"], []).append(
                (float(row["score"]), int(row["label"])))
    reports = {}
    lines = [REPORT_HEADER]
    for outcome in sorted(by_outcome):
        pairs = by_outcome[outcome]
        try:
            rep = compute_report(outcome, [s for s, _l in pairs],
                                 [l for _s, l in pairs], threshold)
            reports[outcome] = rep
            lines.append(rep.csv_row())
        except ValueError:
            lines.append(f"{outcome},,,,,,")
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return reports
