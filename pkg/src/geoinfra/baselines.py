"""The four comparison predictors: nightlights, OSM counts, spatial
nearest neighbor, and the cross-label oracle.

Distances for the spatial baseline are great-circle (haversine on WGS84
degrees, R = 6371.0 km). Anyone comparing against Euclidean-on-degrees
numbers should know that is a different metric.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from geoinfra.data import (
    OUTCOME_NAMES,
    RasterPatch,
    RasterSource,
    SurveyRecord,
    center_crop,
    make_splits,
    split_records,
)
from geoinfra.errors import DataError
from geoinfra.metrics import auroc
from geoinfra.rng import RngState

EARTH_RADIUS_KM = 6371.0

NIGHTLIGHTS_PATCH_SIDES = {RasterSource.dmsp: 7, RasterSource.viirs: 14}

_OSM_FEATURE_NAMES = ("highway", "building", "log_highway", "log_building",
                      "sqrt_highway", "sqrt_building", "highway_building_ratio")


# ---------------------------------------------------------------------------
# feature builders


def nightlights_features(patch: RasterPatch, source) -> np.ndarray:
    """Flatten the source's centered window (7x7 dmsp, 14x14 viirs)."""
    source = RasterSource[source] if isinstance(source, str) else RasterSource(source)
    side = NIGHTLIGHTS_PATCH_SIDES.get(source)
    if side is None:
        raise ValueError(f"nightlights source must be dmsp or viirs, got {source.name}")
    if patch.bands != 1:
        raise ValueError(f"nightlights patches are single-band, got {patch.bands}")
    if patch.height < side or patch.width < side:
        raise ValueError(
            f"patch {patch.height}x{patch.width} smaller than the {side}x{side} window")
    return center_crop(patch, side).pixels.reshape(-1).astype(np.float64)


@dataclass(frozen=True)
class OsmFeatureRow:
    highway_count: int
    building_count: int

    def __post_init__(self):
        if self.highway_count < 0 or self.building_count < 0:
            raise ValueError(
                f"counts must be non-negative: {self.highway_count}, {self.building_count}")


def osm_raw_features(row: OsmFeatureRow) -> np.ndarray:
    """[h, b, log(1+h), log(1+b), sqrt(h), sqrt(b), h/(b+1)]."""
    h, b = float(row.highway_count), float(row.building_count)
    return np.array([h, b, math.log1p(h), math.log1p(b),
                     math.sqrt(h), math.sqrt(b), h / (b + 1.0)])


def load_osm_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != [
                "geocode", "highway_count", "building_count"]:
            raise DataError(f"{path}: OSM header must be geocode,highway_count,building_count")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path} line {reader.line_num}: expected 3 fields")
            try:
                out[row[0]] = OsmFeatureRow(int(row[1]), int(row[2]))
            except ValueError as e:
                raise DataError(f"{path} line {reader.line_num}: {e}") from None
    return out


@dataclass(frozen=True)
class FeatureStandardizer:
    """Column-wise (x - mean) / std fit on training rows only.

    Constant columns keep std 1 so they pass through centered; they carry
    no information either way.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray) -> "FeatureStandardizer":
        mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean=mean, std=std)

    def transform(self, matrix: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(matrix) - self.mean) / self.std


def osm_features(row: OsmFeatureRow, standardizer: FeatureStandardizer) -> np.ndarray:
    return standardizer.transform(osm_raw_features(row))[0]


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    l2: float
    standardizer: Optional[FeatureStandardizer]

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.standardizer is not None:
            x = self.standardizer.transform(x)
        return x @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = self.decision(x)
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 0.0,
                 standardize: bool = True, max_iter: int = 100,
                 tol: float = 1e-10) -> LogRegModel:
    """L2-regularized logistic fit by damped Newton (IRLS).

    Deterministic in its inputs; the bias is not penalized. The optimum is
    unique for l2 > 0 and, on non-separable data, for l2 = 0 too.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValueError(f"bad shapes: features {x.shape}, labels {y.shape}")
    standardizer = FeatureStandardizer.fit(x) if standardize else None
    if standardizer is not None:
        x = standardizer.transform(x)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    theta = np.zeros(d + 1)
    penalty = np.full(d + 1, l2)
    penalty[-1] = 0.0

    def loss_of(t):
        z = xa @ t
        return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
                     + 0.5 * (penalty * t * t).sum())

    loss = loss_of(theta)
    for _ in range(max_iter):
        z = xa @ theta
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        grad = xa.T @ (p - y) / n + penalty * theta
        if np.linalg.norm(grad) < tol:
            break
        w = np.maximum(p * (1.0 - p), 1e-10)
        hess = (xa.T * w) @ xa / n + np.diag(penalty + 1e-12)
        step = np.linalg.solve(hess, grad)
        # backtracking keeps Newton honest far from the optimum
        alpha = 1.0
        for _ in range(30):
            candidate = theta - alpha * step
            new_loss = loss_of(candidate)
            if new_loss <= loss:
                theta = candidate
                loss = new_loss
                break
            alpha *= 0.5
        else:
            break
    return LogRegModel(weights=theta[:-1], bias=float(theta[-1]), l2=l2,
                       standardizer=standardizer)


DEFAULT_L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)

# Plug-in classifier registry for the feature baselines. A classifier is
# any callable (features, labels, *, seed) -> model with predict_proba;
# SVM or random-forest variants slot in through register_classifier
# without touching the runners.
CLASSIFIERS: dict = {}


def register_classifier(name: str, fit_fn) -> None:
    CLASSIFIERS[name] = fit_fn


def get_classifier(name: str):
    try:
        return CLASSIFIERS[name]
    except KeyError:
        raise ValueError(
            f"unknown classifier {name!r}; registered: {sorted(CLASSIFIERS)}") from None


def logreg_fit(features: np.ndarray, labels: np.ndarray,
               l2_grid: Sequence[float] = DEFAULT_L2_GRID,
               folds: int = 3, seed: int = 0,
               standardize: bool = True) -> LogRegModel:
    """Cross-validated logistic regression.

    The l2 strength is chosen by mean inner-fold AUROC (first grid entry
    wins ties), then the model is refit on everything.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("labels contain a single class; nothing to fit")
    if counts.min() < 2:
        raise ValueError(f"need >= 2 examples per class, got counts {counts.tolist()}")

    n = y.size
    order = RngState(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for i, idx in enumerate(order):
        fold_of[idx] = i % folds

    best_l2 = None
    best_score = -np.inf
    for l2 in l2_grid:
        scores = []
        for f in range(folds):
            train = fold_of != f
            val = ~train
            if len(np.unique(y[train])) < 2 or len(np.unique(y[val])) < 2:
                continue
            model = fit_logistic(x[train], y[train], l2=l2, standardize=standardize)
            scores.append(auroc(model.predict_proba(x[val]), y[val]))
        if scores and np.mean(scores) > best_score:
            best_score = float(np.mean(scores))
            best_l2 = l2
    if best_l2 is None:
        best_l2 = l2_grid[0]
    return fit_logistic(x, y, l2=best_l2, standardize=standardize)


register_classifier("logistic", lambda x, y, seed=0: logreg_fit(x, y, seed=seed,
                                                                standardize=False))


# ---------------------------------------------------------------------------
# spatial nearest neighbor


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; accepts scalars or arrays."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=np.float64))
                              for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class LabeledPoint:
    lat: float
    lon: float
    label: int
    geocode: str


def nearest_neighbor_predict(train: Sequence[LabeledPoint], query_lat: float,
                             query_lon: float) -> int:
    """Label of the great-circle-nearest training point.

    Exact distance ties go to the lexicographically smallest geocode.
    """
    if not train:
        raise ValueError("no training points")
    lats = np.array([p.lat for p in train])
    lons = np.array([p.lon for p in train])
    d = haversine_km(lats, lons, query_lat, query_lon)
    best = d.min()
    candidates = [train[i] for i in np.nonzero(d == best)[0]]
    winner = min(candidates, key=lambda p: p.geocode)
    return winner.label


def nearest_neighbor_predict_many(train: Sequence[LabeledPoint],
                                  query_lats, query_lons) -> np.ndarray:
    if not train:
        raise ValueError("no training points")
    lats = np.array([p.lat for p in train])
    lons = np.array([p.lon for p in train])
    labels = np.array([p.label for p in train])
    geocodes = np.array([p.geocode for p in train])
    q_lat = np.asarray(query_lats, dtype=np.float64)
    q_lon = np.asarray(query_lons, dtype=np.float64)
    d = haversine_km(lats[None, :], lons[None, :], q_lat[:, None], q_lon[:, None])
    out = np.empty(q_lat.size, dtype=np.int64)
    for i in range(q_lat.size):
        row = d[i]
        best = row.min()
        tied = np.nonzero(row == best)[0]
        if tied.size == 1:
            out[i] = labels[tied[0]]
        else:
            out[i] = labels[tied[np.argsort(geocodes[tied], kind="stable")[0]]]
    return out


# ---------------------------------------------------------------------------
# cross-label oracle


@dataclass
class OracleModel:
    """Logistic model predicting one outcome from the other outcomes.

    Features are, per predictor outcome: its value with missing as 0, plus
    a companion is-missing indicator. Weights act on raw binary features
    (no standardization) so their signs read directly.
    """

    target: str
    predictors: tuple
    model: LogRegModel
    test_auroc: Optional[float] = None

    def features_of(self, record: SurveyRecord) -> np.ndarray:
        vals = []
        for name in self.predictors:
            v = record.outcomes.get(name)
            vals.append(0.0 if v is None else float(v))
            vals.append(1.0 if v is None else 0.0)
        return np.array(vals)

    def predict(self, record: SurveyRecord) -> float:
        return float(self.model.predict_proba(self.features_of(record))[0])

    def value_weights(self) -> dict:
        """Predictor -> weight on its value feature (the W row)."""
        return {name: float(self.model.weights[2 * i])
                for i, name in enumerate(self.predictors)}


def oracle_fit(records: Sequence[SurveyRecord], target: str, seed: int = 0,
               predictors: Optional[Sequence[str]] = None,
               l2: float = 1e-6, holdout_fraction_folds: int = 5) -> OracleModel:
    """Fit the cross-label oracle on an 80/20 geocode-safe split.

    The returned model is trained on the 80% side; test_auroc reports the
    20% side. l2 defaults to a numerically token value: the objective is
    plain cross-entropy.
    """
    if target not in OUTCOME_NAMES:
        raise ValueError(f"unknown target outcome {target!r}")
    predictors = tuple(predictors if predictors is not None
                       else (n for n in OUTCOME_NAMES if n != target))
    if target in predictors:
        raise ValueError(f"target {target!r} cannot predict itself")

    usable = [r for r in records if r.outcomes.get(target) is not None]
    if not usable:
        raise ValueError(f"no records carry outcome {target!r}")
    split = make_splits(usable, seed=seed, mode="kfold", k=holdout_fraction_folds)
    test = split_records(usable, split, 0)
    train = [r for r in usable if split.fold_of(r.geocode) != 0]

    shell = OracleModel(target=target, predictors=predictors,
                        model=LogRegModel(np.zeros(2 * len(predictors)), 0.0, l2, None))
    x_train = np.array([shell.features_of(r) for r in train])
    y_train = np.array([r.outcomes[target] for r in train], dtype=np.float64)
    if np.unique(y_train).size < 2:
        raise ValueError(f"degenerate target {target!r}: single class in training data")
    fitted = fit_logistic(x_train, y_train, l2=l2, standardize=False)

    test_score = None
    y_test = np.array([r.outcomes[target] for r in test], dtype=np.float64)
    if test and np.unique(y_test).size == 2:
        x_test = np.array([shell.features_of(r) for r in test])
        test_score = auroc(fitted.predict_proba(x_test), y_test)
    return OracleModel(target=target, predictors=predictors, model=fitted,
                       test_auroc=test_score)


def oracle_predict(model: OracleModel, record: SurveyRecord) -> float:
    return model.predict(record)


@dataclass(frozen=True)
class OracleWeights:
    """W[i][j]: weight for predicting outcome i from outcome j; diagonal 0."""

    outcomes: tuple
    matrix: np.ndarray
    bias: np.ndarray


def fit_oracle_matrix(records: Sequence[SurveyRecord],
                      outcomes: Sequence[str], seed: int = 0) -> OracleWeights:
    outcomes = tuple(outcomes)
    k = len(outcomes)
    w = np.zeros((k, k))
    bias = np.zeros(k)
    for i, target in enumerate(outcomes):
        model = oracle_fit(records, target, seed=seed,
                           predictors=[n for n in outcomes if n != target])
        row = model.value_weights()
        for j, name in enumerate(outcomes):
            if name != target:
                w[i, j] = row[name]
        bias[i] = model.model.bias
    return OracleWeights(outcomes=outcomes, matrix=w, bias=bias)
