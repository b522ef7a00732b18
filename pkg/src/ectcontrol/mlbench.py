"""Nested leave-one-out benchmark of multivariate regression pipelines.

A pipeline is a fixed preprocessing chain (variance threshold, mean
imputation, robust scaling), one optional transformer (PCA or F-score
percentile selection) and one estimator (least squares, ridge, bagged
regression trees).  The inner leave-one-out loop picks the grid point with the
lowest mean absolute error.  The outer loop's pooled predictions are scored as
signed squared Spearman correlation with the truth, in percent.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import kernels
from .errors import CohortError, DegenerateDataError
from .stats import linear_fit_predict, loocv_predictions, signed_r2_percent, spearman

log = logging.getLogger(__name__)

PREPROCESS_STEPS = ("variance_threshold", "impute", "robust_scale")
TRANSFORMERS = ("none", "pca", "select_percentile")
ESTIMATORS = ("ols", "ridge", "bagged_trees")
VARIANCE_FLOOR = 1e-12
IQR_FLOOR = 1e-12


@dataclass
class PipelineSpec:
    transformer: str = "none"
    estimator: str = "ols"
    # grid: list of {"transformer": {...}, "estimator": {...}} is built from these
    transformer_grid: list = field(default_factory=lambda: [{}])
    estimator_grid: list = field(default_factory=lambda: [{}])
    preprocess: tuple = PREPROCESS_STEPS
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.transformer not in TRANSFORMERS:
            raise ValueError(f"unknown transformer {self.transformer!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        bad = [s for s in self.preprocess if s not in PREPROCESS_STEPS]
        if bad:
            raise ValueError(f"unknown preprocessing steps {bad}")
        # fixed order regardless of how the steps were listed
        self.preprocess = tuple(s for s in PREPROCESS_STEPS if s in self.preprocess)
        self.transformer_grid = [dict(g) for g in (self.transformer_grid or [{}])]
        self.estimator_grid = [dict(g) for g in (self.estimator_grid or [{}])]
        if self.name is None:
            self.name = f"{self.transformer}+{self.estimator}"

    @property
    def grid(self) -> list:
        return [{"transformer": t, "estimator": e}
                for t, e in itertools.product(self.transformer_grid, self.estimator_grid)]

    def to_dict(self) -> dict:
        return {"name": self.name, "transformer": self.transformer, "estimator": self.estimator,
                "transformer_grid": self.transformer_grid, "estimator_grid": self.estimator_grid,
                "preprocess": list(self.preprocess), "seed": self.seed}

    @classmethod
    def from_dict(cls, d) -> "PipelineSpec":
        d = dict(d)
        if "preprocess" in d:
            d["preprocess"] = tuple(d["preprocess"])
        return cls(**d)


@dataclass
class BenchmarkResult:
    spec: PipelineSpec
    predictions: np.ndarray
    truth: np.ndarray
    selected: list            # chosen grid point per outer fold
    variance_explained: float
    mse: float
    mae: float
    flags: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"pipeline": self.spec.name, "variance_explained": self.variance_explained,
                "mse": self.mse, "mae": self.mae, "flags": sorted(set(self.flags))}


def default_pipelines(seed: int = 0, n_trees: int = 25) -> list:
    """Transformer x estimator combinations with small hyperparameter grids."""
    tgrids = {"none": [{}], "pca": [{"n_components": None}],
              "select_percentile": [{"percentile": 5}, {"percentile": 10}]}
    egrids = {"ols": [{}], "ridge": [{"alpha": a} for a in (0.1, 10.0, 1000.0)],
              "bagged_trees": [{"n_trees": n_trees, "max_depth": 3, "min_leaf": 2}]}
    return [PipelineSpec(t, e, tgrids[t], egrids[e], seed=seed)
            for t in TRANSFORMERS for e in ESTIMATORS]


def load_pipeline_specs(path) -> list:
    """Read a JSON list of pipeline specs (or ``{"pipelines": [...]}``)."""
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = raw.get("pipelines", [])
    if not raw:
        raise ValueError(f"{path}: no pipelines defined")
    return [PipelineSpec.from_dict(d) for d in raw]


# ---------------------------------------------------------------------------
# fitted pipeline
# ---------------------------------------------------------------------------

def _f_scores(x, y):
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    sxx = np.sum(xc * xc, axis=0)
    syy = np.dot(yc, yc)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (xc.T @ yc) / np.sqrt(sxx * syy)
        r2 = np.where(np.isfinite(r), r * r, 0.0)
        f = r2 / np.maximum(1.0 - r2, 1e-300) * (x.shape[0] - 2)
    return f


class _Preprocessed:
    """Fold-level preprocessing (independent of the hyperparameter grid)."""

    def __init__(self, spec, x):
        self.flags = []
        x = np.array(x, dtype=np.float64, copy=True)
        self.keep = np.arange(x.shape[1])
        if "variance_threshold" in spec.preprocess:
            var = np.nanvar(x, axis=0)
            self.keep = np.nonzero(var >= VARIANCE_FLOOR)[0]
            if self.keep.size == 0:
                self.flags.append("all_features_constant")
        x = x[:, self.keep]
        self.fill = None
        if "impute" in spec.preprocess:
            self.fill = np.nan_to_num(np.nanmean(x, axis=0)) if x.size else np.zeros(x.shape[1])
            x = np.where(np.isnan(x), self.fill, x)
        self.center = self.scale = None
        if "robust_scale" in spec.preprocess and x.shape[1]:
            q1, med, q3 = np.percentile(x, [25, 50, 75], axis=0)
            self.center, self.scale = med, np.maximum(q3 - q1, IQR_FLOOR)
            x = (x - self.center) / self.scale
        self.x = x
        self._svd = None

    def apply(self, xt):
        xt = np.asarray(xt, dtype=np.float64)[:, self.keep]
        if self.fill is not None:
            xt = np.where(np.isnan(xt), self.fill, xt)
        if self.center is not None:
            xt = (xt - self.center) / self.scale
        return xt

    def svd(self):
        if self._svd is None:
            mean = self.x.mean(axis=0)
            _, s, vt = np.linalg.svd(self.x - mean, full_matrices=False)
            self._svd = mean, s, vt
        return self._svd


class _Fitted:
    """Preprocessing + transformer + estimator fitted on one training set."""

    def __init__(self, spec, params, x, y, fold_seed, pre=None):
        self.spec = spec
        y = np.asarray(y, dtype=np.float64)
        self.pre = pre if pre is not None else _Preprocessed(spec, x)
        self.flags = list(self.pre.flags)
        x = self.pre.x
        self.components = self.mean = self.select = None
        tparams = params.get("transformer", {})
        if spec.transformer == "pca" and x.shape[1]:
            self.mean, s, vt = self.pre.svd()
            rank = int(np.sum(s > s[0] * max(x.shape) * np.finfo(float).eps)) if s.size else 0
            k = tparams.get("n_components")
            k = rank if k is None else int(k)
            if k > rank:
                self.flags.append("pca_components_clipped")
                k = rank
            self.components = vt[:k].T
            x = (x - self.mean) @ self.components
        elif spec.transformer == "select_percentile" and x.shape[1]:
            pct = tparams.get("percentile", 10)
            k = max(1, int(np.ceil(x.shape[1] * pct / 100.0)))
            order = np.argsort(-_f_scores(x, y), kind="stable")
            self.select = np.sort(order[:k])
            x = x[:, self.select]
        self.eparams = params.get("estimator", {})
        self.x_train, self.y_train = x, y
        self.fold_seed = fold_seed
        self.intercept_only = x.shape[1] == 0

    def transform(self, xt):
        xt = self.pre.apply(xt)
        if self.components is not None:
            xt = (xt - self.mean) @ self.components
        elif self.select is not None:
            xt = xt[:, self.select]
        return xt

    def predict(self, xt):
        xt = self.transform(xt)
        x, y = self.x_train, self.y_train
        if self.intercept_only:
            return np.full(xt.shape[0], y.mean())
        est = self.spec.estimator
        if est == "ols":
            return linear_fit_predict(x, y, xt)
        if est == "ridge":
            alpha = float(self.eparams.get("alpha", 1.0))
            xm, ym = x.mean(axis=0), y.mean()
            xc = x - xm
            if xc.shape[1] <= xc.shape[0]:
                w = np.linalg.solve(xc.T @ xc + alpha * np.eye(xc.shape[1]), xc.T @ (y - ym))
            else:
                w = xc.T @ np.linalg.solve(xc @ xc.T + alpha * np.eye(xc.shape[0]), y - ym)
            return ym + (xt - xm) @ w
        n_trees = int(self.eparams.get("n_trees", 25))
        rng = np.random.default_rng(self.fold_seed)
        boot = rng.integers(0, x.shape[0], size=(n_trees, x.shape[0]))
        return kernels.bagged_trees(x, y, xt, boot, int(self.eparams.get("max_depth", 3)),
                                    int(self.eparams.get("min_leaf", 2)))


def _fold_seed(spec_seed, outer, inner=-1):
    return np.random.SeedSequence([spec_seed, outer, inner + 1]).generate_state(1)[0]


def _check_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.shape[0]:
        raise CohortError(f"X has {x.shape[0]} rows but y has {y.shape[0]}")
    if x.shape[0] < 4 or x.shape[1] < 1:
        raise DegenerateDataError("need n >= 4 subjects and d >= 1 features")
    return x, y


def _select_config(spec, x, y, outer):
    """Inner LOOCV over the grid; returns (best params, flags)."""
    grid = spec.grid
    if len(grid) == 1:
        return grid[0], []
    n = x.shape[0]
    flags = []
    err = np.empty((len(grid), n))
    for j in range(n):
        keep = np.arange(n) != j
        if np.ptp(y[keep]) == 0:
            raise DegenerateDataError("constant target in an inner training fold")
        pre = _Preprocessed(spec, x[keep])
        for g, params in enumerate(grid):
            fitted = _Fitted(spec, params, x[keep], y[keep], _fold_seed(spec.seed, outer, j), pre)
            flags += fitted.flags
            err[g, j] = abs(fitted.predict(x[j:j + 1])[0] - y[j])
    # first grid point wins ties
    return grid[int(np.argmin(err.mean(axis=1)))], flags


def outer_fold_prediction(spec: PipelineSpec, x, y, i):
    """Prediction for subject ``i`` using only the other subjects."""
    n = x.shape[0]
    keep = np.arange(n) != i
    xt, yt = x[keep], y[keep]
    if np.ptp(yt) == 0:
        raise DegenerateDataError("constant target in an outer training fold")
    params, flags = _select_config(spec, xt, yt, i)
    fitted = _Fitted(spec, params, xt, yt, _fold_seed(spec.seed, i))
    return float(fitted.predict(x[i:i + 1])[0]), params, flags + fitted.flags


def run_pipeline(spec: PipelineSpec, X, y) -> BenchmarkResult:
    x, y = _check_xy(X, y)
    n = x.shape[0]
    pred = np.empty(n)
    selected, flags = [], []
    for i in range(n):
        pred[i], params, fl = outer_fold_prediction(spec, x, y, i)
        selected.append(params)
        flags += fl
    try:
        ve = signed_r2_percent(spearman(pred, y))
    except DegenerateDataError:
        ve = 0.0
        flags.append("constant_predictions")
    resid = pred - y
    return BenchmarkResult(spec, pred, y.copy(), selected, ve, float(np.mean(resid ** 2)),
                           float(np.mean(np.abs(resid))), flags)


def single_feature_result(x, y, name) -> dict:
    pred = loocv_predictions(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
    resid = pred - y
    return {"pipeline": name, "variance_explained": signed_r2_percent(spearman(pred, y)),
            "mse": float(np.mean(resid ** 2)), "mae": float(np.mean(np.abs(resid))), "flags": []}


def _aligned(name, frame, ids):
    if isinstance(frame, pd.DataFrame):
        if ids is not None and list(map(str, frame.index)) != list(map(str, ids)):
            raise CohortError(f"modality {name!r} rows are not aligned with the target subject ids")
        return frame.to_numpy(dtype=np.float64)
    return np.asarray(frame, dtype=np.float64)


def run_benchmark(specs, modalities: dict, y, single_features: dict | None = None) -> pd.DataFrame:
    """Score every pipeline on every modality next to single-feature baselines.

    ``modalities`` maps a name to a subjects x features matrix.  When ``y`` is a
    pandas Series and a matrix is a DataFrame, their indexes must agree.
    Returns one row per (modality, pipeline) plus one row per single feature,
    with ``best_in_modality`` marking the top multivariate pipeline.
    """
    ids = list(y.index) if isinstance(y, pd.Series) else None
    yv = np.asarray(y, dtype=np.float64)
    rows = []
    for mod_name, frame in modalities.items():
        x = _aligned(mod_name, frame, ids)
        if x.shape[0] != yv.shape[0]:
            raise CohortError(f"modality {mod_name!r} has {x.shape[0]} rows, target has {yv.shape[0]}")
        for spec in specs:
            log.info("running pipeline %s on %s (%d grid points)", spec.name, mod_name, len(spec.grid))
            res = run_pipeline(spec, x, yv)
            rows.append({"modality": mod_name, "kind": "multivariate", **res.summary()})
    for feat_name, values in (single_features or {}).items():
        if isinstance(values, pd.Series) and ids is not None and list(map(str, values.index)) != list(map(str, ids)):
            raise CohortError(f"feature {feat_name!r} is not aligned with the target subject ids")
        rows.append({"modality": feat_name, "kind": "single_feature",
                     **single_feature_result(np.asarray(values, dtype=np.float64), yv, feat_name)})
    table = pd.DataFrame(rows)
    table["flags"] = table["flags"].apply(lambda f: ";".join(f))
    table["best_in_modality"] = False
    multi = table["kind"] == "multivariate"
    if multi.any():
        best = table[multi].groupby("modality")["variance_explained"].idxmax()
        table.loc[best.values, "best_in_modality"] = True
    return table
