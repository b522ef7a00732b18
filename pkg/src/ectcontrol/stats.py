"""Cohort statistics: OLS, ANCOVA with partial eta squared, Spearman correlation,
bootstrap mediation with a permutation test, and single-feature LOOCV.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg, special
from scipy import stats as sps

from . import kernels
from .errors import CohortError, DegenerateDataError

log = logging.getLogger(__name__)

COHORT_COLUMNS = ("subject_id", "age", "sex", "pre_severity", "post_severity", "response",
                  "psi", "mc_mean", "ac_mean", "edge_count")
DEFAULT_COVARIATES = ("age", "sex", "pre_severity", "edge_count")


# ---------------------------------------------------------------------------
# cohort table
# ---------------------------------------------------------------------------

def validate_cohort(df: pd.DataFrame, required=("subject_id",)) -> pd.DataFrame:
    """Check the cohort invariants and return a copy with ``response`` filled in."""
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise CohortError(f"cohort is missing columns: {missing}")
    df = df.copy()
    if {"pre_severity", "post_severity"} <= set(df.columns):
        derived = df["post_severity"] - df["pre_severity"]
        if "response" not in df.columns:
            df["response"] = derived
        else:
            both = df["response"].notna() & derived.notna()
            if not np.allclose(df.loc[both, "response"], derived[both], atol=1e-9):
                raise CohortError("response must equal post_severity - pre_severity")
    if "psi" in df.columns:
        psi = df["psi"].dropna()
        if ((psi < 0) | (psi > 100)).any():
            raise CohortError("psi must lie in [0, 100] (percent scale)")
    if "subject_id" in df.columns and df["subject_id"].duplicated().any():
        raise CohortError("duplicate subject_id values")
    return df


def read_cohort(path) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision="round_trip")
    if "subject_id" in df.columns:
        df["subject_id"] = df["subject_id"].astype(str)
    return validate_cohort(df)


def write_cohort(df: pd.DataFrame, path):
    df.to_csv(path, index=False, float_format="%.17g")


def _columns(cohort: pd.DataFrame, names):
    missing = [c for c in names if c not in cohort.columns]
    if missing:
        raise CohortError(f"cohort is missing columns: {missing}")
    sub = cohort[list(names)].apply(pd.to_numeric, errors="coerce")
    dropped = int(sub.isna().any(axis=1).sum())
    if dropped:
        log.info("dropping %d rows with missing values in %s", dropped, list(names))
    return sub.dropna(), dropped


# ---------------------------------------------------------------------------
# least squares
# ---------------------------------------------------------------------------

@dataclass
class OlsFit:
    coef: np.ndarray
    residuals: np.ndarray
    rss: float
    df_resid: int
    rank: int
    cov_unscaled: np.ndarray   # (X^T X)^{-1}

    @property
    def sigma2(self) -> float:
        return self.rss / self.df_resid

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_unscaled) * self.sigma2)


def ols_fit(design, y) -> OlsFit:
    """Least squares by column-pivoted QR; rank deficiency is an error."""
    x = np.asarray(design, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if y.shape != (n,):
        raise ValueError(f"y must have shape ({n},), got {y.shape}")
    if n <= p:
        raise DegenerateDataError(f"need more observations than parameters (n={n}, p={p})")
    q, r, piv = linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(float).eps * diag[0] if p else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p:
        raise DegenerateDataError(f"design matrix is rank deficient (rank {rank} < {p})")
    coef_p = linalg.solve_triangular(r, q.T @ y)
    coef = np.empty(p)
    coef[piv] = coef_p
    resid = y - x @ coef
    rinv = linalg.solve_triangular(r, np.eye(p))
    cov_p = rinv @ rinv.T
    cov = np.empty_like(cov_p)
    cov[np.ix_(piv, piv)] = cov_p
    return OlsFit(coef, resid, float(resid @ resid), n - p, rank, cov)


def f_sf(f, df1, df2) -> float:
    """Upper tail of the F distribution via the regularized incomplete beta."""
    if f <= 0:
        return 1.0
    return float(special.betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f)))


def t_two_sided(t, df) -> float:
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


# ---------------------------------------------------------------------------
# ANCOVA
# ---------------------------------------------------------------------------

@dataclass
class AncovaResult:
    f_value: float
    df1: int
    df2: int
    p_one_sided: float
    p_two_sided: float
    partial_eta_sq: float
    coefficient: float
    n_used: int
    dependent: str = ""
    independent: str = ""
    covariates: tuple = ()
    direction: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = list(self.covariates)
        return d


def f_from_partial_eta_sq(eta_sq, df2, df1=1) -> float:
    """Invert ``partial eta^2 = SS_eff / (SS_eff + RSS)`` to the F statistic."""
    if not 0 <= eta_sq < 1:
        raise ValueError("partial eta squared must lie in [0, 1)")
    return float(eta_sq / (1.0 - eta_sq) * df2 / df1)


def partial_eta_sq_from_f(f, df2, df1=1) -> float:
    return float(f * df1 / (f * df1 + df2))


def _direction(direction) -> int:
    if direction in (1, "+", "positive", "pos", "greater"):
        return 1
    if direction in (-1, "-", "negative", "neg", "less"):
        return -1
    raise ValueError(f"direction must be positive or negative, got {direction!r}")


def ancova_arrays(y, x, covariates=None, direction=1) -> AncovaResult:
    """F-test for adding ``x`` to an intercept-plus-covariates model of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = y.shape[0]
    cov = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=np.float64).reshape(n, -1)
    sign = _direction(direction)
    if np.ptp(y) == 0:
        raise DegenerateDataError("dependent variable is constant")
    if np.ptp(x) == 0:
        raise DegenerateDataError("independent variable is constant")
    reduced = np.column_stack([np.ones(n), cov])
    full = np.column_stack([reduced, x])
    if n < full.shape[1] + 2:
        raise DegenerateDataError(f"n={n} too small for {full.shape[1]} parameters")
    fit_r = ols_fit(reduced, y)
    fit_f = ols_fit(full, y)
    ss_effect = max(fit_r.rss - fit_f.rss, 0.0)
    df1, df2 = 1, fit_f.df_resid
    f = (ss_effect / df1) / (fit_f.rss / df2) if fit_f.rss > 0 else np.inf
    eta = ss_effect / (ss_effect + fit_f.rss) if ss_effect + fit_f.rss > 0 else 0.0
    p_two = f_sf(f, df1, df2)
    coef = float(fit_f.coef[-1])
    agrees = np.sign(coef) == sign
    p_one = p_two / 2.0 if agrees else 1.0 - p_two / 2.0
    return AncovaResult(float(f), df1, df2, float(p_one), float(p_two), float(eta), coef, n,
                        direction=sign)


def ancova(cohort: pd.DataFrame, dependent: str, independent: str,
           covariates=DEFAULT_COVARIATES, direction=1) -> AncovaResult:
    """ANCOVA of ``dependent`` on ``independent`` adjusting for ``covariates``.

    Rows with a missing value in any used column are dropped.  The one-sided
    p-value halves the two-sided one when the coefficient has the
    hypothesised sign and is ``1 - p/2`` otherwise.
    """
    covariates = tuple(covariates or ())
    data, _ = _columns(cohort, (dependent, independent) + covariates)
    res = ancova_arrays(data[dependent].to_numpy(), data[independent].to_numpy(),
                        data[list(covariates)].to_numpy() if covariates else None, direction)
    res.dependent, res.independent, res.covariates = dependent, independent, covariates
    return res


# ---------------------------------------------------------------------------
# rank correlation
# ---------------------------------------------------------------------------

def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D with equal length")
    if x.shape[0] < 3:
        raise ValueError("spearman needs at least 3 observations")
    rx = sps.rankdata(x) - (x.shape[0] + 1) / 2.0
    ry = sps.rankdata(y) - (y.shape[0] + 1) / 2.0
    denom = np.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    if denom == 0:
        raise DegenerateDataError("spearman undefined for constant input")
    return float(np.clip(np.dot(rx, ry) / denom, -1.0, 1.0))


def signed_r2_percent(rho) -> float:
    """Variance explained as ``sign(rho) * rho**2`` in percent."""
    return float(np.sign(rho) * rho * rho * 100.0)


# ---------------------------------------------------------------------------
# mediation
# ---------------------------------------------------------------------------

@dataclass
class MediationResult:
    a: float
    b: float
    c_total: float
    c_prime: float
    ab: float
    ci_low: float
    ci_high: float
    p_perm: float
    n_boot: int
    n_perm: int
    seed: int
    alpha: float = 0.05
    se_a: float = np.nan
    se_b: float = np.nan
    se_c_total: float = np.nan
    se_c_prime: float = np.nan
    p_a: float = np.nan
    p_b: float = np.nan
    p_c_total: float = np.nan
    p_c_prime: float = np.nan
    n_used: int = 0
    n_redrawn: int = 0
    estimate_outside_ci: bool = False

    @property
    def ci_excludes_zero(self) -> bool:
        return self.ci_low > 0 or self.ci_high < 0

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in asdict(self).items()}


def _path_coef(design, y, col):
    fit = ols_fit(design, y)
    se = fit.se[col]
    t = fit.coef[col] / se if se > 0 else np.inf
    p = t_two_sided(t, fit.df_resid) if np.isfinite(t) else 0.0
    return float(fit.coef[col]), float(se), p


def bias_corrected_ci(boot, estimate, alpha=0.05):
    """Bias-corrected percentile interval (no acceleration)."""
    boot = np.asarray(boot, dtype=np.float64)
    b = boot.shape[0]
    prop = np.mean(boot < estimate)
    prop = min(max(prop, 0.5 / b), 1.0 - 0.5 / b)
    z0 = special.ndtri(prop)
    zlo, zhi = special.ndtri(alpha / 2.0), special.ndtri(1.0 - alpha / 2.0)
    qlo, qhi = special.ndtr(2 * z0 + zlo), special.ndtr(2 * z0 + zhi)
    lo, hi = np.quantile(boot, [qlo, qhi])
    return float(lo), float(hi)


def _streams(seed):
    boot_ss, perm_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(boot_ss)), np.random.Generator(np.random.Philox(perm_ss))


def mediate(cohort: pd.DataFrame, x: str, m: str, y: str, covariates=DEFAULT_COVARIATES,
            n_boot: int = 10_000, n_perm: int = 10_000, seed: int = 0, alpha: float = 0.05,
            max_redraw_factor: float = 0.1) -> MediationResult:
    """Single-mediator model with bootstrap CI and permutation test for ``ab``.

    Paths: ``a`` from ``m ~ x + cov``; ``b`` and ``c'`` from ``y ~ x + m + cov``;
    ``c`` from ``y ~ x + cov``.  The CI resamples subjects with replacement
    and is bias-corrected.  The permutation test shuffles the covariate-adjusted
    mediator residuals against ``x`` and ``y``, recomputes ``ab`` and reports the
    two-sided ``(1 + #{|ab*| >= |ab|}) / (1 + n_perm)``.

    Bootstrap draws with a singular design are redrawn, up to
    ``max_redraw_factor * n_boot`` times.
    """
    covariates = tuple(covariates or ())
    data, _ = _columns(cohort, (x, m, y) + covariates)
    return mediate_arrays(data[x].to_numpy(), data[m].to_numpy(), data[y].to_numpy(),
                          data[list(covariates)].to_numpy() if covariates else None,
                          n_boot=n_boot, n_perm=n_perm, seed=seed, alpha=alpha,
                          max_redraw_factor=max_redraw_factor)


def mediate_arrays(xv, mv, yv, cov=None, n_boot=10_000, n_perm=10_000, seed=0, alpha=0.05,
                   max_redraw_factor=0.1) -> MediationResult:
    xv = np.asarray(xv, dtype=np.float64)
    mv = np.asarray(mv, dtype=np.float64)
    yv = np.asarray(yv, dtype=np.float64)
    n = xv.shape[0]
    cov = np.zeros((n, 0)) if cov is None else np.asarray(cov, dtype=np.float64).reshape(n, -1)
    if n < cov.shape[1] + 4:
        raise DegenerateDataError(f"n={n} too small for mediation with {cov.shape[1]} covariates")
    for name, v in (("x", xv), ("m", mv), ("y", yv)):
        if np.ptp(v) == 0:
            raise DegenerateDataError(f"{name} is constant")

    ones = np.ones((n, 1))
    a, se_a, p_a = _path_coef(np.column_stack([ones, xv, cov]), mv, 1)
    c, se_c, p_c = _path_coef(np.column_stack([ones, xv, cov]), yv, 1)
    out_design = np.column_stack([ones, xv, mv, cov])
    c_prime, se_cp, p_cp = _path_coef(out_design, yv, 1)
    b, se_b, p_b = _path_coef(out_design, yv, 2)
    ab = a * b

    # kernels work on standardised columns; ab rescales by sd(y)/sd(x)
    sx, sm, sy = xv.std(), mv.std(), yv.std()
    xs, ms, ys = (xv - xv.mean()) / sx, (mv - mv.mean()) / sm, (yv - yv.mean()) / sy
    cs = cov - cov.mean(axis=0)
    csd = cs.std(axis=0)
    cs = cs / np.where(csd > 0, csd, 1.0)
    unit = sy / sx

    boot_rng, perm_rng = _streams(seed)
    redrawn = 0
    boot = np.empty(0)
    if n_boot > 0:
        idx = boot_rng.integers(0, n, size=(n_boot, n))
        boot, ok = kernels.indirect_resampled(xs, ms, ys, cs, idx)
        cap = int(np.ceil(max_redraw_factor * n_boot))
        while not ok.all():
            bad = np.nonzero(~ok)[0]
            redrawn += bad.size
            if redrawn > cap:
                raise DegenerateDataError(f"more than {cap} degenerate bootstrap draws")
            idx_new = boot_rng.integers(0, n, size=(bad.size, n))
            boot[bad], ok[bad] = kernels.indirect_resampled(xs, ms, ys, cs, idx_new)
        boot = boot * unit
        ci_low, ci_high = bias_corrected_ci(boot, ab, alpha)
    else:
        ci_low = ci_high = np.nan

    p_perm = np.nan
    if n_perm > 0:
        base = np.column_stack([np.ones(n), cs])
        fit = ols_fit(base, ms)
        m_hat = ms - fit.residuals
        perms = np.argsort(perm_rng.random((n_perm, n)), axis=1)
        mstar = m_hat + fit.residuals[perms]
        ab_perm, ok = kernels.indirect_given_m(xs, mstar, ys, cs)
        ab_perm = ab_perm[ok] * unit
        p_perm = float((1 + np.sum(np.abs(ab_perm) >= np.abs(ab) * (1 - 1e-12))) / (1 + ab_perm.size))

    outside = bool(n_boot > 0 and not (ci_low <= ab <= ci_high))
    return MediationResult(float(a), float(b), float(c), float(c_prime), float(ab), ci_low, ci_high,
                           p_perm, int(n_boot), int(n_perm), int(seed), alpha,
                           se_a, se_b, se_c, se_cp, p_a, p_b, p_c, p_cp, n, redrawn, outside)


# ---------------------------------------------------------------------------
# single-feature leave-one-out prediction
# ---------------------------------------------------------------------------

def linear_fit_predict(x_train, y_train, x_test) -> np.ndarray:
    """Intercept + linear least squares (minimum-norm), evaluated on ``x_test``."""
    x_train = np.asarray(x_train, dtype=np.float64)
    x_test = np.asarray(x_test, dtype=np.float64)
    if x_train.ndim == 1:
        x_train, x_test = x_train[:, None], x_test.reshape(-1, 1)
    design = np.column_stack([np.ones(x_train.shape[0]), x_train])
    coef, *_ = np.linalg.lstsq(design, np.asarray(y_train, dtype=np.float64), rcond=None)
    return coef[0] + x_test @ coef[1:]


def loocv_predictions(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n < 3:
        raise DegenerateDataError("LOOCV needs at least 3 subjects")
    pred = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        if np.ptp(x[keep], axis=0).max() == 0:
            raise DegenerateDataError("feature is constant within a training fold")
        pred[i] = linear_fit_predict(x[keep], y[keep], x[i:i + 1])[0]
    return pred


def loocv_single_feature(cohort: pd.DataFrame, feature: str, target: str) -> float:
    """Percent variance explained (signed squared Spearman) by LOOCV linear regression."""
    data, _ = _columns(cohort, (feature, target))
    x, y = data[feature].to_numpy(), data[target].to_numpy()
    if np.ptp(x) == 0:
        raise DegenerateDataError(f"feature {feature!r} is constant")
    return signed_r2_percent(spearman(loocv_predictions(x, y), y))


def save_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
