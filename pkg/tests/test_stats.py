import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from ectcontrol.errors import CohortError, DegenerateDataError
from ectcontrol.stats import (ancova, ancova_arrays, bias_corrected_ci, f_from_partial_eta_sq, loocv_predictions,
                              loocv_single_feature, mediate, mediate_arrays, ols_fit, partial_eta_sq_from_f,
                              read_cohort, signed_r2_percent, spearman, validate_cohort, write_cohort)


def _cohort(rng, n=40):
    x = rng.normal(size=n)
    age = rng.normal(45, 10, size=n)
    pre = rng.normal(25, 5, size=n)
    psi = np.clip(60 + 10 * x + rng.normal(size=n) * 5, 0, 100)
    resp = -0.2 * psi + 0.1 * age + rng.normal(size=n)
    return pd.DataFrame({"subject_id": [f"s{i}" for i in range(n)], "age": age,
                         "sex": rng.integers(0, 2, n), "pre_severity": pre, "post_severity": pre + resp,
                         "response": resp, "psi": psi, "mc_mean": x, "ac_mean": -x + rng.normal(size=n),
                         "edge_count": rng.integers(1000, 2000, n)})


def test_ols_matches_lstsq_and_detects_rank(rng):
    d = np.column_stack([np.ones(30), rng.normal(size=(30, 3))])
    y = rng.normal(size=30)
    fit = ols_fit(d, y)
    np.testing.assert_allclose(fit.coef, np.linalg.lstsq(d, y, rcond=None)[0], atol=1e-12)
    assert fit.df_resid == 26 and fit.rank == 4
    with pytest.raises(DegenerateDataError):
        ols_fit(np.column_stack([d, d[:, 1]]), y)


def test_ancova_matches_scipy_linregress_without_covariates(rng):
    x = rng.normal(size=25)
    y = 0.5 * x + rng.normal(size=25)
    res = ancova_arrays(y, x)
    lr = sps.linregress(x, y)
    assert res.p_two_sided == pytest.approx(lr.pvalue, rel=1e-9)
    assert res.partial_eta_sq == pytest.approx(lr.rvalue ** 2, rel=1e-9)
    assert res.coefficient == pytest.approx(lr.slope, rel=1e-9)


def test_one_sided_p_follows_direction(rng):
    x = rng.normal(size=40)
    y = x + rng.normal(size=40)
    pos = ancova_arrays(y, x, direction="positive")
    neg = ancova_arrays(y, x, direction="negative")
    assert pos.p_one_sided == pytest.approx(pos.p_two_sided / 2)
    assert neg.p_one_sided == pytest.approx(1 - pos.p_two_sided / 2)
    with pytest.raises(ValueError):
        ancova_arrays(y, x, direction="up")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.95), st.integers(5, 200))
def test_eta_f_round_trip(eta, df2):
    assert partial_eta_sq_from_f(f_from_partial_eta_sq(eta, df2), df2) == pytest.approx(eta, abs=1e-12)


def test_ancova_on_cohort_drops_missing(rng):
    df = _cohort(rng)
    df.loc[[2, 5], "psi"] = np.nan
    res = ancova(df, "response", "psi", direction="negative")
    assert res.n_used == 38 and res.df2 == 38 - 6
    assert res.p_one_sided < 0.05
    with pytest.raises(CohortError):
        ancova(df, "response", "nope")


def test_degenerate_inputs():
    with pytest.raises(DegenerateDataError):
        ancova_arrays(np.ones(10), np.arange(10.0))
    with pytest.raises(DegenerateDataError):
        spearman(np.ones(5), np.arange(5.0))
    with pytest.raises(DegenerateDataError):
        mediate_arrays(np.ones(20), np.arange(20.0), np.arange(20.0), n_boot=10, n_perm=10)


def test_spearman_matches_scipy(rng):
    x, y = rng.normal(size=(2, 30))
    y[3] = y[4]
    assert spearman(x, y) == pytest.approx(sps.spearmanr(x, y).statistic, abs=1e-12)
    assert signed_r2_percent(-0.5) == -25.0


def test_bias_corrected_ci_reduces_to_percentile_when_unbiased():
    boot = np.linspace(-1, 1, 1001)
    lo, hi = bias_corrected_ci(boot, 0.0)
    np.testing.assert_allclose([lo, hi], np.quantile(boot, [0.025, 0.975]), atol=2e-3)


def test_mediation_paths_match_regressions(rng):
    x = rng.normal(size=80)
    cov = rng.normal(size=(80, 2))
    m = 0.7 * x + cov[:, 0] + rng.normal(size=80)
    y = 0.5 * m + 0.2 * x + rng.normal(size=80)
    res = mediate_arrays(x, m, y, cov, n_boot=500, n_perm=500, seed=3)
    d = np.column_stack([np.ones(80), x, m, cov])
    coef = np.linalg.lstsq(d, y, rcond=None)[0]
    assert res.b == pytest.approx(coef[2]) and res.c_prime == pytest.approx(coef[1])
    # total effect decomposes exactly for OLS with shared covariates
    assert res.c_total == pytest.approx(res.c_prime + res.ab, rel=1e-10)
    assert res.ci_low < res.ab < res.ci_high and res.ci_excludes_zero


def test_mediation_seed_determinism_and_streams(rng):
    df = _cohort(rng, 50)
    r1 = mediate(df, "mc_mean", "psi", "response", n_boot=300, n_perm=300, seed=9)
    r2 = mediate(df, "mc_mean", "psi", "response", n_boot=300, n_perm=300, seed=9)
    r3 = mediate(df, "mc_mean", "psi", "response", n_boot=300, n_perm=0, seed=9)
    assert r1.to_dict() == r2.to_dict()
    assert (r1.ci_low, r1.ci_high) == (r3.ci_low, r3.ci_high)   # bootstrap stream independent of n_perm
    assert np.isnan(r3.p_perm)
    r0 = mediate(df, "mc_mean", "psi", "response", n_boot=0, n_perm=10, seed=9)
    assert np.isnan(r0.ci_low)


def test_mediation_exact_paths_without_outcome_noise(rng):
    x = rng.normal(size=50)
    m = 1.5 * x + rng.normal(size=50)
    y = -2.0 * m
    res = mediate_arrays(x, m, y, n_boot=100, n_perm=100)
    assert res.b == pytest.approx(-2.0, abs=1e-10) and res.c_prime == pytest.approx(0.0, abs=1e-10)


def test_loocv_prediction_of_perfect_line():
    x = np.arange(10.0)
    pred = loocv_predictions(x, 3 * x + 1)
    np.testing.assert_allclose(pred, 3 * x + 1, atol=1e-10)
    df = pd.DataFrame({"f": x, "t": 3 * x + 1})
    assert loocv_single_feature(df, "f", "t") == pytest.approx(100.0)


def test_cohort_validation_and_round_trip(tmp_path, rng):
    df = _cohort(rng, 10)
    write_cohort(df, tmp_path / "c.csv")
    back = read_cohort(tmp_path / "c.csv")
    np.testing.assert_array_equal(back["psi"].to_numpy(), df["psi"].to_numpy())
    bad = df.copy()
    bad.loc[0, "response"] += 1
    with pytest.raises(CohortError):
        validate_cohort(bad)
    bad = df.copy()
    bad.loc[0, "psi"] = 0.5 + 100
    with pytest.raises(CohortError):
        validate_cohort(bad)
    with pytest.raises(CohortError):
        validate_cohort(pd.concat([df, df.iloc[:1]]))


def test_spearman_trivial_and_brute_force_ties():
    x = np.array([3.0, 1.0, 2.0, 2.0, 5.0])
    assert spearman(x, x) == pytest.approx(1.0) and spearman(x, -x) == pytest.approx(-1.0)
    y = np.array([1.0, 0.0, 4.0, 2.0, 2.0])

    def avg_rank(v):
        return np.array([np.sum(v < a) + (np.sum(v == a) + 1) / 2 for a in v])
    rx, ry = avg_rank(x), avg_rank(y)
    assert spearman(x, y) == pytest.approx(np.corrcoef(rx, ry)[0, 1], abs=1e-12)


def test_ancova_invariant_to_affine_covariate_rescaling(rng):
    x, cov = rng.normal(size=50), rng.normal(size=(50, 3))
    y = 0.3 * x + cov[:, 0] + rng.normal(size=50)
    r1 = ancova_arrays(y, x, cov)
    r2 = ancova_arrays(y, x, cov * [10.0, -0.1, 1e3] + [5.0, 1e4, -7.0])
    for field in ("f_value", "p_one_sided", "partial_eta_sq"):
        assert getattr(r1, field) == pytest.approx(getattr(r2, field), rel=1e-9)


def test_mediation_null_interval_covers_zero(rng):
    x, m, y = rng.normal(size=(3, 100))
    res = mediate_arrays(x, m, y, n_boot=2000, n_perm=500, seed=2)
    assert res.ci_low < 0 < res.ci_high and abs(res.ab) < 0.05


def test_loocv_independent_target_matches_permutation_baseline(rng):
    # leave-one-out linear fits are biased negative under the null, so the
    # reference is the score distribution over permuted targets, not zero
    f, t = rng.normal(size=(2, 30))
    score = loocv_single_feature(pd.DataFrame({"f": f, "t": t}), "f", "t")
    baseline = [loocv_single_feature(pd.DataFrame({"f": f, "t": rng.permutation(t)}), "f", "t")
                for _ in range(200)]
    lo, hi = np.percentile(baseline, [1, 99])
    assert lo <= score <= hi
