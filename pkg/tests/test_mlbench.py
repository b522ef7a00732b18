import json

import numpy as np
import pandas as pd
import pytest

from ectcontrol.errors import CohortError, DegenerateDataError
from ectcontrol.mlbench import (PipelineSpec, _Fitted, default_pipelines, load_pipeline_specs, run_benchmark,
                                run_pipeline)


def _data(rng, n=16, d=12):
    x = rng.normal(size=(n, d))
    y = 2 * x[:, 0] - x[:, 1] + 0.1 * rng.normal(size=n)
    return x, y


def test_spec_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        PipelineSpec("tsne", "ols")
    with pytest.raises(ValueError):
        PipelineSpec("none", "svm")
    spec = PipelineSpec("pca", "ridge", [{}], [{"alpha": 1.0}, {"alpha": 2.0}], preprocess=("impute",))
    assert len(spec.grid) == 2 and spec.name == "pca+ridge"
    (tmp_path / "p.json").write_text(json.dumps({"pipelines": [spec.to_dict()]}))
    assert load_pipeline_specs(tmp_path / "p.json")[0].to_dict() == spec.to_dict()
    assert len(default_pipelines()) == 9


def test_ols_pipeline_recovers_linear_signal(rng):
    x, y = _data(rng, d=3)
    res = run_pipeline(PipelineSpec("none", "ols"), x, y)
    assert res.variance_explained > 90
    assert res.mae < 0.2


def test_ridge_dual_equals_primal(rng):
    x, y = _data(rng, n=12, d=5)
    spec = PipelineSpec("none", "ridge", preprocess=())
    wide = np.column_stack([x, np.zeros((12, 10))])           # forces the dual path, same solution
    p1 = _Fitted(spec, {"estimator": {"alpha": 3.0}}, x, y, 0).predict(x[:3])
    p2 = _Fitted(spec, {"estimator": {"alpha": 3.0}}, wide, y, 0).predict(wide[:3])
    np.testing.assert_allclose(p1, p2, atol=1e-10)


def test_preprocessing_handles_constant_and_missing(rng):
    x, y = _data(rng)
    x[:, 3] = 1.0
    x[2, 4] = np.nan
    fitted = _Fitted(PipelineSpec("none", "ols"), {}, x, y, 0)
    assert 3 not in fitted.pre.keep
    assert np.all(np.isfinite(fitted.predict(x)))
    flags = _Fitted(PipelineSpec("pca", "ols"), {"transformer": {"n_components": 50}}, x, y, 0).flags
    assert "pca_components_clipped" in flags


def test_select_percentile_keeps_top_features(rng):
    x, y = _data(rng, n=40, d=40)
    fitted = _Fitted(PipelineSpec("select_percentile", "ols"), {"transformer": {"percentile": 5}}, x, y, 0)
    assert set(fitted.select) == {0, 1}


def test_inner_loop_selects_by_mae(rng):
    x, y = _data(rng, n=14, d=4)
    spec = PipelineSpec("none", "ridge", estimator_grid=[{"alpha": 1e4}, {"alpha": 1e-3}])
    res = run_pipeline(spec, x, y)
    assert all(sel["estimator"]["alpha"] == 1e-3 for sel in res.selected)


def test_trees_are_seeded(rng):
    x, y = _data(rng)
    spec = PipelineSpec("none", "bagged_trees", estimator_grid=[{"n_trees": 5}], seed=4)
    a = run_pipeline(spec, x, y).predictions
    b = run_pipeline(spec, x, y).predictions
    np.testing.assert_array_equal(a, b)


def test_run_benchmark_alignment_and_best_flag(rng):
    x, y = _data(rng)
    ids = [f"s{i}" for i in range(16)]
    target = pd.Series(y, index=ids)
    table = run_benchmark([PipelineSpec("none", "ols"), PipelineSpec("pca", "ridge")],
                          {"a": pd.DataFrame(x, index=ids)}, target,
                          {"x0": pd.Series(x[:, 0], index=ids)})
    assert table["best_in_modality"].sum() == 1
    assert set(table["kind"]) == {"multivariate", "single_feature"}
    with pytest.raises(CohortError):
        run_benchmark([PipelineSpec()], {"a": pd.DataFrame(x, index=ids[::-1])}, target)


def test_degenerate_targets(rng):
    x, _ = _data(rng)
    with pytest.raises(DegenerateDataError):
        run_pipeline(PipelineSpec(), x, np.ones(16))
    with pytest.raises(DegenerateDataError):
        run_pipeline(PipelineSpec(), x[:3], np.arange(3.0))


def test_column_permutation_leaves_least_squares_unchanged(rng):
    x, y = _data(rng, n=16, d=6)
    perm = rng.permutation(6)
    for spec in (PipelineSpec("none", "ols"), PipelineSpec("pca", "ols")):
        a = run_pipeline(spec, x, y).predictions
        b = run_pipeline(spec, x[:, perm], y).predictions
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_single_spec_benchmark_reduces_to_run_pipeline(rng):
    x, y = _data(rng)
    spec = PipelineSpec("pca", "ridge", estimator_grid=[{"alpha": 1.0}, {"alpha": 5.0}])
    table = run_benchmark([spec], {"m": x}, y)
    assert table.loc[0, "variance_explained"] == run_pipeline(spec, x, y).variance_explained
