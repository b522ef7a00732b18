import json

import numpy as np
import pytest

from ectcontrol.connectome import (ConnectomeMatrix, RawConnectome, edge_count, iqr_fence_flags, load_raw,
                                   qc_metric_values, qc_outliers, read_matrix_csv, save_raw, spectral_radius,
                                   stabilize, threshold_binarize, write_matrix_csv)
from ectcontrol.errors import CohortError, MatrixFormatError
from ectcontrol.synth import generate_connectome


def test_raw_rejects_bad_input():
    with pytest.raises(MatrixFormatError):
        RawConnectome(np.ones((2, 3)))
    with pytest.raises(MatrixFormatError):
        RawConnectome(np.array([[0, -1], [-1, 0]]))
    with pytest.raises(MatrixFormatError):
        RawConnectome(np.array([[0, np.nan], [np.nan, 0]]))
    with pytest.raises(MatrixFormatError):
        RawConnectome(np.array([[0, 1], [5, 0]]))


def test_raw_zeroes_diagonal_with_warning():
    with pytest.warns(UserWarning):
        raw = RawConnectome(np.array([[4.0, 2.0], [2.0, 1.0]]))
    assert np.all(np.diag(raw.weights) == 0)


def test_connectome_matrix_invariants():
    with pytest.raises(MatrixFormatError):
        ConnectomeMatrix(np.array([[0, 1], [0, 0]]))
    with pytest.raises(MatrixFormatError):
        ConnectomeMatrix(np.array([[1.0, 0], [0, 0]]))
    with pytest.raises(MatrixFormatError):
        ConnectomeMatrix(np.array([[0, 2.0], [2.0, 0]]), binary=True)
    m = ConnectomeMatrix(np.array([[0, 1.0], [1.0, 0]]), binary=True)
    assert m.spectral_radius == pytest.approx(1.0) and m.edge_count == 1
    with pytest.raises(ValueError):
        m.adjacency[0, 1] = 5.0


def test_threshold_counts_streamlines_at_least_min():
    w = np.array([[0, 2, 3], [2, 0, 10], [3, 10, 0]], dtype=float)
    m = threshold_binarize(RawConnectome(w), 3)
    assert m.binary and m.edge_count == 2
    assert threshold_binarize(RawConnectome(w), 1).edge_count == 3
    with pytest.raises(ValueError):
        threshold_binarize(RawConnectome(w), 0)


def test_stabilize_scales_by_one_plus_lambda(path_graph):
    lam = 2 * np.cos(np.pi / 5)           # spectral radius of the 4-node path
    s = stabilize(path_graph)
    np.testing.assert_allclose(s.adjacency, path_graph.adjacency / (1 + lam))
    assert s.spectral_radius == pytest.approx(lam / (1 + lam))
    assert spectral_radius(s.adjacency) == pytest.approx(s.spectral_radius, abs=1e-12)


def test_edge_count_and_empty_graph():
    assert edge_count(np.zeros((4, 4))) == 0
    assert spectral_radius(np.zeros((3, 3))) == 0.0


def test_csv_round_trip(tmp_path):
    raw = generate_connectome(9, 0.5, seed=2, with_fa=True)
    save_raw(raw, tmp_path / "s.csv")
    write_matrix_csv(raw.fa, tmp_path / "s_fa.csv", header=True)
    back = load_raw(tmp_path / "s.csv", fa_path=tmp_path / "s_fa.csv")
    np.testing.assert_array_equal(back.weights, raw.weights)
    np.testing.assert_array_equal(back.fa, raw.fa)
    assert back.subject_id == "s"
    (tmp_path / "bad.csv").write_text("1,2\n3\n")
    with pytest.raises(MatrixFormatError):
        read_matrix_csv(tmp_path / "bad.csv")


def test_iqr_fence_uses_linear_quartiles():
    values = np.array([1.0, 2, 3, 4, 5, 6, 7, 100])
    q1, q2, q3, iqr, flags = iqr_fence_flags(values)
    assert (q1[0], q3[0]) == (2.75, 6.25)
    assert flags[:, 0].tolist() == [False] * 7 + [True]


def _cohort(n_subj=8, with_fa=False):
    return [generate_connectome(15, 0.3, seed=s, with_fa=with_fa, subject_id=f"s{s}") for s in range(n_subj)]


def test_qc_metrics_and_fa_handling():
    metrics, values = qc_metric_values(_cohort())
    assert metrics == ("streamlines", "connection_prevalence", "region_prevalence")
    assert np.all((values[:, 1:] >= 0) & (values[:, 1:] <= 1))
    metrics, _ = qc_metric_values(_cohort(with_fa=True))
    assert "fa" in metrics
    with pytest.raises(CohortError):
        qc_metric_values(_cohort(), metrics=("fa",))


def test_qc_flags_subject_missing_common_edges():
    cohort = _cohort(10)
    base = cohort[0].weights
    cohort = [generate_connectome(15, 0.3, seed=0, subject_id=f"s{s}") for s in range(10)]
    sparse = np.where(np.random.default_rng(0).random(base.shape) < 0.5, 0.0, base)
    sparse = np.triu(sparse, 1)
    cohort[3] = RawConnectome(sparse + sparse.T, subject_id="s3")
    report = qc_outliers(cohort)
    assert report.outliers == ["s3"]
    d = json.loads(report.to_json())
    assert d["outliers"] == ["s3"] and set(d["metrics"]) == set(report.metrics)


def test_qc_requires_four_subjects_and_equal_sizes():
    with pytest.raises(CohortError):
        qc_outliers(_cohort(3))
    mixed = _cohort(4) + [generate_connectome(10, 0.3, seed=1)]
    with pytest.raises(CohortError):
        qc_outliers(mixed)


def test_threshold_one_is_idempotent_on_binary_input():
    m = threshold_binarize(generate_connectome(12, 0.4, seed=3), 3)
    again = threshold_binarize(RawConnectome(m.adjacency), 1)
    np.testing.assert_array_equal(again.adjacency, m.adjacency)


def test_stabilize_preserves_eigenvectors():
    from ectcontrol.control import spectral_decompose
    m = threshold_binarize(generate_connectome(15, 0.3, seed=4), 3)
    d0, d1 = spectral_decompose(m), spectral_decompose(stabilize(m))
    np.testing.assert_allclose(d1.eigenvalues, d0.eigenvalues / (1 + m.spectral_radius), atol=1e-12)
    # compare projectors, which are sign- and basis-independent for simple eigenvalues
    np.testing.assert_allclose(np.abs(d1.eigenvectors.T @ d0.eigenvectors), np.eye(15), atol=1e-8)


def test_edge_count_oracles():
    assert edge_count(np.ones((5, 5)) - np.eye(5)) == 10
    a = generate_connectome(25, 0.3, seed=8).weights
    brute = sum(1 for i in range(25) for j in range(i + 1, 25) if a[i, j] > 0)
    assert edge_count(a) == brute


def _streamline_cohort(means):
    structure = generate_connectome(10, 0.5, seed=9).weights > 0
    return [RawConnectome(np.where(structure, float(mu), 0.0), subject_id=f"s{k}") for k, mu in enumerate(means)]


def test_qc_hand_computed_examples():
    assert qc_outliers(_streamline_cohort([10] * 10)).outliers == []
    report = qc_outliers(_streamline_cohort([10] * 9 + [100]))
    assert report.outliers == ["s9"]
    j = report.metrics.index("streamlines")
    assert (report.q1[j], report.q3[j]) == (10.0, 10.0)


def test_qc_three_of_fifty_three():
    rng = np.random.default_rng(53)
    means = list(rng.integers(18, 23, size=50)) + [80, 3, 95]
    order = rng.permutation(53)
    cohort = _streamline_cohort([means[k] for k in order])
    flagged = {int(s[1:]) for s in qc_outliers(cohort).outliers}
    assert flagged == {int(np.nonzero(order == k)[0][0]) for k in (50, 51, 52)}


def test_qc_invariant_under_reordering():
    cohort = _cohort(9)
    flags = dict(zip([r.subject_id for r in cohort], qc_outliers(cohort).flags))
    shuffled = [cohort[k] for k in np.random.default_rng(1).permutation(9)]
    flags2 = dict(zip([r.subject_id for r in shuffled], qc_outliers(shuffled).flags))
    assert flags == flags2
