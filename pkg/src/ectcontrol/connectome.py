"""Structural connectome ingestion, binarisation, stabilisation and cohort QC."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import CohortError, MatrixFormatError

SYMMETRY_TOL = 1e-9

QC_METRICS = ("streamlines", "fa", "connection_prevalence", "region_prevalence")


@dataclass(frozen=True)
class RawConnectome:
    """Streamline-count matrix of one subject, optionally with per-edge FA and MD."""

    weights: np.ndarray
    fa: np.ndarray | None = None
    md: np.ndarray | None = None
    subject_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", _clean_matrix(self.weights, "weights"))
        for name in ("fa", "md"):
            value = getattr(self, name)
            if value is not None:
                value = _clean_matrix(value, name)
                if value.shape != self.weights.shape:
                    raise MatrixFormatError(f"{name} shape {value.shape} != weights shape {self.weights.shape}")
                object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class ConnectomeMatrix:
    """Symmetric adjacency matrix ``A`` of the network model."""

    adjacency: np.ndarray
    binary: bool = False
    spectral_radius: float = field(default=None)
    edge_count: int = field(default=None)

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise MatrixFormatError(f"adjacency must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise MatrixFormatError("adjacency contains non-finite entries")
        if not np.array_equal(a, a.T):
            raise MatrixFormatError("adjacency must be exactly symmetric")
        if np.any(np.diag(a) != 0):
            raise MatrixFormatError("adjacency must have a zero diagonal")
        if self.binary and not np.all((a == 0) | (a == 1)):
            raise MatrixFormatError("binary adjacency may only contain 0 and 1")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        if self.spectral_radius is None:
            object.__setattr__(self, "spectral_radius", spectral_radius(a))
        if self.edge_count is None:
            object.__setattr__(self, "edge_count", edge_count(a))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class QcReport:
    """Per-subject QC metrics and the IQR-fence outlier decision."""

    subject_ids: list
    metrics: tuple
    values: np.ndarray          # (subjects, metrics)
    q1: np.ndarray
    q2: np.ndarray
    q3: np.ndarray
    iqr: np.ndarray
    metric_flags: np.ndarray    # (subjects, metrics) bool

    @property
    def flags(self) -> np.ndarray:
        return self.metric_flags.any(axis=1)

    @property
    def outliers(self) -> list:
        return [sid for sid, f in zip(self.subject_ids, self.flags) if f]

    def to_dict(self) -> dict:
        return {
            "metrics": list(self.metrics),
            "quartiles": {
                m: {"q1": float(self.q1[j]), "q2": float(self.q2[j]), "q3": float(self.q3[j]),
                    "iqr": float(self.iqr[j]),
                    "lower_fence": float(self.q1[j] - 1.5 * self.iqr[j]),
                    "upper_fence": float(self.q3[j] + 1.5 * self.iqr[j])}
                for j, m in enumerate(self.metrics)
            },
            "subjects": [
                {"subject_id": sid,
                 "metrics": {m: float(self.values[i, j]) for j, m in enumerate(self.metrics)},
                 "flagged_metrics": [m for j, m in enumerate(self.metrics) if self.metric_flags[i, j]],
                 "outlier": bool(self.flags[i])}
                for i, sid in enumerate(self.subject_ids)
            ],
            "n_outliers": int(self.flags.sum()),
            "outliers": self.outliers,
        }

    def to_json(self, path=None, indent=2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def _clean_matrix(w, name):
    w = np.array(w, dtype=np.float64, copy=True)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise MatrixFormatError(f"{name} must be a square matrix, got shape {w.shape}")
    if np.any(np.isnan(w)):
        raise MatrixFormatError(f"{name} contains NaN entries")
    if not np.all(np.isfinite(w)):
        raise MatrixFormatError(f"{name} contains infinite entries")
    if np.any(w < 0):
        raise MatrixFormatError(f"{name} contains negative entries")
    asym = np.max(np.abs(w - w.T)) if w.size else 0.0
    if asym > SYMMETRY_TOL:
        raise MatrixFormatError(f"{name} is not symmetric (max |w - w.T| = {asym:.3g})")
    if asym > 0:
        w = 0.5 * (w + w.T)
    if np.any(np.diag(w) != 0):
        warnings.warn(f"{name}: nonzero diagonal entries set to zero", stacklevel=3)
        np.fill_diagonal(w, 0.0)
    return w


def read_matrix_csv(path) -> np.ndarray:
    """Read a comma-separated square matrix, skipping an optional header row."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 0 and not rows:
                    continue  # header
                raise MatrixFormatError(f"{path}: non-numeric entry on line {lineno + 1}") from None
    if not rows:
        raise MatrixFormatError(f"{path}: no numeric rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise MatrixFormatError(f"{path}: ragged rows")
    mat = np.array(rows, dtype=np.float64)
    if mat.shape[0] != mat.shape[1]:
        raise MatrixFormatError(f"{path}: matrix is not square ({mat.shape[0]}x{mat.shape[1]})")
    return mat


def write_matrix_csv(matrix, path, header=False):
    """Write a matrix with round-trip exact float formatting."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"n{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def load_raw(path, fa_path=None, md_path=None, subject_id=None) -> RawConnectome:
    """Load a streamline-count CSV (plus optional FA / MD CSVs) as a RawConnectome."""
    path = Path(path)
    fa = read_matrix_csv(fa_path) if fa_path else None
    md = read_matrix_csv(md_path) if md_path else None
    return RawConnectome(read_matrix_csv(path), fa=fa, md=md,
                         subject_id=subject_id if subject_id is not None else path.stem)


def save_raw(raw: RawConnectome, path, header=False):
    write_matrix_csv(raw.weights, path, header=header)


def spectral_radius(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0 or not np.any(a):
        return 0.0
    w, _, sweeps = kernels.jacobi_eigh(a, kernels.round_robin_schedule(a.shape[0]))
    if sweeps < 0:
        raise ArithmeticError("eigenvalue iteration did not converge")
    return float(np.max(np.abs(w)))


def edge_count(m) -> int:
    """Number of undirected edges: strictly positive upper-triangle entries."""
    a = m.adjacency if isinstance(m, ConnectomeMatrix) else np.asarray(m)
    return int(np.count_nonzero(np.triu(a, k=1) > 0))


def threshold_binarize(raw: RawConnectome, min_streamlines: int = 3) -> ConnectomeMatrix:
    """Keep edges with at least ``min_streamlines`` streamlines, as 0/1 entries."""
    if min_streamlines < 1:
        raise ValueError("min_streamlines must be >= 1 (use 1 to keep any streamline)")
    a = (raw.weights >= min_streamlines).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    return ConnectomeMatrix(a, binary=True)


def stabilize(m: ConnectomeMatrix) -> ConnectomeMatrix:
    """Scale ``A`` by ``1 / (1 + lambda_max)`` so the LTI model is stable."""
    lam = m.spectral_radius
    return ConnectomeMatrix(m.adjacency / (1.0 + lam), binary=False,
                            spectral_radius=lam / (1.0 + lam), edge_count=m.edge_count)


def qc_metric_values(cohort: Sequence[RawConnectome], metrics=None, min_streamlines: int = 3):
    """Compute the per-subject QC metrics.

    Connection and region prevalence are computed on the binarised graphs
    (edges with at least ``min_streamlines`` streamlines).

    - ``streamlines``: mean streamline count over the subject's edges
    - ``fa``: mean FA over the subject's edges
    - ``connection_prevalence``: mean group prevalence of the edges the subject has
      (low when the subject has unusual connections)
    - ``region_prevalence``: mean group prevalence of the node pairs the subject
      lacks (high when commonly found connections are missing)
    """
    if metrics is None:
        have_fa = all(r.fa is not None for r in cohort)
        metrics = QC_METRICS if have_fa else tuple(m for m in QC_METRICS if m != "fa")
    metrics = tuple(metrics)
    unknown = set(metrics) - set(QC_METRICS)
    if unknown:
        raise ValueError(f"unknown QC metrics: {sorted(unknown)}")
    if "fa" in metrics and any(r.fa is None for r in cohort):
        raise CohortError("FA metric requested but FA matrices are missing for some subjects")
    sizes = {r.n for r in cohort}
    if len(sizes) != 1:
        raise CohortError(f"subjects have different node counts: {sorted(sizes)}")
    n = sizes.pop()
    iu = np.triu_indices(n, k=1)
    present = np.array([r.weights[iu] >= min_streamlines for r in cohort])
    prevalence = present.mean(axis=0)
    values = np.zeros((len(cohort), len(metrics)))
    for i, raw in enumerate(cohort):
        mask = present[i]
        for j, metric in enumerate(metrics):
            if metric == "streamlines":
                vals = raw.weights[iu][mask]
            elif metric == "fa":
                vals = raw.fa[iu][mask]
            elif metric == "connection_prevalence":
                vals = prevalence[mask]
            else:
                vals = prevalence[~mask]
            values[i, j] = vals.mean() if vals.size else 0.0
    return metrics, values


def iqr_fence_flags(values):
    """Quartiles (linear interpolation) and the 1.5*IQR outlier flags, per column."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    q1, q2, q3 = np.percentile(values, [25, 50, 75], axis=0, method="linear")
    iqr = q3 - q1
    flags = (values < q1 - 1.5 * iqr) | (values > q3 + 1.5 * iqr)
    return q1, q2, q3, iqr, flags


def qc_outliers(cohort: Sequence[RawConnectome], metrics=None, min_streamlines: int = 3,
                subject_ids=None) -> QcReport:
    """Flag subjects outside ``[Q1 - 1.5 IQR, Q3 + 1.5 IQR]`` on any QC metric."""
    cohort = list(cohort)
    if len(cohort) < 4:
        raise CohortError(f"QC needs at least 4 subjects, got {len(cohort)}")
    if subject_ids is None:
        subject_ids = [r.subject_id if r.subject_id is not None else f"sub-{i:03d}"
                       for i, r in enumerate(cohort)]
    metrics, values = qc_metric_values(cohort, metrics, min_streamlines)
    q1, q2, q3, iqr, flags = iqr_fence_flags(values)
    return QcReport(list(subject_ids), metrics, values, q1, q2, q3, iqr, flags)
