"""Modal and average controllability of a symmetric linear network model.

For ``x(k+1) = A x(k) + B u(k)`` with symmetric ``A = V diag(xi) V^T``:

    MC_i = sum_j (1 - xi_j**2) v_ij**2         mean over i = 1 - mean(xi**2)
    AC_i = sum_j v_ij**2 / (1 - xi_j**2)        mean over i = mean(1 / (1 - xi**2))

``AC_i`` is also the trace of the controllability Gramian for ``B = e_i``,
which :func:`gramian_trace` evaluates by direct summation.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .connectome import ConnectomeMatrix, edge_count
from .errors import ConditioningError, ConvergenceError, InstabilityError, MatrixFormatError

EIG_TOL = 1e-12
EIG_MAX_SWEEPS = 100
UNIT_EIGENVALUE_GAP = 1e-9
GRAMIAN_TOL = 1e-14
GRAMIAN_MAX_TERMS = 100_000


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # column j pairs with eigenvalues[j]
    sweeps: int = 0

    @property
    def n(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


@dataclass(frozen=True)
class ControllabilityProfile:
    mc_nodal: np.ndarray
    ac_nodal: np.ndarray
    mc_mean: float
    ac_mean: float
    edge_count: int
    subject_id: str | None = None

    def to_dict(self, nodal=False) -> dict:
        out = {"subject_id": self.subject_id, "mc_mean": self.mc_mean,
               "ac_mean": self.ac_mean, "edge_count": self.edge_count}
        if nodal:
            out["mc_nodal"] = self.mc_nodal.tolist()
            out["ac_nodal"] = self.ac_nodal.tolist()
        return out

    def to_json(self, nodal=False) -> str:
        return json.dumps(self.to_dict(nodal=nodal))

    def csv_row(self, nodal=False) -> list:
        row = [self.subject_id or "", repr(self.mc_mean), repr(self.ac_mean), self.edge_count]
        if nodal:
            row += [repr(float(v)) for v in self.mc_nodal] + [repr(float(v)) for v in self.ac_nodal]
        return row


def profiles_to_csv(profiles, nodal=False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["subject_id", "mc_mean", "ac_mean", "edge_count"]
    if nodal and profiles:
        n = profiles[0].mc_nodal.shape[0]
        header += [f"mc_{i}" for i in range(n)] + [f"ac_{i}" for i in range(n)]
    writer.writerow(header)
    for p in profiles:
        writer.writerow(p.csv_row(nodal=nodal))
    return buf.getvalue()


def _as_array(m) -> np.ndarray:
    a = m.adjacency if isinstance(m, ConnectomeMatrix) else np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MatrixFormatError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise MatrixFormatError("matrix has non-finite entries")
    return a


def spectral_decompose(m, tol: float = EIG_TOL, max_sweeps: int = EIG_MAX_SWEEPS) -> SpectralDecomposition:
    """Full eigendecomposition of a symmetric matrix by Jacobi rotations.

    Eigenvalues are returned in ascending order.  Each eigenvector is signed so
    that its largest-magnitude component (first one on ties) is nonnegative.
    """
    a = _as_array(m)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > 1e-12 * scale:
        raise MatrixFormatError("spectral_decompose requires a symmetric matrix")
    a = 0.5 * (a + a.T)
    w, v, sweeps = kernels.jacobi_eigh(a, kernels.round_robin_schedule(a.shape[0]), tol, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    order = np.argsort(w, kind="stable")
    w, v = w[order], v[:, order]
    lead = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[lead, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    v = v * signs
    w.setflags(write=False)
    v.setflags(write=False)
    return SpectralDecomposition(w, v, sweeps)


def _check_stable(xi, gap=0.0):
    top = float(np.max(np.abs(xi))) if xi.size else 0.0
    if top >= 1.0:
        raise InstabilityError(f"eigenvalue magnitude {top:.6g} >= 1; stabilise the matrix first")
    if top > 1.0 - gap:
        raise ConditioningError(f"eigenvalue magnitude {top:.12g} within {gap:g} of 1")


def modal_controllability_nodal(d: SpectralDecomposition) -> np.ndarray:
    _check_stable(d.eigenvalues)
    return (d.eigenvectors ** 2) @ (1.0 - d.eigenvalues ** 2)


def average_controllability_nodal(d: SpectralDecomposition) -> np.ndarray:
    _check_stable(d.eigenvalues, UNIT_EIGENVALUE_GAP)
    return (d.eigenvectors ** 2) @ (1.0 / (1.0 - d.eigenvalues ** 2))


def whole_brain_mc(d: SpectralDecomposition) -> float:
    """Mean modal controllability, which depends on the eigenvalues only."""
    _check_stable(d.eigenvalues)
    return float(1.0 - np.mean(d.eigenvalues ** 2))


def whole_brain_ac(d: SpectralDecomposition) -> float:
    """Mean average controllability, ``mean(1 / (1 - xi**2))``."""
    _check_stable(d.eigenvalues, UNIT_EIGENVALUE_GAP)
    return float(np.mean(1.0 / (1.0 - d.eigenvalues ** 2)))


def _control_matrix(n, control_nodes):
    nodes = np.atleast_1d(np.asarray(control_nodes, dtype=np.int64))
    if nodes.size == 0:
        raise ValueError("control_nodes must be nonempty")
    if np.any(nodes < 0) or np.any(nodes >= n):
        raise IndexError(f"control node out of range for n={n}")
    b = np.zeros((n, nodes.size))
    b[nodes, np.arange(nodes.size)] = 1.0
    return b


def gramian_energies(m, control_nodes=None, horizon=None, tol: float = GRAMIAN_TOL,
                     max_terms: int = GRAMIAN_MAX_TERMS) -> np.ndarray:
    """Single-node Gramian traces ``sum_t ||A^t e_i||^2`` for each listed node.

    ``control_nodes=None`` means every node.  With ``horizon=None`` the series
    is summed until the total increment is at most ``tol``.
    """
    a = _as_array(m)
    n = a.shape[0]
    radius = m.spectral_radius if isinstance(m, ConnectomeMatrix) else _radius(a)
    if radius >= 1.0:
        raise InstabilityError(f"spectral radius {radius:.6g} >= 1; Gramian series diverges")
    b = _control_matrix(n, np.arange(n) if control_nodes is None else control_nodes)
    fixed = 0 if horizon is None else int(horizon)
    if horizon is not None and fixed < 1:
        raise ValueError("horizon must be >= 1")
    energy, terms, converged = kernels.gramian_energy(a, b, tol, max_terms, fixed)
    if not converged:
        raise ConvergenceError(f"Gramian series not converged to tol={tol:g} after {terms} terms")
    return energy


def gramian_trace(m, control_nodes, horizon=None, tol: float = GRAMIAN_TOL,
                  max_terms: int = GRAMIAN_MAX_TERMS) -> float:
    """Trace of ``W_c = sum_t A^t B B^T (A^T)^t`` for ``B`` selecting ``control_nodes``."""
    return float(np.sum(gramian_energies(m, control_nodes, horizon, tol, max_terms)))


def _radius(a):
    if np.array_equal(a, a.T):
        return float(np.max(np.abs(spectral_decompose(a).eigenvalues))) if a.size else 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a)))) if a.size else 0.0


def controllability_profile(m, subject_id=None) -> ControllabilityProfile:
    d = spectral_decompose(m)
    mc = modal_controllability_nodal(d)
    ac = average_controllability_nodal(d)
    edges = m.edge_count if isinstance(m, ConnectomeMatrix) else edge_count(_as_array(m))
    return ControllabilityProfile(mc, ac, whole_brain_mc(d), whole_brain_ac(d), int(edges), subject_id)
