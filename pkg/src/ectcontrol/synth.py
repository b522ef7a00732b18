"""Random connectomes and synthetic cohorts with a planted mediation structure.

Planted model, per subject::

    psi      = beta0 + beta1 * ac_mean + N(0, sigma_m)
    response = gamma0 + gamma1 * psi + gamma2 * mc_mean + N(0, sigma_y)

Graph density varies across subjects (uniform over ``density_range``), which
is what spreads ``mc_mean`` / ``ac_mean`` across the cohort.  Leaving
``beta0`` / ``gamma0`` as None centres the cohort at ``psi_center`` and
``response_center``; the default slopes are scaled for 114-node graphs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .connectome import RawConnectome, save_raw, stabilize, threshold_binarize
from .control import controllability_profile
from .stats import write_cohort

GRAPH_MODELS = ("erdos_renyi", "degree_sequence")


@dataclass
class CohortGenSpec:
    n_subjects: int = 50
    n_nodes: int = 114
    graph_model: str = "erdos_renyi"
    density_range: tuple = (0.2, 0.3)
    min_streamlines: int = 3
    beta0: float | None = None
    beta1: float = 800.0
    sigma_m: float = 0.25
    gamma0: float | None = None
    gamma1: float = -0.5
    gamma2: float = 800.0
    sigma_y: float = 0.3
    psi_center: float = 80.0
    response_center: float = -12.0
    age_mean: float = 45.0
    age_sd: float = 11.0
    female_fraction: float = 0.58
    pre_mean: float = 25.0
    pre_sd: float = 5.0
    psi_missing: int = 0
    with_fa: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.graph_model not in GRAPH_MODELS:
            raise ValueError(f"graph_model must be one of {GRAPH_MODELS}")
        lo, hi = self.density_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("density_range must satisfy 0 < low <= high <= 1")
        self.density_range = (float(lo), float(hi))
        if self.sigma_m < 0 or self.sigma_y < 0:
            raise ValueError("noise levels must be >= 0")
        if self.n_subjects < 1 or self.n_nodes < 2:
            raise ValueError("need n_subjects >= 1 and n_nodes >= 2")
        if not 0 <= self.psi_missing <= self.n_subjects:
            raise ValueError("psi_missing must be between 0 and n_subjects")


def _edge_counts(rng, present, min_streamlines):
    counts = min_streamlines + rng.geometric(0.05, size=present.shape) - 1
    return np.where(present, counts, 0).astype(np.float64)


def _symmetric_from_upper(n, upper):
    w = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    w[iu] = upper
    return w + w.T


def generate_connectome(n: int, density: float, seed=None, min_streamlines: int = 3,
                        model: str = "erdos_renyi", with_fa: bool = False,
                        subject_id=None) -> RawConnectome:
    """Random streamline-count matrix with expected edge fraction ``density``.

    Present edges get counts >= ``min_streamlines`` and absent ones 0, so
    binarising at ``min_streamlines`` recovers the sampled graph exactly.
    ``degree_sequence`` draws lognormal node weights and connects with
    probability proportional to their product (rescaled to the density).
    """
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, k=1)
    if model == "erdos_renyi":
        prob = np.full(iu[0].shape, density)
    elif model == "degree_sequence":
        w = rng.lognormal(0.0, 0.5, size=n)
        raw = np.outer(w, w)[iu]
        prob = np.clip(raw * density / raw.mean(), 0.0, 1.0)
    else:
        raise ValueError(f"unknown graph model {model!r}")
    present = rng.random(iu[0].shape) < prob
    weights = _symmetric_from_upper(n, _edge_counts(rng, present, min_streamlines))
    fa = md = None
    if with_fa:
        fa = _symmetric_from_upper(n, np.where(present, rng.uniform(0.3, 0.6, present.shape), 0.0))
        md = _symmetric_from_upper(n, np.where(present, rng.uniform(0.6e-3, 0.9e-3, present.shape), 0.0))
    return RawConnectome(weights, fa=fa, md=md, subject_id=subject_id)


def generate_cohort(spec: CohortGenSpec):
    """Return ``(cohort DataFrame, list of RawConnectome, provenance dict)``."""
    root = np.random.SeedSequence(spec.seed)
    graph_ss, cov_ss = root.spawn(2)
    subject_ss = graph_ss.spawn(spec.n_subjects)
    rng = np.random.default_rng(cov_ss)
    lo, hi = spec.density_range
    densities = rng.uniform(lo, hi, spec.n_subjects)
    matrices, profiles = [], []
    for i in range(spec.n_subjects):
        sid = f"sub-{i:03d}"
        raw = generate_connectome(spec.n_nodes, densities[i], subject_ss[i], spec.min_streamlines,
                                  spec.graph_model, spec.with_fa, subject_id=sid)
        matrices.append(raw)
        profiles.append(controllability_profile(stabilize(threshold_binarize(raw, spec.min_streamlines)), sid))
    mc = np.array([p.mc_mean for p in profiles])
    ac = np.array([p.ac_mean for p in profiles])
    edges = np.array([p.edge_count for p in profiles])
    age = np.round(rng.normal(spec.age_mean, spec.age_sd, spec.n_subjects), 1)
    sex = (rng.random(spec.n_subjects) < spec.female_fraction).astype(int)
    pre = np.round(np.clip(rng.normal(spec.pre_mean, spec.pre_sd, spec.n_subjects), 8, 52), 1)
    beta0 = spec.psi_center - spec.beta1 * ac.mean() if spec.beta0 is None else spec.beta0
    psi = beta0 + spec.beta1 * ac + rng.normal(0.0, 1.0, spec.n_subjects) * spec.sigma_m
    n_clipped = int(np.sum((psi < 0) | (psi > 100)))
    psi = np.clip(psi, 0.0, 100.0)
    gamma0 = spec.gamma0
    if gamma0 is None:
        gamma0 = spec.response_center - spec.gamma1 * psi.mean() - spec.gamma2 * mc.mean()
    response = gamma0 + spec.gamma1 * psi + spec.gamma2 * mc + rng.normal(0.0, 1.0, spec.n_subjects) * spec.sigma_y
    psi_obs = psi.copy()
    if spec.psi_missing:
        psi_obs[rng.choice(spec.n_subjects, spec.psi_missing, replace=False)] = np.nan
    cohort = pd.DataFrame({
        "subject_id": [p.subject_id for p in profiles],
        "age": age, "sex": sex, "pre_severity": pre,
        "post_severity": pre + response, "response": response,
        "psi": psi_obs, "mc_mean": mc, "ac_mean": ac, "edge_count": edges,
        "density": densities,
    })
    provenance = {"spec": asdict(spec), "psi_clipped": n_clipped,
                  "intercepts": {"beta0": float(beta0), "gamma0": float(gamma0)},
                  "planted": {"a": spec.beta1, "b": spec.gamma1, "ab": spec.beta1 * spec.gamma1,
                              "c_prime": spec.gamma2}}
    return cohort, matrices, provenance


def write_cohort_dir(path, cohort, matrices, provenance):
    """Write ``cohort.csv``, ``matrices/<id>.csv`` (+ FA/MD) and ``provenance.json``."""
    path = Path(path)
    (path / "matrices").mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, path / "cohort.csv")
    for raw in matrices:
        save_raw(raw, path / "matrices" / f"{raw.subject_id}.csv")
        if raw.fa is not None:
            save_raw(RawConnectome(raw.fa), path / "matrices" / f"{raw.subject_id}_fa.csv")
        if raw.md is not None:
            save_raw(RawConnectome(raw.md), path / "matrices" / f"{raw.subject_id}_md.csv")
    (path / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n")
