"""Network-control-theory pipeline linking structural connectomes to ECT response."""

__version__ = "0.1.0"

from .connectome import (ConnectomeMatrix, QcReport, RawConnectome, edge_count, load_raw,
                         qc_outliers, save_raw, stabilize, threshold_binarize)
from .control import (ControllabilityProfile, SpectralDecomposition, average_controllability_nodal,
                      controllability_profile, gramian_energies, gramian_trace,
                      modal_controllability_nodal, spectral_decompose, whole_brain_ac, whole_brain_mc)
from .dynamics import (EctResult, InputSchedule, PsiConfig, PsiResult, SignalTrace, compute_psi,
                       ect_experiment, signal_power, simulate_lti)
from .stats import (AncovaResult, MediationResult, ancova, loocv_single_feature, mediate, ols_fit,
                    spearman)

__all__ = [
    "ConnectomeMatrix", "QcReport", "RawConnectome", "edge_count", "load_raw", "qc_outliers",
    "save_raw", "stabilize", "threshold_binarize",
    "ControllabilityProfile", "SpectralDecomposition", "average_controllability_nodal",
    "controllability_profile", "gramian_energies", "gramian_trace", "modal_controllability_nodal",
    "spectral_decompose", "whole_brain_ac", "whole_brain_mc",
    "EctResult", "InputSchedule", "PsiConfig", "PsiResult", "SignalTrace", "compute_psi",
    "ect_experiment", "signal_power", "simulate_lti",
    "AncovaResult", "MediationResult", "ancova", "loocv_single_feature", "mediate", "ols_fit",
    "spearman",
]
