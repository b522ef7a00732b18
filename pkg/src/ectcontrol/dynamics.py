"""LTI response to a control input, signal power, and the postictal suppression index.

One simulation step is one EEG sample, so at 200 Hz a 1.28 s window is 256
steps and the 3.84 s guard band is 768 steps.

The output signal is ``s(k) = ||x(k)||`` (or one node's activity), so the
instantaneous power is ``s(k)**2`` and the total power of a unit impulse at
node ``i`` is that node's average controllability.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .connectome import ConnectomeMatrix
from .control import _as_array, _radius
from .errors import ConvergenceError, DegenerateDataError, InstabilityError


@dataclass(frozen=True)
class InputSchedule:
    """Scalar input ``u(k)`` distributed uniformly onto ``control_nodes``."""

    control_nodes: tuple
    samples: dict            # step -> amplitude, zero elsewhere
    duration: int | None = None

    def __post_init__(self):
        nodes = tuple(int(i) for i in np.atleast_1d(self.control_nodes))
        if not nodes:
            raise ValueError("control_nodes must be nonempty")
        object.__setattr__(self, "control_nodes", nodes)
        samples = {int(k): float(v) for k, v in dict(self.samples).items()}
        if any(k < 0 for k in samples):
            raise ValueError("input steps must be >= 0")
        if not all(np.isfinite(v) for v in samples.values()):
            raise ValueError("input amplitudes must be finite")
        object.__setattr__(self, "samples", samples)

    @classmethod
    def impulse(cls, control_nodes, amplitude=1.0, step=0):
        return cls(control_nodes, {step: amplitude})

    def input_vector(self, n) -> np.ndarray:
        b = np.zeros(n)
        for i in self.control_nodes:
            if not 0 <= i < n:
                raise IndexError(f"control node {i} out of range for n={n}")
            b[i] = 1.0
        return b

    def as_array(self, steps) -> np.ndarray:
        u = np.zeros(steps)
        for k, v in self.samples.items():
            if k < steps:
                u[k] = v
        return u


@dataclass
class SignalTrace:
    sampling_rate: float
    samples: np.ndarray
    seizure_end_index: int | None = None
    inputs: np.ndarray | None = None
    state_history: np.ndarray | None = None   # (n, T)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not self.sampling_rate > 0:
            raise ValueError("sampling_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace samples must be finite")
        if self.seizure_end_index is not None and not 0 <= self.seizure_end_index < len(self.samples):
            raise ValueError(f"seizure_end_index {self.seizure_end_index} outside trace of length {len(self.samples)}")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def power(self) -> np.ndarray:
        return self.samples ** 2

    def to_csv(self, path):
        u = self.inputs if self.inputs is not None else np.zeros(len(self))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "u", "output"])
            for k, (uk, sk) in enumerate(zip(u, self.samples)):
                writer.writerow([k, repr(float(uk)), repr(float(sk))])

    @classmethod
    def from_csv(cls, path, sampling_rate=200.0, seizure_end_index=None):
        ks, us, ss = [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "output" not in reader.fieldnames:
                raise ValueError(f"{path}: trace CSV needs an 'output' column")
            for row in reader:
                ks.append(int(row.get("k", len(ks))))
                us.append(float(row.get("u") or 0.0))
                ss.append(float(row["output"]))
        if ks != list(range(len(ks))):
            raise ValueError(f"{path}: column k must count 0, 1, 2, ...")
        return cls(sampling_rate, np.array(ss), seizure_end_index, inputs=np.array(us))


@dataclass(frozen=True)
class PsiConfig:
    window_seconds: float = 1.28
    window_count: int = 3
    guard_seconds: float = 3.84
    sampling_rate: float = 200.0

    def __post_init__(self):
        if not (self.window_seconds > 0 and self.window_count > 0 and self.sampling_rate > 0):
            raise ValueError("window_seconds, window_count and sampling_rate must be positive")
        if self.guard_seconds < 0:
            raise ValueError("guard_seconds must be >= 0")

    def _samples(self, seconds, what):
        exact = seconds * self.sampling_rate
        count = int(round(exact))
        if abs(exact - count) > 1e-6:
            raise ValueError(f"{what} of {seconds} s is not a whole number of samples at {self.sampling_rate} Hz")
        return count

    @property
    def window_samples(self) -> int:
        return self._samples(self.window_seconds, "window")

    @property
    def guard_samples(self) -> int:
        return self._samples(self.guard_seconds, "guard")

    @property
    def guard_split(self) -> tuple:
        """Samples disregarded before and after the endpoint."""
        g = self.guard_samples
        return g // 2, g - g // 2

    @property
    def samples_before_end(self) -> int:
        return self.window_count * self.window_samples + self.guard_split[0]

    @property
    def samples_after_end(self) -> int:
        return self.window_count * self.window_samples + self.guard_split[1]


@dataclass(frozen=True)
class PsiResult:
    psi: float                    # clamped to [0, 1]
    raw_psi: float
    clamped: bool
    seizure_power: float          # mean power over the seizure windows
    termination_power: float      # mean power over the termination windows
    seizure_windows: tuple        # ((start, stop), ...)
    termination_windows: tuple

    @property
    def percent(self) -> float:
        return 100.0 * self.psi

    def to_dict(self) -> dict:
        return {"psi": self.psi, "psi_percent": self.percent, "raw_psi": self.raw_psi,
                "clamped": self.clamped, "seizure_power": self.seizure_power,
                "termination_power": self.termination_power,
                "seizure_windows": [list(w) for w in self.seizure_windows],
                "termination_windows": [list(w) for w in self.termination_windows]}


def simulate_lti(m, schedule: InputSchedule, x0=None, steps: int = 1000, sampling_rate: float = 200.0,
                 output_node: int | None = None, keep_states: bool = True) -> SignalTrace:
    """Run ``x(k+1) = A x(k) + b u(k)`` for ``k = 0..steps-1``.

    The returned trace has ``steps + 1`` samples, ``k = 0..steps``.
    """
    a = _as_array(m)
    n = a.shape[0]
    if steps < 1:
        raise ValueError("steps must be >= 1")
    radius = m.spectral_radius if isinstance(m, ConnectomeMatrix) else _radius(a)
    if radius >= 1.0:
        raise InstabilityError(f"spectral radius {radius:.6g} >= 1; simulation would diverge")
    x0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64)
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},), got {x0.shape}")
    if output_node is not None and not 0 <= output_node < n:
        raise IndexError(f"output_node {output_node} out of range")
    u = schedule.as_array(steps)
    out, states = kernels.lti_simulate(a, schedule.input_vector(n), u, x0, steps,
                                       -1 if output_node is None else int(output_node), keep_states)
    inputs = np.append(u, 0.0)
    return SignalTrace(sampling_rate, out, None, inputs=inputs, state_history=states if keep_states else None)


def signal_power(trace, start: int = 0, end: int | None = None) -> float:
    """Sum of squared samples over ``[start, end)``."""
    samples = trace.samples if isinstance(trace, SignalTrace) else np.asarray(trace, dtype=np.float64)
    end = samples.shape[0] if end is None else end
    if not 0 <= start <= end <= samples.shape[0]:
        raise IndexError(f"bad window [{start}, {end}) for trace of length {samples.shape[0]}")
    seg = samples[start:end]
    return float(np.dot(seg, seg))


def psi_windows(seizure_end_index: int, cfg: PsiConfig):
    w = cfg.window_samples
    before, after = cfg.guard_split
    seiz_stop = seizure_end_index - before
    term_start = seizure_end_index + after
    seizure = tuple((seiz_stop - (cfg.window_count - j) * w, seiz_stop - (cfg.window_count - j - 1) * w)
                    for j in range(cfg.window_count))
    termination = tuple((term_start + j * w, term_start + (j + 1) * w) for j in range(cfg.window_count))
    return seizure, termination


def compute_psi(trace: SignalTrace, cfg: PsiConfig = PsiConfig()) -> PsiResult:
    """``1 - termination power / seizure power`` with the device windowing.

    Each phase's power is the mean over ``window_count`` contiguous windows of
    their mean squared amplitude.  Seizure windows end where the guard band
    before the endpoint starts; termination windows start where it ends.
    """
    if trace.seizure_end_index is None:
        raise ValueError("trace has no seizure_end_index")
    if abs(trace.sampling_rate - cfg.sampling_rate) > 1e-9:
        raise ValueError(f"trace sampled at {trace.sampling_rate} Hz, config expects {cfg.sampling_rate} Hz")
    seizure, termination = psi_windows(trace.seizure_end_index, cfg)
    if seizure[0][0] < 0 or termination[-1][1] > len(trace):
        raise ValueError(
            f"trace too short: need {cfg.samples_before_end} samples before and "
            f"{cfg.samples_after_end} after the endpoint at {trace.seizure_end_index} "
            f"(length {len(trace)})")
    w = cfg.window_samples
    p_seiz = np.mean([signal_power(trace, a, b) / w for a, b in seizure])
    p_term = np.mean([signal_power(trace, a, b) / w for a, b in termination])
    if p_seiz <= 0:
        raise DegenerateDataError("seizure-phase power is zero; PSI undefined")
    raw = 1.0 - p_term / p_seiz
    psi = min(max(raw, 0.0), 1.0)
    return PsiResult(float(psi), float(raw), bool(raw < 0.0), float(p_seiz), float(p_term), seizure, termination)


@dataclass
class EctResult:
    output_power: float          # sum of s(k)**2 over the simulated response
    psi: PsiResult
    seizure_end_step: int        # first step below end_fraction * peak power
    device_end_index: int        # endpoint used for the PSI windows
    endpoint_shifted: bool       # True if device_end_index > seizure_end_step
    trace: SignalTrace = field(repr=False)

    def to_dict(self) -> dict:
        return {"output_power": self.output_power, "psi": self.psi.psi,
                "psi_percent": self.psi.percent, "raw_psi": self.psi.raw_psi,
                "psi_clamped": self.psi.clamped,
                "seizure_power": self.psi.seizure_power,
                "termination_power": self.psi.termination_power,
                "seizure_end_step": self.seizure_end_step,
                "device_end_index": self.device_end_index,
                "endpoint_shifted": self.endpoint_shifted}


def ect_experiment(m, amplitude: float, cfg: PsiConfig = PsiConfig(), steps: int | None = None,
                   end_fraction: float = 0.1, postictal_power: float = 0.0,
                   control_nodes=None) -> EctResult:
    """Uniform ECT-like impulse at k=0, then PSI of the resulting recording.

    The endpoint is the first step after the peak where ``s(k)**2`` drops below
    ``end_fraction`` times the peak.  The device cannot place its windows
    closer than ``cfg.samples_before_end`` samples to the recording start, so
    the endpoint used for PSI is the later of the two (``endpoint_shifted``).

    ``postictal_power`` is a background power level added to every sample of
    the recording.  It does not depend on the connectome, which holds the
    termination-phase power fixed across subjects.  With 0, a fully decayed
    response gives PSI = 1.
    """
    a = _as_array(m)
    n = a.shape[0]
    if not np.isfinite(amplitude):
        raise ValueError("amplitude must be finite")
    if not 0 < end_fraction < 1:
        raise ValueError("end_fraction must be in (0, 1)")
    if postictal_power < 0:
        raise ValueError("postictal_power must be >= 0")
    nodes = tuple(range(n)) if control_nodes is None else control_nodes
    needed = cfg.samples_before_end + cfg.samples_after_end
    steps = needed if steps is None else max(int(steps), needed)
    trace = simulate_lti(m, InputSchedule.impulse(nodes, amplitude), steps=steps,
                         sampling_rate=cfg.sampling_rate, keep_states=False)
    power = trace.power
    peak_at = int(np.argmax(power))
    peak = power[peak_at]
    if peak <= 0:
        raise DegenerateDataError("zero input amplitude: the response has no power")
    below = np.nonzero(power[peak_at:] < end_fraction * peak)[0]
    if below.size == 0:
        raise ConvergenceError(f"response did not fall below {end_fraction:g} of its peak within {steps} steps")
    end_step = peak_at + int(below[0])
    device_end = max(end_step, cfg.samples_before_end)
    total_needed = device_end + cfg.samples_after_end
    if total_needed > len(trace):
        trace = simulate_lti(m, InputSchedule.impulse(nodes, amplitude), steps=total_needed,
                             sampling_rate=cfg.sampling_rate, keep_states=False)
        power = trace.power
    recording = SignalTrace(cfg.sampling_rate, np.sqrt(power + postictal_power), device_end,
                            inputs=trace.inputs)
    return EctResult(float(np.sum(power)), compute_psi(recording, cfg), end_step, device_end,
                     device_end > end_step, recording)


def results_to_json(rows, path=None) -> str:
    text = json.dumps([r.to_dict() if hasattr(r, "to_dict") else r for r in rows], indent=2)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text
