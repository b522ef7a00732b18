"""Command-line entry point: ``ectcontrol <subcommand> [options]``.

Every subcommand writes its results plus ``manifest.json`` into ``--output``.
Exit codes: 0 success, 1 analysis error, 2 configuration error.  Errors are
reported as a JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, kernels
from .connectome import (ConnectomeMatrix, RawConnectome, load_raw, qc_outliers, read_matrix_csv,
                         stabilize, threshold_binarize)
from .control import controllability_profile, profiles_to_csv
from .dynamics import InputSchedule, PsiConfig, SignalTrace, compute_psi, ect_experiment, simulate_lti
from .mlbench import default_pipelines, load_pipeline_specs, run_benchmark
from .stats import DEFAULT_COVARIATES, ancova, mediate, read_cohort
from .synth import CohortGenSpec, generate_cohort, write_cohort_dir

SEED_ENV = "ECTCONTROL_SEED"
log = logging.getLogger("ectcontrol")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _add_common(p, needs_input=True):
    p.add_argument("--input", required=False, help="input file or directory")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help=f"master seed (default ${SEED_ENV} or 0)")
    p.add_argument("--config", help="JSON file whose keys override command-line options")
    p.set_defaults(_needs_input=needs_input)


def _add_psi(p):
    p.add_argument("--fs", type=float, default=200.0, help="sampling rate in Hz")
    p.add_argument("--psi-window", type=float, default=1.28, help="window length in seconds")
    p.add_argument("--psi-count", type=int, default=3, help="windows per phase")
    p.add_argument("--psi-guard", type=float, default=3.84, help="seconds disregarded around the endpoint")


def _add_cov(p, default=DEFAULT_COVARIATES):
    p.add_argument("--covariates", type=_csv_list, default=tuple(default),
                   help="comma-separated covariate columns")


def build_parser():
    parser = _Parser(prog="ectcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("qc", help="IQR-fence outlier detection over a directory of matrices")
    _add_common(p)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--metrics", type=_csv_list, default=None)

    p = sub.add_parser("controllability", help="whole-brain MC/AC for one matrix or a directory")
    _add_common(p)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--weighted", action="store_true", help="skip binarisation")
    p.add_argument("--nodal", action="store_true", help="include per-node vectors")

    p = sub.add_parser("simulate", help="LTI impulse response (and optional ECT experiment)")
    _add_common(p)
    p.add_argument("--threshold", type=int, default=3)
    p.add_argument("--nodes", type=_csv_list, default=None, help="control nodes (default: all)")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--ect", action="store_true", help="also compute output power and PSI")
    p.add_argument("--postictal-power", type=float, default=0.0)
    _add_psi(p)

    p = sub.add_parser("psi", help="PSI of a trace CSV (columns k,u,output)")
    _add_common(p)
    p.add_argument("--seizure-end", type=int, required=True)
    _add_psi(p)

    p = sub.add_parser("ancova", help="ANCOVA with covariates and one-sided p")
    _add_common(p)
    p.add_argument("--dependent", required=True)
    p.add_argument("--independent", required=True)
    p.add_argument("--direction", choices=("positive", "negative"), default="positive")
    _add_cov(p)

    p = sub.add_parser("mediate", help="bootstrap mediation with permutation test")
    _add_common(p)
    p.add_argument("--x", required=True)
    p.add_argument("--m", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--n-boot", type=int, default=10_000)
    p.add_argument("--n-perm", type=int, default=10_000)
    _add_cov(p)

    p = sub.add_parser("mlbench", help="nested-LOOCV pipeline benchmark")
    _add_common(p)
    p.add_argument("--features", action="append", default=[],
                   help="name=path of a subjects x features CSV (first column subject_id)")
    p.add_argument("--target", default="response")
    p.add_argument("--single", type=_csv_list, default=("mc_mean", "ac_mean"))
    p.add_argument("--pipelines", help="JSON pipeline spec file (default: built-in set)")
    p.add_argument("--threshold", type=int, default=3)

    p = sub.add_parser("synth", help="write a synthetic cohort directory")
    _add_common(p, needs_input=False)
    p.add_argument("--n-subjects", type=int, default=50)
    p.add_argument("--n-nodes", type=int, default=114)
    p.add_argument("--density-low", type=float, default=0.2)
    p.add_argument("--density-high", type=float, default=0.3)
    p.add_argument("--psi-missing", type=int, default=0)
    p.add_argument("--with-fa", action="store_true")
    p.add_argument("--sigma-m", type=float, default=None)
    p.add_argument("--sigma-y", type=float, default=None)

    p = sub.add_parser("replicate", help="the four cohort analyses in order")
    _add_common(p)
    p.add_argument("--n-boot", type=int, default=10_000)
    p.add_argument("--n-perm", type=int, default=10_000)
    _add_cov(p)
    return parser


def _apply_config(args, parser):
    if not args.config:
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key!r} for command {args.command!r}")
        if dest in ("covariates", "nodes", "single", "metrics") and isinstance(value, str):
            value = _csv_list(value)
        elif dest in ("covariates", "nodes", "single", "metrics") and value is not None:
            value = tuple(value)
        setattr(args, dest, value)
    return args


def _validate(args):
    if args._needs_input:
        if not args.input:
            raise ConfigError("--input is required")
        if not Path(args.input).exists():
            raise ConfigError(f"input not found: {args.input}")
    if args.seed is None:
        args.seed = _default_seed()
    for name in ("threshold", "steps", "n_boot", "n_perm", "n_subjects", "n_nodes"):
        value = getattr(args, name, None)
        if value is not None and value < (0 if name in ("n_boot", "n_perm") else 1):
            raise ConfigError(f"--{name.replace('_', '-')} out of range: {value}")
    return args


def _psi_cfg(args):
    try:
        cfg = PsiConfig(args.psi_window, args.psi_count, args.psi_guard, args.fs)
        cfg.window_samples, cfg.guard_samples  # noqa: B018 - validates integrality
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _manifest(args, outputs):
    import numba
    import scipy
    config = {k: v for k, v in vars(args).items() if not k.startswith("_")}
    return {"command": args.command, "config": config, "seed": args.seed,
            "kernel_backend": kernels.BACKEND, "outputs": sorted(outputs),
            "versions": {"ectcontrol": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "pandas": pd.__version__, "numba": numba.__version__}}


def _matrix_files(path):
    path = Path(path)
    if path.is_file():
        return [path]
    if (path / "matrices").is_dir():
        path = path / "matrices"
    files = sorted(f for f in path.glob("*.csv") if not f.stem.endswith(("_fa", "_md")))
    if not files:
        raise ConfigError(f"no matrix CSV files in {path}")
    return files


def _load_raws(path):
    out = []
    for f in _matrix_files(path):
        fa, md = f.with_name(f.stem + "_fa.csv"), f.with_name(f.stem + "_md.csv")
        out.append(load_raw(f, fa if fa.exists() else None, md if md.exists() else None))
    return out


def _cohort_path(path):
    path = Path(path)
    return path / "cohort.csv" if path.is_dir() else path


# ---------------------------------------------------------------------------
# subcommands; each returns {filename: content-writer}
# ---------------------------------------------------------------------------

def cmd_qc(args, out):
    report = qc_outliers(_load_raws(args.input), metrics=args.metrics, min_streamlines=args.threshold)
    _write_json(out / "qc_report.json", report.to_dict())
    return ["qc_report.json"]


def _prepare(raw, args):
    if getattr(args, "weighted", False):
        return stabilize(ConnectomeMatrix(raw.weights))
    return stabilize(threshold_binarize(raw, args.threshold))


def cmd_controllability(args, out):
    profiles = [controllability_profile(_prepare(raw, args), raw.subject_id) for raw in _load_raws(args.input)]
    _write_json(out / "controllability.json", [p.to_dict(nodal=args.nodal) for p in profiles])
    (out / "controllability.csv").write_text(profiles_to_csv(profiles, nodal=args.nodal))
    return ["controllability.json", "controllability.csv"]


def cmd_simulate(args, out):
    raw = load_raw(_matrix_files(args.input)[0])
    m = _prepare(raw, args)
    nodes = tuple(range(m.n)) if not args.nodes else tuple(int(i) for i in args.nodes)
    cfg = _psi_cfg(args)
    trace = simulate_lti(m, InputSchedule.impulse(nodes, args.amplitude), steps=args.steps,
                         sampling_rate=cfg.sampling_rate, keep_states=False)
    trace.to_csv(out / "trace.csv")
    written = ["trace.csv"]
    if args.ect:
        res = ect_experiment(m, args.amplitude, cfg, args.steps, postictal_power=args.postictal_power,
                             control_nodes=nodes)
        _write_json(out / "ect.json", res.to_dict())
        written.append("ect.json")
    return written


def cmd_psi(args, out):
    cfg = _psi_cfg(args)
    trace = SignalTrace.from_csv(args.input, cfg.sampling_rate, args.seizure_end)
    _write_json(out / "psi.json", compute_psi(trace, cfg).to_dict())
    return ["psi.json"]


def cmd_ancova(args, out):
    cohort = read_cohort(_cohort_path(args.input))
    res = ancova(cohort, args.dependent, args.independent, args.covariates, args.direction)
    _write_json(out / "ancova.json", res.to_dict())
    return ["ancova.json"]


def cmd_mediate(args, out):
    cohort = read_cohort(_cohort_path(args.input))
    res = mediate(cohort, args.x, args.m, args.y, args.covariates, args.n_boot, args.n_perm, args.seed)
    _write_json(out / "mediation.json", res.to_dict())
    return ["mediation.json"]


def _read_features(spec):
    if "=" not in spec:
        raise ConfigError(f"--features expects name=path, got {spec!r}")
    name, path = spec.split("=", 1)
    frame = pd.read_csv(path, float_precision="round_trip")
    frame = frame.set_index(frame.columns[0])
    frame.index = frame.index.astype(str)
    return name, frame


def cmd_mlbench(args, out):
    cohort = read_cohort(_cohort_path(args.input))
    ids = cohort["subject_id"].astype(str).tolist()
    modalities = dict(_read_features(s) for s in args.features)
    mat_dir = Path(args.input) / "matrices" if Path(args.input).is_dir() else None
    if not modalities and mat_dir is not None and mat_dir.is_dir():
        raws = {r.subject_id: r for r in _load_raws(mat_dir)}
        iu = np.triu_indices(next(iter(raws.values())).n, k=1)
        modalities["streamlines"] = pd.DataFrame([raws[i].weights[iu] for i in ids], index=ids)
        if all(r.fa is not None for r in raws.values()):
            modalities["fa"] = pd.DataFrame([raws[i].fa[iu] for i in ids], index=ids)
        if all(r.md is not None for r in raws.values()):
            modalities["md"] = pd.DataFrame([raws[i].md[iu] for i in ids], index=ids)
    if not modalities:
        raise ConfigError("no feature modalities: pass --features or a cohort directory with matrices/")
    specs = load_pipeline_specs(args.pipelines) if args.pipelines else default_pipelines(seed=args.seed)
    for s in specs:
        s.seed = args.seed
    y = pd.Series(cohort[args.target].to_numpy(dtype=float), index=ids)
    singles = {c: pd.Series(cohort[c].to_numpy(dtype=float), index=ids) for c in args.single}
    table = run_benchmark(specs, modalities, y, singles)
    table.to_csv(out / "benchmark.csv", index=False, float_format="%.17g")
    _write_json(out / "benchmark.json", {"pipelines": [s.to_dict() for s in specs],
                                         "results": table.to_dict(orient="records")})
    return ["benchmark.csv", "benchmark.json"]


def cmd_synth(args, out):
    kwargs = dict(n_subjects=args.n_subjects, n_nodes=args.n_nodes,
                  density_range=(args.density_low, args.density_high), psi_missing=args.psi_missing,
                  with_fa=args.with_fa, seed=args.seed)
    if args.sigma_m is not None:
        kwargs["sigma_m"] = args.sigma_m
    if args.sigma_y is not None:
        kwargs["sigma_y"] = args.sigma_y
    try:
        spec = CohortGenSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cohort, matrices, provenance = generate_cohort(spec)
    write_cohort_dir(out, cohort, matrices, provenance)
    return ["cohort.csv", "matrices/", "provenance.json"]


# hypothesised signs: (x -> psi, psi -> response, x -> response)
HYPOTHESES = {"mc_mean": ("negative", "negative", "positive"),
              "ac_mean": ("positive", "negative", "negative")}


def replicate(cohort, covariates=DEFAULT_COVARIATES, n_boot=10_000, n_perm=10_000, seed=0):
    """Run the four analyses for MC and AC; returns a JSON-ready dict."""
    report = {"covariates": list(covariates), "analyses": [], "mediation_diagram": {}}
    psi_resp = ancova(cohort, "response", "psi", covariates, HYPOTHESES["mc_mean"][1])
    for x, (d_psi, _, d_resp) in HYPOTHESES.items():
        first = ancova(cohort, "psi", x, covariates, d_psi)
        third = ancova(cohort, "response", x, covariates, d_resp)
        med = mediate(cohort, x, "psi", "response", covariates, n_boot, n_perm, seed)
        report["analyses"] += [
            {"analysis": 1, "label": f"{x} -> psi", **first.to_dict()},
            {"analysis": 3, "label": f"{x} -> response", **third.to_dict()},
            {"analysis": 4, "label": f"{x} -> psi -> response", **med.to_dict()},
        ]
        report["mediation_diagram"][x] = {
            "x": x, "m": "psi", "y": "response",
            "a": med.a, "b": med.b, "c": med.c_total, "c_prime": med.c_prime, "ab": med.ab,
            "ab_ci": [med.ci_low, med.ci_high], "p_ab": med.p_perm,
            "p_a": med.p_a, "p_b": med.p_b, "p_c": med.p_c_total, "p_c_prime": med.p_c_prime}
    report["analyses"].insert(0, {"analysis": 2, "label": "psi -> response", **psi_resp.to_dict()})
    report["analyses"].sort(key=lambda r: (r["analysis"], r["label"]))
    return report


def cmd_replicate(args, out):
    cohort = read_cohort(_cohort_path(args.input))
    report = replicate(cohort, args.covariates, args.n_boot, args.n_perm, args.seed)
    _write_json(out / "report.json", report)
    rows = []
    for r in report["analyses"]:
        if r["analysis"] == 4:
            rows.append({"analysis": 4, "label": r["label"], "statistic": r["ab"], "p": r["p_perm"],
                         "effect": r["ab"]})
        else:
            rows.append({"analysis": r["analysis"], "label": r["label"], "statistic": r["f_value"],
                         "p": r["p_one_sided"], "effect": r["partial_eta_sq"]})
    pd.DataFrame(rows).to_csv(out / "report.csv", index=False, float_format="%.17g")
    return ["report.json", "report.csv"]


COMMANDS = {"qc": cmd_qc, "controllability": cmd_controllability, "simulate": cmd_simulate,
            "psi": cmd_psi, "ancova": cmd_ancova, "mediate": cmd_mediate, "mlbench": cmd_mlbench,
            "synth": cmd_synth, "replicate": cmd_replicate}


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required")
        args = _validate(_apply_config(args, parser))
    except ConfigError as exc:
        return _fail(2, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](args, out)
    except ConfigError as exc:
        return _fail(2, exc)
    except (ValueError, ArithmeticError, RuntimeError, KeyError, IndexError, OSError) as exc:
        return _fail(1, exc)
    _write_json(out / "manifest.json", _manifest(args, written))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
