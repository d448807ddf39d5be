"""Command-line front end: ingestion, fitting, bootstrap, and simulation.

Subcommands write a JSON result document (or a CSV metrics table for
``simulate``) to ``--out`` or stdout. Exit codes: 0 success, 1 validation
error, 2 numerical failure; errors are reported as JSON on stderr with a
stable machine-readable code.
"""

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .core import Study, SubjectData, center_study, validate_study
from .errors import (
    CovcapError,
    MissingSeriesFile,
    NonNumericCell,
    RaggedRow,
    UsageError,
)
from .inference import bootstrap_beta
from .simgen import consistency_curve, run_table1, run_table2_and_figures
from .solver import Estimator, FitConfig, fit_component, fit_components

_ESTIMATORS = {e.value: e for e in Estimator}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def ingest(covariates_path, series_dir, thin: int = 1, center: bool = True) -> Study:
    """Build a validated study from a covariates CSV and per-subject series.

    The covariates file has header ``id,x1,...,x{q-1}``; the intercept is
    prepended automatically. Each subject id must have ``<id>.csv`` in
    ``series_dir``: a headerless T x p numeric CSV. Rows are thinned by
    ``thin`` (every thin-th row, starting at the first) and columns are
    mean-centered per subject unless ``center`` is False.
    """
    covariates_path = Path(covariates_path)
    series_dir = Path(series_dir)
    if thin < 1:
        raise UsageError(f"thin must be >= 1, got {thin}")
    if not covariates_path.exists():
        raise UsageError(f"covariates file not found: {covariates_path}")
    subjects = []
    with open(covariates_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise NonNumericCell(f"{covariates_path}: empty covariates file") from None
        if not header or header[0].strip() != "id":
            raise NonNumericCell(f"{covariates_path}:1: header must start with 'id'")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRow(
                    f"{covariates_path}:{lineno}: expected {width} fields, got {len(row)}"
                )
            sid = row[0].strip()
            try:
                xs = [float(v) for v in row[1:]]
            except ValueError:
                raise NonNumericCell(
                    f"{covariates_path}:{lineno}: non-numeric covariate"
                ) from None
            series_path = series_dir / f"{sid}.csv"
            if not series_path.exists():
                raise MissingSeriesFile(f"no series file for subject {sid}: {series_path}")
            obs = _read_series(series_path)
            subjects.append(
                SubjectData(
                    id=sid,
                    observations=obs[::thin],
                    covariates=np.array([1.0] + xs),
                )
            )
    study = validate_study(Study(subjects=subjects, centered=False))
    return center_study(study) if center else study


def _read_series(path: Path) -> np.ndarray:
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise RaggedRow(
                    f"{path}:{lineno}: expected {width} columns, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise NonNumericCell(f"{path}:{lineno}: non-numeric cell") from None
    if not rows:
        raise RaggedRow(f"{path}: empty series file")
    return np.asarray(rows, dtype=np.float64)


def write_study(study: Study, covariates_path, series_dir):
    """Inverse of :func:`ingest`: write covariates and per-subject series."""
    covariates_path = Path(covariates_path)
    series_dir = Path(series_dir)
    series_dir.mkdir(parents=True, exist_ok=True)
    q = study.q
    with open(covariates_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"x{j}" for j in range(1, q)])
        for s in study.subjects:
            writer.writerow([s.id] + [_fmt(v) for v in s.covariates[1:]])
    for s in study.subjects:
        with open(series_dir / f"{s.id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in s.observations:
                writer.writerow([_fmt(v) for v in row])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="covcap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (0 = auto); mirrors COVCAP_THREADS")
        sp.add_argument("--out", type=str, default=None)
        sp.add_argument("--config", type=str, default=None,
                        help="JSON file of default flag values")

    def add_data(sp):
        sp.add_argument("--covariates", type=str, required=True)
        sp.add_argument("--series-dir", type=str, required=True)
        sp.add_argument("--thin", type=int, default=1)
        sp.add_argument("--no-center", action="store_true")

    def add_fitflags(sp):
        sp.add_argument("--estimator", choices=sorted(_ESTIMATORS), default="cs-cap")
        sp.add_argument("--components", type=int, default=1)
        sp.add_argument("--max-outer-iters", type=int, default=100)
        sp.add_argument("--objective-rel-tol", type=float, default=1e-6)
        sp.add_argument("--n-inits", type=int, default=None)

    for name in ("fit", "components"):
        sp = sub.add_parser(name, help="fit one or more components")
        add_common(sp)
        add_data(sp)
        add_fitflags(sp)

    sp = sub.add_parser("bootstrap", help="percentile bootstrap CI for beta")
    add_common(sp)
    add_data(sp)
    add_fitflags(sp)
    sp.add_argument("--B", type=int, default=500)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--refit-gamma", action="store_true")

    sp = sub.add_parser("simulate", help="run a simulation study preset")
    add_common(sp)
    sp.add_argument("--preset", choices=["table1", "table2", "figure1", "figure2"],
                    required=True)
    sp.add_argument("--p", type=int, default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--T", type=int, default=None)
    sp.add_argument("--replicates", type=int, default=None)
    sp.add_argument("--B", type=int, default=0, help="bootstrap size for coverage")
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--methods", type=str, default=None,
                    help="comma-separated estimator names")
    return parser


def _apply_config_file(args, argv):
    if not args.config:
        return args
    with open(args.config) as fh:
        defaults = json.load(fh)
    argv_flags = {str(a).split("=")[0] for a in argv if str(a).startswith("--")}
    for key, value in defaults.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"unknown config key: {key}")
        # CLI flags override config-file values override defaults
        if f"--{key}" not in argv_flags:
            setattr(args, attr, value)
    return args


def _resolve_threads(args) -> int:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("COVCAP_THREADS")
        threads = int(env) if env else 0
    if threads == 0:
        threads = min(4, os.cpu_count() or 1)
    return max(1, threads)


def _config_echo(args):
    skip = {"command", "config"}
    echo = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        echo[key.replace("_", "-")] = value
    return echo


def _emit_json(doc, out_path):
    text = json.dumps(doc, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _emit_csv(rows, header, out_path):
    def write(fh):
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)

    if out_path:
        with open(out_path, "w", newline="") as fh:
            write(fh)
    else:
        write(sys.stdout)


def _base_doc(args):
    return {
        "command": args.command,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "seed": args.seed,
        "config_echo": _config_echo(args),
    }


def _fit_config(args) -> FitConfig:
    return FitConfig(
        max_outer_iters=args.max_outer_iters,
        objective_rel_tol=args.objective_rel_tol,
        n_inits=args.n_inits,
        estimator=_ESTIMATORS[args.estimator],
        seed=args.seed,
    )


def _load_study(args) -> Study:
    return ingest(
        args.covariates, args.series_dir, thin=args.thin, center=not args.no_center
    )


def cmd_fit(args) -> dict:
    study = _load_study(args)
    cfg = _fit_config(args)
    doc = _base_doc(args)
    if args.components <= 1:
        fit = fit_component(study, cfg)
        doc.update(
            {
                "gamma": [fit.state.gamma.tolist()],
                "beta": [fit.state.beta.tolist()],
                "objective_trace": fit.objective_trace,
                "converged": fit.converged,
                "init_index": fit.init_index,
                "dfd": [1.0],
                "shrinkage": _shrinkage_doc(fit.final_shrinkage),
            }
        )
    else:
        comps = fit_components(study, args.components, cfg)
        doc.update(
            {
                "gamma": [comps.gammas[:, j].tolist() for j in range(comps.gammas.shape[1])],
                "beta": [b.tolist() for b in comps.betas],
                "objective_trace": comps.fits[0].objective_trace,
                "converged": all(f.converged for f in comps.fits),
                "init_index": comps.fits[0].init_index,
                "dfd": comps.dfd_sequence,
                "shrinkage": _shrinkage_doc(comps.fits[0].final_shrinkage),
            }
        )
    return doc


def _shrinkage_doc(params):
    if params is None:
        return None
    return {
        "mu": params.mu,
        "delta2": params.delta2,
        "psi2": params.psi2,
        "phi2": params.phi2,
        "weight": params.weight,
    }


def cmd_bootstrap(args) -> dict:
    study = _load_study(args)
    cfg = _fit_config(args)
    threads = _resolve_threads(args)
    fit = fit_component(study, cfg)
    res = bootstrap_beta(
        study, fit, args.B, args.level, cfg,
        refit_gamma=args.refit_gamma, threads=threads,
    )
    doc = _base_doc(args)
    doc.update(
        {
            "gamma": [fit.state.gamma.tolist()],
            "beta": [fit.state.beta.tolist()],
            "objective_trace": fit.objective_trace,
            "converged": fit.converged,
            "ci": {
                "lower": res.ci_lower.tolist(),
                "upper": res.ci_upper.tolist(),
                "level": res.level,
                "B": res.B,
                "n_failed": res.n_failed,
            },
        }
    )
    return doc


_SIM_HEADER = [
    "p", "n", "T", "dim", "method",
    "bias_eigen", "mse_eigen", "bias_beta1", "mse_beta1",
    "similarity", "similarity_se", "coverage",
]


def _cells_to_rows(cells):
    rows = []
    for cell in cells:
        m = cell.metrics
        rows.append(
            [
                cell.p, cell.n, cell.T, cell.dim, cell.method.value,
                _fmt(m.bias_eigen), _fmt(m.mse_eigen),
                _fmt(m.bias_beta1), _fmt(m.mse_beta1),
                _fmt(m.similarity), _fmt(m.similarity_se),
                "" if m.coverage is None else _fmt(m.coverage),
            ]
        )
    return rows


def cmd_simulate(args):
    threads = _resolve_threads(args)
    methods = None
    if args.methods:
        methods = tuple(_ESTIMATORS[m.strip()] for m in args.methods.split(","))
    if args.preset == "table1":
        ps = (args.p,) if args.p else (20, 50, 100)
        cells = run_table1(
            ps=ps,
            methods=methods or (Estimator.LW_CAP, Estimator.CS_CAP, Estimator.CAP),
            replicates=args.replicates or 100,
            seed=args.seed,
            n=args.n or 50,
            T=args.T or 50,
            threads=threads,
        )
        return _cells_to_rows(cells)
    if args.preset == "table2":
        cells = run_table2_and_figures(
            p=args.p or 100,
            sizes=((args.n or 100, args.T or 100),),
            methods=methods or (Estimator.LW_CAP, Estimator.CS_CAP),
            replicates=args.replicates or 50,
            bootstrap_B=args.B,
            level=args.level,
            seed=args.seed,
            threads=threads,
        )
        return _cells_to_rows(cells)
    if args.preset == "figure1":
        curve = consistency_curve(
            T_grid=(50, 100, 500, 1000),
            p=args.p or 20,
            n=args.n or 50,
            replicates=args.replicates or 20,
            seed=args.seed,
            threads=threads,
        )
        return [
            [d["T"], _fmt(d["median_mse_beta1"]), _fmt(d["median_mse_eigen"])]
            for d in curve
        ], ["T", "median_mse_beta1", "median_mse_eigen"]
    # figure2: the diagonal n = T grid with the full solver
    grid = (50, 100, 500, 1000)
    cells = run_table2_and_figures(
        p=args.p or 100,
        sizes=tuple((s, s) for s in grid),
        methods=methods or (Estimator.CS_CAP,),
        replicates=args.replicates or 50,
        bootstrap_B=args.B,
        level=args.level,
        seed=args.seed,
        threads=threads,
    )
    return _cells_to_rows(cells)


def main(argv=None) -> int:
    parser = _build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args, argv)
        if args.command in ("fit", "components"):
            if args.command == "components" and args.components < 1:
                raise UsageError("--components must be >= 1")
            doc = cmd_fit(args)
            _emit_json(doc, args.out)
        elif args.command == "bootstrap":
            doc = cmd_bootstrap(args)
            _emit_json(doc, args.out)
        elif args.command == "simulate":
            result = cmd_simulate(args)
            if isinstance(result, tuple):
                rows, header = result
            else:
                rows, header = result, _SIM_HEADER
            _emit_csv(rows, header, args.out)
        return 0
    except CovcapError as exc:
        err = {"error": {"code": exc.code, "message": str(exc)}}
        sys.stderr.write(json.dumps(err) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
