"""Command-line front end: ``idsfit simulate | fit | predict | study``.

Exit codes: 0 success, 1 the optimizer did not converge, 2 bad input.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, Optional, Sequence

import numpy as np

from .data import STREAMS, check_datasets
from .formula import parse_formula
from .harness import STUDIES, run_study
from .inference import FitResult, fit, predict_density, validity_filter
from .io import ConfigError, dump_json, load_config, read_datasets, read_table, write_observations, \
    write_rows, write_sites
from .simulate import simulate

__all__ = ["main", "cmd_simulate", "cmd_fit", "cmd_predict", "cmd_study", "InputError"]

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INPUT = 0, 1, 2
SITES_FILE = "sites.csv"
OBS_FILE = "{}_obs.csv"
TRUTH_FILE = "truth.json"


class InputError(Exception):
    """Bad user input; reported on stderr with exit code 2."""


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _prepare_dir(out_dir) -> str:
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out_dir}: {exc}") from None
    if not os.access(out_dir, os.W_OK):
        raise InputError(f"output directory {out_dir} is not writable")
    return out_dir


def cmd_simulate(config_path, seed: int, out_dir) -> Dict[str, str]:
    """Simulate the ``[sim]`` scenario of a config and write it to ``out_dir``.

    Returns a mapping from role (``sites``, stream names, ``truth``) to path.
    """
    cfg = load_config(config_path)
    if cfg.scenario is None:
        raise ConfigError("config has no [sim] section")
    scn = cfg.scenario
    out_dir = _prepare_dir(out_dir)
    data = simulate(scn, int(seed))
    layout, theta = scn.truth()
    files = {"sites": os.path.join(out_dir, SITES_FILE)}
    write_sites(files["sites"], data)
    for s, d in data.items():
        files[s] = os.path.join(out_dir, OBS_FILE.format(s))
        write_observations(files[s], d)
    omitted = [s for s in STREAMS if s in scn.streams and s not in data]
    files["truth"] = os.path.join(out_dir, TRUTH_FILE)
    manifest = {
        "seed": int(seed),
        "truth": layout.to_dict(theta),
        "scenario": scn.to_dict(),
        "files": {k: os.path.basename(v) for k, v in files.items()},
        "omitted": {s: "stream has 0 sites; no observation file written" for s in omitted},
    }
    with open(files["truth"], "w", encoding="utf-8") as fh:
        fh.write(dump_json(manifest))
    return files


def _obs_paths(args) -> Dict[str, str]:
    paths = {}
    for s in STREAMS:
        p = getattr(args, s, None)
        if p is None and args.data_dir is not None:
            cand = os.path.join(args.data_dir, OBS_FILE.format(s))
            if os.path.isfile(cand):
                p = cand
        if p is not None:
            paths[s] = p
    return paths


def _standardize(spec, datasets):
    names = []
    for f in [spec.density, spec.availability] + [str(spec.sigma_formula(s)) for s in datasets]:
        if f is not None:
            names.extend(c for c in parse_formula(f).covariates if c not in names)
    scaling = {}
    for c in names:
        v = np.concatenate([d.covariates[c] for d in datasets.values() if c in d.covariates])
        sd = float(np.std(v))
        scaling[c] = (float(np.mean(v)), sd if sd > 0 else 1.0)
    return spec.with_(scaling=scaling or None)


def cmd_fit(config_path, data_paths: Dict[str, str], out_path, sites_path=None, truth_path=None,
            availability: Optional[str] = None, standardize: Optional[bool] = None) -> FitResult:
    """Fit the config's model to files on disk and write the result as JSON."""
    cfg = load_config(config_path)
    if "ds" not in data_paths:
        raise InputError("DS required: no distance-sampling observation file given. The integrated "
                         "model needs one DS dataset to identify detection, and PC/DND sites must be "
                         "independent of it")
    for p in [sites_path, *data_paths.values(), truth_path]:
        if p is not None and not os.path.isfile(p):
            raise InputError(f"file not found: {p}")
    if sites_path is None:
        raise InputError("a sites CSV is required (--sites or --data-dir)")
    spec = cfg.spec
    if availability is not None:
        spec = spec.with_(availability=availability)
    datasets = check_datasets(read_datasets(sites_path, data_paths, breaks=spec.breaks))
    if standardize if standardize is not None else cfg.standardize:
        spec = _standardize(spec, datasets)
    if spec.availability is None:
        dur = np.concatenate([d.duration for d in datasets.values()])
        if np.ptp(dur) > 0:
            _warn("availability is 'none': survey durations vary between sites but are ignored")
    result = fit(spec, datasets)
    if truth_path is not None:
        with open(truth_path, encoding="utf-8") as fh:
            truth = json.load(fh)["truth"]
        missing = [n for n in result.names if n not in truth]
        if missing:
            raise InputError(f"truth file lacks parameters {missing}")
        result.validity = validity_filter(result, {n: truth[n] for n in result.names})
    out_path = os.fspath(out_path)
    parent = os.path.dirname(out_path)
    if parent:
        _prepare_dir(parent)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(result.to_json())
    return result


def cmd_predict(fit_path, newdata_path, out_path, cell_area: float = 1.0):
    """Per-cell expected abundance with a final ``TOTAL`` row."""
    for p in (fit_path, newdata_path):
        if not os.path.isfile(p):
            raise InputError(f"file not found: {p}")
    with open(fit_path, encoding="utf-8") as fh:
        try:
            result = FitResult.from_json(fh.read())
        except (KeyError, ValueError) as exc:
            raise InputError(f"{fit_path} is not a fit result: {exc}") from None
    header, rows = read_table(newdata_path)
    ids = None
    cols = {}
    for k, h in enumerate(header):
        column = [r[k] for r in rows]
        if h == "cell_id":
            ids = column
        else:
            cols[h] = column
    try:
        cov = {h: np.array([float(v) for v in c]) for h, c in cols.items()}
    except ValueError as exc:
        raise InputError(f"{newdata_path}: non-numeric covariate value ({exc})") from None
    if not cov:
        cov = {"cell": np.zeros(len(rows))}
    pred = predict_density(result, cov, cell_area=cell_area, cell_ids=ids)
    out = [[cid, a, s, d] for cid, a, s, d in zip(pred.cell_ids, pred.abundance, pred.se, pred.density_per_km2)]
    out.append(["TOTAL", pred.total, pred.total_se, ""])
    write_rows(out_path, ["cell_id", "abundance", "se", "density_per_km2"], out)
    return pred


def cmd_study(study_id, reps: int, scale: float, seed: int, out_dir, threads: Optional[int] = None):
    """Run a simulation study and write ``<id>_report.csv`` plus a JSON sidecar."""
    if str(study_id).upper() not in STUDIES:
        raise InputError(f"unknown study {study_id!r}; choose from {', '.join(sorted(STUDIES))}")
    report = run_study(study_id, reps=reps, scale_factor=scale, seed=seed, threads=threads)
    out_dir = _prepare_dir(out_dir)
    base = os.path.join(out_dir, f"{report.study_id}_report")
    with open(base + ".csv", "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    with open(base + ".json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    return report


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idsfit", description="Integrated distance sampling models.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate data from a config's [sim] scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    f = sub.add_parser("fit", help="fit a model to CSV data")
    f.add_argument("--config", required=True)
    f.add_argument("--data-dir", help="directory holding sites.csv and <stream>_obs.csv files")
    f.add_argument("--sites")
    for st in STREAMS:
        f.add_argument(f"--{st}", help=f"{st.upper()} observations CSV")
    f.add_argument("--truth", help="truth JSON written by 'simulate', for validity screening")
    f.add_argument("--availability", help="availability formula, or 'none'")
    f.add_argument("--standardize", action="store_true", default=None,
                   help="z-score covariates used by the model")
    f.add_argument("--out", required=True, help="output JSON path")

    q = sub.add_parser("predict", help="predict abundance over grid cells")
    q.add_argument("--fit", required=True)
    q.add_argument("--newdata", required=True)
    q.add_argument("--cell-area", type=float, default=1.0, help="cell area in km^2")
    q.add_argument("--out", required=True)

    t = sub.add_parser("study", help="run a simulation study")
    t.add_argument("study_id")
    t.add_argument("--reps", type=int, default=100)
    t.add_argument("--scale", type=float, default=0.2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--threads", type=int, default=None, help="worker processes (default: IDS_THREADS)")
    t.add_argument("--out", required=True, help="output directory")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "simulate":
            files = cmd_simulate(args.config, args.seed, args.out)
            for v in files.values():
                print(v)
        elif args.command == "fit":
            sites = args.sites
            if sites is None and args.data_dir is not None:
                sites = os.path.join(args.data_dir, SITES_FILE)
            result = cmd_fit(args.config, _obs_paths(args), args.out, sites_path=sites,
                             truth_path=args.truth, availability=args.availability,
                             standardize=args.standardize)
            width = max(len(n) for n in result.names)
            for n, est, se in zip(result.names, result.mle, result.se):
                print(f"{n:<{width}}  {est: .6g}  ({se:.3g})")
            print(f"nll {result.nll:.6f}  {result.validity}")
            if not result.converged:
                print(f"error: optimizer did not converge ({result.message})", file=sys.stderr)
                return EXIT_NOT_CONVERGED
        elif args.command == "predict":
            pred = cmd_predict(args.fit, args.newdata, args.out, cell_area=args.cell_area)
            print(f"TOTAL {pred.total!r} (se {pred.total_se!r})")
        else:
            cmd_study(args.study_id, args.reps, args.scale, args.seed, args.out, threads=args.threads)
    except (InputError, ConfigError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
