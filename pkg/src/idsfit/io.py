"""Run configuration and on-disk formats.

Sites CSV:          site_id,stream,duration_min,trunc_m,<covariates...>   (empty trunc_m = UNLIMITED)
DS observations:    site_id,bin_index,count                               (long format, one row per bin)
PC/DND responses:   site_id,y

Floats are written with ``repr`` (shortest round-trip form), so every file
re-reads to identical values.
"""
from __future__ import annotations

import configparser
import csv
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .data import STREAMS, SurveyDataset, check_stream
from .formula import INTERCEPT, parse_formula
from .model import ModelSpec
from .simulate import Duration, SimScenario, StreamScenario

__all__ = [
    "ConfigError",
    "RunConfig",
    "CONFIG_KEYS",
    "load_config",
    "parse_config",
    "write_sites",
    "write_observations",
    "read_datasets",
    "read_table",
    "write_rows",
    "fmt",
]

SITE_COLUMNS = ("site_id", "stream", "duration_min", "trunc_m")

CONFIG_KEYS = {
    "model": {"density", "sigma", "sigma_sharing", "availability", "time_unit_min", "density_area_m2",
              "standardize"},
    "ds": {"sigma", "breaks", "n_sites", "sigma_coef", "duration"},
    "pc": {"sigma", "trunc_m", "n_sites", "sigma_coef", "duration"},
    "dnd": {"sigma", "trunc_m", "n_sites", "sigma_coef", "duration"},
    "sim": {"beta", "gamma", "covariates", "sigma_coef"},
}


class ConfigError(ValueError):
    pass


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


@dataclass
class RunConfig:
    spec: ModelSpec
    scenario: Optional[SimScenario] = None
    standardize: bool = False
    path: Optional[str] = None
    streams: tuple = ()


def _coefs(text: str, what: str) -> Dict[str, float]:
    out: Dict[str, float] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, val = item.rpartition(":")
        if not sep:
            raise ConfigError(f"{what}: expected name:value, got {item!r}")
        name = name.strip()
        if name.lower() in ("(intercept)", "intercept", "1"):
            name = INTERCEPT
        try:
            out[name] = float(val)
        except ValueError:
            raise ConfigError(f"{what}: {val!r} is not a number") from None
    if INTERCEPT not in out:
        raise ConfigError(f"{what}: an intercept coefficient is required")
    # intercept first, matching design-matrix column order
    return {INTERCEPT: out.pop(INTERCEPT), **out}


def _bool(text: str, what: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{what}: expected a boolean, got {text!r}")


def _float(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{what}: {text!r} is not a number") from None


def _trunc(text: str) -> Optional[float]:
    t = text.strip().lower()
    if t in ("", "none", "unlimited", "inf"):
        return None
    return _float(t, "trunc_m")


def parse_config(text: str, path: Optional[str] = None) -> RunConfig:
    """Parse INI text; unknown sections or keys raise :class:`ConfigError`."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in cp.sections():
        if sec not in CONFIG_KEYS:
            raise ConfigError(f"unknown section [{sec}]")
        unknown = set(cp[sec]) - CONFIG_KEYS[sec]
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{sec}]")
    model = cp["model"] if cp.has_section("model") else {}
    try:
        sharing = model.get("sigma_sharing", "per_stream").strip().lower()
        streams = tuple(s for s in STREAMS if cp.has_section(s))
        if sharing == "shared":
            sigma = model.get("sigma", "~ 1")
        else:
            sigma = {s: cp[s].get("sigma", "~ 1") for s in streams}
        breaks = None
        if cp.has_section("ds") and "breaks" in cp["ds"]:
            breaks = tuple(_float(b, "breaks") for b in cp["ds"]["breaks"].split(","))
        spec = ModelSpec(
            density=model.get("density", "~ 1"),
            sigma=sigma,
            availability=model.get("availability", "none"),
            sigma_sharing=sharing,
            breaks=breaks,
            density_area_m2=_float(model.get("density_area_m2", "10000"), "density_area_m2"),
            time_unit_min=_float(model.get("time_unit_min", "1"), "time_unit_min"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    standardize = _bool(model.get("standardize", "false"), "standardize")
    scenario = _scenario(cp, spec, streams) if cp.has_section("sim") else None
    return RunConfig(spec=spec, scenario=scenario, standardize=standardize, path=path, streams=streams)


def _scenario(cp, spec: ModelSpec, streams) -> SimScenario:
    sim = cp["sim"]
    beta = _coefs(sim.get("beta", "(Intercept):0"), "beta")
    gamma = _coefs(sim["gamma"], "gamma") if "gamma" in sim else None
    if (gamma is None) != (spec.availability is None):
        raise ConfigError("[sim] gamma must be given exactly when [model] availability is set")
    covariates = tuple(c.strip() for c in sim.get("covariates", "").split(",") if c.strip())
    out = {}
    for s in streams:
        sec = cp[s]
        if "sigma_coef" in sec:
            sig = _coefs(sec["sigma_coef"], f"[{s}] sigma_coef")
        elif "sigma_coef" in sim:
            sig = _coefs(sim["sigma_coef"], "[sim] sigma_coef")
        else:
            raise ConfigError(f"[{s}] needs sigma_coef for simulation")
        try:
            n = int(sec.get("n_sites", "0"))
            dur = Duration.parse(sec.get("duration", "constant:5"))
            if s == "ds":
                if spec.breaks is None:
                    raise ConfigError("[ds] breaks are required")
                out[s] = StreamScenario(n, sig, breaks=spec.breaks, duration=dur)
            else:
                out[s] = StreamScenario(n, sig, trunc=_trunc(sec.get("trunc_m", "")), duration=dur)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{s}] {exc}") from None
    try:
        scn = SimScenario(streams=out, beta=beta, gamma=gamma, covariates=covariates,
                          sigma_sharing=spec.sigma_sharing, density_area_m2=spec.density_area_m2,
                          time_unit_min=spec.time_unit_min)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    implied = scn.model_spec()
    for s in streams:
        if str(implied.sigma_formula(s)) != str(spec.sigma_formula(s)):
            raise ConfigError(f"[{s}] sigma_coef terms do not match the sigma formula {spec.sigma_formula(s)}")
    if str(parse_formula(implied.density)) != str(parse_formula(spec.density)):
        raise ConfigError("[sim] beta terms do not match the density formula")
    return scn


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), path)


def write_rows(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def read_table(path) -> tuple:
    """Header and rows of a CSV file; rejects empty or duplicated column names."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if any(not h for h in header) or len(set(header)) != len(header):
            raise ValueError(f"{path}: malformed header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append(row)
    return header, rows


def write_sites(path, datasets: Mapping[str, SurveyDataset]) -> None:
    covs: List[str] = []
    for d in datasets.values():
        for c in d.covariates:
            if c not in covs:
                covs.append(c)
    rows = []
    for s, d in datasets.items():
        missing = set(covs) - set(d.covariates)
        if missing:
            raise ValueError(f"{s} data lack covariates {sorted(missing)}")
        for i, sid in enumerate(d.site_ids):
            t = d.trunc[i]
            rows.append([sid, s.upper(), float(d.duration[i]), "" if np.isnan(t) else float(t)]
                        + [float(d.covariates[c][i]) for c in covs])
    write_rows(path, list(SITE_COLUMNS) + covs, rows)


def write_observations(path, data: SurveyDataset) -> None:
    if data.stream == "ds":
        J = data.y.shape[1]
        rows = [[sid, j + 1, int(data.y[i, j])] for i, sid in enumerate(data.site_ids) for j in range(J)]
        write_rows(path, ["site_id", "bin_index", "count"], rows)
    else:
        write_rows(path, ["site_id", "y"], [[sid, int(v)] for sid, v in zip(data.site_ids, data.y)])


def _number(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"{what}: {text!r} is not a number") from None


def read_datasets(sites_path, obs_paths: Mapping[str, str], breaks=None) -> Dict[str, SurveyDataset]:
    """Assemble datasets from a sites CSV and one observation file per stream."""
    header, rows = read_table(sites_path)
    if tuple(header[:4]) != SITE_COLUMNS:
        raise ValueError(f"{sites_path}: header must start with {','.join(SITE_COLUMNS)}")
    covs = header[4:]
    by_stream: Dict[str, list] = {}
    for r in rows:
        by_stream.setdefault(check_stream(r[1]), []).append(r)
    out = {}
    for stream in STREAMS:
        if stream not in obs_paths:
            continue
        srows = by_stream.get(stream, [])
        ids = [r[0] for r in srows]
        index = {sid: i for i, sid in enumerate(ids)}
        n = len(ids)
        duration = [_number(r[2], "duration_min") for r in srows]
        trunc = [np.nan if not r[3].strip() else _number(r[3], "trunc_m") for r in srows]
        cov = {c: np.array([_number(r[4 + k], c) for r in srows]) for k, c in enumerate(covs)}
        oh, orows = read_table(obs_paths[stream])
        if stream == "ds":
            if oh != ["site_id", "bin_index", "count"]:
                raise ValueError(f"{obs_paths[stream]}: header must be site_id,bin_index,count")
            if breaks is None:
                raise ValueError("DS data need distance-bin breaks (set [ds] breaks in the config)")
            J = len(breaks) - 1
            y = np.zeros((n, J))
            for r in orows:
                if r[0] not in index:
                    raise ValueError(f"{obs_paths[stream]}: unknown DS site {r[0]!r}")
                j = int(r[1]) - 1
                if not 0 <= j < J:
                    raise ValueError(f"{obs_paths[stream]}: bin_index {r[1]} outside 1..{J}")
                y[index[r[0]], j] += _number(r[2], "count")
        else:
            if oh != ["site_id", "y"]:
                raise ValueError(f"{obs_paths[stream]}: header must be site_id,y")
            y = np.full(n, np.nan)
            for r in orows:
                if r[0] not in index:
                    raise ValueError(f"{obs_paths[stream]}: unknown {stream.upper()} site {r[0]!r}")
                y[index[r[0]]] = _number(r[1], "y")
            if np.any(np.isnan(y)):
                raise ValueError(f"{obs_paths[stream]}: some {stream.upper()} sites have no response")
        out[stream] = SurveyDataset(stream=stream, site_ids=ids, y=y, duration=duration, trunc=trunc,
                                    covariates=cov, breaks=breaks if stream == "ds" else None)
    return out


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"
