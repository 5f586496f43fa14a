"""Replicated simulation studies: simulate, fit, screen and summarize.

Study designs follow the published identifiability and sample-size
experiments; ``scale_factor`` shrinks every site count so that a study runs
on a laptop.  Replicate ``r`` of setting ``k`` always draws from
``make_rng(seed, k, r)``, so reports do not depend on execution order or on
the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .formula import INTERCEPT
from .inference import (eb_mean, fit, site_abundance_interval, validity_filter, wald_intervals,
                        _site_terms)
from .simulate import Duration, SimScenario, StreamScenario, make_rng, simulate

__all__ = ["StudyDesign", "StudyReport", "STUDIES", "metrics", "run_study", "run_replicate", "n_workers"]

log = logging.getLogger(__name__)

DS_BIN_WIDTH = 50.0


@dataclass(frozen=True)
class StudyDesign:
    """Full-scale design of one study; settings are the product of ``ds_sites`` x ``other_sites``."""

    study_id: str
    other: str = "pc"
    ds_sites: Tuple[int, ...] = (250,)
    other_sites: Tuple[int, ...] = (1000,)
    density: Tuple[float, float] = (1.0, 1.0)
    habitat_effect: float = 0.0
    sigma_ds: Tuple[float, float] = (100.0, 100.0)
    sigma_other: Tuple[float, float] = (10.0, 130.0)
    detection_covariate: Optional[str] = None
    detection_slope: Tuple[float, float] = (-0.5, 0.5)
    ds_trunc: Tuple[float, float] = (200.0, 200.0)
    other_trunc: Optional[float] = 200.0
    phi: Optional[float] = None
    other_duration: str = "constant:5"
    ds_duration: str = "constant:5"
    time_unit_min: float = 5.0
    use_truth: bool = False
    site_abundance: bool = False

    def settings(self, scale_factor: float = 1.0) -> List[Tuple[int, int]]:
        def scaled(n):
            return max(1, int(round(n * scale_factor)))

        return [(scaled(a), scaled(b)) for a, b in itertools.product(self.ds_sites, self.other_sites)]


STUDIES: Dict[str, StudyDesign] = {
    "S1_IDS1": StudyDesign("S1_IDS1", site_abundance=True),
    "S1_IDS2": StudyDesign("S1_IDS2", other="dnd", site_abundance=True),
    "S1B": StudyDesign("S1B", density=(0.1, 5.0), sigma_ds=(20.0, 120.0), sigma_other=(20.0, 120.0),
                       ds_trunc=(100.0, 300.0), other_trunc=None),
    "S2A": StudyDesign("S2A", ds_sites=(200,), habitat_effect=1.0, sigma_other=(150.0, 150.0),
                       detection_covariate="wind", use_truth=True),
    "S2B": StudyDesign("S2B", ds_sites=(200,), habitat_effect=1.0, sigma_other=(150.0, 150.0),
                       detection_covariate="habitat", use_truth=True),
    "S3": StudyDesign("S3", ds_sites=(1, 20, 40, 60, 80, 100), other_sites=(200,), habitat_effect=1.0,
                      sigma_other=(70.0, 70.0), use_truth=True),
    "S4": StudyDesign("S4", ds_sites=(3000,), other_sites=(1000, 3000, 6000), habitat_effect=1.0,
                      sigma_other=(70.0, 70.0), phi=0.4, other_duration="right_skewed:3,30",
                      use_truth=True),
}


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def build_scenario(design: StudyDesign, n_ds: int, n_other: int, rng) -> SimScenario:
    """Draw the replicate-level truths of ``design`` and assemble the scenario."""
    covariates = []
    beta = {INTERCEPT: np.log(_uniform(rng, design.density))}
    if design.habitat_effect:
        beta["habitat"] = design.habitat_effect
        covariates.append("habitat")
    sig_ds = {INTERCEPT: np.log(_uniform(rng, design.sigma_ds))}
    sig_other = {INTERCEPT: np.log(_uniform(rng, design.sigma_other))}
    if design.detection_covariate:
        sig_ds[design.detection_covariate] = _uniform(rng, design.detection_slope)
        sig_other[design.detection_covariate] = _uniform(rng, design.detection_slope)
        if design.detection_covariate not in covariates:
            covariates.append(design.detection_covariate)
    b = _uniform(rng, design.ds_trunc)
    n_bins = max(1, int(round(b / DS_BIN_WIDTH)))
    breaks = tuple(np.linspace(0.0, b, n_bins + 1))
    streams = {
        "ds": StreamScenario(n_ds, sig_ds, breaks=breaks, duration=Duration.parse(design.ds_duration)),
        design.other: StreamScenario(n_other, sig_other, trunc=design.other_trunc,
                                     duration=Duration.parse(design.other_duration)),
    }
    gamma = None if design.phi is None else {INTERCEPT: np.log(design.phi)}
    return SimScenario(streams=streams, beta=beta, gamma=gamma, covariates=tuple(covariates),
                       time_unit_min=design.time_unit_min)


@dataclass
class ReplicateOutcome:
    setting: int
    rep: int
    validity: str
    names: List[str] = field(default_factory=list)
    estimate: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    site_n: Optional[Tuple[np.ndarray, ...]] = None

    @property
    def valid(self) -> bool:
        return self.validity == "VALID"


def run_replicate(design: StudyDesign, setting: int, n_ds: int, n_other: int, seed: int, rep: int,
                  level: float = 0.95) -> ReplicateOutcome:
    rng = make_rng(seed, setting, rep)
    scn = build_scenario(design, n_ds, n_other, rng)
    data, latent = simulate(scn, rng, return_latent=True)
    layout, truth = scn.truth()
    try:
        res = fit(scn.model_spec(), data)
    except ValueError as exc:
        return ReplicateOutcome(setting, rep, f"INVALID(error: {exc})")
    verdict = validity_filter(res, truth if design.use_truth else None)
    if verdict != "VALID":
        return ReplicateOutcome(setting, rep, verdict)
    iv = wald_intervals(res, level)
    if iv.validity != "VALID":
        return ReplicateOutcome(setting, rep, iv.validity)
    # intercepts are summarized on the natural scale, slopes on the link scale
    natural = np.array([n.endswith(INTERCEPT) for n in layout.names])
    tr = lambda v: np.where(natural, np.exp(v), v)
    out = ReplicateOutcome(setting, rep, verdict, layout.names, tr(res.mle), tr(truth), tr(iv.lower), tr(iv.upper))
    if design.site_abundance:
        d = data[design.other]
        expected, q = _site_terms(res, d)
        est = eb_mean(d.y, expected, q, d.stream)
        lo, hi = site_abundance_interval(res, d, level)
        out.site_n = (est, latent[design.other].astype(float), lo, hi)
    return out


def metrics(estimates, truths, lower=None, upper=None, per_unit: bool = False) -> Dict[str, float]:
    """Absolute bias, % relative bias and interval coverage.

    For parameters, % bias is ``100 * mean(est - truth) / mean(|truth|)``,
    which reduces to the usual definition for a fixed truth.  With
    ``per_unit`` (site abundances) it is the mean of per-unit relative errors,
    units with zero truth being dropped from that statistic only.
    """
    est = np.asarray(estimates, dtype=float).ravel()
    truth = np.broadcast_to(np.asarray(truths, dtype=float), est.shape).ravel()
    if est.size == 0:
        raise ValueError("no valid estimates")
    err = est - truth
    abs_bias = float(np.mean(err))
    if per_unit:
        keep = truth != 0
        pct = float(100.0 * np.mean(err[keep] / truth[keep])) if keep.any() else float("nan")
    else:
        denom = np.mean(np.abs(truth))
        pct = float(100.0 * abs_bias / denom) if denom > 0 else float("nan")
    cov = float("nan")
    if lower is not None and upper is not None:
        lo = np.broadcast_to(np.asarray(lower, dtype=float), est.shape).ravel()
        hi = np.broadcast_to(np.asarray(upper, dtype=float), est.shape).ravel()
        cov = float(np.mean((lo <= truth) & (truth <= hi)))
    return {"abs_bias": abs_bias, "pct_rel_bias": pct, "ci_coverage": cov}


@dataclass
class StudyReport:
    study_id: str
    rows: List[dict]
    settings: List[dict]
    reps: int
    scale_factor: float
    seed: int
    design: dict

    @property
    def n_attempted(self) -> int:
        return sum(s["n_attempted"] for s in self.settings)

    @property
    def n_valid(self) -> int:
        return sum(s["n_valid"] for s in self.settings)

    def row(self, parameter: str, setting: Optional[str] = None) -> dict:
        for r in self.rows:
            if r["parameter"] == parameter and (setting is None or r["setting"] == setting):
                return r
        raise KeyError(parameter)

    def failure_fraction(self, setting: str) -> float:
        for s in self.settings:
            if s["setting"] == setting:
                return 1.0 - s["n_valid"] / s["n_attempted"]
        raise KeyError(setting)

    CSV_FIELDS = ("study_id", "setting", "parameter", "abs_bias", "pct_rel_bias", "ci_coverage",
                  "n_valid", "n_attempted")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in self.CSV_FIELDS])
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "study_id": self.study_id,
            "reps": self.reps,
            "scale_factor": self.scale_factor,
            "seed": self.seed,
            "rng": "PCG64 via SeedSequence(seed, spawn_key=(setting, replicate))",
            "design": self.design,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def n_workers(threads: Optional[int] = None) -> int:
    """Worker count from ``threads`` or the ``IDS_THREADS`` variable (0 = all CPUs)."""
    if threads is None:
        threads = int(os.environ.get("IDS_THREADS", "0") or 0)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def _run_task(args):
    return run_replicate(*args)


def run_study(study_id: str, reps: int = 100, scale_factor: float = 0.2, seed: int = 0,
              threads: Optional[int] = None, level: float = 0.95, **overrides) -> StudyReport:
    """Run ``reps`` replicates of every setting of a study and summarize the valid fits.

    ``overrides`` replace fields of the study's :class:`StudyDesign`, e.g.
    ``ds_sites=(100,), other_sites=(300,), sigma_other=(40, 130)``.
    """
    key = str(study_id).upper()
    if key not in STUDIES:
        raise ValueError(f"unknown study {study_id!r}; choose from {sorted(STUDIES)}")
    if reps < 1:
        raise ValueError("reps must be at least 1")
    if not 0 < scale_factor <= 1:
        raise ValueError("scale_factor must be in (0, 1]")
    design = replace(STUDIES[key], **overrides)
    settings = design.settings(scale_factor)
    tasks = [(design, k, n_ds, n_other, seed, r, level)
             for k, (n_ds, n_other) in enumerate(settings) for r in range(reps)]
    workers = min(n_workers(threads), len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outcomes = list(ex.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        outcomes = [_run_task(t) for t in tasks]

    rows, summary = [], []
    for k, (n_ds, n_other) in enumerate(settings):
        label = f"ds={n_ds},{design.other}={n_other}"
        mine = [o for o in outcomes if o.setting == k]
        valid = [o for o in mine if o.valid]
        failures: Dict[str, int] = {}
        for o in mine:
            if not o.valid:
                reason = o.validity.split("(", 1)[-1].split(":")[0].rstrip(")")
                failures[reason] = failures.get(reason, 0) + 1
        summary.append({"setting": label, "n_ds": n_ds, f"n_{design.other}": n_other,
                        "n_attempted": len(mine), "n_valid": len(valid),
                        "failures": dict(sorted(failures.items()))})
        if not valid:
            continue
        names = valid[0].names
        for j, name in enumerate(names):
            m = metrics([o.estimate[j] for o in valid], [o.truth[j] for o in valid],
                        [o.lower[j] for o in valid], [o.upper[j] for o in valid])
            rows.append({"study_id": key, "setting": label, "parameter": name, **m,
                         "n_valid": len(valid), "n_attempted": len(mine)})
        if design.site_abundance:
            cat = lambda i: np.concatenate([o.site_n[i] for o in valid])
            m = metrics(cat(0), cat(1), cat(2), cat(3), per_unit=True)
            rows.append({"study_id": key, "setting": label, "parameter": "site_N", **m,
                         "n_valid": len(valid), "n_attempted": len(mine)})
    return StudyReport(key, rows, summary, reps, scale_factor, seed, _design_echo(design))


def _design_echo(design: StudyDesign) -> dict:
    d = asdict(design)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
