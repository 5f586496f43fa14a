"""Survey datasets and the input checks shared by the model, estimator and CLI."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

from .detection import PointGeometry, check_breaks

__all__ = [
    "STREAMS",
    "SiteRecord",
    "SurveyDataset",
    "check_stream",
    "check_datasets",
    "check_covariate_table",
]

STREAMS = ("ds", "pc", "dnd")


def check_stream(stream) -> str:
    s = str(getattr(stream, "value", stream)).lower()
    if s not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}; expected one of {STREAMS}")
    return s


@dataclass
class SiteRecord:
    site_id: str
    duration: float
    geom: PointGeometry
    covariates: Dict[str, float] = field(default_factory=dict)
    response: object = 0


@dataclass
class SurveyDataset:
    """One stream of field data in column form.

    ``y`` is an (n_sites, n_bins) integer array for DS data, a count vector
    for PC data and a 0/1 vector for DND data.  ``trunc`` holds the truncation
    radius per site in meters, NaN marking an UNLIMITED survey.
    """

    stream: str
    site_ids: np.ndarray
    y: np.ndarray
    duration: np.ndarray
    trunc: np.ndarray
    covariates: Dict[str, np.ndarray] = field(default_factory=dict)
    breaks: Optional[tuple] = None

    def __post_init__(self):
        self.stream = check_stream(self.stream)
        self.site_ids = np.asarray([str(s) for s in np.atleast_1d(self.site_ids)], dtype=object)
        n = len(self.site_ids)
        if len(set(self.site_ids)) != n:
            raise ValueError(f"{self.stream}: duplicate site ids")
        self.duration = _vector(self.duration, n, "duration")
        if np.any(~np.isfinite(self.duration)) or np.any(self.duration <= 0):
            raise ValueError(f"{self.stream}: durations must be positive and finite")
        self.trunc = _vector(self.trunc, n, "trunc")
        finite = ~np.isnan(self.trunc)
        if np.any(self.trunc[finite] <= 0) or np.any(np.isinf(self.trunc)):
            raise ValueError(f"{self.stream}: truncation distances must be positive (NaN for UNLIMITED)")
        self.covariates = {str(k): _vector(v, n, f"covariate {k!r}") for k, v in self.covariates.items()}
        for k, v in self.covariates.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{self.stream}: covariate {k!r} has non-finite values")

        y = np.asarray(self.y)
        if self.stream == "ds":
            if self.breaks is None:
                raise ValueError("ds data need distance-bin breaks")
            self.breaks = tuple(float(b) for b in check_breaks(self.breaks))
            J = len(self.breaks) - 1
            y = y.reshape(n, J) if y.size == n * J else y
            if y.shape != (n, J):
                raise ValueError(f"ds counts have shape {y.shape}, expected ({n}, {J})")
            if np.any(~finite):
                raise ValueError("UNLIMITED truncation is not allowed for distance-sampling data")
            if n and np.any(self.trunc != self.breaks[-1]):
                raise ValueError("ds truncation distances must equal the last break")
        else:
            y = y.reshape(-1) if y.size == n else y
            if y.shape != (n,):
                raise ValueError(f"{self.stream} responses have shape {y.shape}, expected ({n},)")
        if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError(f"{self.stream}: responses must be non-negative integers")
        if self.stream == "dnd" and np.any(y > 1):
            raise ValueError("dnd responses must be 0 or 1")
        self.y = y.astype(float)

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    def __len__(self) -> int:
        return self.n_sites

    @property
    def totals(self) -> np.ndarray:
        return self.y.sum(axis=1) if self.stream == "ds" else self.y

    @classmethod
    def from_sites(cls, stream, sites: Sequence[SiteRecord], breaks=None) -> "SurveyDataset":
        stream = check_stream(stream)
        names = sorted({k for s in sites for k in s.covariates})
        for s in sites:
            missing = set(names) - set(s.covariates)
            if missing:
                raise ValueError(f"site {s.site_id!r} lacks covariates {sorted(missing)}")
        if stream == "ds" and breaks is None and sites:
            breaks = sites[0].geom.breaks
        trunc = [np.nan if s.geom.unlimited else s.geom.trunc_dist for s in sites]
        if stream == "ds":
            J = len(breaks) - 1
            y = np.array([np.asarray(s.response, dtype=float) for s in sites]).reshape(len(sites), J)
        else:
            y = np.array([float(s.response) for s in sites])
        return cls(
            stream=stream,
            site_ids=[s.site_id for s in sites],
            y=y,
            duration=[s.duration for s in sites],
            trunc=trunc,
            covariates={k: [s.covariates[k] for s in sites] for k in names},
            breaks=breaks,
        )

    def sites(self) -> Iterable[SiteRecord]:
        for i, sid in enumerate(self.site_ids):
            t = self.trunc[i]
            geom = PointGeometry(None if np.isnan(t) else t, self.breaks if self.stream == "ds" else None)
            resp = self.y[i].astype(int).tolist() if self.stream == "ds" else int(self.y[i])
            yield SiteRecord(sid, float(self.duration[i]), geom,
                             {k: float(v[i]) for k, v in self.covariates.items()}, resp)

    def subset(self, idx) -> "SurveyDataset":
        idx = np.asarray(idx)
        return SurveyDataset(
            stream=self.stream,
            site_ids=self.site_ids[idx],
            y=self.y[idx],
            duration=self.duration[idx],
            trunc=self.trunc[idx],
            covariates={k: v[idx] for k, v in self.covariates.items()},
            breaks=self.breaks,
        )


def _vector(x, n, what) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,):
        raise ValueError(f"{what} has shape {a.shape}, expected ({n},)")
    return a


def check_datasets(datasets) -> Dict[str, SurveyDataset]:
    """Validate a collection of datasets and key them by stream.

    Requires exactly one DS dataset, at most one dataset per other stream and
    no site id shared between datasets.
    """
    if isinstance(datasets, SurveyDataset):
        datasets = [datasets]
    if isinstance(datasets, Mapping):
        datasets = list(datasets.values())
    out: Dict[str, SurveyDataset] = {}
    for d in datasets:
        if not isinstance(d, SurveyDataset):
            raise TypeError(f"expected SurveyDataset, got {type(d).__name__}")
        if d.stream in out:
            raise ValueError(f"more than one {d.stream} dataset")
        out[d.stream] = d
    if "ds" not in out:
        raise ValueError("DS required: an integrated model needs exactly one distance-sampling dataset")
    seen = {}
    for s, d in out.items():
        for sid in d.site_ids:
            if sid in seen:
                raise ValueError(f"site {sid!r} appears in both {seen[sid]} and {s} data; "
                                 "datasets must be independent")
            seen[sid] = s
    return {s: out[s] for s in STREAMS if s in out}


def check_covariate_table(table, required: Sequence[str]) -> Dict[str, np.ndarray]:
    """Coerce a DataFrame / mapping of columns into float arrays and check ``required``."""
    if hasattr(table, "columns") and hasattr(table, "__getitem__") and not isinstance(table, Mapping):
        cols = {str(c): np.asarray(table[c]) for c in table.columns}
    else:
        cols = {str(k): np.asarray(v) for k, v in dict(table).items()}
    missing = [c for c in required if c not in cols]
    if missing:
        raise KeyError(f"missing covariate(s) {missing}")
    out = {}
    for c in required:
        try:
            v = cols[c].astype(float)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"covariate {c!r} is not numeric") from exc
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError(f"covariate {c!r} must be a finite 1-d column")
        out[c] = v
    lengths = {len(v) for v in out.values()}
    if len(lengths) > 1:
        raise ValueError("covariate columns differ in length")
    return out
