"""Log-linear predictors and Poisson-marginal likelihoods for DS, PC and DND data.

Latent site abundance N ~ Poisson(lambda * A) is integrated out analytically:
binomial thinning of a Poisson is again Poisson, so

* DS bin counts are independent Poisson(lambda A theta pi_j),
* PC counts are Poisson(lambda A theta pbar),
* DND detections are Bernoulli(1 - exp(-lambda A theta pbar)).

Density is expressed per ``density_area_m2`` square meters (hectares by
default), detection scale sigma in meters and the availability rate phi per
``time_unit_min`` minutes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import gammaln, xlogy

from .data import STREAMS, SurveyDataset, check_datasets, check_stream
from .detection import KEY, check_breaks
from .formula import Formula, build_design, parse_formula

__all__ = [
    "ModelSpec",
    "ParameterLayout",
    "StreamTerm",
    "JointModel",
    "availability_prob",
    "nll_ds",
    "nll_pc",
    "nll_dnd",
    "joint_nll",
]

SHARED = "shared"
PER_STREAM = "per_stream"


@dataclass(frozen=True)
class ModelSpec:
    """Formulas and fixed settings of an integrated distance-sampling model.

    ``sigma`` is either one formula used for every stream or a mapping from
    stream name to formula; streams missing from the mapping get ``~ 1``.
    With ``sigma_sharing="shared"`` all streams use one set of detection
    coefficients, otherwise each stream has its own.
    """

    density: str = "~ 1"
    sigma: Union[str, Mapping[str, str]] = "~ 1"
    availability: Optional[str] = None
    sigma_sharing: str = PER_STREAM
    breaks: Optional[tuple] = None
    density_area_m2: float = 10_000.0
    time_unit_min: float = 1.0
    scaling: Optional[Mapping[str, tuple]] = None

    def __post_init__(self):
        sharing = str(self.sigma_sharing).lower()
        if sharing not in (SHARED, PER_STREAM):
            raise ValueError(f"sigma_sharing must be 'shared' or 'per_stream', got {self.sigma_sharing!r}")
        object.__setattr__(self, "sigma_sharing", sharing)
        if isinstance(self.availability, str) and self.availability.strip().lower() in ("none", ""):
            object.__setattr__(self, "availability", None)
        parse_formula(self.density)
        if self.availability is not None:
            parse_formula(self.availability)
        if isinstance(self.sigma, Mapping):
            sig = {check_stream(k): str(parse_formula(v)) for k, v in self.sigma.items()}
            if sharing == SHARED and len(set(sig.values())) > 1:
                raise ValueError("shared detection coefficients need a single sigma formula")
            object.__setattr__(self, "sigma", dict(sig))
        else:
            parse_formula(self.sigma)
        if self.breaks is not None:
            object.__setattr__(self, "breaks", tuple(float(b) for b in check_breaks(self.breaks)))
        if not self.density_area_m2 > 0 or not self.time_unit_min > 0:
            raise ValueError("density_area_m2 and time_unit_min must be positive")

    def sigma_formula(self, stream: str) -> Formula:
        if isinstance(self.sigma, Mapping):
            if self.sigma_sharing == SHARED:
                return parse_formula(next(iter(self.sigma.values()), "~ 1"))
            return parse_formula(self.sigma.get(stream, "~ 1"))
        return parse_formula(self.sigma)

    def sigma_block(self, stream: str) -> str:
        return "sigma" if self.sigma_sharing == SHARED else f"sigma_{stream}"

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "density": str(parse_formula(self.density)),
            "sigma": dict(self.sigma) if isinstance(self.sigma, Mapping) else str(parse_formula(self.sigma)),
            "availability": None if self.availability is None else str(parse_formula(self.availability)),
            "sigma_sharing": self.sigma_sharing,
            "breaks": None if self.breaks is None else list(self.breaks),
            "density_area_m2": self.density_area_m2,
            "time_unit_min": self.time_unit_min,
            "scaling": None if not self.scaling else {k: list(v) for k, v in self.scaling.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        if d.get("breaks") is not None:
            d["breaks"] = tuple(d["breaks"])
        if d.get("scaling"):
            d["scaling"] = {k: tuple(v) for k, v in d["scaling"].items()}
        return cls(**d)


def availability_prob(phi, t):
    """Probability of at least one cue in ``t`` time units at cue rate ``phi``."""
    phi = np.asarray(phi, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(phi <= 0) or np.any(t <= 0):
        raise ValueError("phi and t must be positive")
    out = -np.expm1(-t * phi)
    return float(out) if np.ndim(out) == 0 else out


class ParameterLayout:
    """Named blocks of a packed coefficient vector.

    Blocks are ``lam`` (log density), one ``sigma``/``sigma_<stream>`` block
    per detection group (log sigma) and optionally ``phi`` (log cue rate).
    """

    def __init__(self, blocks: Sequence[tuple]):
        self.blocks = [(name, tuple(cols)) for name, cols in blocks]
        self.slices: Dict[str, slice] = {}
        start = 0
        for name, cols in self.blocks:
            self.slices[name] = slice(start, start + len(cols))
            start += len(cols)
        self.size = start

    @classmethod
    def from_spec(cls, spec: ModelSpec, streams: Sequence[str]) -> "ParameterLayout":
        streams = [check_stream(s) for s in streams]
        blocks = [("lam", parse_formula(spec.density).columns)]
        for s in STREAMS:
            if s not in streams:
                continue
            name = spec.sigma_block(s)
            if name not in dict(blocks):
                blocks.append((name, spec.sigma_formula(s).columns))
        if spec.availability is not None:
            blocks.append(("phi", parse_formula(spec.availability).columns))
        return cls(blocks)

    @property
    def names(self) -> list:
        return [f"{name}{col}" if col.startswith("(") else f"{name}({col})"
                for name, cols in self.blocks for col in cols]

    def __len__(self) -> int:
        return self.size

    def __contains__(self, block) -> bool:
        return block in self.slices

    def unpack(self, theta) -> Dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {theta.shape}, layout needs ({self.size},)")
        return {name: theta[sl] for name, sl in self.slices.items()}

    def pack(self, values: Mapping) -> np.ndarray:
        """Pack a mapping of block name -> array, or full coefficient name -> value."""
        theta = np.full(self.size, np.nan)
        names = self.names
        for key, val in values.items():
            if key in self.slices:
                sl = self.slices[key]
                v = np.asarray(val, dtype=float).reshape(-1)
                if v.size != sl.stop - sl.start:
                    raise ValueError(f"block {key!r} needs {sl.stop - sl.start} values")
                theta[sl] = v
            elif key in names:
                theta[names.index(key)] = float(val)
            else:
                raise KeyError(f"unknown parameter {key!r}")
        if np.any(np.isnan(theta)):
            missing = [n for n, v in zip(names, theta) if np.isnan(v)]
            raise ValueError(f"unset parameters {missing}")
        return theta

    def to_dict(self, theta) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, np.asarray(theta, dtype=float))}

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterLayout) and self.blocks == other.blocks

    def __repr__(self) -> str:
        return f"ParameterLayout({self.names})"


def _design(formula, data: SurveyDataset, scaling, what: str) -> np.ndarray:
    try:
        return build_design(formula, data.covariates, n_sites=data.n_sites, scaling=scaling)
    except KeyError as exc:
        raise ValueError(f"covariate mismatch: {what} formula {formula} needs "
                         f"{exc.args[0]} which the {data.stream} data lack") from None


class StreamTerm:
    """Likelihood contribution of one dataset with its design matrices precomputed."""

    def __init__(self, data: SurveyDataset, spec: ModelSpec, layout: ParameterLayout):
        self.data = data
        self.stream = data.stream
        self.spec = spec
        self.layout = layout
        self.sigma_block = spec.sigma_block(self.stream)
        if self.sigma_block not in layout:
            raise ValueError(f"layout has no detection block for {self.stream} data")
        self.X = _design(spec.density, data, spec.scaling, "density")
        self.W = _design(spec.sigma_formula(self.stream), data, spec.scaling, "sigma")
        if spec.availability is not None:
            self.V = _design(spec.availability, data, spec.scaling, "availability")
            self.t = data.duration / spec.time_unit_min
        else:
            self.V = None
        self.unit = spec.density_area_m2
        self.y = data.y
        if self.stream == "ds":
            if spec.breaks is not None and data.breaks != spec.breaks:
                raise ValueError(f"ds breaks {data.breaks} differ from model breaks {spec.breaks}")
            self.breaks = np.asarray(data.breaks)
            self.disc = np.pi * self.breaks[-1] ** 2 / self.unit
        self.trunc = np.where(np.isnan(data.trunc), np.inf, data.trunc)
        self.logfact = float(gammaln(self.y + 1.0).sum()) if self.stream != "dnd" else 0.0

    def components(self, theta) -> Dict[str, np.ndarray]:
        """Site-level density, sigma, availability and expected detected counts."""
        p = self.layout.unpack(theta)
        lam = np.exp(self.X @ p["lam"])
        sigma = np.exp(self.W @ p[self.sigma_block])
        if self.V is not None:
            phi = np.exp(self.V @ p["phi"])
            avail = -np.expm1(-self.t * phi)
        else:
            phi = None
            avail = np.ones_like(lam)
        out = {"lam": lam, "sigma": sigma, "phi": phi, "avail": avail}
        if self.stream == "ds":
            cell = KEY.bin_cell_probs(sigma, self.breaks)
            out["pbar"] = cell.sum(axis=1)
            out["mu"] = (lam * avail * self.disc)[:, None] * cell
        else:
            eff = KEY.effective_area_within(sigma, self.trunc) / self.unit
            out["mu"] = lam * avail * eff
            with np.errstate(divide="ignore", invalid="ignore"):
                out["pbar"] = np.where(np.isinf(self.trunc), np.nan, eff * self.unit / (np.pi * self.trunc**2))
        return out

    def nll(self, theta) -> float:
        # extreme trial points overflow to inf/nan; the optimizer treats those as +inf
        with np.errstate(all="ignore"):
            mu = self.components(theta)["mu"]
            if self.stream == "dnd":
                y = self.y
                return float(np.sum(mu[y == 0]) - np.sum(np.log(-np.expm1(-mu[y == 1]))))
            return float(mu.sum() - xlogy(self.y, mu).sum() + self.logfact)


class JointModel:
    """Sum of stream likelihoods sharing density (and availability) coefficients."""

    def __init__(self, spec: ModelSpec, datasets, layout: Optional[ParameterLayout] = None):
        self.spec = spec
        self.datasets = check_datasets(datasets)
        self.layout = layout or ParameterLayout.from_spec(spec, list(self.datasets))
        self.terms = {s: StreamTerm(d, spec, self.layout) for s, d in self.datasets.items()}

    def nll(self, theta) -> float:
        return sum(t.nll(theta) for t in self.terms.values())

    __call__ = nll

    def stream_nll(self, theta) -> Dict[str, float]:
        return {s: t.nll(theta) for s, t in self.terms.items()}


def _stream_nll(stream, params, data, spec, layout):
    if data.stream != stream:
        raise ValueError(f"expected {stream} data, got {data.stream}")
    layout = layout or ParameterLayout.from_spec(spec, [stream])
    theta = np.asarray(params, dtype=float)
    term = StreamTerm(data, spec, layout)
    mu = term.components(theta)["mu"]
    if np.any(np.isnan(mu)) or np.any(mu < 0):
        raise ValueError("negative or undefined expected count; check the parameter layout")
    return term.nll(theta)


def nll_ds(params, data: SurveyDataset, spec: ModelSpec, layout: Optional[ParameterLayout] = None) -> float:
    """Negative log-likelihood of binned distance counts (independent Poisson per bin)."""
    return _stream_nll("ds", params, data, spec, layout)


def nll_pc(params, data: SurveyDataset, spec: ModelSpec, layout: Optional[ParameterLayout] = None) -> float:
    """Negative log-likelihood of simple point counts (Poisson marginal of the N-mixture)."""
    return _stream_nll("pc", params, data, spec, layout)


def nll_dnd(params, data: SurveyDataset, spec: ModelSpec, layout: Optional[ParameterLayout] = None) -> float:
    """Negative log-likelihood of detection/nondetection data (Royle-Nichols marginal)."""
    return _stream_nll("dnd", params, data, spec, layout)


def joint_nll(params, datasets, spec: ModelSpec, layout: Optional[ParameterLayout] = None) -> float:
    return JointModel(spec, datasets, layout).nll(np.asarray(params, dtype=float))
