"""Data generation for integrated distance-sampling studies.

Every stream is produced by the same pipeline: draw covariates and
durations, draw site abundance from the density model, scatter individuals
uniformly over the survey disc, thin them by availability times the
half-normal detection function, then aggregate (bin distances for DS, count
for PC, threshold for DND).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import STREAMS, SurveyDataset, check_stream
from .detection import KEY, check_breaks
from .formula import INTERCEPT
from .model import ModelSpec, ParameterLayout

__all__ = [
    "Duration",
    "StreamScenario",
    "SimScenario",
    "make_rng",
    "duration_generator",
    "simulate_stream",
    "simulate",
]

UNLIMITED_RADIUS_SIGMAS = 20.0
SKEW_SHAPE = (1.2, 4.0)


def make_rng(seed, *key) -> np.random.Generator:
    """Independent PCG64 stream for ``seed`` and an integer spawn key (e.g. a replicate index)."""
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class Duration:
    kind: str = "constant"
    a: float = 5.0
    b: Optional[float] = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind == "constant":
            if not self.a > 0:
                raise ValueError("constant duration must be positive")
        elif kind == "right_skewed":
            if self.b is None or not 0 < self.a < self.b:
                raise ValueError("right_skewed duration needs 0 < min < max")
        else:
            raise ValueError(f"unknown duration kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Duration":
        """``constant:5`` or ``right_skewed:3,30``."""
        kind, _, args = text.strip().partition(":")
        vals = [float(v) for v in args.split(",") if v.strip()]
        return cls(kind.strip(), *vals)

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.a!r}"
        return f"right_skewed:{self.a!r},{self.b!r}"


def duration_generator(kind, rng=None, size=None, *, t=None, lo=None, hi=None):
    """Survey durations in minutes.

    ``kind`` is a :class:`Duration` or one of ``"constant"`` (needs ``t``) and
    ``"right_skewed"`` (needs ``lo``/``hi``); right-skewed durations are
    ``lo + (hi - lo) * Beta(1.2, 4)``.
    """
    if not isinstance(kind, Duration):
        kind = Duration("constant", t) if str(kind).lower() == "constant" else Duration(str(kind), lo, hi)
    if kind.kind == "constant":
        return kind.a if size is None else np.full(size, kind.a)
    rng = make_rng(0 if rng is None else rng)
    return kind.a + (kind.b - kind.a) * rng.beta(*SKEW_SHAPE, size=size)


def _formula(coefs: Mapping[str, float]) -> str:
    terms = [k for k in coefs if k != INTERCEPT]
    return "~ " + (" + ".join(terms) if terms else "1")


@dataclass
class StreamScenario:
    """Design of one stream: sample size, geometry, durations and true log-sigma coefficients."""

    n_sites: int
    sigma: Dict[str, float]
    trunc: Optional[float] = 200.0
    breaks: Optional[tuple] = None
    duration: Duration = field(default_factory=Duration)

    def __post_init__(self):
        if self.n_sites < 0:
            raise ValueError("n_sites must be non-negative")
        if INTERCEPT not in self.sigma:
            raise ValueError("sigma coefficients need an intercept")
        if self.breaks is not None:
            self.breaks = tuple(float(b) for b in check_breaks(self.breaks))
            self.trunc = self.breaks[-1]
        if self.trunc is not None and not self.trunc > 0:
            raise ValueError("trunc must be positive or None")


@dataclass
class SimScenario:
    """Complete data-generating model; coefficients are on the log-link scale."""

    streams: Dict[str, StreamScenario]
    beta: Dict[str, float] = field(default_factory=lambda: {INTERCEPT: 0.0})
    gamma: Optional[Dict[str, float]] = None
    covariates: Tuple[str, ...] = ()
    sigma_sharing: str = "per_stream"
    density_area_m2: float = 10_000.0
    time_unit_min: float = 1.0

    def __post_init__(self):
        self.streams = {check_stream(k): v for k, v in self.streams.items()}
        if "ds" in self.streams and self.streams["ds"].breaks is None:
            raise ValueError("ds stream needs distance-bin breaks")
        needed = set()
        for coefs in [self.beta, self.gamma or {}] + [s.sigma for s in self.streams.values()]:
            needed.update(k[:-2] if k.endswith("^2") else k for k in coefs if k != INTERCEPT)
        missing = needed - set(self.covariates)
        if missing:
            raise ValueError(f"coefficients refer to undeclared covariates {sorted(missing)}")

    @property
    def active_streams(self) -> list:
        return [s for s in STREAMS if s in self.streams and self.streams[s].n_sites > 0]

    def model_spec(self) -> ModelSpec:
        ds = self.streams.get("ds")
        if self.sigma_sharing == "shared":
            sig = _formula(next(iter(self.streams.values())).sigma)
        else:
            sig = {s: _formula(v.sigma) for s, v in self.streams.items()}
        return ModelSpec(
            density=_formula(self.beta),
            sigma=sig,
            availability=None if self.gamma is None else _formula(self.gamma),
            sigma_sharing=self.sigma_sharing,
            breaks=None if ds is None else ds.breaks,
            density_area_m2=self.density_area_m2,
            time_unit_min=self.time_unit_min,
        )

    def truth(self, streams: Optional[Sequence[str]] = None) -> Tuple[ParameterLayout, np.ndarray]:
        streams = self.active_streams if streams is None else list(streams)
        spec = self.model_spec()
        layout = ParameterLayout.from_spec(spec, streams)
        values = {"lam": list(self.beta.values())}
        for s in streams:
            values[spec.sigma_block(s)] = list(self.streams[s].sigma.values())
        if self.gamma is not None:
            values["phi"] = list(self.gamma.values())
        return layout, layout.pack(values)

    def to_dict(self) -> dict:
        return {
            "streams": {
                s: {"n_sites": v.n_sites, "sigma": dict(v.sigma), "trunc": v.trunc,
                    "breaks": None if v.breaks is None else list(v.breaks), "duration": str(v.duration)}
                for s, v in self.streams.items()
            },
            "beta": dict(self.beta),
            "gamma": None if self.gamma is None else dict(self.gamma),
            "covariates": list(self.covariates),
            "sigma_sharing": self.sigma_sharing,
            "density_area_m2": self.density_area_m2,
            "time_unit_min": self.time_unit_min,
        }


def _linear(coefs: Mapping[str, float], cov: Mapping[str, np.ndarray], n: int) -> np.ndarray:
    eta = np.zeros(n)
    for k, v in coefs.items():
        if k == INTERCEPT:
            eta += v
        elif k.endswith("^2"):
            eta += v * cov[k[:-2]] ** 2
        else:
            eta += v * cov[k]
    return eta


def simulate_stream(scn: SimScenario, stream: str, rng=0, *, prefix: Optional[str] = None,
                    return_latent: bool = False):
    """Simulate one dataset of ``stream`` type.

    Random numbers are consumed in the same order for every stream type, so
    DS, PC and DND data drawn from the same generator state describe the same
    individuals.  With ``return_latent`` the true site abundances within the
    simulation disc are returned as well.
    """
    stream = check_stream(stream)
    if stream not in scn.streams:
        raise ValueError(f"scenario has no {stream} stream")
    st = scn.streams[stream]
    if stream == "ds" and st.trunc is None:
        raise ValueError("UNLIMITED geometry is not allowed for distance-sampling data")
    rng = make_rng(rng)
    n = st.n_sites

    cov = {name: rng.standard_normal(n) for name in scn.covariates}
    duration = np.asarray(duration_generator(st.duration, rng, size=n), dtype=float)
    lam = np.exp(_linear(scn.beta, cov, n))
    sigma = np.exp(_linear(st.sigma, cov, n))
    if scn.gamma is not None:
        phi = np.exp(_linear(scn.gamma, cov, n))
        avail = -np.expm1(-phi * duration / scn.time_unit_min)
    else:
        avail = np.ones(n)

    if st.trunc is None:
        radius = UNLIMITED_RADIUS_SIGMAS * (sigma.max() if n else 1.0)
    else:
        radius = st.trunc
    N = rng.poisson(lam * np.pi * radius**2 / scn.density_area_m2)
    site = np.repeat(np.arange(n), N)
    r = radius * np.sqrt(rng.random(site.size))
    u = rng.random(site.size)
    seen = u < avail[site] * KEY.g(r, sigma[site])

    if stream == "ds":
        br = np.asarray(st.breaks)
        J = br.size - 1
        b = np.clip(np.searchsorted(br, r[seen], side="right") - 1, 0, J - 1)
        y = np.bincount(site[seen] * J + b, minlength=n * J).reshape(n, J)
    else:
        y = np.bincount(site[seen], minlength=n)
        if stream == "dnd":
            y = (y > 0).astype(int)

    prefix = f"{stream}-" if prefix is None else prefix
    ds = SurveyDataset(
        stream=stream,
        site_ids=[f"{prefix}{i:05d}" for i in range(n)],
        y=y,
        duration=duration,
        trunc=np.full(n, np.nan if st.trunc is None else st.trunc),
        covariates=cov,
        breaks=st.breaks if stream == "ds" else None,
    )
    if return_latent:
        return ds, N
    return ds


def simulate(scn: SimScenario, seed=0, *, return_latent: bool = False) -> Dict[str, SurveyDataset]:
    """Simulate every stream of ``scn``; each stream gets its own spawned generator.

    Streams with zero sites are omitted from the result.
    """
    if isinstance(seed, np.random.Generator):
        children = seed.spawn(len(STREAMS))
    else:
        children = [make_rng(seed, k) for k in range(len(STREAMS))]
    out = {}
    latent = {}
    for k, s in enumerate(STREAMS):
        if s not in scn.streams or scn.streams[s].n_sites == 0:
            continue
        d, N = simulate_stream(scn, s, children[k], return_latent=True)
        out[s] = d
        latent[s] = N
    if return_latent:
        return out, latent
    return out
