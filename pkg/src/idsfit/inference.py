"""Maximum-likelihood fitting and post-fit summaries."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np
from scipy import optimize, stats

from .data import SurveyDataset, check_covariate_table
from .detection import KEY
from .formula import build_design, parse_formula
from .model import JointModel, ModelSpec, ParameterLayout, StreamTerm

__all__ = [
    "FitOptions",
    "FitResult",
    "SiteAbundanceEstimate",
    "DensityPrediction",
    "Intervals",
    "fd_gradient",
    "fd_hessian",
    "default_start",
    "fit",
    "wald_intervals",
    "validity_filter",
    "estimate_site_abundance",
    "site_abundance_interval",
    "predict_density",
    "VALID",
]

log = logging.getLogger(__name__)

VALID = "VALID"
EPS = np.finfo(float).eps
SE_LIMIT = 5.0
EXPLOSION_FACTOR = 10.0
DENSITY_BOUNDS = (1e-8, 1e8)


def _steps(x, power):
    return EPS**power * np.maximum(np.abs(x), 1.0)


def fd_gradient(f, x, h=None) -> np.ndarray:
    """Central-difference gradient; default step is cbrt(eps) * max(|x|, 1)."""
    x = np.asarray(x, dtype=float)
    h = _steps(x, 1.0 / 3.0) if h is None else np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    g = np.empty_like(x)
    # inf - inf at extreme trial points yields NaN, which callers treat as non-finite
    with np.errstate(invalid="ignore"):
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h[i]
            g[i] = (f(x + e) - f(x - e)) / (2.0 * h[i])
    return g


def fd_hessian(f, x) -> np.ndarray:
    """Jacobian of the central-difference gradient; returned unsymmetrized.

    Both the inner and the outer step use eps**(1/4) * max(|x|, 1), which
    balances truncation against rounding error for the nested difference.
    """
    x = np.asarray(x, dtype=float)
    h = _steps(x, 0.25)
    H = np.empty((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        H[:, j] = (fd_gradient(f, x + e, h) - fd_gradient(f, x - e, h)) / (2.0 * h[j])
    return H


@dataclass
class FitOptions:
    start: Optional[object] = None
    simplex_iter: int = 200
    simplex_step: float = 0.3
    maxiter: int = 500
    gtol: float = 1e-5
    polish_gtol: float = 1e-7
    polish_iter: int = 20
    multistart: bool = True


@dataclass
class FitResult:
    spec: ModelSpec
    layout: ParameterLayout
    mle: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    nll: float
    converged: bool
    n_evals: int
    validity: str = VALID
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    message: str = ""
    streams: tuple = ()

    @property
    def names(self) -> list:
        return self.layout.names

    @property
    def coef(self) -> Dict[str, float]:
        return self.layout.to_dict(self.mle)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.layout.unpack(self.mle)

    @property
    def aic(self) -> float:
        return 2.0 * self.nll + 2.0 * self.layout.size

    @property
    def valid(self) -> bool:
        return self.validity == VALID

    def to_dict(self) -> dict:
        return {
            "mle": self.layout.to_dict(self.mle),
            "se": self.layout.to_dict(self.se),
            "vcov": [float(v) for v in np.asarray(self.vcov).ravel()],
            "nll": float(self.nll),
            "aic": float(self.aic),
            "converged": bool(self.converged),
            "n_evals": int(self.n_evals),
            "validity": self.validity,
            "message": self.message,
            "spec_echo": {
                "model": self.spec.to_dict(),
                "blocks": [[name, list(cols)] for name, cols in self.layout.blocks],
                "streams": list(self.streams),
            },
        }

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        echo = d["spec_echo"]
        spec = ModelSpec.from_dict(echo["model"])
        layout = ParameterLayout([(name, tuple(cols)) for name, cols in echo["blocks"]])
        names = layout.names
        mle = np.array([_from_json(d["mle"][n]) for n in names])
        se = np.array([_from_json(d["se"][n]) for n in names])
        vcov = np.array([_from_json(v) for v in d["vcov"]]).reshape(len(names), len(names))
        return cls(spec=spec, layout=layout, mle=mle, se=se, vcov=vcov, nll=_from_json(d["nll"]),
                   converged=bool(d["converged"]), n_evals=int(d.get("n_evals", 0)),
                   validity=d["validity"], message=d.get("message", ""),
                   streams=tuple(echo.get("streams", ())))

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


def _json_safe(obj):
    # JSON has no NaN/inf; encode them as strings so the document stays strict.
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return "NaN" if np.isnan(obj) else ("Infinity" if obj > 0 else "-Infinity")
    return obj


def _from_json(v) -> float:
    return float(v)  # float() parses "NaN" / "Infinity" too


def default_start(spec: ModelSpec, layout: ParameterLayout, datasets) -> np.ndarray:
    """Zeros except log-sigma intercepts, set from the mean DS detection distance."""
    theta = np.zeros(layout.size)
    ds = datasets["ds"] if isinstance(datasets, Mapping) else next(d for d in datasets if d.stream == "ds")
    br = np.asarray(ds.breaks)
    mids = 0.5 * (br[:-1] + br[1:])
    counts = ds.y.sum(axis=0)
    if counts.sum() > 0:
        mean_d = float(counts @ mids / counts.sum())
    else:
        mean_d = br[-1] / 2.0
    sigma0 = max(np.log(mean_d * np.sqrt(np.pi / 2.0)), np.log(10.0))
    for name, cols in layout.blocks:
        if name.startswith("sigma"):
            theta[layout.slices[name].start] = sigma0
    return theta


class _Counted:
    def __init__(self, f):
        self.f = f
        self.n = 0

    def __call__(self, x):
        self.n += 1
        v = self.f(x)
        return v if np.isfinite(v) else np.inf


def fit(spec: ModelSpec, datasets, options: Optional[FitOptions] = None, **kwargs) -> FitResult:
    """Maximize the joint likelihood.

    A Nelder-Mead warm-up is followed by BFGS on central-difference gradients
    and a few Newton steps on the finite-difference Hessian.  Non-convergence
    is reported through ``converged``; a non-finite objective at the start
    raises ``ValueError``.
    """
    options = options or FitOptions(**kwargs)
    model = JointModel(spec, datasets)
    layout = model.layout
    f = _Counted(model.nll)

    if options.start is None:
        x0 = default_start(spec, layout, model.datasets)
    elif isinstance(options.start, Mapping):
        x0 = layout.pack(options.start)
    else:
        x0 = np.asarray(options.start, dtype=float).copy()
    if x0.shape != (layout.size,):
        raise ValueError(f"start vector has {x0.size} values, model has {layout.size}")
    f0 = f(x0)
    if not np.isfinite(f0):
        raise ValueError("bad start: negative log-likelihood is not finite at the start values")

    starts = [x0]
    if options.start is None and options.multistart and len(model.datasets) > 1:
        xs = _ds_informed_start(spec, model, x0)
        if xs is not None:
            starts.append(xs)
    best = None
    for s in starts:
        x, g, message = _optimize(f, s, options)
        fx = f(x)
        ok = bool(np.isfinite(fx) and np.all(np.isfinite(g)) and np.max(np.abs(g)) <= options.gtol)
        # prefer converged candidates, then the lower objective
        if best is None or (ok, -fx) > (best[4], -best[3]):
            best = (x, g, message, fx, ok)
    x, g, message, fx, converged = best

    H = fd_hessian(f, x)
    vcov, se = _covariance(H)
    result = FitResult(spec=spec, layout=layout, mle=x, se=se, vcov=vcov, nll=fx,
                       converged=converged, n_evals=f.n, gradient=g, hessian=H,
                       message=message, streams=tuple(model.datasets))
    result.validity = validity_filter(result)
    return result


def _optimize(f, x0, options: FitOptions):
    x = x0
    f0 = f(x0)
    if options.simplex_iter > 0:
        simplex = np.vstack([x0, x0 + options.simplex_step * np.eye(x0.size)])
        res = optimize.minimize(f, x0, method="Nelder-Mead",
                                options={"maxiter": options.simplex_iter, "initial_simplex": simplex,
                                         "xatol": 1e-4, "fatol": 1e-6})
        if np.isfinite(res.fun) and res.fun <= f0:
            x = res.x
    res = optimize.minimize(f, x, jac=lambda z: fd_gradient(f, z), method="BFGS",
                            options={"maxiter": options.maxiter, "gtol": options.gtol / 10.0})
    if np.isfinite(res.fun) and res.fun <= f(x):
        x = res.x
    x, g = _newton_polish(f, x, options)
    return x, g, str(res.message)


def _ds_informed_start(spec: ModelSpec, model: JointModel, x0):
    """Start from a DS-only fit: density and DS detection coefficients, other blocks as in ``x0``."""
    ds = model.datasets["ds"]
    sub_spec = spec.with_(availability=None)
    try:
        sub = fit(sub_spec, [ds], FitOptions(multistart=False))
    except ValueError:
        return None
    if not np.all(np.isfinite(sub.mle)):
        return None
    x = x0.copy()
    lay = model.layout
    sl = lay.slices["lam"]
    x[sl] = sub.params["lam"]
    if spec.availability is not None:
        # the DS-only density absorbs availability; undo it at the start value of phi
        avail = model.terms["ds"].components(x)["avail"]
        x[sl.start] -= np.log(np.mean(avail))
    block = spec.sigma_block("ds")
    x[lay.slices[block]] = sub.params[block]
    if not np.isfinite(model.nll(x)):
        return None
    return x


def _newton_polish(f, x, options: FitOptions):
    """Newton steps reusing one FD Hessian while the steps stay small."""
    g = fd_gradient(f, x)
    H = None
    if not np.all(np.isfinite(g)):
        return x, g
    fx = f(x)
    for _ in range(options.polish_iter):
        if np.max(np.abs(g)) <= options.polish_gtol:
            break
        if H is None:
            H = fd_hessian(f, x)
            Hs = 0.5 * (H + H.T)
        try:
            step = np.linalg.solve(Hs, g)
            if not np.all(np.isfinite(step)) or g @ step <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = g * 1e-3 / max(np.max(np.abs(g)), 1.0)
        t = 1.0
        moved = False
        for _ in range(30):
            xn = x - t * step
            fn = f(xn)
            # accept increases at rounding level so a step that shrinks g is not lost to noise
            if np.isfinite(fn) and fn <= fx + 1e2 * EPS * max(1.0, abs(fx)):
                moved = True
                break
            t *= 0.5
        if not moved:
            break
        gn = fd_gradient(f, xn)
        if not np.all(np.isfinite(gn)):
            break
        if np.max(np.abs(gn)) >= np.max(np.abs(g)) and fn >= fx:
            break
        x, g, fx = xn, gn, fn
        H = None if np.max(np.abs(t * step)) > 1e-3 else H
    return x, g


def _covariance(H):
    n = H.shape[0]
    nan = np.full((n, n), np.nan)
    if not np.all(np.isfinite(H)):
        return nan, np.full(n, np.nan)
    Hs = 0.5 * (H + H.T)
    try:
        L = np.linalg.cholesky(Hs)
    except np.linalg.LinAlgError:
        return nan, np.full(n, np.nan)
    Linv = np.linalg.inv(L)
    vcov = Linv.T @ Linv
    vcov = 0.5 * (vcov + vcov.T)
    return vcov, np.sqrt(np.diag(vcov))


def _natural_intercepts(layout: ParameterLayout, theta) -> Dict[str, float]:
    out = {}
    for name, cols in layout.blocks:
        if cols and cols[0] == "(Intercept)":
            out[f"{name}(Intercept)"] = float(np.exp(theta[layout.slices[name].start]))
    return out


def validity_filter(fit: FitResult, truth=None) -> str:
    """Screen a fit for numerical failure.

    Returns ``"VALID"`` or ``"INVALID(reason)"``.  Checks, in order: optimizer
    convergence, density at the boundary, non-finite standard errors, standard
    errors above 5 on the link scale and, when ``truth`` is given, natural-scale
    intercepts more than 10 times their true value.
    """
    if not fit.converged:
        return "INVALID(not_converged)"
    beta0 = fit.mle[fit.layout.slices["lam"].start]
    lam0 = np.exp(beta0)
    if not (DENSITY_BOUNDS[0] <= lam0 <= DENSITY_BOUNDS[1]):
        return "INVALID(boundary)"
    se = np.asarray(fit.se, dtype=float)
    if np.any(~np.isfinite(se)):
        return "INVALID(se_nonfinite)"
    if np.any(se > SE_LIMIT):
        return "INVALID(se_large)"
    if truth is not None:
        t = fit.layout.pack(truth) if isinstance(truth, Mapping) else np.asarray(truth, dtype=float)
        est_nat = _natural_intercepts(fit.layout, fit.mle)
        true_nat = _natural_intercepts(fit.layout, t)
        for k, v in est_nat.items():
            if v > EXPLOSION_FACTOR * true_nat[k]:
                return "INVALID(mle_explosion)"
    return VALID


@dataclass
class Intervals:
    names: list
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    validity: str = VALID

    def natural(self):
        """Exponentiated estimate and endpoints (every coefficient is on a log link)."""
        return np.exp(self.estimate), np.exp(self.lower), np.exp(self.upper)

    def as_dict(self) -> Dict[str, tuple]:
        return {n: (float(lo), float(hi)) for n, lo, hi in zip(self.names, self.lower, self.upper)}

    def covers(self, truth) -> np.ndarray:
        truth = np.asarray(truth, dtype=float)
        return (self.lower <= truth) & (truth <= self.upper)


def wald_intervals(fit, level: float = 0.95) -> Intervals:
    """estimate +/- z * SE on the link scale.

    ``fit`` may also be an ``(estimate, se)`` pair of arrays.  Zero-width
    intervals are returned flagged ``INVALID(zero_width)``.
    """
    if isinstance(fit, FitResult):
        est, se, names = np.asarray(fit.mle), np.asarray(fit.se), fit.names
    else:
        est, se = (np.atleast_1d(np.asarray(a, dtype=float)) for a in fit)
        names = [f"x{i}" for i in range(est.size)]
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if np.any(~np.isfinite(se)):
        raise ValueError("standard errors must be finite")
    z = stats.norm.ppf(0.5 + level / 2.0)
    iv = Intervals(list(names), est, est - z * se, est + z * se, level)
    if np.any(se <= 0):
        iv.validity = "INVALID(zero_width)"
    return iv


@dataclass
class SiteAbundanceEstimate:
    site_id: str
    expected_N: float
    basis: str


def _site_terms(fit: FitResult, dataset: SurveyDataset):
    if dataset.stream not in ("pc", "dnd"):
        raise ValueError("site abundance is estimated for pc or dnd data")
    if np.any(np.isnan(dataset.trunc)):
        raise ValueError("site abundance needs a finite truncation distance (N is undefined "
                         "for an unlimited survey area)")
    term = StreamTerm(dataset, fit.spec, fit.layout)
    c = term.components(fit.mle)
    area = np.pi * dataset.trunc**2 / fit.spec.density_area_m2
    expected = c["lam"] * area
    q = c["avail"] * c["pbar"]
    return expected, q


def eb_mean(y, expected, q, stream: str):
    """Posterior mean of N given the observation under a Poisson(expected) prior.

    Detected and missed individuals are independent Poissons with means
    ``expected*q`` and ``expected*(1-q)``.
    """
    y = np.asarray(y, dtype=float)
    expected = np.asarray(expected, dtype=float)
    q = np.asarray(q, dtype=float)
    missed = expected * (1.0 - q)
    if stream == "pc":
        return y + missed
    m = expected * q
    with np.errstate(divide="ignore", invalid="ignore"):
        detected = np.where(m > 0, m / -np.expm1(-m), 1.0)
    return missed + np.where(y > 0, detected, 0.0)


def estimate_site_abundance(fit: FitResult, dataset: SurveyDataset) -> List[SiteAbundanceEstimate]:
    """Empirical-Bayes E[N | y] at each PC or DND site."""
    if not fit.converged:
        raise ValueError("site abundance needs a converged fit")
    expected, q = _site_terms(fit, dataset)
    means = eb_mean(dataset.y, expected, q, dataset.stream)
    basis = dataset.stream.upper()
    return [SiteAbundanceEstimate(str(s), float(m), basis) for s, m in zip(dataset.site_ids, means)]


def site_abundance_interval(fit: FitResult, dataset: SurveyDataset, level: float = 0.95):
    """Equal-tailed plug-in predictive intervals for N at each site."""
    expected, q = _site_terms(fit, dataset)
    missed = expected * (1.0 - q)
    a = (1.0 - level) / 2.0
    y = dataset.y
    if dataset.stream == "pc":
        lo = y + stats.poisson.ppf(a, missed)
        hi = y + stats.poisson.ppf(1 - a, missed)
        return lo, hi
    lo = np.empty(len(y))
    hi = np.empty(len(y))
    m = expected * q
    for i in range(len(y)):
        if y[i] == 0:
            lo[i] = stats.poisson.ppf(a, missed[i])
            hi[i] = stats.poisson.ppf(1 - a, missed[i])
            continue
        # N = U + M with U ~ Poisson(missed), M ~ Poisson(m) conditioned on M >= 1
        top = int(stats.poisson.ppf(1 - 1e-12, expected[i])) + 2
        k = np.arange(1, top + 1)
        pm = stats.poisson.pmf(k, m[i])
        pm /= pm.sum()
        pu = stats.poisson.pmf(np.arange(top + 1), missed[i])
        pn = np.convolve(pu, pm)[: top + 1]
        pn = np.concatenate([[0.0], pn])[: top + 1]
        cdf = np.cumsum(pn) / pn.sum()
        lo[i] = np.searchsorted(cdf, a)
        hi[i] = np.searchsorted(cdf, 1 - a)
    return lo, hi


@dataclass
class DensityPrediction:
    cell_ids: list
    abundance: np.ndarray
    se: np.ndarray
    total: float
    total_se: float
    density_per_km2: np.ndarray = field(default=None)


def _n_rows(table) -> int:
    if hasattr(table, "shape"):
        return int(table.shape[0])
    if isinstance(table, Mapping):
        lengths = {len(np.atleast_1d(v)) for v in table.values()}
        if len(lengths) != 1:
            raise ValueError("newdata needs at least one column of equal-length values")
        return lengths.pop()
    return len(table)


def predict_density(fit: FitResult, newdata, cell_area: float = 1.0, cell_ids=None) -> DensityPrediction:
    """Expected abundance per grid cell of ``cell_area`` km^2, with delta-method SEs."""
    if not cell_area > 0:
        raise ValueError("cell_area must be positive")
    formula = parse_formula(fit.spec.density)
    cov = check_covariate_table(newdata, formula.covariates)
    n = len(next(iter(cov.values()))) if cov else _n_rows(newdata)
    X = build_design(formula, cov, n_sites=n, scaling=fit.spec.scaling)
    sl = fit.layout.slices["lam"]
    beta = fit.mle[sl]
    V = np.asarray(fit.vcov)[sl, sl]
    per_km2 = np.exp(X @ beta) * 1e6 / fit.spec.density_area_m2
    abundance = per_km2 * cell_area
    with np.errstate(invalid="ignore"):
        se = abundance * np.sqrt(np.einsum("ij,jk,ik->i", X, V, X))
        grad_total = abundance @ X
        total_se = float(np.sqrt(grad_total @ V @ grad_total))
    ids = list(cell_ids) if cell_ids is not None else [str(i) for i in range(n)]
    # fsum is correctly rounded, so n identical cells total exactly n times one cell
    return DensityPrediction(ids, abundance, se, math.fsum(abundance), total_se, per_km2)
