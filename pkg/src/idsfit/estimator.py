"""scikit-learn style estimator around :func:`idsfit.inference.fit`."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import check_covariate_table, check_datasets
from .formula import build_design, parse_formula
from .inference import FitOptions, estimate_site_abundance, fit, predict_density, wald_intervals
from .model import JointModel, ModelSpec

__all__ = ["IDSModel"]


class IDSModel(BaseEstimator):
    """Integrated distance-sampling model with a fit/predict interface.

    ``fit`` takes the survey datasets in place of a feature matrix (a mapping
    from stream name to :class:`~idsfit.data.SurveyDataset`, or a sequence of
    them); ``y`` is accepted and ignored for pipeline compatibility.
    ``predict`` returns expected density per ``density_area_m2`` at the rows
    of a covariate table.

    Examples
    --------
    >>> m = IDSModel(breaks=(0, 50, 100, 150, 200)).fit(datasets)   # doctest: +SKIP
    >>> m.coef_["lam(Intercept)"]                                   # doctest: +SKIP
    """

    def __init__(self, density: str = "~ 1", sigma="~ 1", availability: Optional[str] = None,
                 sigma_sharing: str = "per_stream", breaks=None, density_area_m2: float = 10_000.0,
                 time_unit_min: float = 1.0, multistart: bool = True, maxiter: int = 500):
        self.density = density
        self.sigma = sigma
        self.availability = availability
        self.sigma_sharing = sigma_sharing
        self.breaks = breaks
        self.density_area_m2 = density_area_m2
        self.time_unit_min = time_unit_min
        self.multistart = multistart
        self.maxiter = maxiter

    def _spec(self, datasets) -> ModelSpec:
        breaks = self.breaks if self.breaks is not None else datasets["ds"].breaks
        return ModelSpec(density=self.density, sigma=self.sigma, availability=self.availability,
                         sigma_sharing=self.sigma_sharing, breaks=breaks,
                         density_area_m2=self.density_area_m2, time_unit_min=self.time_unit_min)

    def fit(self, X, y=None):
        datasets = check_datasets(X)
        spec = self._spec(datasets)
        opts = FitOptions(multistart=self.multistart, maxiter=self.maxiter)
        res = fit(spec, datasets, opts)
        self.result_ = res
        self.coef_ = res.coef
        self.se_ = dict(zip(res.names, res.se))
        self.converged_ = res.converged
        self.validity_ = res.validity
        self.streams_ = tuple(datasets)
        return self

    def predict(self, X) -> np.ndarray:
        """Expected density (individuals per ``density_area_m2``) at each row of ``X``."""
        check_is_fitted(self, "result_")
        res = self.result_
        formula = parse_formula(res.spec.density)
        cov = check_covariate_table(X, formula.covariates)
        n = len(next(iter(cov.values()))) if cov else _rows(X)
        D = build_design(formula, cov, n_sites=n, scaling=res.spec.scaling)
        return np.exp(D @ res.mle[res.layout.slices["lam"]])

    def predict_abundance(self, X, cell_area: float = 1.0):
        """Expected abundance per cell of ``cell_area`` km^2 with delta-method SEs."""
        check_is_fitted(self, "result_")
        return predict_density(self.result_, X, cell_area=cell_area)

    def score(self, X, y=None) -> float:
        """Log-likelihood of ``X`` at the fitted parameters."""
        check_is_fitted(self, "result_")
        datasets = check_datasets(X)
        return -JointModel(self.result_.spec, datasets, self.result_.layout).nll(self.result_.mle)

    def intervals(self, level: float = 0.95):
        check_is_fitted(self, "result_")
        return wald_intervals(self.result_, level)

    def site_abundance(self, dataset):
        """Empirical-Bayes abundance at the sites of a PC or DND dataset."""
        check_is_fitted(self, "result_")
        return estimate_site_abundance(self.result_, dataset)


def _rows(X) -> int:
    if hasattr(X, "shape"):
        return int(X.shape[0])
    if isinstance(X, dict):
        return len(next(iter(X.values())))
    return len(X)
