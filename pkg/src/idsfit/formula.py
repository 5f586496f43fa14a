"""One-sided formulas of the form ``~ 1`` or ``~ x + x^2 + z``."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

__all__ = ["Formula", "parse_formula", "build_design", "INTERCEPT"]

INTERCEPT = "(Intercept)"

_TERM = re.compile(r"^([A-Za-z_][A-Za-z0-9_.]*)(\^2)?$")


@dataclass(frozen=True)
class Formula:
    """Ordered design terms; the intercept is always the first column."""

    terms: tuple = ()

    @property
    def columns(self) -> tuple:
        return (INTERCEPT,) + self.terms

    @property
    def covariates(self) -> tuple:
        seen = []
        for t in self.terms:
            name = t[:-2] if t.endswith("^2") else t
            if name not in seen:
                seen.append(name)
        return tuple(seen)

    def __len__(self) -> int:
        return 1 + len(self.terms)

    def __str__(self) -> str:
        return "~ " + (" + ".join(self.terms) if self.terms else "1")


def parse_formula(text) -> Formula:
    """Parse ``~ 1`` or ``~ term (+ term)*`` where a term is ``name`` or ``name^2``."""
    if isinstance(text, Formula):
        return text
    if not isinstance(text, str):
        raise TypeError(f"formula must be a string, got {type(text).__name__}")
    s = text.strip()
    if not s.startswith("~"):
        raise ValueError(f"formula must start with '~': {text!r}")
    body = s[1:].strip()
    if body == "1":
        return Formula(())
    if not body:
        raise ValueError(f"empty formula: {text!r}")
    terms = []
    for raw in body.split("+"):
        t = raw.strip().replace(" ", "")
        if not _TERM.match(t):
            raise ValueError(f"bad term {raw.strip()!r} in formula {text!r}")
        if t in terms:
            raise ValueError(f"duplicate term {t!r} in formula {text!r}")
        terms.append(t)
    return Formula(tuple(terms))


def build_design(formula, covariates: Mapping[str, np.ndarray], n_sites: Optional[int] = None,
                 scaling: Optional[Mapping[str, tuple]] = None) -> np.ndarray:
    """Design matrix with one row per site.

    ``covariates`` maps names to 1-d arrays.  ``scaling`` maps a covariate
    name to ``(center, scale)``; squared terms are formed after scaling.
    """
    f = parse_formula(formula)
    if n_sites is None:
        if covariates:
            n_sites = len(next(iter(covariates.values())))
        elif f.terms:
            raise ValueError("no covariates supplied")
        else:
            raise ValueError("n_sites is required for an intercept-only design without covariates")
    X = np.ones((n_sites, len(f)))
    for k, term in enumerate(f.terms, start=1):
        squared = term.endswith("^2")
        name = term[:-2] if squared else term
        if name not in covariates:
            raise KeyError(f"missing covariate {name!r}")
        x = np.asarray(covariates[name], dtype=float)
        if x.shape != (n_sites,):
            raise ValueError(f"covariate {name!r} has shape {x.shape}, expected ({n_sites},)")
        if not np.all(np.isfinite(x)):
            raise ValueError(f"covariate {name!r} has non-finite values")
        if scaling and name in scaling:
            center, scale = scaling[name]
            x = (x - center) / scale
        X[:, k] = x * x if squared else x
    return X
