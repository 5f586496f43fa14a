"""Half-normal detection geometry for point surveys.

All distances are in meters and all areas in square meters.  Functions
accept scalars or numpy arrays for ``sigma`` and broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "PointGeometry",
    "HalfNormal",
    "half_normal",
    "avg_det_prob",
    "bin_cell_probs",
    "effective_area",
    "effective_area_within",
]


@dataclass(frozen=True)
class PointGeometry:
    """Truncation radius and (optionally) distance-bin breaks for a point survey.

    ``trunc_dist=None`` means the survey has no truncation distance (UNLIMITED).
    """

    trunc_dist: Optional[float] = None
    breaks: Optional[tuple] = None

    def __post_init__(self):
        if self.trunc_dist is not None:
            b = float(self.trunc_dist)
            if not np.isfinite(b) or b <= 0:
                raise ValueError(f"trunc_dist must be positive and finite, got {self.trunc_dist!r}")
            object.__setattr__(self, "trunc_dist", b)
        if self.breaks is not None:
            br = tuple(float(x) for x in self.breaks)
            check_breaks(br)
            if self.trunc_dist is None:
                raise ValueError("binned geometry cannot be UNLIMITED")
            if br[-1] != self.trunc_dist:
                raise ValueError(f"last break {br[-1]} must equal trunc_dist {self.trunc_dist}")
            object.__setattr__(self, "breaks", br)

    @classmethod
    def binned(cls, breaks: Sequence[float]) -> "PointGeometry":
        breaks = tuple(float(x) for x in breaks)
        check_breaks(breaks)
        return cls(trunc_dist=breaks[-1], breaks=breaks)

    @property
    def unlimited(self) -> bool:
        return self.trunc_dist is None

    @property
    def n_bins(self) -> int:
        return 0 if self.breaks is None else len(self.breaks) - 1

    @property
    def area(self) -> float:
        if self.trunc_dist is None:
            raise ValueError("UNLIMITED geometry has no survey area")
        return np.pi * self.trunc_dist**2


UNLIMITED = PointGeometry()


def check_breaks(breaks: Sequence[float]) -> np.ndarray:
    br = np.asarray(breaks, dtype=float)
    if br.ndim != 1 or br.size < 2:
        raise ValueError("breaks need at least two values")
    if not np.all(np.isfinite(br)):
        raise ValueError("breaks must be finite")
    if br[0] != 0.0:
        raise ValueError("breaks must start at 0")
    if np.any(np.diff(br) <= 0):
        raise ValueError("breaks must be strictly increasing")
    return br


def _check_sigma(sigma):
    s = np.asarray(sigma, dtype=float)
    if np.any(~np.isfinite(s)) or np.any(s <= 0):
        raise ValueError("sigma must be positive and finite")
    return s


class HalfNormal:
    """Half-normal key g(d) = exp(-d^2 / (2 sigma^2)).

    Every quantity needed by the likelihood is derived from ``_radial_integral``,
    the closed form of int_0^r g(u) u du; a different key function only has to
    supply ``g`` and that integral.
    """

    name = "halfnormal"

    @staticmethod
    def g(d, sigma):
        return np.exp(-np.square(d) / (2.0 * np.square(sigma)))

    @staticmethod
    def _radial_integral(r, sigma):
        # int_0^r exp(-u^2/(2 s^2)) u du = s^2 (1 - exp(-r^2/(2 s^2)))
        s2 = np.square(sigma)
        return -s2 * np.expm1(-np.square(r) / (2.0 * s2))

    def avg_det_prob(self, sigma, b):
        return 2.0 * self._radial_integral(b, sigma) / np.square(b)

    def bin_cell_probs(self, sigma, breaks):
        br = np.asarray(breaks, dtype=float)
        sig = np.asarray(sigma, dtype=float)[..., None]
        s2 = np.square(sig)
        # e_j = exp(-c_j^2 / 2s^2); pi_j = 2 s^2 / b^2 (e_{j-1} - e_j), differences via expm1
        lo = -np.square(br[:-1]) / (2.0 * s2)
        hi = -np.square(br[1:]) / (2.0 * s2)
        diff = np.exp(lo) * -np.expm1(hi - lo)
        return 2.0 * s2 * diff / br[-1] ** 2

    def effective_area(self, sigma):
        return 2.0 * np.pi * np.square(sigma)

    def effective_area_within(self, sigma, b):
        """pi b^2 * pbar(sigma, b); equals effective_area when b is infinite."""
        return 2.0 * np.pi * self._radial_integral(b, sigma)


KEY = HalfNormal()


def half_normal(d, sigma):
    """Detection probability at distance ``d`` (m) for scale ``sigma`` (m)."""
    d = np.asarray(d, dtype=float)
    if np.any(~np.isfinite(d)) or np.any(d < 0):
        raise ValueError("distance must be finite and non-negative")
    out = KEY.g(d, _check_sigma(sigma))
    return float(out) if np.ndim(out) == 0 else out


def _finite_b(geom) -> float:
    if isinstance(geom, PointGeometry):
        if geom.unlimited:
            raise ValueError("average detection probability needs a finite truncation distance; "
                             "use effective_area for UNLIMITED surveys")
        return geom.trunc_dist
    b = float(geom)
    if not np.isfinite(b) or b <= 0:
        raise ValueError("truncation distance must be positive and finite")
    return b


def avg_det_prob(sigma, geom):
    """Mean detection probability of an individual placed uniformly in a disc of radius b.

    ``geom`` is a :class:`PointGeometry` or a plain radius in meters.
    """
    out = KEY.avg_det_prob(_check_sigma(sigma), _finite_b(geom))
    return float(out) if np.ndim(out) == 0 else out


def bin_cell_probs(sigma, geom) -> np.ndarray:
    """Unconditional probability that an individual in the disc is detected in each bin.

    The result sums to ``avg_det_prob(sigma, b)``.  For array ``sigma`` the bins
    run along the last axis.
    """
    if isinstance(geom, PointGeometry):
        if geom.unlimited:
            raise ValueError("bin probabilities need a finite truncation distance")
        if geom.breaks is None:
            raise ValueError("geometry has no distance bins")
        breaks = geom.breaks
    else:
        breaks = check_breaks(geom)
    return KEY.bin_cell_probs(_check_sigma(sigma), breaks)


def effective_area(sigma):
    """Detection-weighted area (m^2) of an untruncated point survey, 2 pi sigma^2."""
    out = KEY.effective_area(_check_sigma(sigma))
    return float(out) if np.ndim(out) == 0 else out


def effective_area_within(sigma, trunc):
    """pi b^2 * pbar; ``trunc`` may contain NaN or inf for UNLIMITED sites."""
    t = np.asarray(trunc, dtype=float)
    t = np.where(np.isnan(t), np.inf, t)
    out = KEY.effective_area_within(_check_sigma(sigma), t)
    return float(out) if np.ndim(out) == 0 else out
