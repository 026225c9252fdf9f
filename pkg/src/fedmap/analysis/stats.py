"""Paired statistics: signed-rank testing, rank correlation, gain regression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .._kernels import wilcoxon_exact_counts as _wilcoxon_counts
from .metrics import _average_ranks

__all__ = [
    "PairedSample",
    "wilcoxon_signed_rank",
    "spearman",
    "gain_regression",
    "GainRegression",
]

EXACT_LIMIT = 20


@dataclass
class PairedSample:
    """Per-site metric values under two methods, aligned by site."""

    site_ids: list[str]
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != self.b.shape or len(self.site_ids) != self.a.shape[0]:
            raise ValueError("paired sample lengths differ")
        if not (np.isfinite(self.a).all() and np.isfinite(self.b).all()):
            raise ValueError("paired sample contains non-finite values")

    @property
    def differences(self) -> np.ndarray:
        return self.b - self.a


def wilcoxon_signed_rank(pairs: PairedSample) -> tuple[float, float]:
    """Signed-rank statistic (positive-rank sum) and two-sided p-value.

    Zero differences are dropped. Up to 20 nonzero differences the p-value
    is exact over all 2^n sign assignments; above that a normal
    approximation with continuity and tie corrections is used. Two-sided
    p = min(1, 2 * min(P(W <= w), P(W >= w))).
    """
    d = pairs.differences
    d = d[d != 0.0]
    n = d.shape[0]
    if n == 0:
        raise ValueError("signed-rank test undefined: all differences are zero")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_LIMIT:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w_plus))
        n_ge, n_le, total = _wilcoxon_counts(ranks2, w2)
        p = min(1.0, 2.0 * min(n_ge, n_le) / total)
        return w_plus, p

    mean = n * (n + 1) / 4.0
    # tie correction subtracts sum(t^3 - t)/48 from the null variance
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((counts ** 3) - counts).sum()) / 48.0
    sd = math.sqrt(var)
    # continuity correction pulls the statistic half a step toward the mean
    z = (w_plus - mean - 0.5 * np.sign(w_plus - mean)) / sd
    p = min(1.0, 2.0 * _norm_sf(abs(z)))
    return w_plus, p


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length vectors")
    if x.shape[0] < 3:
        raise ValueError("spearman needs at least 3 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("spearman undefined for a constant vector")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)))


@dataclass
class GainRegression:
    """Per-site relative gains of method B over baseline A, with the fit."""

    site_ids: list[str]
    baseline: np.ndarray
    gain: np.ndarray
    spearman_r: float
    slope: float
    intercept: float
    excluded: list[str]


def gain_regression(pairs: PairedSample) -> GainRegression:
    """Relative gain (b - a) / a per site, its rank correlation with the
    baseline, and a least-squares line through (baseline, gain).

    Sites with a zero baseline are excluded and reported.
    """
    keep = pairs.a != 0.0
    excluded = [s for s, k in zip(pairs.site_ids, keep) if not k]
    a = pairs.a[keep]
    b = pairs.b[keep]
    ids = [s for s, k in zip(pairs.site_ids, keep) if k]
    if a.shape[0] < 3:
        raise ValueError("gain regression needs at least 3 usable sites")
    gain = (b - a) / a
    # a constant gain column carries no ordering information
    r = 0.0 if np.all(gain == gain[0]) or np.all(a == a[0]) else spearman(a, gain)
    slope, intercept = np.polyfit(a, gain, 1)
    return GainRegression(
        site_ids=ids,
        baseline=a,
        gain=gain,
        spearman_r=r,
        slope=float(slope),
        intercept=float(intercept),
        excluded=excluded,
    )
