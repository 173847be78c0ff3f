"""Model-comparison criteria, accuracy statistics and variance diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .spectral import VarianceProfile

# bin edges for relative variance differences, as fractions
RELATIVE_BINS = (-1.0, -0.5, -0.25, -0.1, 0.1, 0.25, 0.5, 1.0)


def _loglik_matrix(loglik) -> np.ndarray:
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim == 1:
        ll = ll[:, None]
    if ll.ndim != 2 or ll.shape[0] == 0:
        raise ValueError("log-likelihood draws must have shape (draws, observations)")
    return ll


def dic_from_loglik(loglik, loglik_at_mean) -> float:
    """``Dbar + pD`` with ``D = -2 log p`` and ``pD = Dbar - D(mean)``.

    Parameters
    ----------
    loglik : array, shape (draws, observations)
        Pointwise log-likelihood per retained draw.
    loglik_at_mean : array, shape (observations,)
        Pointwise log-likelihood at the posterior mean of the linear predictor.
    """
    ll = _loglik_matrix(loglik)
    dbar = -2.0 * ll.sum(axis=1).mean()
    dhat = -2.0 * float(np.sum(loglik_at_mean))
    return float(2.0 * dbar - dhat)


def waic_from_loglik(loglik) -> float:
    """``-2 sum_i [log mean_s p_is - var_s log p_is]`` (variance with divisor S-1)."""
    ll = _loglik_matrix(loglik)
    s = ll.shape[0]
    lppd = logsumexp(ll, axis=0) - np.log(s)
    penalty = ll.var(axis=0, ddof=1) if s > 1 else np.zeros(ll.shape[1])
    return float(-2.0 * np.sum(lppd - penalty))


def dic(fit) -> float:
    return dic_from_loglik(fit.loglik, fit.loglik_at_mean())


def waic(fit) -> float:
    return waic_from_loglik(fit.loglik)


def _pair(estimates, truths):
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise ValueError("empty input")
    return np.atleast_2d(est.T).T, np.atleast_2d(tru.T).T


def mab(estimates, truths) -> float:
    """``(I J)^-1 sum_i |sum_j (est_ij - truth_ij)|`` for ``I x J`` inputs.

    The replicate sum sits inside the absolute value, so this measures the
    aggregate bias per unit rather than the mean absolute error.
    """
    est, tru = _pair(estimates, truths)
    return float(np.abs((est - tru).sum(axis=1)).sum() / est.size)


def rmse(estimates, truths) -> float:
    est, tru = _pair(estimates, truths)
    return float(np.sqrt(np.mean((est - tru) ** 2)))


def interval_score(lower, upper, truth, alpha: float = 0.05):
    """Interval score of central ``(1 - alpha)`` intervals; lower is better.

    Works elementwise on arrays; returns a float for scalar input.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    lo, up, t = (np.asarray(x, dtype=float) for x in (lower, upper, truth))
    if np.any(lo > up):
        raise ValueError("lower bound exceeds upper bound")
    score = (up - lo) + (2.0 / alpha) * ((lo - t) * (t < lo) + (t - up) * (t > up))
    return float(score) if score.ndim == 0 else score


def empirical_variance_map(mean_maps) -> np.ndarray:
    """Per-unit sample variance (divisor J-1) across J posterior-mean maps."""
    m = np.asarray(mean_maps, dtype=float)
    if m.ndim != 2:
        raise ValueError("mean maps must form a (J, I) array")
    if m.shape[0] < 2:
        raise ValueError("need at least two maps")
    return m.var(axis=0, ddof=1)


def variance_mse(empirical, target: float = 0.04) -> float:
    return float(np.mean((np.asarray(empirical, dtype=float) - target) ** 2))


def mean_variance(empirical) -> float:
    return float(np.mean(empirical))


def pearson_correlation(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-d of equal length")
    if len(a) < 3:
        raise ValueError("need at least three values")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise ValueError("correlation undefined for constant input")
    return float(np.clip(da @ db / (sa * sb), -1.0, 1.0))


def relative_variance_difference(hom, bym) -> np.ndarray:
    """``(hom - bym) / bym`` per unit."""
    hom = np.asarray(hom, dtype=float)
    bym = np.asarray(bym, dtype=float)
    if hom.shape != bym.shape:
        raise ValueError("shape mismatch")
    if np.any(bym <= 0):
        raise ValueError("reference variances must be positive")
    return (hom - bym) / bym


def bin_relative_differences(rel) -> list[str]:
    """Label each relative change with its band, e.g. ``"(-0.1,0.1]"``."""
    edges = (-np.inf,) + RELATIVE_BINS + (np.inf,)
    idx = np.searchsorted(RELATIVE_BINS, np.asarray(rel, dtype=float), side="left")
    return [f"({edges[k]:g},{edges[k + 1]:g}]" for k in idx]


def conditional_precision_profile(cov, unit_ids=None) -> VarianceProfile:
    """Conditional precisions ``diag(cov^-1)`` wrapped as a profile."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError("covariance is not positive definite") from exc
    Linv = np.linalg.solve(L, np.eye(len(cov)))
    prec = (Linv**2).sum(axis=0)
    ids = tuple(unit_ids) if unit_ids is not None else tuple(str(i) for i in range(len(cov)))
    return VarianceProfile(prec, ids)


@dataclass
class MetricsReport:
    """One row of a model-comparison table.

    ``aggregation`` says how DIC and WAIC were combined across replicates
    (``sum``, ``mean`` or ``single``); accuracy metrics are always pooled.
    """

    region: str
    model: str
    aggregation: str
    dic: float
    waic: float
    mab: float
    rmse: float
    interval_score_mean: float
    variance_mse: float
    mean_variance: float
    prior_posterior_correlation: float

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @staticmethod
    def csv_header() -> str:
        return ",".join(MetricsReport.__dataclass_fields__)

    def csv_row(self) -> str:
        return ",".join(str(v) if isinstance(v, str) else repr(float(v)) for v in asdict(self).values())
