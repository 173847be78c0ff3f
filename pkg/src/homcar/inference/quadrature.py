"""Deterministic brute-force posterior for tiny BYM models (verification oracle).

Given ``(tau_u, tau_v)`` the intercept and both random effects integrate out
analytically into an improper Gaussian prior on the log-risks ``eta``:
``w = u + v ~ N(0, C)`` with ``C = K / tau_u + I / tau_v`` (``K`` the
constrained covariance of the structured effect) and ``eta = beta0 + w`` under
a flat ``beta0``. The ``I``-dimensional integral over ``eta`` uses a tensor
Gauss-Hermite rule centred and scaled at the conditional mode; the
hyperparameters use a trapezoid rule on a ``log tau`` grid.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from ..spectral import constrained_covariance
from .model import BymModelSpec


@dataclass(frozen=True)
class QuadratureGrid:
    n_tau: int = 61
    log_tau_min: float = math.log(1e-2)
    log_tau_max: float = math.log(1e6)
    n_hermite: int = 10
    n_beta: int = 2001

    def refined(self) -> "QuadratureGrid":
        """Half the hyperparameter step and more Hermite nodes."""
        return replace(self, n_tau=2 * self.n_tau - 1, n_hermite=self.n_hermite + 4,
                       n_beta=2 * self.n_beta - 1)


@dataclass(frozen=True)
class QuadratureResult:
    beta0_mean: float
    eta_mean: np.ndarray
    log_evidence: float


MAX_UNITS = 4


def _intercept_only(O, E, grid: QuadratureGrid) -> QuadratureResult:
    so, se = O.sum(), E.sum()
    mode = math.log(max(so, 0.5) / se)
    sd = 1.0 / math.sqrt(max(so, 0.5))
    b = np.linspace(mode - 12 * sd, mode + 12 * sd, grid.n_beta)
    logp = so * b - se * np.exp(b)
    w = np.exp(logp - logp.max())
    mean = float(np.trapezoid(b * w, b) / np.trapezoid(w, b))
    ev = float(logp.max() + np.log(np.trapezoid(w, b)) + (O * np.log(E) - gammaln(O + 1)).sum())
    return QuadratureResult(mean, np.full(len(O), mean), ev)


def intercept_only_posterior_mean(observed, expected) -> float:
    """Closed form: ``exp(beta0) ~ Gamma(sum O, sum E)`` under a flat ``beta0``."""
    return float(digamma(np.sum(observed)) - math.log(np.sum(expected)))


def _conditional_mode(P, O, E, eta0, iters=100):
    """Newton iterations for ``max -eta'P eta/2 + O'eta - E'exp(eta)``, batched over P."""
    eta = np.broadcast_to(eta0, P.shape[:-1]).copy()
    for _ in range(iters):
        mu = E * np.exp(eta)
        grad = -np.einsum("...ij,...j->...i", P, eta) + O - mu
        H = P + mu[..., None, :] * np.eye(len(O))
        step = np.linalg.solve(H, grad[..., None])[..., 0]
        eta = eta + step
        if np.abs(step).max() < 1e-12:
            break
    mu = E * np.exp(eta)
    return eta, P + mu[..., None, :] * np.eye(len(O))


def brute_force_posterior(observed, expected, model: BymModelSpec | None,
                          grid: QuadratureGrid | None = None) -> QuadratureResult:
    """Posterior means of ``beta0`` and ``eta`` by nested quadrature.

    ``model=None`` fits the intercept-only model ``eta_i = beta0``.
    """
    grid = grid or QuadratureGrid()
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    if model is None:
        return _intercept_only(O, E, grid)
    n = model.structure.dim
    if n > MAX_UNITS:
        raise ValueError(f"brute-force quadrature supports at most {MAX_UNITS} units")
    if O.shape != (n,) or E.shape != (n,):
        raise ValueError("observed and expected must match the structure dimension")

    K = constrained_covariance(model.structure, model.constraint)
    kvals, V = np.linalg.eigh((K + K.T) / 2)
    kvals = np.clip(kvals, 0.0, None)

    lt = np.linspace(grid.log_tau_min, grid.log_tau_max, grid.n_tau)
    LU, LV = np.meshgrid(lt, lt, indexing="ij")
    tu, tv = np.exp(LU).ravel(), np.exp(LV).ravel()

    def log_prior(log_tau, prior):
        a, b = prior
        return a * math.log(b) - gammaln(a) + a * log_tau - b * np.exp(log_tau)

    lp_tau = log_prior(LU.ravel(), model.prior_tau_u) + log_prior(LV.ravel(), model.prior_tau_v)

    cvals = kvals[None, :] / tu[:, None] + 1.0 / tv[:, None]
    Cinv = np.einsum("ik,pk,jk->pij", V, 1.0 / cvals, V)
    logdetC = np.log(cvals).sum(axis=1)
    ones = np.ones(n)
    c1 = Cinv @ ones
    A = c1 @ ones
    P = Cinv - c1[:, :, None] * c1[:, None, :] / A[:, None, None]

    eta0 = np.log((O + 0.5) / E)
    mode, H = _conditional_mode(P, O, E, eta0)
    L = np.linalg.cholesky(np.linalg.inv(H))
    logdetL = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)

    z1, w1 = np.polynomial.hermite_e.hermegauss(grid.n_hermite)
    Z = np.array(list(itertools.product(z1, repeat=n)))
    logw = np.log(np.array(list(itertools.product(w1, repeat=n)))).sum(axis=1) + 0.5 * (Z**2).sum(axis=1)
    const = -0.5 * (n - 1) * math.log(2 * math.pi) + float((O * np.log(E) - gammaln(O + 1)).sum())

    log_ev = np.empty(len(tu))
    eta_mean = np.empty((len(tu), n))
    chunk = max(1, 200_000 // len(Z))
    for start in range(0, len(tu), chunk):
        sl = slice(start, start + chunk)
        eta = mode[sl, None, :] + Z @ np.swapaxes(L[sl], 1, 2)
        quad = ((eta @ P[sl]) * eta).sum(axis=2)
        f = -0.5 * quad + eta @ O - np.exp(eta) @ E + logw
        lz = logsumexp(f, axis=1)
        wts = np.exp(f - lz[:, None])
        eta_mean[sl] = (wts[:, None, :] @ eta)[:, 0, :]
        log_ev[sl] = lz + logdetL[sl] - 0.5 * logdetC[sl] - 0.5 * np.log(A[sl]) + const

    # trapezoid weights on the log-tau grid
    tw = np.full(grid.n_tau, lt[1] - lt[0])
    tw[[0, -1]] *= 0.5
    log_tw = np.log(np.outer(tw, tw).ravel())
    post = log_ev + lp_tau + log_tw
    total = logsumexp(post)
    pw = np.exp(post - total)
    eta_hat = pw @ eta_mean
    beta_cond = (c1 * eta_mean).sum(axis=1) / A
    return QuadratureResult(float(pw @ beta_cond), eta_hat, float(total))
