"""Seeded random generation for the simulation study.

All draws use numpy's PCG64 bit generator. Per-replicate (and per-chain) seeds
come from :func:`derive_seed`, a splitmix64-style finaliser, so any single
replicate can be regenerated in isolation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .car import Kind, StructureMatrix, constraint_vector
from .graph import AdjacencyGraph, GraphError, centroid_distances, is_connected
from .spectral import eigendecompose

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """``mix64(base_seed XOR (index + 1) * 0x9E3779B97F4A7C15)`` modulo 2**64."""
    return mix64((base_seed & MASK64) ^ (((index + 1) * GOLDEN_GAMMA) & MASK64))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(int(seed) & MASK64))


def sample_constrained_gmrf(
    Q: StructureMatrix, tau: float, seed, n: int, constraint: str = "null"
) -> np.ndarray:
    """Draw ``n`` samples (rows) from an intrinsic GMRF with precision ``tau Q``.

    ``constraint="null"`` gives the pseudoinverse law (samples orthogonal to the
    null direction). ``constraint="model"`` then moves each sample along the
    null direction onto ``constraint_vector(Q)' theta = 0``; for an ICAR the two
    coincide.
    """
    if Q.kind not in (Kind.ICAR, Kind.HOMCAR):
        raise ValueError("constrained sampling needs an intrinsic structure matrix")
    if not is_connected(Q.graph):
        raise GraphError("constrained sampling requires a connected graph")
    if not tau > 0:
        raise ValueError("tau must be positive")
    dec = eigendecompose(Q)
    rng = make_rng(seed)
    U = dec.eigenvectors[:, dec.nonnull]
    scale = 1.0 / np.sqrt(tau * dec.eigenvalues[dec.nonnull])
    z = rng.standard_normal((n, U.shape[1]))
    theta = (z * scale) @ U.T
    if constraint == "model":
        null = dec.eigenvectors[:, 0]
        c = constraint_vector(Q)
        theta -= np.outer(theta @ c / (c @ null), null)
    elif constraint != "null":
        raise ValueError(f"unknown constraint mode {constraint!r}")
    return theta


def exp_cov_matrix(d: np.ndarray, sd: float, delta: float) -> np.ndarray:
    """``sd**2 * exp(-3 d / delta)``: correlation exp(-3) at distance ``delta``."""
    if not sd > 0 or not delta > 0:
        raise ValueError("sd and delta must be positive")
    d = np.asarray(d, dtype=float)
    return sd**2 * np.exp(-3.0 * d / delta)


def gaussian_field_factor(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a tiny diagonal jitter."""
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * float(np.mean(np.diag(cov)))
        log.warning("covariance not numerically PD; adding jitter %.3g", jitter)
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError("covariance factorisation failed after jitter") from exc


def sample_gaussian_field(cov: np.ndarray, seed, n: int | None = None, factor=None) -> np.ndarray:
    L = gaussian_field_factor(cov) if factor is None else factor
    rng = make_rng(seed)
    if n is None:
        return L @ rng.standard_normal(L.shape[0])
    return rng.standard_normal((n, L.shape[0])) @ L.T


def sample_poisson_counts(expected, theta, seed) -> np.ndarray:
    E = np.asarray(expected, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if E.shape != theta.shape:
        raise ValueError("expected and theta must have the same shape")
    return make_rng(seed).poisson(E * np.exp(theta)).astype(np.int64)


@dataclass(frozen=True)
class SimulationScenario:
    graph: AdjacencyGraph
    delta: float
    marginal_sd: float = 0.2
    baseline_expected: float = 5.0
    replicates: int = 100
    base_seed: int = 20240601

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if not self.marginal_sd > 0 or not self.delta > 0:
            raise ValueError("marginal_sd and delta must be positive")
        if not self.baseline_expected > 0:
            raise ValueError("baseline_expected must be positive")
        if self.graph.centroids is None:
            raise GraphError("scenario graph needs centroids")

    def covariance(self) -> np.ndarray:
        return exp_cov_matrix(centroid_distances(self.graph), self.marginal_sd, self.delta)

    def expected(self) -> np.ndarray:
        return np.full(self.graph.size, float(self.baseline_expected))


@dataclass(frozen=True)
class ReplicateData:
    theta_true: np.ndarray
    counts: np.ndarray
    replicate_index: int
    seed_used: int

    def to_csv(self, unit_ids) -> str:
        rows = [f"{u},{float(t)!r},{int(c)}" for u, t, c in zip(unit_ids, self.theta_true, self.counts)]
        return "\n".join(["unit_id,theta_true,count"] + rows) + "\n"


def generate_replicate(s: SimulationScenario, r: int, factor=None) -> ReplicateData:
    seed = derive_seed(s.base_seed, r)
    rng = make_rng(seed)
    L = gaussian_field_factor(s.covariance()) if factor is None else factor
    theta = L @ rng.standard_normal(s.graph.size)
    counts = rng.poisson(s.expected() * np.exp(theta)).astype(np.int64)
    return ReplicateData(theta, counts, r, seed)


def generate_scenario(s: SimulationScenario) -> list[ReplicateData]:
    L = gaussian_field_factor(s.covariance())
    return [generate_replicate(s, r, L) for r in range(s.replicates)]
