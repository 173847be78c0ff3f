"""Eigendecompositions, pseudoinverses, marginal variances and singular normal densities.

Everything here works on dense symmetric matrices; graphs are assumed to be
small enough (a few thousand units) for ``numpy.linalg.eigh``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .car import INTRINSIC, StructureMatrix

NULL_RTOL = 1e-9


@dataclass(frozen=True)
class SpectralDecomposition:
    """Ascending eigenvalues with orthonormal eigenvector columns.

    The first ``null_count`` eigenpairs span the null space.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    null_count: int

    @property
    def nonnull(self) -> slice:
        return slice(self.null_count, None)


@dataclass(frozen=True)
class GeneralizedInverseSpec:
    """Free blocks of ``D*`` in ``U D* U'``.

    ``x`` is the last column above the corner, ``y`` the last row left of it
    and ``z`` the corner. Entry ``k`` of ``x``/``y`` pairs with the k-th
    smallest non-null eigenvalue.
    """

    x: np.ndarray
    y: np.ndarray
    z: float

    @classmethod
    def zeros(cls, n: int) -> "GeneralizedInverseSpec":
        return cls(np.zeros(n - 1), np.zeros(n - 1), 0.0)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, scale: float = 1.0) -> "GeneralizedInverseSpec":
        return cls(rng.normal(0, scale, n - 1), rng.normal(0, scale, n - 1), float(rng.normal(0, scale)))


@dataclass(frozen=True)
class VarianceProfile:
    variances: np.ndarray
    unit_ids: tuple[str, ...] | None = None

    @property
    def min(self) -> float:
        return float(self.variances.min())

    @property
    def median(self) -> float:
        return float(np.median(self.variances))

    @property
    def max(self) -> float:
        return float(self.variances.max())

    @property
    def max_min_ratio(self) -> float:
        return self.max / self.min

    def summary(self) -> dict[str, float]:
        return {"min": self.min, "median": self.median, "max": self.max,
                "max_min_ratio": self.max_min_ratio}

    def to_csv(self) -> str:
        """``unit_id,variance`` rows preceded by a ``#`` summary block."""
        ids = self.unit_ids or tuple(str(k) for k in range(len(self.variances)))
        head = [f"# {k}={v!r}" for k, v in self.summary().items()]
        rows = [f"{u},{float(v)!r}" for u, v in zip(ids, self.variances)]
        return "\n".join(head + ["unit_id,variance"] + rows) + "\n"


def _as_dense(Q) -> np.ndarray:
    if isinstance(Q, StructureMatrix):
        return Q.dense()
    return np.asarray(Q, dtype=float)


def _decompose(A: np.ndarray, expected_null: int | None) -> SpectralDecomposition:
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("matrix must be symmetric")
    try:
        vals, vecs = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    scale = np.abs(vals).max() if vals.size else 0.0
    null = np.abs(vals) < NULL_RTOL * scale
    null_count = int(null.sum())
    if expected_null is not None and null_count != expected_null:
        raise ArithmeticError(
            f"found {null_count} null eigenvalues but the graph has {expected_null} components"
        )
    # null eigenpairs first, the rest ascending
    order = np.concatenate([np.flatnonzero(null), np.flatnonzero(~null)])
    vals, vecs = vals[order], vecs[:, order]
    vals[:null_count] = 0.0
    return SpectralDecomposition(vals, vecs, null_count)


def eigendecompose(Q) -> SpectralDecomposition:
    """Eigendecomposition with null-space classification.

    For intrinsic structure matrices the number of null eigenvalues is
    cross-checked against the number of connected components.
    """
    if isinstance(Q, StructureMatrix):
        expected = Q.null_count_expected if Q.kind in INTRINSIC else None
        return Q.cached("eigh", lambda: _decompose(Q.dense(), expected))
    return _decompose(_as_dense(Q), None)


def moore_penrose(Q) -> np.ndarray:
    dec = eigendecompose(Q)
    U = dec.eigenvectors[:, dec.nonnull]
    S = (U / dec.eigenvalues[dec.nonnull]) @ U.T
    return (S + S.T) / 2


def marginal_variances(Q, tau: float = 1.0) -> VarianceProfile:
    """Diagonal of ``(tau Q)^-``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    var = np.diag(moore_penrose(Q)) / tau
    ids = Q.graph.unit_ids if isinstance(Q, StructureMatrix) else None
    return VarianceProfile(var.copy(), ids)


def constrained_covariance(Q, constraint, tau: float = 1.0) -> np.ndarray:
    """Covariance of an intrinsic field restricted to ``constraint' theta = 0``.

    The improper density is flat along the null vector ``n``, so the restricted
    law is the oblique projection of the pseudoinverse law along ``n``:
    ``P Q^- P' / tau`` with ``P = I - n c' / (c' n)``. Requires a single null
    direction.
    """
    dec = eigendecompose(Q)
    if dec.null_count != 1:
        raise ValueError("constrained covariance needs exactly one null direction")
    n = dec.eigenvectors[:, 0]
    c = np.asarray(constraint, dtype=float)
    cn = c @ n
    if abs(cn) < 1e-12 * np.linalg.norm(c):
        raise ValueError("constraint is orthogonal to the null direction")
    P = np.eye(len(n)) - np.outer(n, c) / cn
    return P @ moore_penrose(Q) @ P.T / tau


def _null_last(dec: SpectralDecomposition) -> tuple[np.ndarray, np.ndarray]:
    k = dec.null_count
    U = np.concatenate([dec.eigenvectors[:, k:], dec.eigenvectors[:, :k]], axis=1)
    d = np.concatenate([dec.eigenvalues[k:], dec.eigenvalues[:k]])
    return U, d


def generalized_inverse(Q, spec: GeneralizedInverseSpec) -> np.ndarray:
    """``U D* U'`` where ``D*`` has the inverted non-null block and free x, y, z.

    Every such matrix satisfies ``Q Q^g Q = Q``; ``x = y = 0, z = 0`` gives
    the Moore-Penrose inverse. Only rank deficiency one is supported.
    """
    dec = eigendecompose(Q)
    if dec.null_count != 1:
        raise ValueError("generalized_inverse supports exactly one null direction")
    U, d = _null_last(dec)
    n = len(d)
    x, y = np.asarray(spec.x, dtype=float), np.asarray(spec.y, dtype=float)
    if x.shape != (n - 1,) or y.shape != (n - 1,):
        raise ValueError(f"x and y must have length {n - 1}")
    Dstar = np.zeros((n, n))
    Dstar[np.arange(n - 1), np.arange(n - 1)] = 1.0 / d[:-1]
    Dstar[:-1, -1] = x
    Dstar[-1, :-1] = y
    Dstar[-1, -1] = spec.z
    return U @ Dstar @ U.T


def singular_normal_logdensity(
    theta, mu, Q, tau: float = 1.0, spec: GeneralizedInverseSpec | None = None,
    support_tol: float = 1e-8,
) -> float:
    """Log density of ``N(mu, (tau Q)^-)`` on its support.

    With ``spec`` the quadratic form uses the generalized inverse of the
    covariance built from ``spec`` instead of ``tau Q``; the result is the same
    for every spec whenever ``theta - mu`` lies in the support.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    r = np.asarray(theta, dtype=float) - np.asarray(mu, dtype=float)
    dec = eigendecompose(Q)
    k = dec.null_count
    off = dec.eigenvectors[:, :k].T @ r
    if off.size and np.abs(off).max() > support_tol * max(1.0, np.linalg.norm(r)):
        raise ValueError("theta - mu is not orthogonal to the null space")
    d = dec.eigenvalues[k:]
    if np.any(d < 0):
        raise ValueError("structure matrix is not positive semidefinite")
    n = len(r)
    if spec is not None and k != 1:
        raise ValueError("generalized-inverse specs need exactly one null direction")
    if spec is None:
        quad = tau * float(r @ (_as_dense(Q) @ r))
    else:
        U, dl = _null_last(dec)
        G = np.zeros((n, n))
        G[np.arange(n - k), np.arange(n - k)] = tau * dl[:n - k]
        G[:-1, -1] = spec.x
        G[-1, :-1] = spec.y
        G[-1, -1] = spec.z
        quad = float(r @ (U @ G @ U.T) @ r)
    return -0.5 * (n - k) * math.log(2 * math.pi) + 0.5 * float(np.log(tau * d).sum()) - 0.5 * quad
