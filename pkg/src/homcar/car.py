"""ICAR, HomCAR and Stern-Cressie structure matrices.

The HomCAR matrix rescales an ICAR structure matrix by the ICAR marginal
standard deviations, ``Q* = diag(sigma) Q diag(sigma)``, so units with large
ICAR variance get a larger conditional precision.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.sparse import csr_array, diags_array

from .graph import AdjacencyGraph, GraphError, connected_components


class Kind(str, Enum):
    ICAR = "icar"
    HOMCAR = "homcar"
    STERN_CRESSIE = "stern_cressie"


INTRINSIC = (Kind.ICAR, Kind.HOMCAR)


@dataclass(frozen=True, eq=False)
class StructureMatrix:
    """Symmetric sparse precision structure (precision without ``tau``).

    ``sigma`` holds the per-unit scale used by the HomCAR transform and
    ``sigma_from_pseudoinverse`` records whether it equals the square root of
    the Moore-Penrose diagonal of the source ICAR matrix.
    """

    kind: Kind
    matrix: csr_array
    graph: AdjacencyGraph
    sigma: np.ndarray | None = None
    phi: float | None = None
    sigma_from_pseudoinverse: bool = False
    _cache: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def null_count_expected(self) -> int | None:
        """Rank deficiency implied by the graph, for intrinsic kinds."""
        if self.kind in INTRINSIC:
            return connected_components(self.graph).component_count
        return None

    def cached(self, key, build):
        """Compute-once cache shared safely between threads."""
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]


@dataclass(frozen=True)
class ConditionalSpec:
    unit: int
    neighbors: np.ndarray
    mean_weights: np.ndarray
    conditional_precision_multiplier: float


def build_icar(g: AdjacencyGraph) -> StructureMatrix:
    """Q = D - W."""
    if g.size < 2:
        raise GraphError("an ICAR needs at least two units")
    W = g.weight_matrix()
    D = diags_array(np.asarray(W.sum(axis=1)).ravel())
    Q = csr_array(D - W)
    Q.sort_indices()
    return StructureMatrix(Kind.ICAR, Q, g)


def homcar_transform(
    Q: StructureMatrix, variances, *, allow_external: bool = False, rtol: float = 1e-8
) -> StructureMatrix:
    """Rescale an ICAR structure matrix by per-unit marginal variances.

    Parameters
    ----------
    Q : StructureMatrix
        ICAR structure matrix.
    variances : array_like or VarianceProfile
        Per-unit variances ``sigma_i**2``. Unless ``allow_external`` is set,
        they must match the Moore-Penrose diagonal of ``Q`` to ``rtol``.
    allow_external : bool
        Accept arbitrary positive variances (a plain reweighting of ``Q``).
    """
    from .spectral import moore_penrose

    if Q.kind is not Kind.ICAR:
        raise ValueError("homcar_transform expects an ICAR structure matrix")
    var = np.asarray(getattr(variances, "variances", variances), dtype=float).ravel()
    if var.shape != (Q.dim,):
        raise ValueError(f"expected {Q.dim} variances, got {var.shape}")
    if not np.all(var > 0):
        raise ValueError("variances must be positive")
    own = np.diag(moore_penrose(Q))
    from_pinv = bool(np.allclose(var, own, rtol=rtol, atol=0))
    if not from_pinv and not allow_external:
        raise ValueError(
            "variances do not match the pseudoinverse diagonal of Q; "
            "pass allow_external=True to reweight with external variances"
        )
    sigma = np.sqrt(var)
    S = diags_array(sigma)
    Qs = csr_array(S @ Q.matrix @ S)
    Qs.sort_indices()
    return StructureMatrix(Kind.HOMCAR, Qs, Q.graph, sigma=sigma, sigma_from_pseudoinverse=from_pinv)


def build_homcar(g: AdjacencyGraph) -> StructureMatrix:
    """HomCAR matrix using the ICAR pseudoinverse variances of ``g``."""
    from .spectral import marginal_variances

    Q = build_icar(g)
    return homcar_transform(Q, marginal_variances(Q).variances)


def build_stern_cressie(g: AdjacencyGraph, expected=None, phi: float = 1.0) -> StructureMatrix:
    """Q_ii = E_i, Q_ij = -phi * sqrt(E_i E_j) for neighbours."""
    E = g.expected if expected is None else np.asarray(expected, dtype=float)
    if E is None:
        raise ValueError("Stern-Cressie structure needs expected counts")
    E = np.asarray(E, dtype=float).ravel()
    if E.shape != (g.size,) or not np.all(E > 0):
        raise ValueError("expected counts must be positive, one per unit")
    if not 0 < phi <= 1:
        raise ValueError("phi must lie in (0, 1]")
    i, j, _ = g.edge_arrays()
    off = -phi * np.sqrt(E[i] * E[j])
    rows = np.concatenate([np.arange(g.size), i, j])
    cols = np.concatenate([np.arange(g.size), j, i])
    vals = np.concatenate([E, off, off])
    Q = csr_array((vals, (rows, cols)), shape=(g.size, g.size))
    Q.sort_indices()
    return StructureMatrix(Kind.STERN_CRESSIE, Q, g, phi=float(phi))


def conditional_spec(Q: StructureMatrix, i: int) -> ConditionalSpec:
    """Full conditional of unit ``i``: mean weights on neighbours and precision multiplier."""
    M = Q.matrix
    start, stop = M.indptr[i], M.indptr[i + 1]
    cols = M.indices[start:stop]
    vals = M.data[start:stop]
    diag = vals[cols == i]
    off_mask = (cols != i) & (vals != 0)
    if diag.size == 0 or diag[0] == 0 or not off_mask.any():
        raise ValueError(f"unit {i} has no neighbours")
    qii = float(diag[0])
    return ConditionalSpec(
        unit=i,
        neighbors=cols[off_mask].copy(),
        mean_weights=-vals[off_mask] / qii,
        conditional_precision_multiplier=qii,
    )


def partial_correlations(Q: StructureMatrix) -> dict[tuple[int, int], float]:
    """-Q_ij / sqrt(Q_ii Q_jj) for every graph edge."""
    d = Q.matrix.diagonal()
    out = {}
    for (i, j) in Q.graph.edges:
        out[(i, j)] = float(-Q.matrix[i, j] / np.sqrt(d[i] * d[j]))
    return out


def row_sum_diagnostics(Q: StructureMatrix) -> np.ndarray:
    sums = np.asarray(Q.matrix.sum(axis=1)).ravel()
    if Q.kind is Kind.ICAR and np.any(np.abs(sums) >= 1e-12):
        raise AssertionError(f"ICAR row sums not zero: max |sum| = {np.abs(sums).max():.3g}")
    return sums


def null_direction(Q: StructureMatrix, tol: float = 1e-10) -> np.ndarray:
    """Unit-norm null vector(s) of an intrinsic structure matrix.

    Returns shape ``(I,)`` for a connected graph, otherwise ``(k, I)`` with one
    vector per connected component (supported on that component).
    """
    if Q.kind not in INTRINSIC:
        raise ValueError(f"{Q.kind.value} matrices have no structural null space")
    comps = connected_components(Q.graph)
    base = np.ones(Q.dim) if Q.kind is Kind.ICAR else 1.0 / Q.sigma
    vecs = np.zeros((comps.component_count, Q.dim))
    for k in range(comps.component_count):
        mask = comps.component_index == k
        vecs[k, mask] = base[mask]
        vecs[k] /= np.linalg.norm(vecs[k])
    resid = np.abs(Q.matrix @ vecs.T).max() if Q.dim else 0.0
    if resid >= tol:
        raise ArithmeticError(f"null direction check failed: |Qv|_inf = {resid:.3g}")
    return vecs[0] if comps.component_count == 1 else vecs


def constraint_vector(Q: StructureMatrix) -> np.ndarray:
    """Coefficients ``c`` of the identifying constraint ``sum_i c_i theta_i = 0``."""
    if Q.kind is Kind.HOMCAR:
        return Q.sigma.copy()
    return np.ones(Q.dim)


def to_triplets(Q: StructureMatrix) -> str:
    """Sorted ``i,j,value`` rows (0-based indices) of the stored non-zeros."""
    C = Q.matrix.tocoo()
    order = np.lexsort((C.col, C.row))
    lines = [
        f"{int(C.row[k])},{int(C.col[k])},{float(C.data[k])!r}"
        for k in order
        if C.data[k] != 0
    ]
    return "\n".join(lines) + "\n"
