"""Areal adjacency graphs: parsing, validation and basic queries.

Edge files hold one ``id_a,id_b[,weight]`` row per edge; node files hold
``id[,x,y][,E]`` rows. Blank lines and ``#`` comments are ignored. Units are
ordered by first appearance in the node file (or the edge file when no node
file is given).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph, csr_array


class GraphError(ValueError):
    """Raised for malformed or invalid adjacency input."""


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected weighted graph over areal units.

    ``edges`` maps index pairs ``(i, j)`` with ``i < j`` to positive weights.
    ``centroids`` is an ``(I, 2)`` array and ``expected`` an ``(I,)`` array of
    expected counts; both are optional.
    """

    unit_ids: tuple[str, ...]
    edges: dict[tuple[int, int], float]
    centroids: np.ndarray | None = None
    expected: np.ndarray | None = None
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        ids = tuple(str(u) for u in self.unit_ids)
        if len(set(ids)) != len(ids):
            raise GraphError("unit ids must be unique")
        object.__setattr__(self, "unit_ids", ids)
        n = len(ids)
        clean = {}
        for (i, j), w in self.edges.items():
            if i == j:
                raise GraphError(f"self-loop on unit {ids[i]!r}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) out of range")
            w = float(w)
            if not w > 0 or not np.isfinite(w):
                raise GraphError(f"non-positive weight {w} on edge ({ids[i]}, {ids[j]})")
            clean[(min(i, j), max(i, j))] = w
        object.__setattr__(self, "edges", dict(sorted(clean.items())))
        if self.centroids is not None:
            c = np.array(self.centroids, dtype=float).reshape(n, 2)
            c.setflags(write=False)
            object.__setattr__(self, "centroids", c)
        if self.expected is not None:
            e = np.array(self.expected, dtype=float).reshape(n)
            if not np.all(e > 0):
                raise GraphError("expected counts must be positive")
            e.setflags(write=False)
            object.__setattr__(self, "expected", e)
        object.__setattr__(self, "_index", {u: k for k, u in enumerate(ids)})

    @property
    def size(self) -> int:
        return len(self.unit_ids)

    def index(self, unit_id: str) -> int:
        return self._index[unit_id]

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(i, j, w)`` arrays for the stored upper-triangle edges."""
        if not self.edges:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(0)
        pairs = np.array(list(self.edges.keys()), dtype=np.int64)
        weights = np.array(list(self.edges.values()), dtype=float)
        return pairs[:, 0], pairs[:, 1], weights

    def weight_matrix(self) -> csr_array:
        """Symmetric sparse weight matrix W."""
        i, j, w = self.edge_arrays()
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        vals = np.concatenate([w, w])
        return csr_array((vals, (rows, cols)), shape=(self.size, self.size))

    def neighbors(self, i: int) -> np.ndarray:
        W = self.weight_matrix()
        return W.indices[W.indptr[i]:W.indptr[i + 1]].copy()

    def with_expected(self, expected) -> "AdjacencyGraph":
        return AdjacencyGraph(self.unit_ids, self.edges, self.centroids, expected)

    def permuted(self, order) -> "AdjacencyGraph":
        """Relabel units so that new unit ``k`` is old unit ``order[k]``."""
        order = np.asarray(order)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        edges = {(int(inverse[i]), int(inverse[j])): w for (i, j), w in self.edges.items()}
        return AdjacencyGraph(
            tuple(self.unit_ids[k] for k in order),
            edges,
            None if self.centroids is None else self.centroids[order],
            None if self.expected is None else self.expected[order],
        )

    def __eq__(self, other):
        if not isinstance(other, AdjacencyGraph):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.edges == other.edges
            and _optional_equal(self.centroids, other.centroids)
            and _optional_equal(self.expected, other.expected)
        )

    __hash__ = None


def _optional_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return bool(np.array_equal(a, b))


@dataclass(frozen=True)
class ComponentPartition:
    component_index: np.ndarray
    component_count: int


def _rows(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        yield lineno, [f.strip() for f in line.split(",")]


def _number(token: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise GraphError(f"line {lineno}: cannot parse number {token!r}") from None


def parse_graph(edge_text: str, node_text: str | None = None) -> AdjacencyGraph:
    """Build a validated graph from edge (and optional node) text.

    Examples
    --------
    >>> g = parse_graph("a,b\\nb,c")
    >>> g.unit_ids, g.edges
    (('a', 'b', 'c'), {(0, 1): 1.0, (1, 2): 1.0})
    """
    ids: list[str] = []
    index: dict[str, int] = {}
    centroids, expected = [], []
    if node_text is not None:
        for lineno, fields in _rows(node_text):
            uid = fields[0]
            if uid in index:
                raise GraphError(f"line {lineno}: duplicate unit id {uid!r}")
            nums = [_number(t, lineno) for t in fields[1:]]
            if len(nums) == 0:
                xy, e = None, None
            elif len(nums) == 1:
                xy, e = None, nums[0]
            elif len(nums) == 2:
                xy, e = nums, None
            elif len(nums) == 3:
                xy, e = nums[:2], nums[2]
            else:
                raise GraphError(f"line {lineno}: too many fields")
            if e is not None and not e > 0:
                raise GraphError(f"line {lineno}: expected count must be positive, got {e}")
            index[uid] = len(ids)
            ids.append(uid)
            centroids.append(xy)
            expected.append(e)

    edges: dict[tuple[int, int], float] = {}
    for lineno, fields in _rows(edge_text):
        if len(fields) not in (2, 3):
            raise GraphError(f"line {lineno}: expected 'id_a,id_b[,weight]'")
        a, b = fields[0], fields[1]
        w = _number(fields[2], lineno) if len(fields) == 3 else 1.0
        if a == b:
            raise GraphError(f"line {lineno}: self-loop on {a!r}")
        if not w > 0:
            raise GraphError(f"line {lineno}: non-positive weight {w}")
        for uid in (a, b):
            if uid not in index:
                if node_text is not None:
                    raise GraphError(f"line {lineno}: unknown unit id {uid!r}")
                index[uid] = len(ids)
                ids.append(uid)
        i, j = sorted((index[a], index[b]))
        if (i, j) in edges and edges[(i, j)] != w:
            raise GraphError(
                f"line {lineno}: conflicting weights for edge ({a}, {b}): {edges[(i, j)]} vs {w}"
            )
        edges[(i, j)] = w

    cent = None
    if centroids and any(c is not None for c in centroids):
        if any(c is None for c in centroids):
            raise GraphError("centroids must be given for all units or none")
        cent = np.array(centroids, dtype=float)
    exp = None
    if expected and any(e is not None for e in expected):
        if any(e is None for e in expected):
            raise GraphError("expected counts must be given for all units or none")
        exp = np.array(expected, dtype=float)
    return AdjacencyGraph(tuple(ids), edges, cent, exp)


def read_graph(edge_path, node_path=None) -> AdjacencyGraph:
    with open(edge_path) as fh:
        edge_text = fh.read()
    node_text = None
    if node_path is not None:
        with open(node_path) as fh:
            node_text = fh.read()
    return parse_graph(edge_text, node_text)


def serialize_graph(g: AdjacencyGraph) -> tuple[str, str]:
    """Return ``(edge_text, node_text)`` that :func:`parse_graph` reads back."""
    edge_lines = [
        f"{g.unit_ids[i]},{g.unit_ids[j]},{w!r}" for (i, j), w in g.edges.items()
    ]
    node_lines = []
    for k, uid in enumerate(g.unit_ids):
        parts = [uid]
        if g.centroids is not None:
            parts += [repr(float(g.centroids[k, 0])), repr(float(g.centroids[k, 1]))]
        if g.expected is not None:
            parts.append(repr(float(g.expected[k])))
        node_lines.append(",".join(parts))
    return "\n".join(edge_lines) + "\n", "\n".join(node_lines) + "\n"


def lattice_graph(rows: int, cols: int) -> AdjacencyGraph:
    """Rook-adjacency grid with unit spacing and centroids at grid points.

    Unit ``r{row}c{col}`` sits at ``(col, row)``; ordering is row-major.
    """
    if rows < 1 or cols < 1:
        raise GraphError("lattice dimensions must be positive")
    ids = tuple(f"r{r}c{c}" for r in range(rows) for c in range(cols))
    edges = {}
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges[(k, k + 1)] = 1.0
            if r + 1 < rows:
                edges[(k, k + cols)] = 1.0
    cent = np.array([(c, r) for r in range(rows) for c in range(cols)], dtype=float)
    return AdjacencyGraph(ids, edges, cent)


def parse_lattice_spec(spec: str) -> tuple[int, int]:
    try:
        r, c = spec.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise GraphError(f"lattice spec must look like 'RxC', got {spec!r}") from None


def connected_components(g: AdjacencyGraph) -> ComponentPartition:
    count, labels = csgraph.connected_components(g.weight_matrix(), directed=False)
    return ComponentPartition(labels.astype(np.int64), int(count))


def is_connected(g: AdjacencyGraph) -> bool:
    return connected_components(g).component_count == 1


def neighbor_counts(g: AdjacencyGraph) -> np.ndarray:
    i, j, _ = g.edge_arrays()
    return np.bincount(np.concatenate([i, j]), minlength=g.size).astype(np.int64)


def weighted_degrees(g: AdjacencyGraph) -> np.ndarray:
    i, j, w = g.edge_arrays()
    return np.bincount(np.concatenate([i, j]), weights=np.concatenate([w, w]), minlength=g.size)


def centroid_distances(g: AdjacencyGraph) -> np.ndarray:
    if g.centroids is None:
        raise GraphError("graph has no centroids")
    diff = g.centroids[:, None, :] - g.centroids[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def distance_quantile(d: np.ndarray, q: float) -> float:
    """Type-7 (linear interpolation) quantile of the pairwise distances.

    ``d`` is either a square distance matrix, whose upper triangle is used, or
    a 1-d sample of pairwise distances (condensed form).
    """
    d = np.asarray(d, dtype=float)
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if d.ndim == 1:
        if d.size == 0:
            raise ValueError("need at least one distance")
        return float(np.quantile(d, q, method="linear"))
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError("distance matrix must be square")
    if d.shape[0] < 2:
        raise ValueError("need at least two units")
    upper = d[np.triu_indices(d.shape[0], k=1)]
    return float(np.quantile(upper, q, method="linear"))


def graph_eccentricity(g: AdjacencyGraph) -> np.ndarray:
    if not is_connected(g):
        raise GraphError("eccentricity requires a connected graph")
    hops = csgraph.shortest_path(g.weight_matrix(), directed=False, unweighted=True)
    return hops.max(axis=1).astype(np.int64)


def graph_summary(g: AdjacencyGraph) -> str:
    """Stable JSON summary document used for golden-file comparisons."""
    n = neighbor_counts(g)
    comps = connected_components(g)
    doc = {
        "units": g.size,
        "edges": len(g.edges),
        "components": comps.component_count,
        "has_centroids": g.centroids is not None,
        "has_expected": g.expected is not None,
        "neighbors": {"min": int(n.min()) if g.size else 0,
                      "max": int(n.max()) if g.size else 0,
                      "mean": float(n.mean()) if g.size else 0.0},
        "total_weight": float(sum(g.edges.values())),
    }
    if comps.component_count == 1 and g.size > 0:
        ecc = graph_eccentricity(g)
        doc["eccentricity"] = {"min": int(ecc.min()), "max": int(ecc.max())}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"
