"""Undirected graphs, Laplacians, induced subgraphs and graph generators."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import GenerationFailure, InfeasibleDegree, InputError, ParseError
from .numerics import EigDecomp, sym_eig


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph on vertices ``0..num_vertices-1``.

    Edges are stored as sorted ``(i, j)`` pairs with ``i < j``. Derived
    matrices and their eigendecompositions are computed lazily and cached on
    the instance, which is otherwise immutable.
    """

    num_vertices: int
    edges: tuple[tuple[int, int], ...] = ()
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        m = int(self.num_vertices)
        if m < 0:
            raise InputError("num_vertices must be nonnegative")
        canon = []
        seen = set()
        for k, (i, j) in enumerate(self.edges):
            i, j = int(i), int(j)
            if not (0 <= i < m and 0 <= j < m):
                raise ParseError(f"edge {k} ({i}, {j}) has a vertex index outside [0, {m})")
            if i == j:
                raise ParseError(f"edge {k} ({i}, {j}) is a self-loop")
            e = (min(i, j), max(i, j))
            if e in seen:
                raise ParseError(f"edge {k} ({i}, {j}) is a duplicate")
            seen.add(e)
            canon.append(e)
        object.__setattr__(self, "num_vertices", m)
        object.__setattr__(self, "edges", tuple(canon))
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != len(canon):
                raise ParseError("weights must be parallel to edges")
            for k, x in enumerate(w):
                if not x > 0:
                    raise ParseError(f"edge {k} has nonpositive weight {x}")
            object.__setattr__(self, "weights", w)

    @property
    def edge_weights(self) -> tuple[float, ...]:
        return self.weights if self.weights is not None else (1.0,) * len(self.edges)

    @cached_property
    def adjacency(self) -> np.ndarray:
        return adjacency(self)

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @cached_property
    def laplacian(self) -> np.ndarray:
        return laplacian(self, normalized=False)

    @cached_property
    def normalized_laplacian(self) -> np.ndarray:
        return laplacian(self, normalized=True)

    @cached_property
    def laplacian_eig(self) -> EigDecomp:
        return sym_eig(self.laplacian)

    @cached_property
    def normalized_laplacian_eig(self) -> EigDecomp:
        return sym_eig(self.normalized_laplacian)

    def spectrum(self, normalized: bool) -> EigDecomp:
        return self.normalized_laplacian_eig if normalized else self.laplacian_eig

    def neighbors(self, v: int) -> list[int]:
        return [int(u) for u in np.flatnonzero(self.adjacency[v])]

    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.edges)

    def to_dict(self) -> dict:
        out = {"num_vertices": self.num_vertices, "edges": [list(e) for e in self.edges]}
        if self.weights is not None:
            out["weights"] = list(self.weights)
        return out


def adjacency(g: Graph) -> np.ndarray:
    a = np.zeros((g.num_vertices, g.num_vertices))
    for (i, j), w in zip(g.edges, g.edge_weights):
        a[i, j] = a[j, i] = w
    return a


def laplacian(g: Graph, normalized: bool = False) -> np.ndarray:
    """``D - A``, or ``D^{-1/2} (D - A) D^{-1/2}`` when ``normalized``.

    Isolated vertices get a zero row and column in the normalized form.
    """
    a = adjacency(g)
    d = a.sum(axis=1)
    lap = np.diag(d) - a
    if not normalized:
        return lap
    inv_sqrt = np.zeros_like(d)
    nz = d > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(d[nz])
    return inv_sqrt[:, None] * lap * inv_sqrt[None, :]


def induced_subgraph(g: Graph, vertices) -> Graph:
    """Subgraph on ``vertices``, re-indexed in the given order."""
    vertices = [int(v) for v in vertices]
    if len(set(vertices)) != len(vertices):
        raise InputError("vertex subset contains duplicates")
    for v in vertices:
        if not 0 <= v < g.num_vertices:
            raise InputError(f"vertex {v} outside graph of size {g.num_vertices}")
    pos = {v: k for k, v in enumerate(vertices)}
    edges, weights = [], []
    for (i, j), w in zip(g.edges, g.edge_weights):
        if i in pos and j in pos:
            edges.append((pos[i], pos[j]))
            weights.append(w)
    return Graph(len(vertices), tuple(edges), tuple(weights) if g.weights is not None else None)


def random_k_regular(m: int, k: int, seed: int = 0, max_restarts: int = 100) -> Graph:
    """Random simple k-regular graph from the pairing (configuration) model.

    Stubs are paired one pair at a time; a pair that would create a
    self-loop or a repeated edge is rejected and redrawn. When no valid pair
    is left the whole pairing restarts. Dense requests (``k > (m-1)/2``) are
    generated as the complement of an ``(m-1-k)``-regular graph.
    """
    if k < 0 or k >= m or (m * k) % 2:
        raise InfeasibleDegree(f"no simple {k}-regular graph on {m} vertices")
    rng = np.random.default_rng(seed)
    complement = k > (m - 1) / 2
    kk = m - 1 - k if complement else k
    for _ in range(max_restarts):
        edges = _pair_stubs(m, kk, rng)
        if edges is None:
            continue
        if complement:
            edges = {(i, j) for i in range(m) for j in range(i + 1, m)} - edges
        return Graph(m, tuple(sorted(edges)))
    raise GenerationFailure(f"pairing model failed {max_restarts} times for m={m}, k={k}")


def _pair_stubs(m: int, k: int, rng) -> set[tuple[int, int]] | None:
    left = np.full(m, k)
    edges: set[tuple[int, int]] = set()
    total = m * k
    while total:
        # rejection sampling of a stub pair; fall back to an exhaustive check
        for _ in range(50):
            i, j = rng.choice(m, size=2, p=left / total)
            e = (min(i, j), max(i, j))
            if i != j and e not in edges and left[i] > 0 and left[j] > 0:
                break
        else:
            open_v = np.flatnonzero(left)
            cands = [
                (int(a), int(b))
                for x, a in enumerate(open_v)
                for b in open_v[x + 1 :]
                if (int(a), int(b)) not in edges
            ]
            if not cands:
                return None
            w = np.array([left[a] * left[b] for a, b in cands], dtype=float)
            e = cands[int(rng.choice(len(cands), p=w / w.sum()))]
        edges.add((int(e[0]), int(e[1])))
        left[e[0]] -= 1
        left[e[1]] -= 1
        total -= 2
    return edges


def knn_graph(points, k: int) -> Graph:
    """Symmetrized k-nearest-neighbour graph (union rule, ties to lower index)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    m = pts.shape[0]
    if not 0 < k < m:
        raise InputError(f"k-NN needs 0 < k < M, got k={k}, M={m}")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    edges = set()
    for i in range(m):
        cand = [j for j in range(m) if j != i]
        cand.sort(key=lambda j: (dist[i, j], j))
        for j in cand[:k]:
            edges.add((min(i, j), max(i, j)))
    return Graph(m, tuple(sorted(edges)))


def load_graph(path) -> Graph:
    """Read the ``{"num_vertices", "edges", "weights"?}`` JSON format."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read graph file {path}: {exc}") from exc
    return graph_from_dict(raw)


def graph_from_dict(raw) -> Graph:
    if not isinstance(raw, dict) or "num_vertices" not in raw or "edges" not in raw:
        raise ParseError("graph JSON needs 'num_vertices' and 'edges'")
    extra = set(raw) - {"num_vertices", "edges", "weights"}
    if extra:
        raise ParseError(f"unknown graph fields: {sorted(extra)}")
    m = raw["num_vertices"]
    if not isinstance(m, int) or isinstance(m, bool) or m < 0:
        raise ParseError("num_vertices must be a nonnegative integer")
    edges = []
    for k, e in enumerate(raw["edges"]):
        if (
            not isinstance(e, (list, tuple))
            or len(e) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in e)
        ):
            raise ParseError(f"edge {k} ({e!r}) is not a pair of integer indices")
        edges.append(tuple(e))
    weights = raw.get("weights")
    return Graph(m, tuple(edges), tuple(weights) if weights is not None else None)


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict()) + "\n")
