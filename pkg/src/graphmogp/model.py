"""Multi-output datasets, covariance assembly, posterior prediction, metrics.

Stacking order everywhere is vertex-major: all rows of vertex 0, then all
rows of vertex 1, and so on, keeping the sample order within a vertex.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, InputError, StaleCache
from .graph import Graph
from .kernels import MogpKernelSpec, kernel_to_dict, mogp_gram
from .numerics import CholFactor, cholesky, logdet, solve_chol

LOG_2PI = math.log(2.0 * math.pi)


def _stack(blocks, dim):
    xs, vs = [], []
    for m, x in enumerate(blocks):
        xs.append(x)
        vs.append(np.full(x.shape[0], m, dtype=int))
    if not xs:
        return np.zeros((0, dim)), np.zeros(0, dtype=int)
    return np.vstack(xs), np.concatenate(vs)


def _as_block(x, dim=None):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if dim in (None, 1) or x.size == 0 else x.reshape(-1, dim)
    if x.size == 0:
        x = x.reshape(0, dim if dim is not None else (x.shape[1] if x.ndim == 2 else 1))
    return x


@dataclass(frozen=True, eq=False)
class MultiDataset:
    """Training data: one ``(X_m, y_m)`` block per vertex.

    Blocks may be empty (``N_m = 0``). ``x`` / ``vertex`` / ``y`` are the
    vertex-major stacked views used by the covariance code.
    """

    inputs: tuple[np.ndarray, ...]
    outputs: tuple[np.ndarray, ...]
    x: np.ndarray = field(init=False, repr=False)
    vertex: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.inputs) != len(self.outputs):
            raise DimensionMismatch("need one output block per input block")
        dims = {np.asarray(x).shape[1] for x in self.inputs if np.ndim(x) == 2 and np.asarray(x).shape[0]}
        dims |= {1 for x in self.inputs if np.ndim(x) == 1 and np.size(x)}
        if len(dims) > 1:
            raise DimensionMismatch(f"input dimension differs across vertices: {sorted(dims)}")
        dim = dims.pop() if dims else 1
        xs = tuple(_as_block(x, dim) for x in self.inputs)
        ys = tuple(np.asarray(y, dtype=float).reshape(-1) for y in self.outputs)
        for m, (x, y) in enumerate(zip(xs, ys)):
            if x.shape[0] != y.shape[0]:
                raise DimensionMismatch(f"vertex {m}: {x.shape[0]} inputs but {y.shape[0]} outputs")
        x_all, v_all = _stack(xs, dim)
        object.__setattr__(self, "inputs", xs)
        object.__setattr__(self, "outputs", ys)
        object.__setattr__(self, "x", x_all)
        object.__setattr__(self, "vertex", v_all)
        object.__setattr__(self, "y", np.concatenate(ys) if ys else np.zeros(0))

    @classmethod
    def from_blocks(cls, blocks) -> "MultiDataset":
        blocks = list(blocks)
        return cls(tuple(b[0] for b in blocks), tuple(b[1] for b in blocks))

    @classmethod
    def from_stacked(cls, x, vertex, y, num_vertices: int) -> "MultiDataset":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        vertex = np.asarray(vertex, dtype=int)
        y = np.asarray(y, dtype=float)
        if vertex.size and (vertex.min() < 0 or vertex.max() >= num_vertices):
            raise InputError(f"vertex ids must lie in [0, {num_vertices})")
        return cls(
            tuple(x[vertex == m] for m in range(num_vertices)),
            tuple(y[vertex == m] for m in range(num_vertices)),
        )

    @property
    def num_vertices(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def counts(self) -> list[int]:
        return [x.shape[0] for x in self.inputs]

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def isotopic(self) -> bool:
        first = self.inputs[0]
        return all(x.shape == first.shape and np.array_equal(x, first) for x in self.inputs[1:])

    @property
    def symmetric(self) -> bool:
        return len(set(self.counts)) <= 1

    def restrict(self, vertices) -> "MultiDataset":
        """Keep the data of ``vertices`` only; other blocks become empty."""
        keep = set(int(v) for v in vertices)
        d = self.dim
        return MultiDataset(
            tuple(x if m in keep else np.zeros((0, d)) for m, x in enumerate(self.inputs)),
            tuple(y if m in keep else np.zeros(0) for m, y in enumerate(self.outputs)),
        )


@dataclass(frozen=True, eq=False)
class TestQuery:
    """Test inputs for a subset of vertices, in subset order."""

    __test__ = False  # keep pytest from collecting this class

    vertices: tuple[int, ...]
    inputs: tuple[np.ndarray, ...]
    x: np.ndarray = field(init=False, repr=False)
    vertex: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        verts = tuple(int(v) for v in self.vertices)
        if len(set(verts)) != len(verts):
            raise InputError("query vertices must be distinct")
        if len(verts) != len(self.inputs):
            raise DimensionMismatch("need one input block per query vertex")
        dims = {_as_block(x).shape[1] for x in self.inputs if np.size(x)}
        if len(dims) > 1:
            raise DimensionMismatch("query input dimension differs across vertices")
        dim = dims.pop() if dims else 1
        xs = tuple(_as_block(x, dim) for x in self.inputs)
        vs = [np.full(x.shape[0], v, dtype=int) for v, x in zip(verts, xs)]
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "inputs", xs)
        object.__setattr__(self, "x", np.vstack(xs) if xs else np.zeros((0, dim)))
        object.__setattr__(self, "vertex", np.concatenate(vs) if vs else np.zeros(0, dtype=int))
        if self.x.shape[0] < 1:
            raise InputError("a test query needs at least one point")

    @classmethod
    def full(cls, blocks) -> "TestQuery":
        blocks = list(blocks)
        return cls(tuple(range(len(blocks))), tuple(blocks))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def t(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class NoiseModel:
    """Per-vertex observation noise variances."""

    variances: tuple[float, ...]
    shared: bool = True

    def __post_init__(self):
        v = tuple(float(x) for x in self.variances)
        # zero is allowed for noise-free evaluation; training needs > 0
        if not v or any(not x >= 0 for x in v):
            raise InputError("noise variances must be nonnegative")
        if self.shared and len(set(v)) != 1:
            raise InputError("shared noise model needs equal variances")
        object.__setattr__(self, "variances", v)

    @classmethod
    def shared_variance(cls, sigma2: float, num_vertices: int) -> "NoiseModel":
        return cls((float(sigma2),) * num_vertices, shared=True)

    def per_row(self, vertex) -> np.ndarray:
        return np.asarray(self.variances)[np.asarray(vertex, dtype=int)]


def assemble_covariance(spec: MogpKernelSpec, g: Graph, data_a, data_b=None) -> np.ndarray:
    """Block covariance between two stacked data sets (datasets or queries)."""
    if data_b is None:
        data_b = data_a
    if data_a.dim != data_b.dim and data_a.x.size and data_b.x.size:
        raise DimensionMismatch(f"input dimensions differ: {data_a.dim} vs {data_b.dim}")
    k = mogp_gram(spec, g, data_a.x, data_a.vertex, data_b.x, data_b.vertex)
    if data_a is data_b:
        k = 0.5 * (k + k.T)
    return k


def _check_graph(data, g: Graph):
    if data.num_vertices != g.num_vertices:
        raise DimensionMismatch(
            f"dataset has {data.num_vertices} vertex blocks, graph has {g.num_vertices} vertices"
        )


def training_factor(spec, g, data: MultiDataset, noise: NoiseModel) -> CholFactor:
    _check_graph(data, g)
    k = assemble_covariance(spec, g, data)
    k[np.diag_indices_from(k)] += noise.per_row(data.vertex)
    return cholesky(k)


def log_marginal_likelihood(spec, g: Graph, data: MultiDataset, noise: NoiseModel) -> float:
    """Gaussian log-evidence of the training outputs, constant included."""
    if data.n < 1:
        raise InputError("log marginal likelihood needs at least one observation")
    factor = training_factor(spec, g, data, noise)
    alpha = solve_chol(factor, data.y)
    return float(-0.5 * (data.y @ alpha + logdet(factor) + data.n * LOG_2PI))


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    cov_latent: np.ndarray
    cov_observed: np.ndarray
    vertex: np.ndarray

    @property
    def var_latent(self) -> np.ndarray:
        return np.diag(self.cov_latent).copy()

    @property
    def var_observed(self) -> np.ndarray:
        return np.diag(self.cov_observed).copy()

    def to_dict(self, include_cov: bool = False) -> dict:
        out = {
            "mean": self.mean.tolist(),
            "var_latent": self.var_latent.tolist(),
            "var_observed": self.var_observed.tolist(),
            "vertex": self.vertex.tolist(),
            "ordering": "vertex-major",
        }
        if include_cov:
            out["cov"] = self.cov_observed.tolist()
        return out


def _fingerprint(spec, noise) -> str:
    payload = repr((sorted(kernel_to_dict(spec).items(), key=str), noise.variances))
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class FittedModel:
    """Hyperparameters plus the cached training factor and weight vector."""

    spec: MogpKernelSpec
    noise: NoiseModel
    data: MultiDataset
    graph: Graph
    factor: CholFactor
    weights: np.ndarray
    fingerprint: str
    log_likelihood: float = float("nan")
    trace: tuple = ()
    params: object = None

    @classmethod
    def build(cls, spec, noise: NoiseModel, data: MultiDataset, g: Graph) -> "FittedModel":
        factor = training_factor(spec, g, data, noise)
        weights = solve_chol(factor, data.y)
        lml = float(-0.5 * (data.y @ weights + logdet(factor) + data.n * LOG_2PI))
        return cls(spec, noise, data, g, factor, weights, _fingerprint(spec, noise), lml)


def predict(model: FittedModel, query: TestQuery) -> Prediction:
    """Posterior over the query rows given all training data.

    The query may cover any subset of vertices; conditioning always uses
    the full training set.
    """
    if _fingerprint(model.spec, model.noise) != model.fingerprint:
        raise StaleCache("model hyperparameters changed since its cache was built")
    if query.dim != model.data.dim:
        raise DimensionMismatch(f"query has D={query.dim}, model was trained with D={model.data.dim}")
    g = model.graph
    for v in query.vertices:
        if not 0 <= v < g.num_vertices:
            raise InputError(f"query vertex {v} outside graph of size {g.num_vertices}")
    k_star = assemble_covariance(model.spec, g, query, model.data)
    k_ss = assemble_covariance(model.spec, g, query)
    mean = k_star @ model.weights
    if model.data.n:
        w = solve_triangular(model.factor.lower, k_star.T, lower=True, check_finite=False)
        cov = k_ss - w.T @ w
    else:
        cov = k_ss.copy()
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov).copy()
    diag[(diag < 0) & (diag >= -1e-8)] = 0.0
    cov[np.diag_indices_from(cov)] = diag
    obs = cov.copy()
    obs[np.diag_indices_from(obs)] += model.noise.per_row(query.vertex)
    return Prediction(mean, cov, obs, query.vertex.copy())


def mse(y_true, mean) -> float:
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    mean = np.asarray(mean, dtype=float).reshape(-1)
    if y_true.shape != mean.shape:
        raise DimensionMismatch(f"{y_true.size} targets vs {mean.size} predictions")
    return float(np.mean((y_true - mean) ** 2))


def predictive_log_likelihood(y_true, pred: Prediction, use_observed: bool = True) -> float:
    """Gaussian log-density of ``y_true`` under the predictive distribution."""
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    if y_true.shape != pred.mean.shape:
        raise DimensionMismatch(f"{y_true.size} targets vs {pred.mean.size} predictions")
    cov = pred.cov_observed if use_observed else pred.cov_latent
    factor = cholesky(cov)
    r = y_true - pred.mean
    return float(-0.5 * (r @ solve_chol(factor, r) + logdet(factor) + r.size * LOG_2PI))
