"""Data kernels, graph kernels and composite multi-output kernels.

A composite kernel spec is an immutable tree. Every node can list its
hyperparameters (:meth:`hyperparameters`) and rebuild itself from a flat
list of values (:meth:`with_values`); the training module relies on the two
orders being identical.

Graph kernels that are functions of a Laplacian are evaluated through the
cached eigendecomposition of that Laplacian, which also makes their
hyperparameter derivatives exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatch, InputError, NonpositivePEntry, ParseError
from .graph import Graph

DATA_FAMILIES = ("se", "matern")
MATERN_NUS = (0.5, 1.5, 2.5)
GRAPH_FAMILIES = (
    "laplacian",
    "global_filtering",
    "local_averaging",
    "regularized_laplacian",
    "diffusion",
    "random_walk",
    "cosine",
    "graph_matern",
    "polynomial",
    "icm",
)
# "degree" is only meaningful as the bandwidth term of a graph PC kernel
PC_BANDWIDTH_FAMILIES = GRAPH_FAMILIES + ("degree",)

ALPHA_FAMILIES = (
    "global_filtering",
    "local_averaging",
    "regularized_laplacian",
    "diffusion",
    "random_walk",
    "graph_matern",
)


@dataclass(frozen=True)
class Hyper:
    """One scalar hyperparameter with the constraint it must satisfy.

    ``transform`` is ``"log"`` (value > 0), ``"softplus"`` (value > shift)
    or ``"identity"``.
    """

    name: str
    value: float | None
    transform: str = "log"
    shift: float = 0.0


# ---------------------------------------------------------------------------
# data kernels


@dataclass(frozen=True)
class DataKernelSpec:
    family: str = "se"
    v2: float | None = None
    ell: float | None = None
    nu: float = 0.5

    def __post_init__(self):
        if self.family not in DATA_FAMILIES:
            raise InputError(f"unknown data kernel family {self.family!r}")
        if self.family == "matern" and float(self.nu) not in MATERN_NUS:
            raise InputError(f"Matern nu must be one of {MATERN_NUS}, got {self.nu}")
        for name in ("v2", "ell"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise InputError(f"data kernel {name} must be positive, got {val}")

    @property
    def is_complete(self) -> bool:
        return self.v2 is not None and self.ell is not None

    def hyperparameters(self, g: Graph | None = None) -> list[Hyper]:
        return [Hyper("v2", self.v2), Hyper("ell", self.ell)]

    def with_values(self, values, g: Graph | None = None) -> "DataKernelSpec":
        v2, ell = values
        return replace(self, v2=float(v2), ell=float(ell))

    @property
    def label(self) -> str:
        return "se" if self.family == "se" else f"matern{self.nu}"


def _require_complete(spec):
    if not spec.is_complete:
        raise InputError(f"{type(spec).__name__} has unset hyperparameters; initialize it first")


def data_gram(spec: DataKernelSpec, xa, xb, grad: bool = False):
    """Gram matrix ``[k(a_i, b_j)]``; with ``grad`` also ``[dK/dv2, dK/dell]``."""
    _require_complete(spec)
    xa = np.atleast_2d(np.asarray(xa, dtype=float))
    xb = np.atleast_2d(np.asarray(xb, dtype=float))
    if xa.shape[1] != xb.shape[1]:
        raise DimensionMismatch(f"input dimensions differ: {xa.shape[1]} vs {xb.shape[1]}")
    v2, ell = spec.v2, spec.ell
    if xa.shape[0] == 0 or xb.shape[0] == 0:
        r2 = np.zeros((xa.shape[0], xb.shape[0]))
    else:
        r2 = cdist(xa, xb, "sqeuclidean")
    if spec.family == "se":
        # exp(-r^2 / (2 ell)): ell multiplies r^2 directly, it is not squared
        base = np.exp(-r2 / (2.0 * ell))
        if grad:
            dbase = base * r2 / (2.0 * ell * ell)
    else:
        r = np.sqrt(r2)
        if spec.nu == 0.5:
            base = np.exp(-r / ell)
            if grad:
                dbase = base * r / (ell * ell)
        elif spec.nu == 1.5:
            a = math.sqrt(3.0) * r / ell
            e = np.exp(-a)
            base = (1.0 + a) * e
            if grad:
                dbase = a * a * e / ell
        else:
            a = math.sqrt(5.0) * r / ell
            e = np.exp(-a)
            base = (1.0 + a + a * a / 3.0) * e
            if grad:
                dbase = a * a * (1.0 + a) * e / (3.0 * ell)
    k = v2 * base
    if not grad:
        return k
    return k, [base, v2 * dbase]


def data_kernel(spec: DataKernelSpec, x, xp) -> float:
    """Scalar data kernel ``k(x, x')``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape:
        raise DimensionMismatch(f"input dimensions differ: {x.shape} vs {xp.shape}")
    return float(data_gram(spec, x[None, :], xp[None, :])[0, 0])


# ---------------------------------------------------------------------------
# graph kernels


@dataclass(frozen=True)
class GraphKernelSpec:
    """Graph kernel over the vertices of a graph.

    ``steps`` is the walk length of ``random_walk``; ``nu`` the order of
    ``graph_matern`` and ``laplacian`` its Laplacian choice; ``degree`` the
    polynomial order of ``polynomial`` (``betas`` has ``degree + 1``
    entries); ``w`` and ``kappa`` the rank-1 ICM vectors.
    """

    family: str
    alpha: float | None = None
    steps: int = 1
    nu: int = 2
    laplacian: str = "unnormalized"
    degree: int = 2
    betas: tuple[float, ...] | None = None
    w: tuple[float, ...] | None = None
    kappa: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.family not in PC_BANDWIDTH_FAMILIES:
            raise InputError(f"unknown graph kernel family {self.family!r}")
        # alpha = 0 is a valid limit (identity-like kernels) except where alpha divides
        if self.alpha is not None and not (self.alpha > 0 or (self.alpha == 0 and self.family != "graph_matern")):
            raise InputError(f"alpha must be positive, got {self.alpha}")
        if self.laplacian not in ("normalized", "unnormalized"):
            raise InputError("laplacian must be 'normalized' or 'unnormalized'")
        if self.family == "random_walk" and int(self.steps) < 1:
            raise InputError("random walk needs steps >= 1")
        if self.family == "graph_matern" and int(self.nu) < 1:
            raise InputError("graph Matern needs an integer nu >= 1")
        if self.family == "polynomial":
            if int(self.degree) < 0:
                raise InputError("polynomial degree must be >= 0")
            if self.betas is not None and len(self.betas) != int(self.degree) + 1:
                raise InputError(f"polynomial of degree {self.degree} needs {self.degree + 1} betas")
        if self.kappa is not None and any(k < 0 for k in self.kappa):
            raise InputError("ICM kappa entries must be nonnegative")
        for name in ("betas", "w", "kappa"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(x) for x in val))

    @property
    def is_complete(self) -> bool:
        if self.family in ALPHA_FAMILIES:
            return self.alpha is not None
        if self.family == "polynomial":
            return self.betas is not None
        if self.family == "icm":
            return self.w is not None and self.kappa is not None
        return True

    def num_params(self, num_vertices: int) -> int:
        if self.family in ALPHA_FAMILIES:
            return 1
        if self.family == "polynomial":
            return int(self.degree) + 1
        if self.family == "icm":
            return 2 * num_vertices
        return 0

    def hyperparameters(self, g: Graph) -> list[Hyper]:
        f = self.family
        if f == "random_walk":
            return [Hyper("alpha", self.alpha, "softplus", lambda_max(g, normalized=True))]
        if f in ALPHA_FAMILIES:
            return [Hyper("alpha", self.alpha)]
        if f == "polynomial":
            betas = self.betas or (None,) * (int(self.degree) + 1)
            return [Hyper(f"beta{i}", b, "identity") for i, b in enumerate(betas)]
        if f == "icm":
            m = g.num_vertices
            w = self.w or (None,) * m
            kappa = self.kappa or (None,) * m
            return [Hyper(f"w{i}", x, "identity") for i, x in enumerate(w)] + [
                Hyper(f"kappa{i}", x) for i, x in enumerate(kappa)
            ]
        return []

    def with_values(self, values, g: Graph | None = None) -> "GraphKernelSpec":
        values = [float(v) for v in values]
        f = self.family
        if f in ALPHA_FAMILIES:
            return replace(self, alpha=values[0])
        if f == "polynomial":
            return replace(self, betas=tuple(values))
        if f == "icm":
            m = len(values) // 2
            return replace(self, w=tuple(values[:m]), kappa=tuple(values[m:]))
        return self

    @property
    def label(self) -> str:
        f = self.family
        if f == "random_walk":
            return f"{self.steps}-step random walk"
        if f == "graph_matern":
            return f"graph matern-{self.nu}"
        if f == "polynomial":
            return f"polynomial-{self.degree}"
        return f.replace("_", " ")


def lambda_max(g: Graph, normalized: bool) -> float:
    vals = g.spectrum(normalized).values
    return float(vals[-1]) if vals.size else 0.0


def graph_kernel_matrix(spec: GraphKernelSpec, g: Graph) -> np.ndarray:
    """``K_G`` for ``spec`` on ``g`` (``B`` or ``C C^T`` depending on the family)."""
    return _graph_kernel_cached(spec, g)[0]


def graph_kernel_grads(spec: GraphKernelSpec, g: Graph):
    """``K_G`` and its derivatives w.r.t. each entry of ``spec.hyperparameters(g)``."""
    return _graph_kernel_cached(spec, g)


@lru_cache(maxsize=512)
def _graph_kernel_cached(spec: GraphKernelSpec, g: Graph):
    k, grads = _graph_kernel(spec, g)
    k.setflags(write=False)
    for d in grads:
        d.setflags(write=False)
    return k, tuple(grads)


def _check_icm(spec, m):
    if len(spec.w) != m or len(spec.kappa) != m:
        raise InputError(f"ICM vectors must have length {m}")


def _graph_kernel(spec: GraphKernelSpec, g: Graph):
    _require_complete(spec)
    f = spec.family
    m = g.num_vertices
    if f == "icm":
        _check_icm(spec, m)
        w = np.asarray(spec.w)
        k = np.outer(w, w) + np.diag(spec.kappa)
        grads = []
        for i in range(m):
            d = np.zeros((m, m))
            d[i, :] += w
            d[:, i] += w
            grads.append(d)
        for i in range(m):
            d = np.zeros((m, m))
            d[i, i] = 1.0
            grads.append(d)
        return k, grads
    if f == "local_averaging":
        a = g.adjacency
        deg = g.degrees
        alpha = spec.alpha
        e = 1.0 / (1.0 + alpha * deg)
        ia = np.eye(m) + alpha * a
        c = e[:, None] * ia
        dc = -(e * e * deg)[:, None] * ia + e[:, None] * a
        k = c @ c.T
        dk = dc @ c.T + c @ dc.T
        return _sym(k), [_sym(dk)]
    if f == "degree":
        raise InputError("'degree' is only valid as the bandwidth kernel of graph PC")

    normalized = {
        "laplacian": False,
        "global_filtering": False,
        "polynomial": False,
        "graph_matern": spec.laplacian == "normalized",
    }.get(f, True)
    eig = g.spectrum(normalized)
    lam = eig.values
    alpha = spec.alpha
    if f == "laplacian":
        scale = float(np.max(np.abs(lam))) if lam.size else 0.0
        fv = np.where(np.abs(lam) > 1e-10 * scale, 1.0 / np.where(lam == 0, 1.0, lam), 0.0)
        return eig.apply(fv), []
    if f == "global_filtering":
        base = 1.0 / (1.0 + alpha * lam)
        return eig.apply(base**2), [eig.apply(-2.0 * lam * base**3)]
    if f == "regularized_laplacian":
        base = 1.0 / (1.0 + alpha * lam)
        return eig.apply(base), [eig.apply(-lam * base**2)]
    if f == "diffusion":
        base = np.exp(-0.5 * alpha * lam)
        return eig.apply(base), [eig.apply(-0.5 * lam * base)]
    if f == "random_walk":
        p = int(spec.steps)
        lmax = float(lam[-1]) if lam.size else 0.0
        if alpha < lmax - 1e-9:
            raise InputError(f"random walk needs alpha >= lambda_max = {lmax:.6g}, got {alpha}")
        shifted = np.maximum(alpha - lam, 0.0)
        return eig.apply(shifted**p), [eig.apply(p * shifted ** (p - 1))]
    if f == "cosine":
        if lam.size and lam[-1] > 2.0 + 1e-8:
            raise InputError("cosine kernel requires normalized Laplacian eigenvalues <= 2")
        return eig.apply(np.cos(lam * np.pi / 4.0)), []
    if f == "graph_matern":
        nu = int(spec.nu)
        base = 2.0 * nu / alpha + lam
        return eig.apply(base ** (-nu)), [eig.apply((2.0 * nu * nu / alpha**2) * base ** (-nu - 1))]
    if f == "polynomial":
        lmax = float(lam[-1]) if lam.size else 0.0
        # each term is scaled by 1/lambda_max, not 1/lambda_max**i
        scale = lmax if lmax > 1e-12 else 1.0
        powers = [lam**i / scale for i in range(len(spec.betas))]
        c = sum(b * pw for b, pw in zip(spec.betas, powers))
        return eig.apply(c * c), [eig.apply(2.0 * c * pw) for pw in powers]
    raise InputError(f"unknown graph kernel family {f!r}")


def _sym(a):
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------------------
# composite multi-output kernels


@dataclass(frozen=True)
class SOGPKernel:
    """Independent outputs sharing one data kernel (``K_G = I``)."""

    data: DataKernelSpec

    @property
    def is_complete(self):
        return self.data.is_complete

    def hyperparameters(self, g: Graph) -> list[Hyper]:
        return self.data.hyperparameters()

    def with_values(self, values, g: Graph):
        return replace(self, data=self.data.with_values(values))

    @property
    def label(self):
        return "SOGP"


@dataclass(frozen=True)
class SeparableKernel:
    data: DataKernelSpec
    graph: GraphKernelSpec

    def __post_init__(self):
        if self.graph.family == "degree":
            raise InputError("'degree' cannot be used in a separable kernel")

    @property
    def is_complete(self):
        return self.data.is_complete and self.graph.is_complete

    def hyperparameters(self, g: Graph) -> list[Hyper]:
        return self.data.hyperparameters() + self.graph.hyperparameters(g)

    def with_values(self, values, g: Graph):
        values = list(values)
        return replace(self, data=self.data.with_values(values[:2]), graph=self.graph.with_values(values[2:]))

    @property
    def label(self):
        return "ICM" if self.graph.family == "icm" else self.graph.label


@dataclass(frozen=True)
class SoSKernel:
    terms: tuple[SeparableKernel, ...]

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise InputError("sum-of-separable kernel needs at least one term")

    @property
    def is_complete(self):
        return all(t.is_complete for t in self.terms)

    def hyperparameters(self, g: Graph) -> list[Hyper]:
        return [h for t in self.terms for h in t.hyperparameters(g)]

    def with_values(self, values, g: Graph):
        values = list(values)
        out, pos = [], 0
        for t in self.terms:
            n = 2 + t.graph.num_params(g.num_vertices)
            out.append(t.with_values(values[pos : pos + n], g))
            pos += n
        return replace(self, terms=tuple(out))

    @property
    def label(self):
        return "SoS(" + " + ".join(t.label for t in self.terms) + ")"


@dataclass(frozen=True)
class GraphPCKernel:
    """Gaussian process-convolution kernel driven by two graph kernels.

    ``graph1`` supplies the amplitude product ``s_m s_m'``; ``graph2``
    supplies the bandwidth, either through ``1 / K_G2[m, m']`` or, with
    family ``"degree"``, through ``1/deg(m) + 1/deg(m')``.
    """

    graph1: GraphKernelSpec
    graph2: GraphKernelSpec
    v: float | None = None
    ell: float | None = None

    def __post_init__(self):
        if self.graph1.family == "degree":
            raise InputError("'degree' is only valid as graph2 of graph PC")
        for name in ("v", "ell"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise InputError(f"graph PC {name} must be positive, got {val}")

    @property
    def is_complete(self):
        return self.v is not None and self.ell is not None and self.graph1.is_complete and self.graph2.is_complete

    def hyperparameters(self, g: Graph) -> list[Hyper]:
        out = [Hyper("v", self.v), Hyper("ell", self.ell)]
        out += self.graph1.hyperparameters(g)
        if self.graph2.family != "degree":
            out += self.graph2.hyperparameters(g)
        return out

    def with_values(self, values, g: Graph):
        values = [float(v) for v in values]
        n1 = self.graph1.num_params(g.num_vertices)
        g1 = self.graph1.with_values(values[2 : 2 + n1])
        g2 = self.graph2
        if g2.family != "degree":
            g2 = g2.with_values(values[2 + n1 :])
        return replace(self, v=values[0], ell=values[1], graph1=g1, graph2=g2)

    @property
    def label(self):
        return "graph PC"


MogpKernelSpec = Union[SOGPKernel, SeparableKernel, SoSKernel, GraphPCKernel]


def count_hyperparameters(spec: MogpKernelSpec, g: Graph) -> int:
    """Number of kernel hyperparameters (noise variances excluded)."""
    m = g.num_vertices
    if isinstance(spec, SOGPKernel):
        return 2
    if isinstance(spec, SeparableKernel):
        return 2 + spec.graph.num_params(m)
    if isinstance(spec, SoSKernel):
        return sum(2 + t.graph.num_params(m) for t in spec.terms)
    if isinstance(spec, GraphPCKernel):
        n2 = 0 if spec.graph2.family == "degree" else spec.graph2.num_params(m)
        return spec.graph1.num_params(m) + n2 + 2
    raise InputError(f"not a kernel spec: {spec!r}")


def mogp_gram(spec: MogpKernelSpec, g: Graph, xa, va, xb, vb, grad: bool = False):
    """Cross-covariance between stacked inputs ``(xa, va)`` and ``(xb, vb)``.

    ``xa`` is ``(n_a, D)`` and ``va`` the vertex of each row. With ``grad``
    the second return value lists ``dK/dtheta`` in the order of
    ``spec.hyperparameters(g)``.
    """
    va = np.asarray(va, dtype=int).reshape(-1)
    vb = np.asarray(vb, dtype=int).reshape(-1)
    xa = np.asarray(xa, dtype=float).reshape(len(va), -1)
    xb = np.asarray(xb, dtype=float).reshape(len(vb), -1)
    if xa.shape[1] != xb.shape[1]:
        raise DimensionMismatch(f"input dimensions differ: {xa.shape[1]} vs {xb.shape[1]}")
    m = g.num_vertices
    for v in (va, vb):
        if v.size and (v.min() < 0 or v.max() >= m):
            raise InputError(f"vertex index outside [0, {m})")

    if isinstance(spec, SOGPKernel):
        same = (va[:, None] == vb[None, :]).astype(float)
        out = data_gram(spec.data, xa, xb, grad)
        if not grad:
            return out * same
        k, dks = out
        return k * same, [d * same for d in dks]

    if isinstance(spec, SeparableKernel):
        return _separable_gram(spec, g, xa, va, xb, vb, grad)

    if isinstance(spec, SoSKernel):
        total = None
        grads = []
        for term in spec.terms:
            out = _separable_gram(term, g, xa, va, xb, vb, grad)
            k = out[0] if grad else out
            total = k if total is None else total + k
            if grad:
                grads.extend(out[1])
        return (total, grads) if grad else total

    if isinstance(spec, GraphPCKernel):
        return _graph_pc_gram(spec, g, xa, va, xb, vb, grad)

    raise InputError(f"not a kernel spec: {spec!r}")


def _separable_gram(spec: SeparableKernel, g, xa, va, xb, vb, grad):
    if not grad:
        kg = graph_kernel_matrix(spec.graph, g)
        return data_gram(spec.data, xa, xb) * kg[np.ix_(va, vb)]
    kg, dkgs = graph_kernel_grads(spec.graph, g)
    kd, dkds = data_gram(spec.data, xa, xb, grad=True)
    kge = kg[np.ix_(va, vb)]
    grads = [d * kge for d in dkds] + [kd * dg[np.ix_(va, vb)] for dg in dkgs]
    return kd * kge, grads


def _graph_pc_gram(spec: GraphPCKernel, g, xa, va, xb, vb, grad):
    _require_complete(spec)
    dim = xa.shape[1]
    v, ell = spec.v, spec.ell
    r2 = cdist(xa, xb, "sqeuclidean") if xa.size and xb.size else np.zeros((len(va), len(vb)))
    if grad:
        g1, dg1 = graph_kernel_grads(spec.graph1, g)
    else:
        g1, dg1 = graph_kernel_matrix(spec.graph1, g), ()
    g1e = g1[np.ix_(va, vb)]

    dg2 = ()
    if spec.graph2.family == "degree":
        deg = g.degrees
        if np.any(deg[np.concatenate([va, vb])] <= 0):
            raise NonpositivePEntry("degree-based graph PC needs every used vertex to have degree > 0")
        inv_p = (1.0 / deg)[va][:, None] + (1.0 / deg)[vb][None, :]
        g2e = None
    else:
        if grad:
            g2, dg2 = graph_kernel_grads(spec.graph2, g)
        else:
            g2 = graph_kernel_matrix(spec.graph2, g)
        g2e = g2[np.ix_(va, vb)]
        if g2e.size and np.min(g2e) <= 0:
            raise NonpositivePEntry(
                f"graph PC bandwidth kernel has a nonpositive entry ({np.min(g2e):.3g})"
            )
        inv_p = 1.0 / g2e if g2e.size else np.zeros_like(r2)
    p = inv_p + 1.0 / ell
    phi = v * v * (2.0 * np.pi * p) ** (-0.5 * dim) * np.exp(-0.5 * r2 / p)
    k = g1e * phi
    if not grad:
        return k
    dk_dp = k * (-0.5 * dim / p + 0.5 * r2 / (p * p))
    grads = [2.0 * k / v, dk_dp * (-1.0 / (ell * ell))]
    grads += [phi * d[np.ix_(va, vb)] for d in dg1]
    if g2e is not None:
        grads += [dk_dp * (-d[np.ix_(va, vb)] / (g2e * g2e)) for d in dg2]
    return k, grads


def _vertex_sums(a, v, m):
    """``P^T a P`` with ``P`` the one-hot vertex indicator of the rows."""
    onehot = np.zeros((len(v), m))
    onehot[np.arange(len(v)), v] = 1.0
    return onehot.T @ a @ onehot


def gram_gradient_traces(spec: MogpKernelSpec, g: Graph, x, v, w) -> np.ndarray:
    """``[sum(w * dK/dtheta_i)]`` for the Gram matrix of ``(x, v)`` with itself.

    Equivalent to contracting the derivative list of :func:`mogp_gram`, but
    graph-kernel derivatives vary only per vertex pair, so their traces are
    taken against the ``M x M`` vertex sums of ``w`` instead of full ``N x N``
    matrices.
    """
    v = np.asarray(v, dtype=int).reshape(-1)
    x = np.asarray(x, dtype=float).reshape(len(v), -1)
    w = np.asarray(w, dtype=float)
    m = g.num_vertices
    if isinstance(spec, SOGPKernel):
        _, dkds = data_gram(spec.data, x, x, grad=True)
        ws = w * (v[:, None] == v[None, :])
        return np.array([np.sum(ws * d) for d in dkds])
    if isinstance(spec, SeparableKernel):
        return _separable_traces(spec, g, x, v, w, m)
    if isinstance(spec, SoSKernel):
        return np.concatenate([_separable_traces(t, g, x, v, w, m) for t in spec.terms])
    if isinstance(spec, GraphPCKernel):
        return _graph_pc_traces(spec, g, x, v, w, m)
    raise InputError(f"not a kernel spec: {spec!r}")


def _separable_traces(spec: SeparableKernel, g, x, v, w, m):
    kg, dkgs = graph_kernel_grads(spec.graph, g)
    kd, dkds = data_gram(spec.data, x, x, grad=True)
    wk = w * kg[np.ix_(v, v)]
    out = [np.sum(wk * d) for d in dkds]
    if dkgs:
        s = _vertex_sums(w * kd, v, m)
        out += [np.sum(s * d) for d in dkgs]
    return np.array(out)


def _graph_pc_traces(spec: GraphPCKernel, g, x, v, w, m):
    _require_complete(spec)
    dim = x.shape[1]
    vv, ell = spec.v, spec.ell
    r2 = cdist(x, x, "sqeuclidean")
    g1, dg1 = graph_kernel_grads(spec.graph1, g)
    g1e = g1[np.ix_(v, v)]
    dg2 = ()
    if spec.graph2.family == "degree":
        deg = g.degrees
        if np.any(deg[v] <= 0):
            raise NonpositivePEntry("degree-based graph PC needs every used vertex to have degree > 0")
        inv_p = (1.0 / deg)[v][:, None] + (1.0 / deg)[v][None, :]
        g2e = None
    else:
        g2, dg2 = graph_kernel_grads(spec.graph2, g)
        g2e = g2[np.ix_(v, v)]
        if np.min(g2e) <= 0:
            raise NonpositivePEntry(f"graph PC bandwidth kernel has a nonpositive entry ({np.min(g2e):.3g})")
        inv_p = 1.0 / g2e
    p = inv_p + 1.0 / ell
    phi = vv * vv * (2.0 * np.pi * p) ** (-0.5 * dim) * np.exp(-0.5 * r2 / p)
    k = g1e * phi
    wdk_dp = w * k * (-0.5 * dim / p + 0.5 * r2 / (p * p))
    out = [np.sum(w * k) * 2.0 / vv, np.sum(wdk_dp) * (-1.0 / (ell * ell))]
    if dg1:
        s1 = _vertex_sums(w * phi, v, m)
        out += [np.sum(s1 * d) for d in dg1]
    if g2e is not None and dg2:
        s2 = _vertex_sums(wdk_dp / (g2e * g2e), v, m)
        out += [-np.sum(s2 * d) for d in dg2]
    return np.array(out)


def mogp_kernel(spec: MogpKernelSpec, g: Graph, m: int, mp: int, x, xp) -> float:
    """Scalar cross-covariance ``k_{m m'}(x, x')``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != xp.shape:
        raise DimensionMismatch(f"input dimensions differ: {x.shape} vs {xp.shape}")
    return float(mogp_gram(spec, g, x[None, :], [m], xp[None, :], [mp])[0, 0])


# ---------------------------------------------------------------------------
# JSON


def _check_keys(raw, allowed, what):
    if not isinstance(raw, dict):
        raise ParseError(f"{what} must be a JSON object")
    extra = set(raw) - set(allowed)
    if extra:
        raise ParseError(f"unknown fields in {what}: {sorted(extra)}")


def _opt_float(raw, key):
    val = raw.get(key)
    if val is None:
        return None
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParseError(f"{key} must be a number")
    return float(val)


def data_kernel_from_dict(raw) -> DataKernelSpec:
    _check_keys(raw, {"family", "v2", "ell", "nu"}, "data kernel")
    try:
        return DataKernelSpec(
            family=raw.get("family", "se"),
            v2=_opt_float(raw, "v2"),
            ell=_opt_float(raw, "ell"),
            nu=float(raw.get("nu", 0.5)),
        )
    except InputError as exc:
        raise ParseError(str(exc)) from exc


def graph_kernel_from_dict(raw) -> GraphKernelSpec:
    _check_keys(
        raw,
        {"family", "alpha", "steps", "p", "nu", "laplacian", "degree", "betas", "w", "kappa"},
        "graph kernel",
    )
    if "family" not in raw:
        raise ParseError("graph kernel needs a 'family'")
    kwargs = {"family": raw["family"], "alpha": _opt_float(raw, "alpha")}
    if "steps" in raw or "p" in raw:
        kwargs["steps"] = int(raw.get("steps", raw.get("p")))
    for key in ("nu", "degree"):
        if key in raw:
            kwargs[key] = int(raw[key])
    if "laplacian" in raw:
        kwargs["laplacian"] = raw["laplacian"]
    for key in ("betas", "w", "kappa"):
        if raw.get(key) is not None:
            kwargs[key] = tuple(float(x) for x in raw[key])
    if "betas" in kwargs and "degree" not in kwargs:
        kwargs["degree"] = len(kwargs["betas"]) - 1
    try:
        return GraphKernelSpec(**kwargs)
    except (InputError, TypeError) as exc:
        raise ParseError(str(exc)) from exc


def kernel_from_dict(raw) -> MogpKernelSpec:
    """Parse the nested kernel JSON used by the CLI and experiment configs."""
    if not isinstance(raw, dict) or "variant" not in raw:
        raise ParseError("kernel JSON needs a 'variant'")
    variant = raw["variant"]
    try:
        if variant == "sogp":
            _check_keys(raw, {"variant", "data"}, "sogp kernel")
            return SOGPKernel(data_kernel_from_dict(raw.get("data", {})))
        if variant == "separable":
            _check_keys(raw, {"variant", "data", "graph"}, "separable kernel")
            return SeparableKernel(data_kernel_from_dict(raw.get("data", {})), graph_kernel_from_dict(raw["graph"]))
        if variant == "sos":
            _check_keys(raw, {"variant", "terms"}, "sos kernel")
            terms = []
            for t in raw["terms"]:
                _check_keys(t, {"data", "graph"}, "sos term")
                terms.append(SeparableKernel(data_kernel_from_dict(t.get("data", {})), graph_kernel_from_dict(t["graph"])))
            return SoSKernel(tuple(terms))
        if variant == "graph_pc":
            _check_keys(raw, {"variant", "v", "ell", "graph1", "graph2"}, "graph_pc kernel")
            return GraphPCKernel(
                graph1=graph_kernel_from_dict(raw["graph1"]),
                graph2=graph_kernel_from_dict(raw["graph2"]),
                v=_opt_float(raw, "v"),
                ell=_opt_float(raw, "ell"),
            )
    except KeyError as exc:
        raise ParseError(f"missing field {exc} in {variant} kernel") from exc
    except InputError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(str(exc)) from exc
    raise ParseError(f"unknown kernel variant {variant!r}")


def data_kernel_to_dict(spec: DataKernelSpec) -> dict:
    out = {"family": spec.family, "v2": spec.v2, "ell": spec.ell}
    if spec.family == "matern":
        out["nu"] = spec.nu
    return out


def graph_kernel_to_dict(spec: GraphKernelSpec) -> dict:
    out: dict = {"family": spec.family}
    f = spec.family
    if f in ALPHA_FAMILIES:
        out["alpha"] = spec.alpha
    if f == "random_walk":
        out["steps"] = spec.steps
    if f == "graph_matern":
        out["nu"] = spec.nu
        out["laplacian"] = spec.laplacian
    if f == "polynomial":
        out["degree"] = spec.degree
        out["betas"] = list(spec.betas) if spec.betas is not None else None
    if f == "icm":
        out["w"] = list(spec.w) if spec.w is not None else None
        out["kappa"] = list(spec.kappa) if spec.kappa is not None else None
    return out


def kernel_to_dict(spec: MogpKernelSpec) -> dict:
    if isinstance(spec, SOGPKernel):
        return {"variant": "sogp", "data": data_kernel_to_dict(spec.data)}
    if isinstance(spec, SeparableKernel):
        return {"variant": "separable", "data": data_kernel_to_dict(spec.data), "graph": graph_kernel_to_dict(spec.graph)}
    if isinstance(spec, SoSKernel):
        return {
            "variant": "sos",
            "terms": [{"data": data_kernel_to_dict(t.data), "graph": graph_kernel_to_dict(t.graph)} for t in spec.terms],
        }
    if isinstance(spec, GraphPCKernel):
        return {
            "variant": "graph_pc",
            "v": spec.v,
            "ell": spec.ell,
            "graph1": graph_kernel_to_dict(spec.graph1),
            "graph2": graph_kernel_to_dict(spec.graph2),
        }
    raise InputError(f"not a kernel spec: {spec!r}")
