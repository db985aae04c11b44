"""Hyperparameter training by gradient ascent on the log-marginal likelihood."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .errors import AllRestartsFailed, InputError, NumericalError, ParseError
from .graph import Graph
from .kernels import (
    ALPHA_FAMILIES,
    GraphKernelSpec,
    GraphPCKernel,
    MogpKernelSpec,
    SeparableKernel,
    SOGPKernel,
    SoSKernel,
    DataKernelSpec,
    gram_gradient_traces,
    lambda_max,
    mogp_gram,
)
from .model import LOG_2PI, FittedModel, MultiDataset, NoiseModel
from .numerics import chol_inverse, cholesky, logdet, solve_chol

TRANSFORMS = ("log", "softplus", "identity")


def _softplus(u):
    return np.logaddexp(0.0, u)


def _inv_softplus(y):
    y = np.asarray(y, dtype=float)
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y + np.log1p(-np.exp(-np.minimum(y, 700.0))), np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass(frozen=True)
class ParamVector:
    """Unconstrained parameters ``u`` with the transform of each entry.

    ``log``: ``theta = exp(u)``; ``softplus``: ``theta = shift + log(1 + exp(u))``;
    ``identity``: ``theta = u``.
    """

    u: np.ndarray
    transforms: tuple[str, ...]
    shifts: tuple[float, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(-1)
        object.__setattr__(self, "u", u)
        if not (len(self.transforms) == len(self.shifts) == u.size):
            raise InputError("transform metadata must match the parameter count")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise InputError(f"unknown transform {t!r}")

    def __len__(self):
        return self.u.size

    def _masks(self):
        t = np.array(self.transforms)
        return t == "log", t == "softplus"

    def values(self) -> np.ndarray:
        is_log, is_sp = self._masks()
        out = self.u.copy()
        out[is_log] = np.exp(self.u[is_log])
        out[is_sp] = np.asarray(self.shifts)[is_sp] + _softplus(self.u[is_sp])
        return out

    def jacobian(self) -> np.ndarray:
        """Elementwise ``d theta / d u``."""
        is_log, is_sp = self._masks()
        out = np.ones_like(self.u)
        out[is_log] = np.exp(self.u[is_log])
        out[is_sp] = 1.0 / (1.0 + np.exp(-self.u[is_sp]))
        return out

    def with_u(self, u) -> "ParamVector":
        return replace(self, u=np.asarray(u, dtype=float).copy())

    @classmethod
    def from_values(cls, values, transforms, shifts, names=()) -> "ParamVector":
        values = np.asarray(values, dtype=float).reshape(-1)
        t = np.array(transforms)
        u = values.copy()
        is_log = t == "log"
        is_sp = t == "softplus"
        if np.any(values[is_log] <= 0):
            raise InputError("log-transformed parameters must be positive")
        shifts_a = np.asarray(shifts, dtype=float)
        if np.any(values[is_sp] <= shifts_a[is_sp]):
            raise InputError("shifted-softplus parameters must exceed their shift")
        u[is_log] = np.log(values[is_log])
        u[is_sp] = _inv_softplus(values[is_sp] - shifts_a[is_sp])
        return cls(u, tuple(transforms), tuple(float(s) for s in shifts), tuple(names))


def _noise_hypers(noise: NoiseModel):
    if noise.shared:
        return [("sigma2", noise.variances[0])]
    return [(f"sigma2_{m}", v) for m, v in enumerate(noise.variances)]


def pack(spec: MogpKernelSpec, noise: NoiseModel, g: Graph) -> ParamVector:
    """Flatten kernel hyperparameters then noise variances into a ParamVector."""
    if not spec.is_complete:
        raise InputError("cannot pack a kernel spec with unset hyperparameters")
    hypers = spec.hyperparameters(g)
    names = [h.name for h in hypers]
    values = [h.value for h in hypers]
    transforms = [h.transform for h in hypers]
    shifts = [h.shift for h in hypers]
    for name, var in _noise_hypers(noise):
        names.append(name)
        values.append(var)
        transforms.append("log")
        shifts.append(0.0)
    return ParamVector.from_values(values, transforms, shifts, names)


def unpack(pv: ParamVector, spec: MogpKernelSpec, noise: NoiseModel, g: Graph):
    """Inverse of :func:`pack`: rebuild ``(spec, noise)`` from ``pv``."""
    theta = pv.values()
    nk = len(spec.hyperparameters(g))
    nn = 1 if noise.shared else len(noise.variances)
    if theta.size != nk + nn:
        raise InputError(f"expected {nk + nn} parameters, got {theta.size}")
    new_spec = spec.with_values(theta[:nk], g)
    if noise.shared:
        new_noise = NoiseModel((float(theta[nk]),) * len(noise.variances), shared=True)
    else:
        new_noise = NoiseModel(tuple(float(x) for x in theta[nk:]), shared=False)
    return new_spec, new_noise


def likelihood_and_gradient(pv: ParamVector, spec, noise, data: MultiDataset, g: Graph):
    """Log-marginal likelihood at ``pv`` and its gradient w.r.t. ``pv.u``.

    Uses ``dL/dtheta = 1/2 tr[(a a^T - K^-1) dK/dtheta]`` with ``a = K^-1 y``.
    """
    spec, noise = unpack(pv, spec, noise, g)
    k = mogp_gram(spec, g, data.x, data.vertex, data.x, data.vertex)
    k = 0.5 * (k + k.T)
    k[np.diag_indices_from(k)] += noise.per_row(data.vertex)
    factor = cholesky(k)
    a = solve_chol(factor, data.y)
    value = float(-0.5 * (data.y @ a + logdet(factor) + data.n * LOG_2PI))
    w = np.outer(a, a) - chol_inverse(factor)
    grad_theta = list(0.5 * gram_gradient_traces(spec, g, data.x, data.vertex, w))
    wdiag = np.diag(w)
    if noise.shared:
        grad_theta.append(0.5 * float(np.sum(wdiag)))
    else:
        for m in range(len(noise.variances)):
            grad_theta.append(0.5 * float(np.sum(wdiag[data.vertex == m])))
    return value, np.asarray(grad_theta) * pv.jacobian()


def likelihood_value(pv: ParamVector, spec, noise, data: MultiDataset, g: Graph) -> float:
    spec, noise = unpack(pv, spec, noise, g)
    k = mogp_gram(spec, g, data.x, data.vertex, data.x, data.vertex)
    k = 0.5 * (k + k.T)
    k[np.diag_indices_from(k)] += noise.per_row(data.vertex)
    factor = cholesky(k)
    a = solve_chol(factor, data.y)
    return float(-0.5 * (data.y @ a + logdet(factor) + data.n * LOG_2PI))


# ---------------------------------------------------------------------------
# initialization


def data_scales(data: MultiDataset) -> tuple[float, float]:
    """Output variance and median pairwise distance of the pooled inputs."""
    var = float(np.var(data.y)) if data.n else 1.0
    if not var > 0:
        var = 1.0
    x = np.unique(data.x, axis=0) if data.n else data.x
    if x.shape[0] >= 2:
        med = float(np.median(pdist(x)))
    else:
        med = 1.0
    if not med > 0:
        med = 1.0
    return var, med


def _init_data(spec: DataKernelSpec, var, med) -> DataKernelSpec:
    return replace(spec, v2=spec.v2 if spec.v2 is not None else var, ell=spec.ell if spec.ell is not None else med)


def _init_graph(spec: GraphKernelSpec, g: Graph, rng) -> GraphKernelSpec:
    f = spec.family
    if f in ALPHA_FAMILIES and spec.alpha is None:
        alpha = 1.0
        if f == "random_walk":
            alpha = lambda_max(g, normalized=True) + 1.0
        spec = replace(spec, alpha=alpha)
    if f == "polynomial" and spec.betas is None:
        spec = replace(spec, betas=(1.0,) + (0.1,) * int(spec.degree))
    if f == "icm":
        m = g.num_vertices
        if spec.w is None:
            spec = replace(spec, w=tuple(float(x) for x in 0.1 * rng.standard_normal(m)))
        if spec.kappa is None:
            spec = replace(spec, kappa=(0.1,) * m)
    return spec


def initialize(spec: MogpKernelSpec, data: MultiDataset, g: Graph, seed: int = 0) -> MogpKernelSpec:
    """Fill every unset hyperparameter with a scale-aware default."""
    var, med = data_scales(data)
    rng = np.random.default_rng([int(seed), 7919])
    if isinstance(spec, SOGPKernel):
        return replace(spec, data=_init_data(spec.data, var, med))
    if isinstance(spec, SeparableKernel):
        return replace(spec, data=_init_data(spec.data, var, med), graph=_init_graph(spec.graph, g, rng))
    if isinstance(spec, SoSKernel):
        return replace(
            spec,
            terms=tuple(
                replace(t, data=_init_data(t.data, var, med), graph=_init_graph(t.graph, g, rng)) for t in spec.terms
            ),
        )
    if isinstance(spec, GraphPCKernel):
        return replace(
            spec,
            v=spec.v if spec.v is not None else math.sqrt(var),
            ell=spec.ell if spec.ell is not None else med,
            graph1=_init_graph(spec.graph1, g, rng),
            graph2=_init_graph(spec.graph2, g, rng),
        )
    raise InputError(f"not a kernel spec: {spec!r}")


def default_noise(data: MultiDataset, shared: bool = True) -> NoiseModel:
    var, _ = data_scales(data)
    return NoiseModel((0.1 * var,) * data.num_vertices, shared=shared)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    restarts: int = 3
    seed: int = 0
    window: int = 10
    max_halvings: int = 20
    max_step: float = 1.0

    def __post_init__(self):
        if not (self.lr > 0 and self.tol > 0 and self.window > 0 and self.max_step > 0):
            raise InputError("optimizer lr, tol, window and max_step must be positive")
        if self.max_iters < 0 or self.restarts < 1 or self.max_halvings < 0:
            raise InputError("max_iters must be >= 0, restarts >= 1, max_halvings >= 0")

    @classmethod
    def from_dict(cls, raw) -> "OptimizerConfig":
        allowed = {"lr", "max_iters", "tol", "restarts", "seed", "window", "max_halvings", "max_step"}
        if not isinstance(raw, dict):
            raise ParseError("optimizer config must be a JSON object")
        extra = set(raw) - allowed
        if extra:
            raise ParseError(f"unknown optimizer fields: {sorted(extra)}")
        try:
            return cls(**raw)
        except (TypeError, InputError) as exc:
            raise ParseError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "OptimizerConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read optimizer config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "restarts": self.restarts,
            "seed": self.seed,
            "window": self.window,
            "max_halvings": self.max_halvings,
            "max_step": self.max_step,
        }


@dataclass
class TraceEntry:
    iteration: int
    log_likelihood: float
    step_scale: float


@dataclass
class RunResult:
    u: np.ndarray
    value: float
    trace: list[TraceEntry] = field(default_factory=list)
    path: list[np.ndarray] = field(default_factory=list)


def _perturb(pv: ParamVector, rng) -> ParamVector:
    z = 0.5 * rng.standard_normal(len(pv))
    u = pv.u.copy()
    for i, t in enumerate(pv.transforms):
        if t == "identity":
            u[i] = u[i] * math.exp(z[i])
        else:
            # log-normal factor on theta (log) or on theta - shift (softplus)
            if t == "log":
                u[i] += z[i]
            else:
                excess = float(_softplus(u[i])) * math.exp(z[i])
                u[i] = float(_inv_softplus(excess))
    return pv.with_u(u)


def gradient_ascent(pv: ParamVector, spec, noise, data, g, cfg: OptimizerConfig) -> RunResult:
    """Fixed-rate gradient ascent on the log marginal likelihood.

    Each step is ``lr * grad`` in the unconstrained coordinates, shrunk so
    that no coordinate moves by more than ``cfg.max_step``. A step that
    lowers the likelihood (or breaks the factorization) is halved, up to
    ``cfg.max_halvings`` times; if no halving helps, the run stops. Accepted steps therefore never decrease the likelihood.
    """
    u = pv.u.copy()
    value, grad = likelihood_and_gradient(pv.with_u(u), spec, noise, data, g)
    result = RunResult(u=u.copy(), value=value)
    result.trace.append(TraceEntry(0, value, 0.0))
    result.path.append(u.copy())
    history = [value]
    for it in range(1, cfg.max_iters + 1):
        step = cfg.lr * grad
        biggest = float(np.max(np.abs(step))) if step.size else 0.0
        if biggest > cfg.max_step:
            step = step * (cfg.max_step / biggest)
        scale = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            cand = u + scale * step
            try:
                # overshooting steps may overflow; they are rejected by the finiteness check below
                with np.errstate(over="ignore", invalid="ignore"):
                    cand_value, cand_grad = likelihood_and_gradient(pv.with_u(cand), spec, noise, data, g)
            except (NumericalError, FloatingPointError, InputError, np.linalg.LinAlgError):
                cand_value = -math.inf
            if math.isfinite(cand_value) and cand_value >= value:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        u, value, grad = cand, cand_value, cand_grad
        result.trace.append(TraceEntry(it, value, scale))
        result.path.append(u.copy())
        history.append(value)
        if len(history) > cfg.window:
            old = history[-1 - cfg.window]
            if value - old <= cfg.tol * max(abs(old), 1e-300):
                break
    result.u = u
    result.value = value
    return result


def fit(
    spec: MogpKernelSpec,
    data: MultiDataset,
    g: Graph,
    cfg: OptimizerConfig | None = None,
    noise: NoiseModel | None = None,
    shared_noise: bool = True,
) -> FittedModel:
    """Train hyperparameters and return a model with its caches built.

    Unset hyperparameters are initialized from the data. The first run
    starts at that initialization; each further restart perturbs it by a
    seeded log-normal factor. The run with the highest final likelihood
    wins.
    """
    cfg = cfg or OptimizerConfig()
    if data.n < 1:
        raise InputError("fit needs at least one observation")
    spec0 = initialize(spec, data, g, cfg.seed)
    noise0 = noise if noise is not None else default_noise(data, shared_noise)
    pv0 = pack(spec0, noise0, g)
    best: RunResult | None = None
    errors = []
    for r in range(cfg.restarts):
        start = pv0 if r == 0 else _perturb(pv0, np.random.default_rng([int(cfg.seed), r]))
        try:
            run = gradient_ascent(start, spec0, noise0, data, g, cfg)
        except (NumericalError, InputError) as exc:
            errors.append(str(exc))
            continue
        if best is None or run.value > best.value:
            best = run
    if best is None:
        raise AllRestartsFailed(f"every restart failed: {errors[:3]}")
    final_spec, final_noise = unpack(pv0.with_u(best.u), spec0, noise0, g)
    model = FittedModel.build(final_spec, final_noise, data, g)
    return replace(model, trace=tuple(best.trace), params=pv0.with_u(best.u))


def write_trace(model: FittedModel, path) -> None:
    lines = ["iter,log_likelihood,step_scale"]
    for e in model.trace or ():
        lines.append(f"{e.iteration},{e.log_likelihood:.17g},{e.step_scale:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")
