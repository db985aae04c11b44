"""Synthetic data generators and the experiment harness.

Three suites are supported:

``regular``
    random k-regular graph, isotopic inputs, each vertex observes the sum of
    its neighbours' cosine-plus-trend functions. The training set is fixed per
    graph; every trial draws fresh test inputs.
``subgraph``
    six-vertex sinc problem, heterotopic inputs; every trial draws a fresh
    data set, refits, and predicts only the last vertex.
``real``
    user-supplied dataset CSV and graph JSON; every trial re-splits the
    samples of each vertex into training and test rows.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GraphMogpError, InputError, ParseError
from .graph import Graph, random_k_regular
from .io import format_float, read_dataset_csv, write_json
from .kernels import MogpKernelSpec, kernel_from_dict, kernel_to_dict
from .model import MultiDataset, TestQuery, mse, predict, predictive_log_likelihood
from .training import OptimizerConfig, fit

SINC_DOMAIN = (-15.0, 15.0)
SINC_COUNTS = (20, 20, 20, 20, 20, 10)
# chain 1-2-3-4-5-6 plus symmetry edges (1,6), (2,5), (3,4); (3,4) is already a chain edge
SINC_EDGES = ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4))
SINC_TOPOLOGY_NOTE = (
    "chain 1-2-3-4-5-6 plus symmetry edges (1,6),(2,5),(3,4); stand-in for a topology "
    "only available as a figure"
)
STD_CONVENTION = "standard error: sample std of the per-trial metric / sqrt(trials)"


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


# ---------------------------------------------------------------------------
# k-regular suite


@dataclass(frozen=True, eq=False)
class RegularProblem:
    graph: Graph
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    noise_var: float

    def latent(self, x) -> np.ndarray:
        """Noise-free outputs, shape ``(M, len(x))``."""
        x = np.asarray(x, dtype=float).reshape(-1)
        per_vertex = self.p[:, None] * np.cos(self.q[:, None] * x[None, :]) + self.r[:, None] * x[None, :]
        return self.graph.adjacency.astype(bool).astype(float) @ per_vertex

    def sample(self, x, rng) -> np.ndarray:
        f = self.latent(x)
        if self.noise_var > 0:
            f = f + rng.normal(0.0, np.sqrt(self.noise_var), size=f.shape)
        return f


def _disjoint_uniform(rng, lo, hi, n, avoid) -> np.ndarray:
    avoid = set(np.asarray(avoid, dtype=float).tolist())
    out = []
    while len(out) < n:
        x = float(rng.uniform(lo, hi))
        if x not in avoid:
            avoid.add(x)
            out.append(x)
    return np.array(out)


def make_regular_problem(m=32, k=6, seed=0, noise_var=5.0, q_range=(5.0, 5.0)) -> RegularProblem:
    g = random_k_regular(m, k, seed)
    rng = child_rng(seed, 1)
    p = rng.uniform(0.0, 10.0, m)
    q = rng.uniform(q_range[0], q_range[1], m)
    r = rng.uniform(-6.0, 6.0, m)
    return RegularProblem(g, p, q, r, float(noise_var))


def gen_regular_experiment_data(m=32, k=6, n_train=10, n_test=10, seed=0, noise_var=5.0, q_range=(5.0, 5.0)):
    """Graph, isotopic training set, test query and noisy test targets."""
    prob = make_regular_problem(m, k, seed, noise_var, q_range)
    rng = child_rng(seed, 2)
    x_train = _disjoint_uniform(rng, 0.0, 5.0, n_train, [])
    y_train = prob.sample(x_train, rng)
    data = MultiDataset.from_blocks((x_train[:, None], y_train[v]) for v in range(m))
    query, truth = regular_test_set(prob, x_train, n_test, child_rng(seed, 3))
    return prob.graph, data, query, truth


def regular_test_set(prob: RegularProblem, x_train, n_test, rng):
    m = prob.graph.num_vertices
    x_test = _disjoint_uniform(rng, 0.0, 5.0, n_test, x_train)
    y_test = prob.sample(x_test, rng)
    query = TestQuery.full([x_test[:, None]] * m)
    return query, y_test.reshape(-1)


# ---------------------------------------------------------------------------
# induced-subgraph sinc suite


def sinc(x) -> np.ndarray:
    """``sin(x) / x`` with the removable singularity filled by 1."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x == 0.0, 1.0, x)
    return np.where(x == 0.0, 1.0, np.sin(safe) / safe)


def sinc_graph() -> Graph:
    return Graph(len(SINC_COUNTS), SINC_EDGES)


def sinc_intervals() -> list[tuple[float, float]]:
    lo, hi = SINC_DOMAIN
    width = (hi - lo) / len(SINC_COUNTS)
    return [(lo + i * width, lo + (i + 1) * width) for i in range(len(SINC_COUNTS))]


def gen_sinc_subgraph_data(seed=0, noise_var=0.01, n_test=10, counts=SINC_COUNTS):
    """Six-vertex sinc data set and a test query on the last vertex."""
    rng = child_rng(seed, 11)
    blocks = []
    for (lo, hi), n in zip(sinc_intervals(), counts):
        x = rng.uniform(lo, hi, n)
        y = sinc(x) + (rng.normal(0.0, np.sqrt(noise_var), n) if noise_var > 0 else 0.0)
        blocks.append((x[:, None], y))
    data = MultiDataset.from_blocks(blocks)
    lo, hi = sinc_intervals()[-1]
    target = len(counts) - 1
    x_test = rng.uniform(lo, hi, n_test)
    y_test = sinc(x_test) + (rng.normal(0.0, np.sqrt(noise_var), n_test) if noise_var > 0 else 0.0)
    query = TestQuery((target,), (x_test[:, None],))
    return sinc_graph(), data, query, y_test


# ---------------------------------------------------------------------------
# centering and evaluation


@dataclass(frozen=True)
class Centering:
    """Per-vertex training means (global mean for vertices without data)."""

    means: tuple[float, ...]

    @classmethod
    def from_data(cls, data: MultiDataset) -> "Centering":
        overall = float(np.mean(data.y)) if data.n else 0.0
        return cls(tuple(float(np.mean(y)) if y.size else overall for y in data.outputs))

    def apply(self, data: MultiDataset) -> MultiDataset:
        return MultiDataset(data.inputs, tuple(y - mu for y, mu in zip(data.outputs, self.means)))

    def offsets(self, vertex) -> np.ndarray:
        return np.asarray(self.means)[np.asarray(vertex, dtype=int)]


def fit_centered(spec, data, g, cfg):
    centering = Centering.from_data(data)
    model = fit(spec, centering.apply(data), g, cfg)
    return model, centering


def evaluate(model, centering: Centering, query: TestQuery, y_true):
    pred = predict(model, query)
    shift = centering.offsets(query.vertex)
    y_c = np.asarray(y_true, dtype=float) - shift
    return {
        "mse": mse(y_c, pred.mean),
        "log_likelihood": predictive_log_likelihood(y_c, pred, use_observed=True),
        "mean": (pred.mean + shift).tolist(),
        "cov_observed": pred.cov_observed.tolist(),
        "vertex": pred.vertex.tolist(),
        "y_true": np.asarray(y_true, dtype=float).tolist(),
    }


# ---------------------------------------------------------------------------
# report


@dataclass
class MethodRow:
    name: str
    kernel: dict
    mse: list[float] = field(default_factory=list)
    log_likelihood: list[float] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    raw: list[dict] = field(default_factory=list)
    group: str = ""

    @staticmethod
    def _stats(vals):
        a = np.asarray(vals, dtype=float)
        if a.size == 0:
            return None, None
        mean = float(np.mean(a))
        se = float(np.std(a, ddof=1) / np.sqrt(a.size)) if a.size >= 2 else None
        return mean, se

    def summary(self) -> dict:
        mse_mean, mse_se = self._stats(self.mse)
        ll_mean, ll_se = self._stats(self.log_likelihood)
        out = {
            "method": self.name,
            "mse_mean": mse_mean,
            "mse_std": mse_se,
            "log_likelihood_mean": ll_mean,
            "log_likelihood_std": ll_se,
            "trials": len(self.mse),
            "failures": len(self.failures),
            "kernel": self.kernel,
        }
        if self.group:
            out["group"] = self.group
        if self.failures:
            out["failure_messages"] = sorted(set(self.failures))
        return out


@dataclass
class ExperimentReport:
    suite: str
    seed: int
    trials: int
    rows: list[MethodRow]
    metadata: dict

    def row(self, name: str, group: str = "") -> MethodRow:
        for r in self.rows:
            if r.name == name and r.group == group:
                return r
        raise KeyError(name)

    def to_dict(self, include_raw: bool = False) -> dict:
        rows = []
        for r in self.rows:
            s = r.summary()
            if include_raw:
                s["raw"] = r.raw
            rows.append(s)
        return {
            "suite": self.suite,
            "seed": self.seed,
            "trials": self.trials,
            "metadata": self.metadata,
            "rows": rows,
        }

    def timing(self) -> dict:
        return {"wall_time_s": {f"{r.group}/{r.name}" if r.group else r.name: r.wall_time for r in self.rows}}

    def csv_table(self) -> str:
        head = "group,method,mse_mean,mse_std,log_likelihood_mean,log_likelihood_std,trials,failures"
        lines = [head]
        for r in self.rows:
            s = r.summary()
            vals = [s["mse_mean"], s["mse_std"], s["log_likelihood_mean"], s["log_likelihood_std"]]
            cells = ["" if v is None else format_float(v) for v in vals]
            lines.append(",".join([r.group, r.name, *cells, str(s["trials"]), str(s["failures"])]))
        return "\n".join(lines) + "\n"

    def write(self, out_path, include_raw: bool = False) -> None:
        out = Path(out_path)
        write_json(self.to_dict(include_raw), out)
        out.with_suffix(".csv").write_text(self.csv_table())
        write_json(self.timing(), out.with_suffix(".timing.json"))


def parse_methods(methods) -> list[tuple[str, MogpKernelSpec]]:
    """Accept kernel dicts or ``{"name": ..., "kernel": {...}}`` entries."""
    out = []
    for i, entry in enumerate(methods):
        if isinstance(entry, dict) and "kernel" in entry:
            extra = set(entry) - {"name", "kernel"}
            if extra:
                raise ParseError(f"unknown method fields: {sorted(extra)}")
            spec = kernel_from_dict(entry["kernel"])
            name = entry.get("name") or spec.label
        else:
            spec = kernel_from_dict(entry)
            name = spec.label
        out.append((str(name), spec))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ParseError(f"method names must be unique, got {names}")
    return out


def _run_method(row: MethodRow, spec, data, g, cfg, queries, emit_raw, trial_ids):
    t0 = time.perf_counter()
    try:
        model, centering = fit_centered(spec, data, g, cfg)
    except GraphMogpError as exc:
        row.failures.append(f"fit: {exc}")
        row.wall_time += time.perf_counter() - t0
        return
    for tid, (query, y_true) in zip(trial_ids, queries):
        try:
            res = evaluate(model, centering, query, y_true)
        except GraphMogpError as exc:
            row.failures.append(f"predict: {exc}")
            continue
        row.mse.append(res["mse"])
        row.log_likelihood.append(res["log_likelihood"])
        if emit_raw:
            row.raw.append({"trial": tid, **res})
    row.wall_time += time.perf_counter() - t0


def run_regular(methods, trials, seed, cfg, ks=(6,), m=32, n_train=10, n_test=10, noise_var=5.0,
                q_range=(5.0, 5.0), emit_raw=False) -> ExperimentReport:
    parsed = parse_methods(methods)
    rows = []
    for k in ks:
        gseed = int(child_rng(seed, 100, k).integers(2**31))
        prob = make_regular_problem(m, k, gseed, noise_var, q_range)
        rng = child_rng(seed, 200, k)
        x_train = _disjoint_uniform(rng, 0.0, 5.0, n_train, [])
        y_train = prob.sample(x_train, rng)
        data = MultiDataset.from_blocks((x_train[:, None], y_train[v]) for v in range(m))
        queries = [regular_test_set(prob, x_train, n_test, child_rng(seed, 300, k, t)) for t in range(trials)]
        for name, spec in parsed:
            row = MethodRow(name, kernel_to_dict(spec), group=f"k={k}")
            _run_method(row, spec, data, prob.graph, cfg, queries, emit_raw, range(trials))
            rows.append(row)
    meta = {
        "graph": {"type": "random_k_regular", "num_vertices": m, "degrees": list(ks)},
        "n_train_per_vertex": n_train,
        "n_test_per_vertex": n_test,
        "noise_variance": noise_var,
        "q_range": list(q_range),
        "training_set": "fixed per graph; fresh test inputs per trial",
        "std_convention": STD_CONVENTION,
        "optimizer": cfg.to_dict(),
    }
    return ExperimentReport("regular", seed, trials, rows, meta)


def run_subgraph(methods, trials, seed, cfg, noise_var=0.01, n_test=10, emit_raw=False) -> ExperimentReport:
    parsed = parse_methods(methods)
    rows = [MethodRow(name, kernel_to_dict(spec)) for name, spec in parsed]
    for t in range(trials):
        tseed = int(child_rng(seed, 400, t).integers(2**31))
        g, data, query, y_true = gen_sinc_subgraph_data(tseed, noise_var, n_test)
        for row, (_, spec) in zip(rows, parsed):
            _run_method(row, spec, data, g, cfg, [(query, y_true)], emit_raw, [t])
    meta = {
        "graph": {"type": "sinc_subgraph", "edges": [list(e) for e in SINC_EDGES], "topology": SINC_TOPOLOGY_NOTE},
        "counts": list(SINC_COUNTS),
        "domain": list(SINC_DOMAIN),
        "noise_variance": noise_var,
        "n_test": n_test,
        "target_vertex": len(SINC_COUNTS) - 1,
        "training_set": "fresh data set and refit per trial",
        "std_convention": STD_CONVENTION,
        "optimizer": cfg.to_dict(),
    }
    return ExperimentReport("subgraph", seed, trials, rows, meta)


REAL_PRESETS = {
    "fmri": {"dim": 10, "num_vertices": 40, "n_train": 21, "n_test": 25},
    "weather": {"dim": 1, "num_vertices": 45, "n_train": 10, "n_test": 6},
}


def split_real(data: MultiDataset, n_train: int, n_test: int, rng):
    """Split every vertex block into training rows and test rows.

    For symmetric data the same sample indices are used on every vertex so
    that an isotopic data set stays isotopic.
    """
    counts = data.counts
    if data.symmetric:
        perm = rng.permutation(counts[0])
        perms = [perm] * data.num_vertices
    else:
        perms = [rng.permutation(c) for c in counts]
    train_blocks, test_x, test_y = [], [], []
    for x, y, perm, c in zip(data.inputs, data.outputs, perms, counts):
        if c < n_train + n_test:
            raise InputError(f"vertex block has {c} rows, need {n_train + n_test}")
        tr = np.sort(perm[:n_train])
        te = np.sort(perm[n_train : n_train + n_test])
        train_blocks.append((x[tr], y[tr]))
        test_x.append(x[te])
        test_y.append(y[te])
    query = TestQuery.full(test_x)
    return MultiDataset.from_blocks(train_blocks), query, np.concatenate(test_y)


def validate_real_shape(data: MultiDataset, g: Graph, preset: str | None, n_train: int, n_test: int):
    if data.num_vertices != g.num_vertices:
        raise InputError(f"dataset has {data.num_vertices} vertices, graph has {g.num_vertices}")
    if preset is None:
        return
    want = REAL_PRESETS[preset]
    if data.dim != want["dim"] or data.num_vertices != want["num_vertices"]:
        raise InputError(
            f"{preset} preset expects D={want['dim']}, M={want['num_vertices']}; "
            f"got D={data.dim}, M={data.num_vertices}"
        )
    if not (data.isotopic and data.symmetric):
        raise InputError(f"{preset} preset expects isotopic, symmetric data")
    if min(data.counts) < n_train + n_test:
        raise InputError(f"{preset} preset needs at least {n_train + n_test} samples per vertex")


def run_real(methods, trials, seed, cfg, data: MultiDataset, g: Graph, n_train: int, n_test: int,
             preset: str | None = None, emit_raw=False) -> ExperimentReport:
    validate_real_shape(data, g, preset, n_train, n_test)
    parsed = parse_methods(methods)
    rows = [MethodRow(name, kernel_to_dict(spec)) for name, spec in parsed]
    for t in range(trials):
        train, query, y_true = split_real(data, n_train, n_test, child_rng(seed, 500, t))
        for row, (_, spec) in zip(rows, parsed):
            _run_method(row, spec, train, g, cfg, [(query, y_true)], emit_raw, [t])
    meta = {
        "graph": {"type": "user", "num_vertices": g.num_vertices, "num_edges": len(g.edges)},
        "preset": preset,
        "n_train_per_vertex": n_train,
        "n_test_per_vertex": n_test,
        "std_convention": STD_CONVENTION,
        "optimizer": cfg.to_dict(),
    }
    return ExperimentReport("real", seed, trials, rows, meta)


def run_experiment(suite: str, methods, trials: int, seed: int, out_path=None, cfg: OptimizerConfig | None = None,
                   emit_raw: bool = False, **options) -> ExperimentReport:
    """Run a suite, optionally writing ``out_path`` (JSON), a CSV table and a timing sidecar."""
    cfg = cfg or OptimizerConfig(seed=seed)
    if trials < 1:
        raise InputError("trials must be >= 1")
    if suite == "regular":
        report = run_regular(methods, trials, seed, cfg, emit_raw=emit_raw, **options)
    elif suite == "subgraph":
        report = run_subgraph(methods, trials, seed, cfg, emit_raw=emit_raw, **options)
    elif suite == "real":
        report = run_real(methods, trials, seed, cfg, emit_raw=emit_raw, **options)
    else:
        raise InputError(f"unknown suite {suite!r}")
    if out_path is not None:
        report.write(out_path, include_raw=emit_raw)
    return report


def load_methods(path) -> list:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read methods file {path}: {exc}") from exc
    if isinstance(raw, dict):
        raw = [raw]
    return raw


__all__ = [
    "ExperimentReport",
    "gen_regular_experiment_data",
    "gen_sinc_subgraph_data",
    "read_dataset_csv",
    "run_experiment",
]
