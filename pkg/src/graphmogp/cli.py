"""Command-line entry point: ``graphmogp {gen,train,predict,eval,experiment}``.

Exit codes are 0 on success, 2 for input errors and 3 for numerical
failures.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from .errors import GraphMogpError, InputError, NumericalError, ParseError
from .experiments import (
    REAL_PRESETS,
    Centering,
    gen_regular_experiment_data,
    gen_sinc_subgraph_data,
    load_methods,
    run_experiment,
)
from .graph import Graph, load_graph, save_graph
from .io import (
    dumps,
    read_dataset_csv,
    read_json,
    read_query_csv,
    read_truth_csv,
    write_dataset_csv,
    write_json,
    write_query_csv,
)
from .kernels import kernel_from_dict, kernel_to_dict
from .model import LOG_2PI, FittedModel, MultiDataset, NoiseModel, Prediction, predict
from .numerics import cholesky, logdet, solve_chol
from .training import OptimizerConfig, fit, write_trace

MODEL_FORMAT = "graphmogp-model/1"


def graph_hash(g: Graph) -> str:
    return hashlib.sha256(dumps(g.to_dict()).encode()).hexdigest()


def data_hash(data: MultiDataset) -> str:
    h = hashlib.sha256()
    h.update(str(data.num_vertices).encode())
    for x, y in zip(data.inputs, data.outputs):
        h.update(np.ascontiguousarray(x, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
        h.update(b"|")
    return h.hexdigest()


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise InputError(f"expected 'lo,hi', got {text!r}") from None
    if lo > hi:
        raise InputError(f"empty range {text!r}")
    return lo, hi


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


def _load_opt(args) -> OptimizerConfig:
    cfg = OptimizerConfig.load(args.opt) if args.opt else OptimizerConfig()
    if args.seed is not None:
        cfg = OptimizerConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 0
    if args.suite == "regular":
        noise = 5.0 if args.noise_var is None else args.noise_var
        g, data, query, truth = gen_regular_experiment_data(
            args.m, args.k, args.n_train, args.n_test, seed, noise, _parse_range(args.qj_range)
        )
    else:
        noise = 0.01 if args.noise_var is None else args.noise_var
        g, data, query, truth = gen_sinc_subgraph_data(seed, noise, args.n_test)
    save_graph(g, out / "graph.json")
    write_dataset_csv(data, out / "train.csv")
    write_query_csv(query, out / "test.csv", truth)


def _read_graph_and_data(args):
    g = load_graph(args.graph)
    data = read_dataset_csv(args.data, g.num_vertices)
    return g, data


def cmd_train(args) -> None:
    g, data = _read_graph_and_data(args)
    spec = kernel_from_dict(read_json(args.kernel, "kernel"))
    cfg = _load_opt(args)
    centering = Centering.from_data(data)
    noise = None
    if args.noise_var is not None:
        noise = NoiseModel((args.noise_var,) * g.num_vertices, shared=not args.per_vertex_noise)
    model = fit(spec, centering.apply(data), g, cfg, noise=noise, shared_noise=not args.per_vertex_noise)
    payload = {
        "format": MODEL_FORMAT,
        "kernel": kernel_to_dict(model.spec),
        "noise": {"variances": list(model.noise.variances), "shared": model.noise.shared},
        "centering": list(centering.means),
        "log_likelihood": model.log_likelihood,
        "data_sha256": data_hash(data),
        "graph_sha256": graph_hash(g),
        "optimizer": cfg.to_dict(),
    }
    write_json(payload, args.out)
    if args.trace:
        write_trace(model, args.trace)


def load_model(path, g: Graph, data: MultiDataset) -> tuple[FittedModel, Centering]:
    raw = read_json(path, "model")
    if not isinstance(raw, dict) or raw.get("format") != MODEL_FORMAT:
        raise ParseError(f"{path} is not a {MODEL_FORMAT} file")
    if raw.get("graph_sha256") != graph_hash(g):
        raise InputError("graph does not match the one the model was trained on (sha256 mismatch)")
    if raw.get("data_sha256") != data_hash(data):
        raise InputError("training data does not match the data the model was trained on (sha256 mismatch)")
    try:
        spec = kernel_from_dict(raw["kernel"])
        noise = NoiseModel(tuple(raw["noise"]["variances"]), bool(raw["noise"]["shared"]))
        centering = Centering(tuple(float(v) for v in raw["centering"]))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed model file {path}: {exc}") from exc
    if len(centering.means) != g.num_vertices:
        raise ParseError("model centering does not match the graph size")
    return FittedModel.build(spec, noise, centering.apply(data), g), centering


def prediction_payload(pred: Prediction, centering: Centering, include_cov: bool) -> dict:
    out = pred.to_dict(include_cov)
    out["mean"] = (pred.mean + centering.offsets(pred.vertex)).tolist()
    return out


def cmd_predict(args) -> None:
    g, data = _read_graph_and_data(args)
    model, centering = load_model(args.model, g, data)
    query = read_query_csv(args.query)
    pred = predict(model, query)
    write_json(prediction_payload(pred, centering, args.cov), args.out)


def evaluate_prediction(raw: dict, vertex, y) -> dict:
    """MSE and Gaussian log-likelihood of ``y`` under a prediction JSON payload."""
    try:
        mean = np.asarray(raw["mean"], dtype=float)
        pv = np.asarray(raw["vertex"], dtype=int)
        cov = np.asarray(raw["cov"], dtype=float) if "cov" in raw else np.diag(np.asarray(raw["var_observed"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed prediction: {exc}") from exc
    y = np.asarray(y, dtype=float)
    if y.shape != mean.shape or not np.array_equal(pv, np.asarray(vertex, dtype=int)):
        raise InputError("truth rows do not line up with the prediction rows (vertex-major order)")
    r = y - mean
    factor = cholesky(cov)
    ll = -0.5 * (r @ solve_chol(factor, r) + logdet(factor) + r.size * LOG_2PI)
    return {"mse": float(np.mean(r * r)), "log_likelihood": float(ll), "n": int(r.size), "joint": "cov" in raw}


def cmd_eval(args) -> None:
    raw = read_json(args.pred, "prediction")
    vertex, _, y = read_truth_csv(args.truth)
    res = evaluate_prediction(raw, vertex, y)
    text = dumps(res)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_experiment(args) -> None:
    methods = load_methods(args.methods)
    cfg = _load_opt(args)
    seed = args.seed if args.seed is not None else 0
    opts: dict = {}
    if args.suite == "regular":
        opts = {
            "ks": _parse_ints(args.k),
            "m": args.m,
            "n_train": args.n_train,
            "n_test": args.n_test,
            "q_range": _parse_range(args.qj_range),
        }
        if args.noise_var is not None:
            opts["noise_var"] = args.noise_var
    elif args.suite == "subgraph":
        opts = {"n_test": args.n_test}
        if args.noise_var is not None:
            opts["noise_var"] = args.noise_var
    else:
        if not (args.graph and args.data):
            raise InputError("the real suite needs --graph and --data")
        g = load_graph(args.graph)
        preset = REAL_PRESETS.get(args.preset) if args.preset else None
        opts = {
            "g": g,
            "data": read_dataset_csv(args.data, g.num_vertices),
            "n_train": args.n_train if args.n_train is not None else (preset or {}).get("n_train", 10),
            "n_test": args.n_test if args.n_test is not None else (preset or {}).get("n_test", 10),
            "preset": args.preset,
        }
    if args.suite != "real":
        opts["n_test"] = opts["n_test"] if opts["n_test"] is not None else 10
        if "n_train" in opts and opts["n_train"] is None:
            opts["n_train"] = 10
    report = run_experiment(args.suite, methods, args.trials, seed, args.out, cfg, args.emit_raw, **opts)
    if args.out is None:
        sys.stdout.write(dumps(report.to_dict(args.emit_raw)))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphmogp", description="Multi-output GP regression on graph vertices.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic data set")
    g.add_argument("suite", choices=["regular", "subgraph"])
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--m", type=int, default=32)
    g.add_argument("--k", type=int, default=6)
    g.add_argument("--n-train", type=int, default=10)
    g.add_argument("--n-test", type=int, default=10)
    g.add_argument("--noise-var", type=float)
    g.add_argument("--qj-range", default="5,5")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit kernel hyperparameters")
    t.add_argument("--graph", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--kernel", required=True)
    t.add_argument("--opt")
    t.add_argument("--seed", type=int)
    t.add_argument("--noise-var", type=float, help="initial noise variance")
    t.add_argument("--per-vertex-noise", action="store_true")
    t.add_argument("--trace", help="write the optimizer trace CSV here")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="posterior prediction at query points")
    pr.add_argument("--model", required=True)
    pr.add_argument("--graph", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--query", required=True)
    pr.add_argument("--cov", action="store_true", help="include the full predictive covariance")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score a prediction against truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run an experiment suite")
    x.add_argument("--suite", required=True, choices=["regular", "subgraph", "real"])
    x.add_argument("--methods", required=True, help="JSON list of kernel specs")
    x.add_argument("--trials", type=int, default=100)
    x.add_argument("--seed", type=int)
    x.add_argument("--opt")
    x.add_argument("--out")
    x.add_argument("--emit-raw", action="store_true")
    x.add_argument("--k", default="6", help="comma-separated degrees (regular suite)")
    x.add_argument("--m", type=int, default=32)
    x.add_argument("--n-train", type=int)
    x.add_argument("--n-test", type=int)
    x.add_argument("--noise-var", type=float)
    x.add_argument("--qj-range", default="5,5")
    x.add_argument("--graph")
    x.add_argument("--data")
    x.add_argument("--preset", choices=sorted(REAL_PRESETS))
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except GraphMogpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
