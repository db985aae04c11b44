import json

import numpy as np
import pytest

from graphmogp.errors import InputError, ParseError
from graphmogp.experiments import (
    REAL_PRESETS,
    SINC_COUNTS,
    Centering,
    child_rng,
    gen_regular_experiment_data,
    gen_sinc_subgraph_data,
    make_regular_problem,
    parse_methods,
    run_experiment,
    sinc,
    sinc_intervals,
    split_real,
)
from graphmogp.graph import knn_graph
from graphmogp.model import LOG_2PI, MultiDataset
from graphmogp.numerics import cholesky, logdet, solve_chol
from graphmogp.training import OptimizerConfig

SE = {"family": "se"}
SOGP = {"name": "SOGP", "kernel": {"variant": "sogp", "data": SE}}
LA = {"name": "LA", "kernel": {"variant": "separable", "data": SE, "graph": {"family": "local_averaging"}}}
QUICK = OptimizerConfig(max_iters=15, restarts=1)


# ---------------------------------------------------------------------------
# k-regular generator


def test_regular_outputs_depend_only_on_neighbours():
    prob = make_regular_problem(32, 6, seed=3, noise_var=0.0)
    x = np.linspace(0, 5, 7)
    base = prob.latent(x)
    for v in range(32):
        p = prob.p.copy()
        p[v] += 1.0
        changed = type(prob)(prob.graph, p, prob.q, prob.r, 0.0).latent(x)
        moved = np.flatnonzero(np.any(changed != base, axis=1))
        assert set(moved) == set(prob.graph.neighbors(v))


def test_regular_noise_free_is_deterministic():
    a = gen_regular_experiment_data(k=6, seed=9, noise_var=0.0)
    b = gen_regular_experiment_data(k=6, seed=9, noise_var=0.0)
    assert np.array_equal(a[1].y, b[1].y)
    assert np.array_equal(a[3], b[3])
    prob = make_regular_problem(32, 6, seed=9, noise_var=0.0)
    assert np.allclose(a[1].y.reshape(32, -1), prob.latent(a[1].inputs[0][:, 0]))


def test_regular_inputs_isotopic_and_disjoint():
    g, data, query, truth = gen_regular_experiment_data(k=6, seed=1)
    assert data.isotopic and data.counts == [10] * 32
    xs = data.inputs[0][:, 0]
    assert np.all((xs >= 0) & (xs <= 5))
    assert not set(xs) & set(query.inputs[0][:, 0])
    assert truth.shape == (320,)
    assert all(len(g.neighbors(v)) == 6 for v in range(32))


def test_regular_variance_grows_with_degree():
    def mean_var(k):
        out = []
        for seed in range(20):
            _, data, _, _ = gen_regular_experiment_data(k=k, seed=seed)
            out.append(np.mean([np.var(y) for y in data.outputs]))
        return np.mean(out)

    assert mean_var(24) > mean_var(6)


def test_regular_q_range_override():
    prob = make_regular_problem(32, 6, seed=0, q_range=(1.0, 3.0))
    assert np.all((prob.q >= 1.0) & (prob.q <= 3.0))
    assert np.ptp(prob.q) > 0
    assert np.all(make_regular_problem(32, 6, seed=0).q == 5.0)


# ---------------------------------------------------------------------------
# sinc generator


def test_sinc_block_sizes_and_intervals():
    g, data, query, y = gen_sinc_subgraph_data(seed=0)
    assert data.counts == [20, 20, 20, 20, 20, 10]
    assert list(SINC_COUNTS) == data.counts
    for (lo, hi), x in zip(sinc_intervals(), data.inputs):
        assert np.all((x >= lo) & (x <= hi))
    assert query.vertices == (5,)
    assert query.t == 10 and y.shape == (10,)
    assert g.num_vertices == 6
    assert {(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)} == set(g.edge_set())


def test_sinc_limit_at_zero():
    assert sinc(0.0) == 1.0
    assert sinc(np.array([1e-300]))[0] == 1.0
    assert np.isclose(sinc(np.pi / 2), 2 / np.pi)


def test_sinc_noise_free_targets_are_exact():
    _, data, query, y = gen_sinc_subgraph_data(seed=4, noise_var=0.0)
    assert np.allclose(y, np.sin(query.x[:, 0]) / query.x[:, 0], rtol=1e-14, atol=0)
    for x, t in zip(data.inputs, data.outputs):
        assert np.allclose(t, np.sin(x[:, 0]) / x[:, 0], rtol=1e-14, atol=0)


def test_sinc_targets_are_latent_plus_noise():
    _, _, query, y = gen_sinc_subgraph_data(seed=2, noise_var=0.01)
    r = y - sinc(query.x[:, 0])
    assert np.all(r != 0)
    assert 0.02 < np.std(r) < 0.3


# ---------------------------------------------------------------------------
# centering and method parsing


def test_centering_per_vertex_with_empty_fallback():
    data = MultiDataset.from_blocks([(np.zeros((2, 1)), np.array([1.0, 3.0])), (np.zeros((0, 1)), np.zeros(0)),
                                     (np.zeros((1, 1)), np.array([5.0]))])
    c = Centering.from_data(data)
    assert c.means == (2.0, 3.0, 5.0)
    assert np.allclose(c.apply(data).outputs[0], [-1.0, 1.0])
    assert np.allclose(c.offsets([2, 0]), [5.0, 2.0])


def test_parse_methods_names():
    parsed = parse_methods([SOGP, LA["kernel"]])
    assert parsed[0][0] == "SOGP"
    assert parsed[1][0]
    with pytest.raises(ParseError):
        parse_methods([SOGP, SOGP])
    with pytest.raises(ParseError):
        parse_methods([{"name": "x", "kernel": SOGP["kernel"], "colour": 1}])


def test_child_rng_independent_streams():
    a = child_rng(1, 2).random(3)
    assert np.array_equal(a, child_rng(1, 2).random(3))
    assert not np.array_equal(a, child_rng(1, 3).random(3))


# ---------------------------------------------------------------------------
# harness


def test_two_trial_report_shape():
    rep = run_experiment("subgraph", [SOGP], trials=2, seed=0, cfg=QUICK)
    assert len(rep.rows) == 1
    s = rep.rows[0].summary()
    assert s["trials"] == 2 and s["failures"] == 0
    assert s["mse_std"] == pytest.approx(np.std(rep.rows[0].mse, ddof=1) / np.sqrt(2))
    assert s["log_likelihood_std"] is not None
    assert "standard error" in rep.metadata["std_convention"]


def test_rows_follow_declared_order():
    rep = run_experiment("regular", [LA, SOGP], trials=2, seed=0, cfg=QUICK, ks=(6, 8), m=12, n_train=4, n_test=3)
    assert [(r.group, r.name) for r in rep.rows] == [("k=6", "LA"), ("k=6", "SOGP"), ("k=8", "LA"), ("k=8", "SOGP")]


def test_report_bytes_deterministic(tmp_path):
    paths = []
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        run_experiment("subgraph", [SOGP, LA], trials=2, seed=5, out_path=out, cfg=QUICK, emit_raw=True)
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].with_suffix(".csv").read_bytes() == paths[1].with_suffix(".csv").read_bytes()
    assert paths[0].with_suffix(".timing.json").exists()
    assert "wall_time" not in paths[0].read_text()


def test_different_seed_changes_report(tmp_path):
    a = run_experiment("subgraph", [SOGP], trials=2, seed=1, cfg=QUICK).to_dict()
    b = run_experiment("subgraph", [SOGP], trials=2, seed=2, cfg=QUICK).to_dict()
    assert a["rows"][0]["mse_mean"] != b["rows"][0]["mse_mean"]


def _recompute(raw):
    y = np.asarray(raw["y_true"])
    mean = np.asarray(raw["mean"])
    cov = np.asarray(raw["cov_observed"])
    r = y - mean
    f = cholesky(cov)
    return float(np.mean(r * r)), float(-0.5 * (r @ solve_chol(f, r) + logdet(f) + r.size * LOG_2PI))


def test_raw_predictions_reproduce_metrics(tmp_path):
    out = tmp_path / "rep.json"
    run_experiment("regular", [SOGP, LA], trials=3, seed=0, out_path=out, cfg=QUICK, emit_raw=True, m=10,
                   n_train=4, n_test=3)
    rep = json.loads(out.read_text())
    for row in rep["rows"]:
        assert len(row["raw"]) == 3
        mses, lls = zip(*(_recompute(r) for r in row["raw"]))
        assert abs(np.mean(mses) - row["mse_mean"]) <= 1e-12 * max(1.0, abs(row["mse_mean"]))
        assert abs(np.mean(lls) - row["log_likelihood_mean"]) <= 1e-12 * max(1.0, abs(row["log_likelihood_mean"]))


def test_fit_failure_is_recorded_not_fatal():
    # ICM vectors sized for 3 vertices cannot be used on an 8-vertex graph
    bad = {"name": "bad", "kernel": {"variant": "separable", "data": SE,
                                     "graph": {"family": "icm", "w": [1, 1, 1], "kappa": [1, 1, 1]}}}
    rep = run_experiment("regular", [bad, SOGP], trials=2, seed=0, cfg=QUICK, m=8, n_train=3, n_test=2)
    assert [r.name for r in rep.rows] == ["bad", "SOGP"]
    s = rep.rows[0].summary()
    assert s["trials"] == 0 and s["failures"] == 1 and s["mse_mean"] is None
    assert "ICM" in s["failure_messages"][0]
    assert rep.rows[1].summary()["trials"] == 2


def test_unknown_suite_and_bad_trials():
    with pytest.raises(InputError):
        run_experiment("nope", [SOGP], trials=1, seed=0)
    with pytest.raises(InputError):
        run_experiment("subgraph", [SOGP], trials=0, seed=0)


# ---------------------------------------------------------------------------
# real-data suite on synthetic stand-ins


def _isotopic(m, d, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(m, d))
    blocks = [(x, np.tanh(x @ w[v]) + 0.05 * rng.normal(size=n)) for v in range(m)]
    return MultiDataset.from_blocks(blocks), knn_graph(w, 4)


def test_split_real_keeps_isotopic():
    data, _ = _isotopic(5, 2, 12, 0)
    train, query, y = split_real(data, 4, 3, np.random.default_rng(0))
    assert train.isotopic and train.counts == [4] * 5
    assert query.t == 15 and y.shape == (15,)
    assert not set(map(tuple, train.inputs[0])) & set(map(tuple, query.inputs[0]))


@pytest.mark.parametrize("preset", ["fmri", "weather"])
def test_real_suite_runs_on_preset_shapes(preset):
    p = REAL_PRESETS[preset]
    data, g = _isotopic(p["num_vertices"], p["dim"], p["n_train"] + p["n_test"], 1)
    rep = run_experiment("real", [SOGP], trials=2, seed=0, cfg=OptimizerConfig(max_iters=3, restarts=1), data=data,
                         g=g, n_train=p["n_train"], n_test=p["n_test"], preset=preset)
    s = rep.rows[0].summary()
    assert s["trials"] == 2 and s["failures"] == 0


def test_real_suite_rejects_wrong_shape():
    data, g = _isotopic(40, 3, 46, 0)
    with pytest.raises(InputError):
        run_experiment("real", [SOGP], trials=1, seed=0, data=data, g=g, n_train=21, n_test=25, preset="fmri")
    data, g = _isotopic(6, 1, 8, 0)
    with pytest.raises(InputError):
        run_experiment("real", [SOGP], trials=1, seed=0, data=data, g=g, n_train=5, n_test=5)
