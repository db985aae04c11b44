import json

import numpy as np
import pytest

from graphmogp import cli
from graphmogp.errors import NotPositiveDefinite
from graphmogp.io import read_truth_csv, write_json
from graphmogp.model import LOG_2PI

SE = {"family": "se"}
LA = {"variant": "separable", "data": SE, "graph": {"family": "local_averaging"}}
SOGP = {"variant": "sogp", "data": SE}


@pytest.fixture
def workdir(tmp_path):
    write_json(LA, tmp_path / "kernel.json")
    write_json({"max_iters": 20, "restarts": 1}, tmp_path / "opt.json")
    assert cli.main(["gen", "regular", "--out", str(tmp_path), "--seed", "2", "--m", "8", "--k", "3",
                     "--n-train", "5", "--n-test", "4"]) == 0
    return tmp_path


def _train(d, *extra):
    return cli.main(["train", "--graph", str(d / "graph.json"), "--data", str(d / "train.csv"),
                     "--kernel", str(d / "kernel.json"), "--opt", str(d / "opt.json"),
                     "--out", str(d / "model.json"), *extra])


def _predict(d, query, *extra):
    return cli.main(["predict", "--model", str(d / "model.json"), "--graph", str(d / "graph.json"),
                     "--data", str(d / "train.csv"), "--query", str(query), "--out", str(d / "pred.json"), *extra])


def test_gen_writes_files(workdir):
    g = json.loads((workdir / "graph.json").read_text())
    assert g["num_vertices"] == 8
    assert (workdir / "train.csv").read_text().splitlines()[0] == "vertex,x0,y"
    assert len((workdir / "test.csv").read_text().splitlines()) == 1 + 8 * 4


def test_gen_subgraph(tmp_path):
    assert cli.main(["gen", "subgraph", "--out", str(tmp_path), "--seed", "1"]) == 0
    v, x, y = read_truth_csv(tmp_path / "test.csv")
    assert set(v) == {5} and len(y) == 10


def test_round_trip(workdir, capsys):
    assert _train(workdir, "--trace", str(workdir / "trace.csv")) == 0
    model = json.loads((workdir / "model.json").read_text())
    assert model["format"] == cli.MODEL_FORMAT
    assert len(model["centering"]) == 8
    assert (workdir / "trace.csv").exists()
    assert _predict(workdir, workdir / "test.csv", "--cov") == 0
    pred = json.loads((workdir / "pred.json").read_text())
    assert len(pred["mean"]) == 32 and len(pred["cov"]) == 32
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(workdir / "pred.json"), "--truth", str(workdir / "test.csv"),
                     "--out", str(workdir / "metrics.json")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((workdir / "metrics.json").read_text())
    assert printed["n"] == 32 and printed["joint"] is True
    assert np.isfinite(printed["mse"]) and np.isfinite(printed["log_likelihood"])


def test_predict_mean_is_uncentered(workdir):
    assert _train(workdir) == 0
    assert _predict(workdir, workdir / "test.csv") == 0
    model = json.loads((workdir / "model.json").read_text())
    pred = json.loads((workdir / "pred.json").read_text())
    v, _, y = read_truth_csv(workdir / "test.csv")
    mean = np.asarray(pred["mean"])
    # the stored offsets are the per-vertex training means, which the predictions must be near
    for u in range(8):
        assert abs(np.mean(mean[v == u]) - model["centering"][u]) < 10 * np.std(y)


def test_wrong_dimension_query_exit_2(workdir, capsys):
    assert _train(workdir) == 0
    q = workdir / "q2.csv"
    q.write_text("vertex,x0,x1\n0,1.0,2.0\n")
    assert _predict(workdir, q) == 2
    assert "D=2" in capsys.readouterr().err


def test_hash_mismatch_refused(workdir, capsys):
    assert _train(workdir) == 0
    lines = (workdir / "train.csv").read_text().splitlines()
    lines[1] = lines[1].rsplit(",", 1)[0] + ",123.5"
    (workdir / "train.csv").write_text("\n".join(lines) + "\n")
    assert _predict(workdir, workdir / "test.csv") == 2
    assert "sha256 mismatch" in capsys.readouterr().err
    g = json.loads((workdir / "graph.json").read_text())
    g["edges"] = g["edges"][1:]
    (workdir / "graph.json").write_text(json.dumps(g))
    assert _predict(workdir, workdir / "test.csv") == 2


def test_bad_inputs_exit_2(workdir, capsys):
    (workdir / "bad.csv").write_text("vertex,x0,y\n0,abc,1\n")
    assert cli.main(["train", "--graph", str(workdir / "graph.json"), "--data", str(workdir / "bad.csv"),
                     "--kernel", str(workdir / "kernel.json"), "--out", str(workdir / "m.json")]) == 2
    assert "bad.csv:2" in capsys.readouterr().err
    (workdir / "k.json").write_text('{"variant": "separable"}')
    assert cli.main(["train", "--graph", str(workdir / "graph.json"), "--data", str(workdir / "train.csv"),
                     "--kernel", str(workdir / "k.json"), "--out", str(workdir / "m.json")]) == 2
    assert cli.main(["eval", "--pred", str(workdir / "missing.json"), "--truth", str(workdir / "test.csv")]) == 2


def test_numerical_failure_exit_3(monkeypatch, capsys):
    def boom(args):
        raise NotPositiveDefinite("matrix is not positive definite")

    monkeypatch.setattr(cli, "cmd_eval", boom)
    assert cli.main(["eval", "--pred", "a", "--truth", "b"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def _perfect(tmp_path, with_cov):
    v = np.array([0, 0, 1])
    y = np.array([0.5, -1.0, 2.0])
    var = np.array([0.1, 0.2, 0.3])
    pred = {"mean": y.tolist(), "var_observed": var.tolist(), "vertex": v.tolist()}
    if with_cov:
        cov = np.diag(var) + 0.05 * (1 - np.eye(3))
        pred["cov"] = cov.tolist()
    else:
        cov = np.diag(var)
    write_json(pred, tmp_path / "p.json")
    (tmp_path / "t.csv").write_text("vertex,x0,y\n" + "".join(f"{a},0.0,{float(b)!r}\n" for a, b in zip(v, y)))
    return cov


@pytest.mark.parametrize("with_cov", [False, True])
def test_eval_perfect_prediction(tmp_path, capsys, with_cov):
    cov = _perfect(tmp_path, with_cov)
    assert cli.main(["eval", "--pred", str(tmp_path / "p.json"), "--truth", str(tmp_path / "t.csv")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["mse"] == 0.0
    want = -0.5 * (np.linalg.slogdet(cov)[1] + 3 * LOG_2PI)
    assert res["log_likelihood"] == pytest.approx(want, rel=1e-12)


def test_eval_misaligned_truth(tmp_path):
    _perfect(tmp_path, False)
    (tmp_path / "t.csv").write_text("vertex,x0,y\n1,0,0\n0,0,0\n0,0,0\n")
    assert cli.main(["eval", "--pred", str(tmp_path / "p.json"), "--truth", str(tmp_path / "t.csv")]) == 2


def test_noise_free_interpolation(tmp_path, capsys):
    assert cli.main(["gen", "regular", "--out", str(tmp_path), "--seed", "0", "--m", "6", "--k", "2",
                     "--n-train", "8", "--noise-var", "0"]) == 0
    write_json(SOGP, tmp_path / "kernel.json")
    write_json({"max_iters": 200, "restarts": 1}, tmp_path / "opt.json")
    assert _train(tmp_path, "--noise-var", "1e-6") == 0
    assert _predict(tmp_path, tmp_path / "train.csv") == 0
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(tmp_path / "pred.json"), "--truth", str(tmp_path / "train.csv")]) == 0
    res = json.loads(capsys.readouterr().out)
    _, _, y = read_truth_csv(tmp_path / "train.csv")
    assert res["mse"] < 1e-4 * np.var(y)


def test_experiment_subcommand_deterministic(tmp_path):
    write_json([{"name": "SOGP", "kernel": SOGP}, {"name": "LA", "kernel": LA}], tmp_path / "methods.json")
    write_json({"max_iters": 10, "restarts": 1}, tmp_path / "opt.json")
    outs = []
    for i in range(2):
        out = tmp_path / f"rep{i}.json"
        assert cli.main(["experiment", "--suite", "regular", "--methods", str(tmp_path / "methods.json"),
                         "--trials", "2", "--seed", "3", "--opt", str(tmp_path / "opt.json"), "--k", "3,4",
                         "--m", "8", "--n-train", "4", "--n-test", "3", "--out", str(out), "--emit-raw"]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    rep = json.loads(outs[0].read_text())
    assert [(r["group"], r["method"]) for r in rep["rows"]] == [("k=3", "SOGP"), ("k=3", "LA"), ("k=4", "SOGP"),
                                                               ("k=4", "LA")]
    assert rep["metadata"]["optimizer"]["max_iters"] == 10
    assert outs[0].with_suffix(".csv").exists()


def test_experiment_real_suite(tmp_path):
    rng = np.random.default_rng(0)
    m, n = 5, 9
    x = rng.normal(size=n)
    rows = ["vertex,x0,y"] + [f"{v},{float(x[i])!r},{float(np.sin(x[i] + v))!r}" for v in range(m) for i in range(n)]
    (tmp_path / "data.csv").write_text("\n".join(rows) + "\n")
    write_json({"num_vertices": m, "edges": [[i, i + 1] for i in range(m - 1)]}, tmp_path / "g.json")
    write_json([SOGP], tmp_path / "methods.json")
    write_json({"max_iters": 5, "restarts": 1}, tmp_path / "opt.json")
    args = ["experiment", "--suite", "real", "--methods", str(tmp_path / "methods.json"), "--trials", "2",
            "--opt", str(tmp_path / "opt.json"), "--graph", str(tmp_path / "g.json"), "--data",
            str(tmp_path / "data.csv"), "--n-train", "5", "--n-test", "3", "--out", str(tmp_path / "r.json")]
    assert cli.main(args) == 0
    assert json.loads((tmp_path / "r.json").read_text())["rows"][0]["trials"] == 2
    assert cli.main(args[:-2] + ["--preset", "fmri"]) == 2
    assert cli.main(args[:7] + ["--out", str(tmp_path / "x.json")]) == 2
