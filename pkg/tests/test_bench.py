import json
import math

import numpy as np
import pytest

from ddsr import bench
from ddsr.data import inject_noise, make_dataset
from ddsr.expr import Node, TokenLibrary, const, parse_prefix
from ddsr.trainer import TrainerConfig


def dataset(f, n=80, k=1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, size=(n, k))
    return make_dataset(X, f(X), seed=seed)


def test_r2_definition():
    y = np.array([1.0, 2.0, 3.0, 5.0])
    assert bench.r2_score(y, y) == 1.0
    assert bench.r2_score(np.full(4, y.mean()), y) == pytest.approx(0.0, abs=1e-15)
    assert bench.r2_score(np.array([np.nan, 1, 1, 1.0]), y) == -math.inf


def test_score_flags():
    data = dataset(lambda X: X[:, 0])
    m = bench.score(parse_prefix("x1"), data)
    assert m.r2 == 1.0 and m.accuracy and m.solution and m.complexity == 1
    mean = const(float(data.y_test.mean()))
    m0 = bench.score(mean, data)
    assert m0.r2 == pytest.approx(0.0, abs=1e-12) and not m0.accuracy and not m0.solution
    bad = bench.score(parse_prefix("log - x1 10"), data)
    assert bad.r2 == -math.inf and not bad.accuracy and not bad.solution


@pytest.mark.parametrize(
    "r2, accuracy, solution",
    [(0.999, False, False), (np.nextafter(0.999, 1), True, False), (0.9995, True, False),
     (1 - 1e-10, True, True), (1.0, True, True)],
)
def test_threshold_boundaries(monkeypatch, r2, accuracy, solution):
    data = dataset(lambda X: X[:, 0])
    monkeypatch.setattr(bench, "r2_score", lambda pred, y: r2)
    m = bench.score(parse_prefix("x1"), data)
    assert (m.accuracy, m.solution) == (accuracy, solution)


def test_structural_solution_match():
    data = dataset(lambda X: 2.5 * X[:, 0] + 0.3 * np.sin(7 * X[:, 0]))
    truth = Node("*", (const(2.5), Node("x1")))
    near = Node("*", (const(2.5 + 1e-9), Node("x1")))
    m = bench.score(near, data, truth)
    assert not m.accuracy or m.r2 < bench.SOLUTION_R2
    assert m.solution
    assert not bench.score(parse_prefix("x1"), data, truth).solution


def test_score_is_noise_invariant():
    data = dataset(lambda X: X[:, 0] ** 2)
    tree = parse_prefix("* x1 1.1")
    base = bench.score(tree, data)
    for gamma in (0.001, 0.01, 0.1):
        noisy = inject_noise(data, gamma, np.random.default_rng(3))
        assert bench.score(tree, noisy) == base


def sample_report(**kw):
    fields = dict(
        status="ok", seed=1, expression="x1", tokens=["x1"], constants=[], train_r2=1.0, train_nrmse=0.0,
        test_r2=-math.inf, test_nrmse=math.inf, complexity=1, accuracy=False, solution_proxy=False,
        best_reward=0.5, best_epoch=0, epochs_run=3, config=TrainerConfig().to_dict(), curve_path="r.curve.csv",
        diagnostics={"fits": 3}, noise=0.0, wall_seconds=1.5,
    )
    fields.update(kw)
    return bench.RunReport(**fields)


def test_report_round_trip():
    rep = sample_report()
    text = rep.to_json()
    json.loads(text)  # strict JSON
    assert "Infinity" not in text
    assert bench.RunReport.from_json(text) == rep
    assert bench.comparable(text) == bench.comparable(sample_report(wall_seconds=99.0).to_json())


def test_curve_csv_round_trip(tmp_path):
    curve = [{"epoch": i, "best_reward": 0.1 * i, "mean_reward": 0.05, "r_alpha": 0.01, "mean_entropy": 1.0,
              "wall_seconds": 0.5} for i in range(3)]
    bench.write_curve(tmp_path / "c.csv", curve)
    assert bench.read_curve(tmp_path / "c.csv") == curve
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "epoch,best_reward,mean_reward,r_alpha,mean_entropy,wall_seconds"


def small_cfg(**kw):
    base = dict(B=30, N=3, M=8, E=4, F=16, seed=2, gamma=1e-3)
    base.update(kw)
    return TrainerConfig(**base)


def test_fit_writes_report_and_curve(tmp_path):
    data = dataset(lambda X: X[:, 0] + 1)
    rep, res = bench.fit(data, small_cfg(), tmp_path / "run.json")
    assert (tmp_path / "run.json").exists() and (tmp_path / "run.curve.csv").exists()
    back = bench.RunReport.load(tmp_path / "run.json")
    assert back == rep
    assert rep.tokens == [TokenLibrary(1).symbol(i) for i in res.best.seq]
    assert rep.accuracy == (rep.test_r2 > 0.999)


def test_ablation_variants(tmp_path):
    data = dataset(lambda X: X[:, 0] * 2)
    only = bench.run_ablation(data, small_cfg(), [])
    assert list(only) == ["full"]
    reps = bench.run_ablation(data, small_cfg(), ["rspg"], tmp_path)
    assert list(reps) == ["full", "rspg"]
    assert reps["full"].curve_path != reps["rspg"].curve_path
    assert reps["rspg"].config["policy"] == "rspg" and reps["full"].seed == reps["rspg"].seed
    again = bench.run_ablation(data, small_cfg(), ["rspg"])
    assert bench.comparable(again["rspg"].to_json()) == bench.comparable(
        bench.RunReport.load(tmp_path / "rspg-seed2.json").to_json()
    ).replace('"rspg-seed2.curve.csv"', "null")
    with pytest.raises(ValueError):
        bench.run_ablation(data, small_cfg(), ["nope"])


def test_bench_summary(tmp_path):
    problems = [("lin", dataset(lambda X: X[:, 0]), parse_prefix("x1"))]
    rows = bench.run_bench(problems, small_cfg(), [0.0, 0.1], tmp_path)
    assert len(rows) == 2
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "noise,problems,accuracy_rate,solution_rate" and len(lines) == 3
