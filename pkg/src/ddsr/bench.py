"""Scoring, run reports, ablations and benchmark sweeps."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import Dataset, inject_noise
from .expr import Node, TokenLibrary, compile_tree, simplify, simplified_complexity, to_infix
from .trainer import Candidate, TrainerConfig, TrainResult, train

ACCURACY_R2 = 0.999
SOLUTION_R2 = 1.0 - 1e-10
VARIANTS = ("d3pm", "rspg", "st")
CURVE_FIELDS = ("epoch", "best_reward", "mean_reward", "r_alpha", "mean_entropy", "wall_seconds")
REPORT_VERSION = 1


# ---------------------------------------------------------------- metrics


def r2_score(pred: np.ndarray, y: np.ndarray) -> float:
    """Coefficient of determination; ``-inf`` for non-finite predictions.

    Constant targets use a unit variance, the same convention as NRMSE,
    so ``R2 = 1 - NRMSE**2`` always holds.
    """
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(pred)):
        return -math.inf
    ss_res = float(np.sum((y - pred) ** 2))
    var = float(np.var(y))
    ss_tot = y.size * (var if var > 0 else 1.0)
    return 1.0 - ss_res / ss_tot


def _nrmse_of_r2(r2: float) -> float:
    return math.sqrt(max(1.0 - r2, 0.0)) if math.isfinite(r2) else math.inf


def structurally_equal(a: Node, b: Node, rtol: float = 1e-6) -> bool:
    """Same shape and symbols, bound constants equal up to ``rtol``."""
    if a.sym != b.sym or len(a.children) != len(b.children):
        return False
    if a.sym == "c":
        if a.value is None or b.value is None:
            return a.value is b.value
        if not math.isclose(a.value, b.value, rel_tol=rtol, abs_tol=rtol):
            return False
    return all(structurally_equal(x, y, rtol) for x, y in zip(a.children, b.children))


@dataclass(frozen=True)
class Metrics:
    r2: float
    nrmse: float
    accuracy: bool
    solution: bool
    complexity: int


def score(tree: Node, data: Dataset, truth: Node | None = None, split: str = "test") -> Metrics:
    X, y = (data.X_test, data.y_test) if split == "test" else (data.X_train, data.y_train)
    pred = compile_tree(tree)(X)
    r2 = r2_score(pred, y)
    ok = math.isfinite(r2)
    solution = ok and r2 >= SOLUTION_R2
    if ok and not solution and truth is not None:
        solution = structurally_equal(simplify(tree), simplify(truth))
    return Metrics(r2, _nrmse_of_r2(r2), ok and r2 > ACCURACY_R2, bool(solution), simplified_complexity(tree))


# ---------------------------------------------------------------- reports


@dataclass
class RunReport:
    status: str
    seed: int
    expression: str | None
    tokens: list[str] | None
    constants: list[float]
    train_r2: float | None
    train_nrmse: float | None
    test_r2: float | None
    test_nrmse: float | None
    complexity: int | None
    accuracy: bool
    solution_proxy: bool
    best_reward: float | None
    best_epoch: int | None
    epochs_run: int
    config: dict[str, Any]
    curve_path: str | None
    diagnostics: dict[str, int] = field(default_factory=dict)
    noise: float = 0.0
    wall_seconds: float = 0.0
    version: int = REPORT_VERSION

    def to_json(self) -> str:
        return json.dumps(_encode(asdict(self)), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        raw = _decode(json.loads(text))
        return cls(**raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


_SPECIAL = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def _encode(obj):
    # strict JSON has no infinities; store them as strings
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj):
    if isinstance(obj, str) and obj in _SPECIAL:
        return _SPECIAL[obj]
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def comparable(report_json: str) -> str:
    """Report text with wall-clock fields removed."""
    raw = json.loads(report_json)
    raw.pop("wall_seconds", None)
    return json.dumps(raw, indent=2, sort_keys=True)


def write_curve(path: str | Path, curve: Sequence[dict[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for row in curve:
            w.writerow([int(row["epoch"])] + [repr(float(row[k])) for k in CURVE_FIELDS[1:]])


def read_curve(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _tokens(cand: Candidate, lib: TokenLibrary) -> list[str]:
    return [lib.symbol(i) for i in cand.seq]


def build_report(
    result: TrainResult,
    data: Dataset,
    cfg: TrainerConfig,
    curve_path: str | None,
    truth: Node | None = None,
    noise: float = 0.0,
    wall: float = 0.0,
) -> RunReport:
    common = dict(
        seed=cfg.seed,
        epochs_run=len(result.curve),
        config=cfg.to_dict(),
        curve_path=curve_path,
        diagnostics=dict(sorted(result.stats.items())),
        noise=noise,
        wall_seconds=wall,
    )
    best = result.best
    if best is None:
        return RunReport(result.status, expression=None, tokens=None, constants=[], train_r2=None, train_nrmse=None,
                         test_r2=None, test_nrmse=None, complexity=None, accuracy=False, solution_proxy=False,
                         best_reward=None, best_epoch=None, **common)
    lib = TokenLibrary(data.k)
    te = score(best.tree, data, truth, "test")
    tr = score(best.tree, data, None, "train")
    consts = [n.value for n in best.tree if n.sym == "c"]
    return RunReport(
        result.status,
        expression=to_infix(best.tree),
        tokens=_tokens(best, lib),
        constants=[float(c) for c in consts],
        train_r2=tr.r2,
        train_nrmse=tr.nrmse,
        test_r2=te.r2,
        test_nrmse=te.nrmse,
        complexity=te.complexity,
        accuracy=te.accuracy,
        solution_proxy=te.solution,
        best_reward=best.reward,
        best_epoch=best.epoch,
        **common,
    )


def fit(
    data: Dataset,
    cfg: TrainerConfig,
    out: str | Path | None = None,
    truth: Node | None = None,
    noise: float = 0.0,
) -> tuple[RunReport, TrainResult]:
    """Train on the training split and score on the test split.

    With ``out`` set, writes the report there and the curve next to it
    as ``<stem>.curve.csv``.
    """
    t0 = time.perf_counter()
    if noise:
        data = inject_noise(data, noise, np.random.default_rng([cfg.seed, 1]))
    result = train(data.X_train, data.y_train, cfg)
    curve_name = None
    if out is not None:
        out = Path(out)
        curve = out.with_name(out.stem + ".curve.csv")
        write_curve(curve, result.curve)
        curve_name = curve.name
    report = build_report(result, data, cfg, curve_name, truth, noise, time.perf_counter() - t0)
    if out is not None:
        report.save(out)
    return report, result


# ---------------------------------------------------------------- ablation


def variant_config(base: TrainerConfig, variant: str) -> TrainerConfig:
    if variant == "full":
        return base
    if variant == "d3pm":
        return replace(base, diffusion="d3pm")
    if variant == "rspg":
        return replace(base, policy="rspg")
    if variant == "st":
        return replace(base, buffer="st")
    raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def parse_variants(text: str | Sequence[str]) -> list[str]:
    names = [v.strip() for v in text.split(",")] if isinstance(text, str) else list(text)
    names = [v for v in names if v]
    for v in names:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    return list(dict.fromkeys(names))


def run_ablation(
    data: Dataset,
    base: TrainerConfig,
    variants: Sequence[str],
    out_dir: str | Path | None = None,
    truth: Node | None = None,
) -> dict[str, RunReport]:
    """Full method plus one run per ablated variant, all with ``base.seed``."""
    names = ["full"] + parse_variants(variants)
    reports = {}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for name in names:
        cfg = variant_config(base, name)
        out = None if out_dir is None else Path(out_dir) / f"{name}-seed{cfg.seed}.json"
        reports[name], _ = fit(data, cfg, out, truth)
    if out_dir is not None:
        summary = {
            name: {
                "accuracy": r.accuracy,
                "solution_proxy": r.solution_proxy,
                "best_reward": r.best_reward,
                "test_r2": r.test_r2,
                "curve_path": r.curve_path,
            }
            for name, r in reports.items()
        }
        text = json.dumps(_encode(summary), indent=2, sort_keys=True) + "\n"
        (Path(out_dir) / f"ablation-seed{base.seed}.json").write_text(text, encoding="utf-8")
    return reports


# ---------------------------------------------------------------- benchmark


def run_bench(
    problems: Sequence[tuple[str, Dataset, Node | None]],
    base: TrainerConfig,
    noise_levels: Sequence[float],
    out_dir: str | Path,
) -> list[dict[str, Any]]:
    """Every problem at every noise level; writes one report per run and
    a ``summary.csv`` with the per-noise accuracy and solution rates."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, data, truth in problems:
        for gamma in noise_levels:
            out = out_dir / f"{name}-noise{gamma:g}-seed{base.seed}.json"
            rep, _ = fit(data, base, out, truth, noise=gamma)
            rows.append({"problem": name, "noise": gamma, "accuracy": rep.accuracy,
                         "solution_proxy": rep.solution_proxy, "test_r2": rep.test_r2,
                         "complexity": rep.complexity})
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["noise", "problems", "accuracy_rate", "solution_rate"])
        for gamma in noise_levels:
            sel = [r for r in rows if r["noise"] == gamma]
            w.writerow([repr(float(gamma)), len(sel),
                        repr(sum(r["accuracy"] for r in sel) / max(len(sel), 1)),
                        repr(sum(r["solution_proxy"] for r in sel) / max(len(sel), 1))])
    return rows
