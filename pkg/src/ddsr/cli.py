"""Command-line entry point: ``ddsr fit|ablate|bench|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, net
from .data import DataError, load_csv
from .expr import parse_prefix
from .trainer import TrainerConfig

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2

log = logging.getLogger("ddsr")


class InputError(Exception):
    """Bad data, config or arguments (exit code 1)."""


def load_config(path: str | None, seed: int | None) -> TrainerConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError(f"config {path}: expected a JSON object")
    if seed is not None:
        raw["seed"] = seed
    try:
        return TrainerConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from None


def _load_data(path: str, split_seed: int):
    try:
        return load_csv(path, seed=split_seed)
    except DataError as exc:
        raise InputError(str(exc)) from None


def _truth(text: str | None):
    if text is None:
        return None
    try:
        return parse_prefix(text)
    except (ValueError, IndexError) as exc:
        raise InputError(f"--truth: {exc}") from None


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad number list {text!r}") from None
    if any(v < 0 for v in vals):
        raise InputError("noise levels must be non-negative")
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad integer list {text!r}") from None


def cmd_fit(args) -> int:
    cfg = load_config(args.config, args.seed)
    data = _load_data(args.data, args.split_seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report, result = bench.fit(data, cfg, out, _truth(args.truth), noise=args.noise)
    if args.checkpoint and result.params is not None:
        net.save_params(args.checkpoint, result.params)
    print(f"{report.status}: {report.expression}  test R2={report.test_r2}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args.config, None)
    try:
        variants = bench.parse_variants(args.variants)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    data = _load_data(args.data, args.split_seed)
    truth = _truth(args.truth)
    seeds = _ints(args.seeds) if args.seeds else [args.seed if args.seed is not None else base.seed]
    for seed in seeds:
        cfg = TrainerConfig.from_dict({**base.to_dict(), "seed": seed})
        reports = bench.run_ablation(data, cfg, variants, args.out, truth)
        line = "  ".join(f"{k}={r.best_reward}" for k, r in reports.items())
        print(f"seed {seed}: {line}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config, args.seed)
    suite = Path(args.suite)
    if not suite.is_dir():
        raise InputError(f"suite {suite} is not a directory")
    problems = []
    for path in sorted(suite.glob("*.csv")):
        sidecar = path.with_suffix(".truth")
        truth = _truth(sidecar.read_text(encoding="utf-8").strip()) if sidecar.exists() else None
        problems.append((path.stem, _load_data(str(path), args.split_seed), truth))
    if not problems:
        raise InputError(f"no CSV files in {suite}")
    rows = bench.run_bench(problems, cfg, _floats(args.noise), args.out)
    for r in rows:
        print(f"{r['problem']} noise={r['noise']:g} acc={r['accuracy']} sol={r['solution_proxy']}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import plots

    root = Path(args.input)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    reports = []
    for path in sorted(root.rglob("*.json")):
        try:
            reports.append((path, bench.RunReport.load(path)))
        except (TypeError, json.JSONDecodeError):
            continue  # ablation summaries and other JSON files
    if not reports:
        raise InputError(f"no run reports under {root}")
    for path, r in reports:
        print(f"{path.relative_to(root)}\t{r.status}\tR2={r.test_r2}\tcx={r.complexity}\t{r.expression}")
    if args.svg:
        written = plots.write_svgs(reports, root)
        for p in written:
            print(f"wrote {p}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ddsr", description="Diffusion-based symbolic regression")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_help="run seed (overrides the config)"):
        p.add_argument("--config", help="TrainerConfig JSON")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("--split-seed", type=int, default=0, help="train/test split seed")
        p.add_argument("--truth", help="ground-truth prefix expression for the solution check")

    p = sub.add_parser("fit", help="train on one dataset and write a report")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0, help="training-target noise level")
    p.add_argument("--checkpoint", help="also write the trained denoiser parameters here")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("ablate", help="full method against ablated variants")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default=",".join(bench.VARIANTS))
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma-separated seeds, one ablation per seed")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="every CSV in a suite at several noise levels")
    p.add_argument("--suite", required=True)
    p.add_argument("--noise", default="0")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarise reports, optionally as SVG plots")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:  # noqa: BLE001 - top-level boundary
        log.exception("internal failure")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
