"""SVG learning-curve and Pareto plots for a directory of run reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import read_curve  # noqa: E402

# fixed ids and no timestamp, so reruns give identical files
plt.rcParams["svg.hashsalt"] = "ddsr"
_META = {"Date": None}


def write_svgs(reports, root: Path) -> list[Path]:
    root = Path(root)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path, rep in reports:
        if not rep.curve_path:
            continue
        curve_file = path.parent / rep.curve_path
        if not curve_file.exists():
            continue
        rows = read_curve(curve_file)
        ax.plot([r["epoch"] for r in rows], [r["best_reward"] for r in rows], label=path.stem, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("best reward")
    ax.set_ylim(0, 1.02)
    if ax.lines and len(ax.lines) <= 12:
        ax.legend(fontsize=7)
    fig.tight_layout()
    out = root / "learning_curves.svg"
    fig.savefig(out, format="svg", metadata=_META)
    plt.close(fig)
    written.append(out)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    pts = [(r.complexity, r.test_r2) for _, r in reports if r.complexity is not None and r.test_r2 is not None]
    pts = [(c, max(v, -1.0)) for c, v in pts]
    if pts:
        ax.scatter(*zip(*pts), s=18, c="tab:blue", label="runs")
        front, best = [], -float("inf")
        for c, v in sorted(pts, key=lambda p: (p[0], -p[1])):
            if v > best:
                front.append((c, v))
                best = v
        ax.step(*zip(*front), where="post", c="tab:red", label="Pareto front")
        ax.legend(fontsize=8)
    ax.set_xlabel("simplified complexity")
    ax.set_ylabel("test R2 (clipped at -1)")
    fig.tight_layout()
    out = root / "pareto.svg"
    fig.savefig(out, format="svg", metadata=_META)
    plt.close(fig)
    written.append(out)
    return written
