"""Schedule plots, ablation tables and run summaries.

Plots are written by a small SVG writer so the package needs no plotting
library.  All output is a pure function of the input files.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .data import FormatError
from .trainer import read_summary

PALETTE = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"]
METRICS = ("dice", "jaccard", "hd95", "asd")


class ComparabilityError(ValueError):
    pass


# ---------------------------------------------------------------- schedule plot

def read_alpha_series(path) -> tuple[list[int], list[float]]:
    """``iter`` and ``alpha`` columns of a schedule dump or training log.

    Rows with an empty ``alpha`` (pre-warm rows of a training log) are skipped.
    """
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if not reader.fieldnames or not {"iter", "alpha"} <= set(reader.fieldnames):
                raise FormatError(f"{path}: expected 'iter' and 'alpha' columns")
            xs, ys = [], []
            for row in reader:
                if row["alpha"] in ("", None):
                    continue
                xs.append(int(row["iter"]))
                ys.append(float(row["alpha"]))
    except (ValueError, csv.Error) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: {exc}") from exc
    if not xs:
        raise FormatError(f"{path}: no alpha values")
    return xs, ys


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def svg_lines(series: dict[str, tuple[list[float], list[float]]], title: str = "",
              x_label: str = "iteration", y_label: str = "alpha",
              width: int = 640, height: int = 360) -> str:
    """Line chart of named ``(xs, ys)`` series as an SVG document."""
    left, right, top, bottom = 56, 16, 28, 44
    pw, ph = width - left - right, height - top - bottom
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(0.0, min(ys_all)), max(1.0, max(ys_all))
    x1 = x1 if x1 > x0 else x0 + 1

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" font-size="13">{title}</text>')
    for k in range(6):
        v = y0 + (y1 - y0) * k / 5
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{_num(py(v))}" y2="{_num(py(v))}" '
                   f'stroke="#e0e0e0"/>')
        out.append(f'<text x="{left - 6}" y="{_num(py(v) + 4)}" text-anchor="end">{v:.1f}</text>')
    for k in range(6):
        v = x0 + (x1 - x0) * k / 5
        out.append(f'<text x="{_num(px(v))}" y="{top + ph + 16}" text-anchor="middle">{v:.0f}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{left + pw / 2:.0f}" y="{height - 8}" text-anchor="middle">{x_label}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.0f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.0f})">{y_label}</text>')
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline class="series" data-label="{name}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 16 * k
        out.append(f'<line x1="{left + pw - 120}" x2="{left + pw - 100}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 94}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_schedule(csv_paths, out_svg, labels=None, title: str = "mixing ratio schedule") -> Path:
    """Plot ``alpha`` against ``iter`` for one or more CSV files."""
    if isinstance(csv_paths, (str, Path)):
        csv_paths = [csv_paths]
    labels = labels or [Path(p).stem for p in csv_paths]
    series = {lab: read_alpha_series(p) for lab, p in zip(labels, csv_paths)}
    out = Path(out_svg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg_lines(series, title))
    return out


# ---------------------------------------------------------------- ablation table

@dataclass
class RunResult:
    path: Path
    label: str
    seed: int
    samples: list[str]
    scores: dict[str, float]


@dataclass
class AblationRow:
    label: str
    seeds: list[int]
    scores: dict[str, float]


@dataclass
class AblationTable:
    axis: str
    rows: list[AblationRow] = field(default_factory=list)

    def row(self, label: str) -> AblationRow:
        return next(r for r in self.rows if r.label == label)

    def to_markdown(self) -> str:
        lines = [f"## Ablation: {self.axis}", "",
                 "| variant | seeds | Dice | Jaccard | HD95 | ASD |",
                 "|---|---|---|---|---|---|"]
        for r in self.rows:
            seeds = ",".join(str(s) for s in r.seeds)
            vals = " | ".join(_cell(r.scores[k]) for k in METRICS)
            lines.append(f"| {r.label} | {seeds} | {vals} |")
        return "\n".join(lines) + "\n"


def _cell(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.2f}"


def load_run(run_dir) -> RunResult:
    run_dir = Path(run_dir)
    try:
        cfg = json.loads((run_dir / "config.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{run_dir}: cannot read config.json: {exc}") from exc
    summary = read_summary(run_dir / "metrics.csv")
    label = cfg.get("label") or run_dir.name
    return RunResult(run_dir, label, int(cfg.get("seed", 0)), summary["samples"],
                     {k: summary[k] for k in METRICS})


def build_ablation_table(run_dirs, axis: str = "variant", out_md=None) -> AblationTable:
    """Mean metrics per variant label over seeds, sorted by label.

    Every run must be scored on the same test samples and every variant on
    the same seed set; otherwise a ``ComparabilityError`` is raised.
    """
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ComparabilityError("no runs given")
    ref = runs[0]
    for r in runs[1:]:
        if r.samples != ref.samples:
            raise ComparabilityError(f"{r.path} was scored on a different test split than {ref.path}")
    groups: dict[str, list[RunResult]] = defaultdict(list)
    for r in runs:
        groups[r.label].append(r)
    seed_sets = {lab: sorted(r.seed for r in rs) for lab, rs in groups.items()}
    if len({tuple(s) for s in seed_sets.values()}) > 1:
        raise ComparabilityError(f"variants use different seed sets: {seed_sets}")
    table = AblationTable(axis)
    for lab in sorted(groups):
        rs = groups[lab]
        scores = {}
        for k in METRICS:
            vals = [r.scores[k] for r in rs if not math.isnan(r.scores[k])]
            scores[k] = sum(vals) / len(vals) if vals else math.nan
        table.rows.append(AblationRow(lab, seed_sets[lab], scores))
    if out_md is not None:
        Path(out_md).parent.mkdir(parents=True, exist_ok=True)
        Path(out_md).write_text(table.to_markdown())
    return table


# ---------------------------------------------------------------- full report

def write_report(run_dirs, out_dir="report", axis: str = "variant") -> dict[str, Path]:
    """``summary.md``, ``schedule.svg`` and ``ablation.md`` for a set of runs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_dirs = [Path(d) for d in run_dirs]
    table = build_ablation_table(run_dirs, axis, out / "ablation.md")

    logs, labels = [], []
    for d in run_dirs:
        r = load_run(d)
        if r.label not in labels:
            logs.append(d / "train_log.csv")
            labels.append(r.label)
    svg = out / "schedule.svg"
    try:
        plot_schedule(logs, svg, labels, title="mixing ratio per training step")
    except FormatError:
        # no run reached the mixing stage; plot nothing rather than fail
        svg.write_text(svg_lines({"none": ([0, 1], [0.0, 0.0])}, "no mixing steps logged"))

    lines = ["# Run summary", "", "| run | variant | seed | Dice | Jaccard | HD95 | ASD |",
             "|---|---|---|---|---|---|---|"]
    for d in sorted(run_dirs, key=lambda p: p.as_posix()):
        r = load_run(d)
        vals = " | ".join(_cell(r.scores[k]) for k in METRICS)
        lines.append(f"| {d.name} | {r.label} | {r.seed} | {vals} |")
    lines += ["", table.to_markdown()]
    (out / "summary.md").write_text("\n".join(lines))
    return {"summary": out / "summary.md", "schedule": svg, "ablation": out / "ablation.md"}
