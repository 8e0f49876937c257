"""Markdown + SVG report from the CSVs in a results directory."""
from __future__ import annotations

import csv
import math
from pathlib import Path

from .metrics import METRIC_COLUMNS, format_percent


class ReportError(ValueError):
    pass


def read_csv(path: Path, required: tuple[str, ...] = ()) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReportError(f"{path}:1: empty CSV") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ReportError(f"{path}:1: missing columns {missing}")
        rows = []
        for lineno, values in enumerate(reader, start=2):
            if len(values) != len(header):
                raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
            rows.append(dict(zip(header, values)))
    return rows


def _num(row: dict, key: str, path: Path, lineno: int) -> float:
    try:
        return float(row[key])
    except (KeyError, ValueError):
        raise ReportError(f"{path}:{lineno}: column {key!r} is not numeric: {row.get(key)!r}") from None


def _rank_marks(values: list[float], larger_is_stronger: bool = True) -> list[str]:
    """'**' for the best value, '<u>' for the runner-up (ties share a mark)."""
    finite = sorted({v for v in values if not math.isnan(v)}, reverse=larger_is_stronger)
    marks = []
    for v in values:
        if finite and v == finite[0]:
            marks.append("best")
        elif len(finite) > 1 and v == finite[1]:
            marks.append("second")
        else:
            marks.append("")
    return marks


def _decorate(text: str, mark: str) -> str:
    return f"**{text}**" if mark == "best" else f"<u>{text}</u>" if mark == "second" else text


def benchmark_table(path: Path) -> str:
    rows = read_csv(path, METRIC_COLUMNS)
    if not rows:
        return f"_{path.name}: no rows_\n"
    parsed = []
    for i, r in enumerate(rows, start=2):
        parsed.append({k: _num(r, k, path, i) for k in ("steps", "reward_mean", "reward_sd", "reward_drop",
                                                         "velocity_mean", "velocity_sd", "velocity_drop",
                                                         "fall_rate_mean", "fall_rate_sd", "fall_rise")})
    attacked = [i for i, r in enumerate(rows) if r["method"] != "No Attack"]
    marks = {}
    for col in ("reward_drop", "velocity_drop", "fall_rise"):
        m = _rank_marks([parsed[i][col] for i in attacked])
        marks[col] = {i: mk for i, mk in zip(attacked, m)}
    lines = ["| Method | step | Reward | Drop | Velocity | Drop | Fall rate (%) | Rise |",
             "|---|---|---|---|---|---|---|---|"]
    for i, (r, p) in enumerate(zip(rows, parsed)):
        steps = "-" if p["steps"] == 0 else str(int(p["steps"]))

        def cell(col, mean, sd, pct=True):
            drop = p[col]
            txt = "-" if math.isnan(drop) or r["method"] == "No Attack" else (
                format_percent(drop / 100.0) if pct else f"{drop:.3f}%")
            return f"{p[mean]:.3f} ± {p[sd]:.3f}", _decorate(txt, marks.get(col, {}).get(i, ""))

        rw, rd = cell("reward_drop", "reward_mean", "reward_sd")
        vw, vd = cell("velocity_drop", "velocity_mean", "velocity_sd")
        fw, fd = cell("fall_rise", "fall_rate_mean", "fall_rate_sd", pct=False)
        lines.append(f"| {r['method']} | {steps} | {rw} | {rd} | {vw} | {vd} | {fw} | {fd} |")
    return "\n".join(lines) + "\n"


def _plot(path: Path, series: dict[str, tuple[list, list]], xlabel: str, ylabel: str, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "starbench"
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _curve_chart(path: Path, out: Path, x: str, y: str, title: str) -> str:
    rows = read_csv(path, (x, y))
    xs = [_num(r, x, path, i) for i, r in enumerate(rows, start=2)]
    ys = [_num(r, y, path, i) for i, r in enumerate(rows, start=2)]
    svg = out / (path.stem.replace(".", "_") + ".svg")
    _plot(svg, {y: (xs, ys)}, x, y, title)
    return svg.name


def sweep_chart(path: Path, out: Path) -> str:
    rows = read_csv(path, ("method", "epsilon", "reward_drop"))
    series: dict[str, tuple[list, list]] = {}
    for i, r in enumerate(rows, start=2):
        name = r["method"] if r.get("steps") in (None, "1") else f"{r['method']}-{r['steps']}"
        xs, ys = series.setdefault(name, ([], []))
        xs.append(_num(r, "epsilon", path, i))
        ys.append(_num(r, "reward_drop", path, i))
    svg = out / (path.stem + ".svg")
    _plot(svg, series, "epsilon", "reward drop (%)", path.stem)
    return svg.name


def report(results_dir: str | Path) -> Path:
    """Write ``report.md`` (and SVG charts) summarizing every recognized CSV in the directory."""
    d = Path(results_dir)
    if not d.is_dir():
        raise ReportError(f"{d} is not a directory")
    parts = ["# Benchmark report", ""]
    found = False
    for path in sorted(d.glob("benchmark_*.csv")):
        found = True
        parts += [f"## {path.stem.removeprefix('benchmark_')}", "", benchmark_table(path), ""]
    for path in sorted(d.glob("defense_*.csv")):
        if path.name.startswith("defense_curve_"):
            continue
        found = True
        parts += [f"## Defense ({path.stem.removeprefix('defense_')})", "", benchmark_table(path), ""]
    for path in sorted(d.glob("sweep_*.csv")):
        found = True
        parts += [f"## Epsilon sweep ({path.stem.removeprefix('sweep_')})", "", f"![sweep]({sweep_chart(path, d)})", ""]
    for path in sorted(d.glob("defense_curve_*.csv")):
        found = True
        parts += [f"## Defense training curve", "", f"![curve]({_curve_chart(path, d, 'step', 'mean_reward', path.stem)})", ""]
    for path in sorted(d.glob("*.curve.csv")):
        found = True
        header = read_csv(path)[0].keys() if read_csv(path) else []
        x, y = ("episode", "adv_reward") if "adv_reward" in header else ("step", "mean_reward")
        parts += [f"## Training curve {path.name}", "", f"![curve]({_curve_chart(path, d, x, y, path.stem)})", ""]
    if not found:
        parts += ["_No results found in this directory._", ""]
    out = d / "report.md"
    out.write_text("\n".join(parts))
    return out
