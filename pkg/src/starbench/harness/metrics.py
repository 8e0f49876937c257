"""Benchmark metrics: per-episode aggregation and drops relative to the unattacked baseline."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np


def relative_drop(value: float, baseline: float) -> float:
    """Multiplicative drop in percent, ``(1 - value / baseline) * 100``; NaN if baseline <= 0.

    >>> round(relative_drop(0.819, 0.941), 3)
    12.965
    """
    if not baseline > 0:
        return float("nan")
    return (1.0 - value / baseline) * 100.0


def additive_rise(value: float, baseline: float) -> float:
    """Additive change in percentage points (for rates that are already percentages).

    >>> round(additive_rise(1.420, 0.464), 3)
    0.956
    """
    return value - baseline


def format_percent(fraction: float, digits: int = 3) -> str:
    """``0.339 -> '33.900%'``."""
    return f"{fraction * 100:.{digits}f}%"


@dataclass
class EpisodeStats:
    reward: float  # mean per-step reward
    velocity: float  # mean per-step forward velocity
    fall_rate: float  # falls / steps * 100
    steps: int
    seed: int


@dataclass
class MetricsRow:
    env: str
    method: str
    steps: int
    epsilon: float
    episodes: int
    reward_mean: float
    reward_sd: float
    reward_drop: float
    velocity_mean: float
    velocity_sd: float
    velocity_drop: float
    fall_rate_mean: float
    fall_rate_sd: float
    fall_rise: float
    baseline_reward: float = float("nan")
    baseline_velocity: float = float("nan")
    baseline_fall_rate: float = float("nan")
    best: str = ""

    def with_baseline(self, base: "MetricsRow") -> "MetricsRow":
        self.baseline_reward = base.reward_mean
        self.baseline_velocity = base.velocity_mean
        self.baseline_fall_rate = base.fall_rate_mean
        self.reward_drop = relative_drop(self.reward_mean, base.reward_mean)
        self.velocity_drop = relative_drop(self.velocity_mean, base.velocity_mean)
        self.fall_rise = additive_rise(self.fall_rate_mean, base.fall_rate_mean)
        return self


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


def aggregate(env: str, method: str, steps: int, epsilon: float, episodes: list[EpisodeStats]) -> MetricsRow:
    """Mean and sample-free (population) sd across episodes, pre-sorted by seed."""
    eps = sorted(episodes, key=lambda e: e.seed)
    r = np.array([e.reward for e in eps])
    v = np.array([e.velocity for e in eps])
    f = np.array([e.fall_rate for e in eps])
    nan = float("nan")
    return MetricsRow(env, method, steps, epsilon, len(eps), float(r.mean()), float(r.std()), nan,
                      float(v.mean()), float(v.std()), nan, float(f.mean()), float(f.std()), nan)


def _fmt(x) -> str:
    # shortest round-trip repr: drops recomputed from the CSV match bit for bit
    if isinstance(x, (float, np.floating)):
        return "nan" if math.isnan(x) else repr(float(x))
    return str(x)


def rows_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(getattr(row, c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def flag_best(rows: list[MetricsRow]) -> None:
    """Mark, among attacked rows, the strongest attack per metric (largest drop / rise)."""
    attacked = [r for r in rows if r.method != "No Attack"]
    for r in attacked:
        r.best = ""
    for col, label in (("reward_drop", "reward"), ("velocity_drop", "velocity"), ("fall_rise", "fall")):
        vals = [getattr(r, col) for r in attacked]
        finite = [v for v in vals if not math.isnan(v)]
        if not finite or min(finite) == max(finite):
            continue
        top = max(finite)
        for r in attacked:
            if getattr(r, col) == top:
                r.best = ";".join(filter(None, [r.best, label]))
