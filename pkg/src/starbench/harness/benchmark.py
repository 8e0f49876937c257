"""Experiment orchestration: victims, calibration, the benchmark table, defense and epsilon sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..attacks import ITERATIVE, AttackSpec
from ..envs import make_env
from ..nets import Victim, load_victim, save_victim
from ..ppo import CURVE_COLUMNS, PpoConfig, train_victim
from ..star import STAR_CURVE_COLUMNS, StarAgent, StarConfig, star_perturb, train_star
from .config import ExperimentConfig
from .evaluate import NoAttack, StarAttacker, evaluate_cell
from .metrics import MetricsRow, _fmt, flag_best, rows_to_csv

log = logging.getLogger(__name__)

ROW_LABELS = {"random": "Random", "fgsm": "FGSM", "di2fgsm": "DI2-FGSM", "mifgsm": "MI-FGSM",
              "nifgsm": "NI-FGSM", "rfgsm": "R+FGSM", "pgd": "PGD", "tpgd": "TPGD", "eotpgd": "EOTPGD"}


class BenchmarkError(RuntimeError):
    def __init__(self, message: str, partial: list | None = None, errors: list | None = None):
        super().__init__(message)
        self.partial = partial or []
        self.errors = errors or []


def write_rows_csv(path: Path, rows, columns) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(getattr(r, c) if not isinstance(r, dict) else r[c]) for c in columns])
    path.write_text(buf.getvalue())
    return path




# victims and adversaries


def get_victim(cfg: ExperimentConfig) -> Victim:
    """Load the configured victim checkpoint, or train one (cached under the output dir)."""
    ckpt = cfg.victim.get("checkpoint")
    if ckpt:
        return load_victim(ckpt)
    steps = int(cfg.victim.get("train_steps", 80_000))
    seed = int(cfg.victim.get("seed", cfg.seed))
    cache = cfg.out / f"victim_{cfg.env}_s{seed}_{steps}.npz"
    if cache.exists():
        return load_victim(cache)
    env = make_env(cfg.env, **cfg.env_params)
    victim, curve = train_victim(env, PpoConfig(**cfg.victim.get("ppo", {})), seed=seed, total_steps=steps,
                                 eval_episodes=int(cfg.victim.get("eval_episodes", 5)))
    save_victim(cache, victim, extra={"env": cfg.env, "steps": steps, "seed": seed})
    write_rows_csv(cache.with_suffix(".curve.csv"), curve, CURVE_COLUMNS)
    return victim


def calibrate_epsilon(cfg: ExperimentConfig, victim: Victim) -> tuple[float, list[tuple[float, float]]]:
    """Geometric search for an epsilon at which FGSM drops reward into the target band."""
    cal = {"low": 5.0, "high": 20.0, "start": 0.1, "episodes": 6, "max_iter": 12, **cfg.calibration}
    env = make_env(cfg.env, **cfg.env_params)
    seeds = [int(cal.get("seed", 90_000))]
    base, _ = evaluate_cell(env, victim, None, int(cal["episodes"]), seeds)
    lo_eps, hi_eps = 0.0, math.inf
    eps = float(cal["start"])
    trace: list[tuple[float, float]] = []
    for _ in range(int(cal["max_iter"])):
        row, _ = evaluate_cell(env, victim, AttackSpec("fgsm", eps, cfg.norm), int(cal["episodes"]), seeds)
        drop = row.with_baseline(base).reward_drop
        trace.append((eps, drop))
        if cal["low"] <= drop <= cal["high"]:
            return eps, trace
        if drop < cal["low"]:
            lo_eps = eps
            eps = eps * 2.0 if math.isinf(hi_eps) else math.sqrt(lo_eps * hi_eps)
        else:
            hi_eps = eps
            eps = eps / 2.0 if lo_eps == 0.0 else math.sqrt(lo_eps * hi_eps)
    log.warning("epsilon calibration did not reach the target band: %s", trace)
    return eps, trace


def resolve_epsilon(cfg: ExperimentConfig, victim: Victim) -> float:
    if cfg.epsilon != "auto":
        return float(cfg.epsilon)
    cache = cfg.out / f"epsilon_{cfg.env}.txt"
    if cache.exists():
        return float(cache.read_text().split()[0])
    eps, trace = calibrate_epsilon(cfg, victim)
    cache.parent.mkdir(parents=True, exist_ok=True)
    cache.write_text(f"{eps!r}\n" + "".join(f"# eps={e!r} fgsm_drop={d:.4f}\n" for e, d in trace))
    return eps


def get_star(cfg: ExperimentConfig, victim: Victim, epsilon: float) -> StarAgent:
    ckpt = cfg.star.get("checkpoint")
    if ckpt:
        return StarAgent.load(ckpt)
    episodes = int(cfg.star.get("episodes", 60))
    seed = int(cfg.star.get("seed", cfg.seed))
    cache = cfg.out / f"star_{cfg.env}_s{seed}_e{episodes}_eps{epsilon:.6g}.npz"
    if cache.exists():
        return StarAgent.load(cache)
    env = make_env(cfg.env, **cfg.env_params)
    star_cfg = StarConfig(**{**cfg.star.get("config", {}), "epsilon": epsilon})
    agent, curve = train_star(StarAgent(env.obs_dim, star_cfg, seed=seed), victim, env, episodes, seed=seed)
    agent.save(cache)
    write_rows_csv(cache.with_suffix(".curve.csv"), curve, STAR_CURVE_COLUMNS)
    return agent


# benchmark


def benchmark_cells(cfg: ExperimentConfig, epsilon: float, star: StarAgent | None):
    """Ordered list of (label, attacker) in table layout."""
    cells: list[tuple[str, object]] = [("No Attack", NoAttack())]
    cells.append(("Random", AttackSpec("random", epsilon, cfg.norm)))
    cells.append(("FGSM", AttackSpec("fgsm", epsilon, cfg.norm)))
    for method in ITERATIVE:
        for n in cfg.step_counts:
            cells.append((f"{ROW_LABELS[method]}-{n}", AttackSpec(method, epsilon, cfg.norm, steps=n)))
    if star is not None:
        cells.append(("STAR", StarAttacker(star, epsilon)))
    if cfg.methods:
        unknown = set(cfg.methods) - {c[0] for c in cells} - {"STAR"}  # STAR is skipped without an agent
        if unknown:
            raise BenchmarkError(f"unknown methods in config: {sorted(unknown)}")
        cells = [c for c in cells if c[0] in set(cfg.methods) | {"No Attack"}]
    return cells


def run_cells(cfg: ExperimentConfig, victim: Victim, cells, epsilon: float) -> list[MetricsRow]:
    env = make_env(cfg.env, **cfg.env_params)

    def work(item):
        label, attacker = item
        row, _ = evaluate_cell(env, victim, attacker, cfg.episodes, cfg.eval_seeds)
        row.epsilon = 0.0 if label == "No Attack" else epsilon
        return row

    errors: list[str] = []
    rows: list[MetricsRow | None] = [None] * len(cells)
    with ThreadPoolExecutor(max_workers=int(cfg.workers)) as pool:
        futures = [pool.submit(work, c) for c in cells]
        for i, fut in enumerate(futures):
            try:
                rows[i] = fut.result()
            except Exception as exc:  # a failed cell must not hide the others
                errors.append(f"{cells[i][0]}: {type(exc).__name__}: {exc}")
    base = rows[0]
    # the baseline is always evaluated; it is only emitted when the config asks for it
    wanted = set(cfg.methods) if cfg.methods else None
    done = [r for (label, _), r in zip(cells, rows) if r is not None and (wanted is None or label in wanted)]
    if base is not None:
        for r in done:
            r.with_baseline(base)
        flag_best(done)
    if errors:
        raise BenchmarkError("some cells failed", done, errors)
    return done


def run_benchmark(cfg: ExperimentConfig, victim: Victim | None = None, epsilon: float | None = None,
                  star: StarAgent | None = None, include_star: bool = True,
                  write: bool = True) -> list[MetricsRow]:
    victim = victim or get_victim(cfg)
    epsilon = resolve_epsilon(cfg, victim) if epsilon is None else epsilon
    if include_star and star is None and (not cfg.methods or "STAR" in cfg.methods):
        star = get_star(cfg, victim, epsilon)
    rows = run_cells(cfg, victim, benchmark_cells(cfg, epsilon, star), epsilon)
    if write:
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / f"benchmark_{cfg.env}.csv").write_text(rows_to_csv(rows))
    return rows


# epsilon sweep


@dataclass
class SweepRow:
    env: str
    method: str
    steps: int
    epsilon: float
    reward_mean: float
    reward_drop: float
    velocity_mean: float
    velocity_drop: float
    fall_rate_mean: float
    fall_rise: float
    inversions: int = 0


SWEEP_COLUMNS = tuple(SweepRow.__dataclass_fields__)


def count_inversions(drops: list[float]) -> int:
    """Number of adjacent decreases in a sequence ordered by increasing epsilon."""
    return int(sum(1 for a, b in zip(drops, drops[1:]) if b < a))


def epsilon_sweep(cfg: ExperimentConfig, epsilons, methods=None, victim: Victim | None = None,
                  star: StarAgent | None = None, write: bool = True) -> list[SweepRow]:
    """Evaluate each (method, epsilon); ``methods`` are (name, steps) pairs or names (``star`` allowed)."""
    epsilons = [float(e) for e in epsilons]
    if len(epsilons) < 2:
        raise BenchmarkError("an epsilon sweep needs at least two values")
    sweep = {"methods": ["fgsm", "pgd"], "steps": 10, **cfg.sweep}
    methods = methods or sweep["methods"]
    victim = victim or get_victim(cfg)
    env = make_env(cfg.env, **cfg.env_params)
    base, _ = evaluate_cell(env, victim, None, cfg.episodes, cfg.eval_seeds)
    jobs = []
    for m in methods:
        name, steps = (m, None) if isinstance(m, str) else m
        for eps in sorted(epsilons):
            jobs.append((name, steps, eps))

    def work(job):
        name, steps, eps = job
        if eps == 0.0:
            attacker = None
        elif name == "star":
            attacker = StarAttacker(star if star is not None else get_star(cfg, victim, eps), eps)
        else:
            n = 1 if name in ("fgsm", "random") else int(steps or sweep["steps"])
            attacker = AttackSpec(name, eps, cfg.norm, steps=n)
        row, _ = evaluate_cell(env, victim, attacker, cfg.episodes, cfg.eval_seeds)
        row.with_baseline(base)
        n_steps = 1 if name in ("fgsm", "random", "star") else int(steps or sweep["steps"])
        return SweepRow(cfg.env, name, n_steps, eps, row.reward_mean, row.reward_drop, row.velocity_mean,
                        row.velocity_drop, row.fall_rate_mean, row.fall_rise)

    with ThreadPoolExecutor(max_workers=int(cfg.workers)) as pool:
        rows = list(pool.map(work, jobs))
    for name in {r.method for r in rows}:
        group = [r for r in rows if r.method == name]
        inv = count_inversions([r.reward_drop for r in group])
        for r in group:
            r.inversions = inv
    if write:
        write_rows_csv(cfg.out / f"sweep_{cfg.env}.csv", rows, SWEEP_COLUMNS)
    return rows


# defense


@dataclass
class DefenseResult:
    defended: Victim
    curve: list
    attack_onset: int
    defended_row: MetricsRow
    original_row: MetricsRow
    control_row: MetricsRow | None = None


DEFENSE_COLUMNS = CURVE_COLUMNS + ("attack_on",)


def adversarial_training(victim: Victim, star_agent: StarAgent, env, steps: int, epsilon: float,
                         warmup: int = 4096, lr: float = 3e-4, seed: int = 0,
                         ppo: dict | None = None) -> tuple[Victim, list]:
    """Continue PPO with STAR-perturbed observations once ``warmup`` steps have passed.

    The observation normalizer is frozen so epsilon keeps its meaning during the defense.
    """
    defended = Victim(victim.policy.copy(), victim.obs_rms, victim.value.copy() if victim.value else None)
    agent = StarAttacker(star_agent, epsilon).agent if epsilon > 0 else None
    rng = np.random.default_rng([seed, 4242])

    def factory(step):
        if agent is None or step < warmup:
            return None

        def perturb(obs):
            return obs + star_perturb(agent, defended.policy, obs, rng, deterministic=True).eta
        return perturb

    cfg = PpoConfig(**{**(ppo or {}), "lr": lr})
    defended, curve = train_victim(env, cfg, seed=seed, total_steps=steps, victim=defended,
                                   perturb_factory=factory, update_rms=False)
    for row in curve:
        row.attack_on = int(agent is not None and row.step > warmup)
    return defended, curve


def run_defense(cfg: ExperimentConfig, victim: Victim | None = None, epsilon: float | None = None,
                star: StarAgent | None = None, with_control: bool = True, write: bool = True) -> DefenseResult:
    d = {"steps": 20_000, "warmup": 4096, "lr": 3e-4, "episodes": 20, "eval_method": "pgd",
         "eval_steps": 10, **cfg.defense}
    victim = victim or get_victim(cfg)
    epsilon = resolve_epsilon(cfg, victim) if epsilon is None else epsilon
    star = star or get_star(cfg, victim, epsilon)
    env = make_env(cfg.env, **cfg.env_params)
    defended, curve = adversarial_training(victim, star, env, int(d["steps"]), epsilon, int(d["warmup"]),
                                           float(d["lr"]), cfg.seed)
    spec = AttackSpec(d["eval_method"], epsilon, cfg.norm, steps=int(d["eval_steps"]))
    seeds = cfg.eval_seeds
    per_seed = max(1, int(d["episodes"]) // len(seeds))
    defended_row, _ = evaluate_cell(env, defended, spec, per_seed, seeds)
    original_row, _ = evaluate_cell(env, victim, spec, per_seed, seeds)
    control_row = None
    if with_control:
        control, _ = adversarial_training(victim, star, env, int(d["steps"]), 0.0, int(d["warmup"]),
                                          float(d["lr"]), cfg.seed)
        control_row, _ = evaluate_cell(env, control, spec, per_seed, seeds)
        control_row.method = f"{control_row.method} (nominal continued training)"
    defended_row.method = f"{defended_row.method} (defended)"
    original_row.method = f"{original_row.method} (original)"
    if write:
        cfg.out.mkdir(parents=True, exist_ok=True)
        write_rows_csv(cfg.out / f"defense_curve_{cfg.env}.csv", curve, DEFENSE_COLUMNS)
        rows = [original_row, defended_row] + ([control_row] if control_row else [])
        (cfg.out / f"defense_{cfg.env}.csv").write_text(rows_to_csv(rows))
        save_victim(cfg.out / f"defended_{cfg.env}.npz", defended, extra={"epsilon": epsilon})
    return DefenseResult(defended, curve, int(d["warmup"]), defended_row, original_row, control_row)


def window_means(values, n_windows: int = 3) -> list[float]:
    return [float(np.mean(w)) for w in np.array_split(np.asarray(values, dtype=np.float64), n_windows)]
