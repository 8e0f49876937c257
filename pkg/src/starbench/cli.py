"""Command-line interface: ``starbench <subcommand>``.

Exit codes: 0 success, 1 an asserted acceptance check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .envs import make_env
from .nets import load_victim, save_victim
from .ppo import CURVE_COLUMNS, PpoConfig, train_victim
from .star import STAR_CURVE_COLUMNS, StarAgent, StarConfig, train_star
from .harness import benchmark as bm
from .harness.config import ExperimentConfigError, load_config
from .harness.metrics import rows_to_csv
from .harness.report import ReportError, report

log = logging.getLogger("starbench")


def _config(args):
    return load_config(args.config, env=getattr(args, "env", None), seed=getattr(args, "seed", None),
                       output_dir=getattr(args, "output_dir", None))


def _check(label: str, ok: bool) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}")
    return ok


def cmd_train_victim(args) -> int:
    cfg = _config(args)
    steps = args.steps or int(cfg.victim.get("train_steps", 80_000))
    env = make_env(cfg.env, **cfg.env_params)
    victim, curve = train_victim(env, PpoConfig(**cfg.victim.get("ppo", {})), seed=cfg.seed,
                                 total_steps=steps, eval_episodes=args.eval_episodes)
    out = Path(args.out or cfg.out / f"victim_{cfg.env}.npz")
    save_victim(out, victim, extra={"env": cfg.env, "steps": steps, "seed": cfg.seed})
    bm.write_rows_csv(Path(args.curve or out.with_suffix(".curve.csv")), curve, CURVE_COLUMNS)
    print(f"victim saved to {out}")
    return 0


def cmd_train_adversary(args) -> int:
    cfg = _config(args)
    victim = load_victim(args.victim) if args.victim else bm.get_victim(cfg)
    epsilon = args.epsilon if args.epsilon is not None else bm.resolve_epsilon(cfg, victim)
    env = make_env(cfg.env, **cfg.env_params)
    episodes = args.episodes or int(cfg.star.get("episodes", 60))
    agent = StarAgent(env.obs_dim, StarConfig(**{**cfg.star.get("config", {}), "epsilon": epsilon}), seed=cfg.seed)
    agent, curve = train_star(agent, victim, env, episodes, seed=cfg.seed)
    out = Path(args.out or cfg.out / f"star_{cfg.env}.npz")
    agent.save(out)
    bm.write_rows_csv(Path(args.curve or out.with_suffix(".curve.csv")), curve, STAR_CURVE_COLUMNS)
    print(f"STAR agent saved to {out} (epsilon={epsilon:g})")
    return 0


def ordering_checks(rows) -> list[tuple[str, bool]]:
    by = {r.method if r.steps in (0, 1) else f"{r.method}-{r.steps}": r for r in rows}
    checks = []
    if {"Random", "FGSM", "PGD-10"} <= by.keys():
        r, f, p = by["Random"].reward_drop, by["FGSM"].reward_drop, by["PGD-10"].reward_drop
        checks.append((f"drop Random {r:.3f}% < FGSM {f:.3f}% < PGD-10 {p:.3f}%", r < f < p))
    if "STAR" in by:
        baselines = [x for k, x in by.items() if k not in ("No Attack", "STAR")]
        if baselines:
            best = max(baselines, key=lambda x: x.reward_drop)
            checks.append((f"drop STAR {by['STAR'].reward_drop:.3f}% >= best baseline "
                           f"{best.method}-{best.steps} {best.reward_drop:.3f}%",
                           by["STAR"].reward_drop >= best.reward_drop))
    return checks


def cmd_attack_eval(args) -> int:
    cfg = _config(args)
    try:
        rows = bm.run_benchmark(cfg, include_star=not args.no_star)
    except bm.BenchmarkError as exc:
        print(rows_to_csv(exc.partial), end="")
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    print(rows_to_csv(rows), end="")
    if args.assert_ordering:
        results = [_check(label, ok) for label, ok in ordering_checks(rows)]
        return 0 if all(results) else 1
    return 0


def cmd_defend(args) -> int:
    cfg = _config(args)
    res = bm.run_defense(cfg, with_control=not args.no_control)
    rows = [res.original_row, res.defended_row] + ([res.control_row] if res.control_row else [])
    print(rows_to_csv(rows), end="")
    if args.assert_improves:
        margin = res.defended_row.reward_mean - res.original_row.reward_mean
        return 0 if _check(f"defended reward - original reward under attack = {margin:.6f} > 0", margin > 0) else 1
    return 0


def cmd_theory_check(args) -> int:
    from .theory import SUMMARY_COLUMNS, fuzz_instances, gridworld_instances, run_suite

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    instances = list(fuzz_instances(args.n, args.seed))
    if args.grid:
        instances += list(gridworld_instances(args.grid, args.seed))
    summary, records = run_suite(instances, out)
    with open(out / "theory.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out / "theory_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([getattr(summary, c) for c in SUMMARY_COLUMNS])
    print(json.dumps(asdict(summary)))
    ok = [
        _check("performance-difference bounds contain the exact difference",
               summary.bound_violated == 0),
        _check("literal delta is identically zero", summary.literal_nonzero == 0),
        _check("necessary condition holds on every successful attack", summary.t1_violations == 0),
        _check("sufficient condition never fires on a failed attack", summary.t2_fired_but_failed == 0),
    ]
    return 0 if all(ok) else 1


def cmd_sweep(args) -> int:
    cfg = _config(args)
    sweep = cfg.sweep
    epsilons = [float(e) for e in args.epsilons.split(",")] if args.epsilons else sweep.get("epsilons", [0.25, 0.5, 1.0])
    methods = args.methods.split(",") if args.methods else None
    rows = bm.epsilon_sweep(cfg, epsilons, methods)
    for r in rows:
        print(f"{r.method},{r.steps},{r.epsilon:g},{r.reward_drop:.3f}")
    if args.assert_monotone:
        res = [_check(f"{m}: reward drop non-decreasing in epsilon with <= 1 inversion",
                      max(r.inversions for r in rows if r.method == m) <= 1)
               for m in sorted({r.method for r in rows})]
        return 0 if all(res) else 1
    return 0


def cmd_report(args) -> int:
    path = report(args.dir)
    print(f"report written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="starbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--env", help="override the config env")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--output-dir", help="override the config output dir")

    sp = sub.add_parser("train-victim", help="train a PPO victim")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--eval-episodes", type=int, default=5)
    sp.add_argument("--out")
    sp.add_argument("--curve")
    sp.set_defaults(func=cmd_train_victim)

    sp = sub.add_parser("train-adversary", help="train a STAR adversary against a victim")
    common(sp)
    sp.add_argument("--victim")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--out")
    sp.add_argument("--curve")
    sp.set_defaults(func=cmd_train_adversary)

    sp = sub.add_parser("attack-eval", help="run the benchmark table")
    common(sp)
    sp.add_argument("--no-star", action="store_true")
    sp.add_argument("--assert-ordering", action="store_true")
    sp.set_defaults(func=cmd_attack_eval)

    sp = sub.add_parser("defend", help="adversarial training with STAR, then evaluate under PGD")
    common(sp)
    sp.add_argument("--no-control", action="store_true")
    sp.add_argument("--assert-improves", action="store_true")
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("theory-check", help="exact tabular checks of the bounds and theorems")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--grid", type=int, default=0, help="extra gridworld observation-attack instances")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="runs/theory")
    sp.set_defaults(func=cmd_theory_check)

    sp = sub.add_parser("sweep", help="epsilon sweep")
    common(sp)
    sp.add_argument("--epsilons")
    sp.add_argument("--methods")
    sp.add_argument("--assert-monotone", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="markdown + SVG report from a results directory")
    sp.add_argument("--dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ExperimentConfigError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
