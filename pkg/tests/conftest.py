"""Session fixtures shared by the slow example tests and the acceptance suite.

Victims, calibrated budgets and STAR agents are trained once per session into a
temporary directory; nothing is read from outside the test run.
"""
from dataclasses import dataclass, field

import pytest

from starbench.harness.benchmark import get_star, get_victim, resolve_epsilon
from starbench.harness.config import config_from_dict

ACCEPTANCE: list[tuple[str, bool, str]] = []

VICTIM_STEPS = {"balancer": 80_000, "pointgoal": 20_000}


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.append((criterion, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for crit, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {crit}: {detail}")


@dataclass
class Experiment:
    cfg: object
    victim: object
    epsilon: float
    star: object
    cache: dict = field(default_factory=dict)


@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    made: dict[str, Experiment] = {}
    root = tmp_path_factory.mktemp("experiments")

    def get(env: str) -> Experiment:
        if env not in made:
            cfg = config_from_dict({
                "env": env, "seed": 0, "output_dir": str(root / env),
                "victim": {"train_steps": VICTIM_STEPS[env]},
                "epsilon": "auto", "episodes": 4,
                "eval_seeds": [10_000, 20_000, 30_000, 40_000, 50_000],
                "step_counts": [10, 20],
            }, environ={})
            victim = get_victim(cfg)
            eps = resolve_epsilon(cfg, victim)
            made[env] = Experiment(cfg, victim, eps, get_star(cfg, victim, eps))
        return made[env]
    return get
