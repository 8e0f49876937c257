"""Paired, lock-stepped evaluation of a victim under an attacker."""
from __future__ import annotations

import copy
from dataclasses import replace

import numpy as np

from ..attacks import AttackSpec, run_attack
from ..envs import ContinuousEnv, make_env
from ..nets import Victim
from ..star import StarAgent, star_perturb
from .metrics import EpisodeStats, MetricsRow, aggregate


class EvaluationError(RuntimeError):
    pass


class Attacker:
    name = "No Attack"
    steps = 0
    epsilon = 0.0

    def perturb(self, victim: Victim, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.zeros_like(s)


class NoAttack(Attacker):
    pass


class SpecAttacker(Attacker):
    def __init__(self, spec: AttackSpec):
        self.spec = spec
        self.name, self.steps, self.epsilon = spec.label, spec.steps, spec.epsilon

    def perturb(self, victim, s, rng):
        return run_attack(self.spec, victim.policy, s, rng).eta


class StarAttacker(Attacker):
    """STAR in evaluation mode: deterministic mask, fresh probe noise per step."""

    name = "STAR"
    steps = 1

    def __init__(self, agent: StarAgent, epsilon: float | None = None):
        self.agent = copy.copy(agent)
        if epsilon is not None:
            self.agent.config = replace(agent.config, epsilon=epsilon)
        self.epsilon = self.agent.config.epsilon

    def perturb(self, victim, s, rng):
        return star_perturb(self.agent, victim.policy, s, rng, deterministic=True).eta


def make_attacker(attacker) -> Attacker:
    if attacker is None or attacker == "none":
        return NoAttack()
    if isinstance(attacker, Attacker):
        return attacker
    if isinstance(attacker, AttackSpec):
        return SpecAttacker(attacker)
    if isinstance(attacker, StarAgent):
        return StarAttacker(attacker)
    raise EvaluationError(f"unsupported attacker {attacker!r}")


def run_episodes(env: ContinuousEnv, victim: Victim, attacker: Attacker, episodes: int,
                 base_seed: int) -> list[EpisodeStats]:
    """Run ``episodes`` episodes in lock step; episode ``i`` uses env seed ``base_seed + i``.

    The attacker sees the batch of live normalized observations each step and draws from one
    RNG stream seeded by ``base_seed`` so every (attacker, seed) cell is reproducible.
    """
    if victim.policy.obs_dim != env.obs_dim or victim.policy.act_dim != env.act_dim:
        raise EvaluationError(f"victim ({victim.policy.obs_dim}->{victim.policy.act_dim}) does not match "
                              f"env {env.name} ({env.obs_dim}->{env.act_dim})")
    envs = [copy.deepcopy(env) for _ in range(episodes)]
    rngs = [np.random.default_rng(base_seed + i) for i in range(episodes)]
    attack_rng = np.random.default_rng([base_seed, 1_000_003])
    obs = [e.reset(r) for e, r in zip(envs, rngs)]
    reward = np.zeros(episodes)
    vel = np.zeros(episodes)
    fell = np.zeros(episodes, dtype=bool)
    alive = list(range(episodes))
    while alive:
        s = victim.normalize(np.array([obs[i] for i in alive]))
        eta = attacker.perturb(victim, s, attack_rng)
        actions = victim.act(s + eta)
        still = []
        for k, i in enumerate(alive):
            res = envs[i].step(actions[k], rngs[i])
            reward[i] += res.reward
            vel[i] += res.info["v_x"]
            obs[i] = res.next_state
            if envs[i].done:
                fell[i] = bool(res.info["fell"])
            else:
                still.append(i)
        alive = still
    out = []
    for i, e in enumerate(envs):
        out.append(EpisodeStats(reward[i] / e.t, vel[i] / e.t, 100.0 * fell[i] / e.t, e.t, base_seed + i))
    return out


def evaluate_cell(env: ContinuousEnv | str, victim: Victim, attacker, episodes: int, seeds,
                  env_params: dict | None = None) -> tuple[MetricsRow, list[EpisodeStats]]:
    """Evaluate one (attacker) cell over ``episodes`` episodes for each base seed."""
    if isinstance(env, str):
        env = make_env(env, **(env_params or {}))
    if episodes < 1:
        raise EvaluationError("episodes must be >= 1")
    att = make_attacker(attacker)
    stats: list[EpisodeStats] = []
    for b in (seeds if np.ndim(seeds) else [seeds]):
        stats.extend(run_episodes(env, victim, att, episodes, int(b)))
    return aggregate(env.name, att.name, att.steps, att.epsilon, stats), stats
