"""PPO victim training: clipped surrogate, GAE, value loss, global grad clipping, KL-adaptive lr."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .envs import ContinuousEnv
from .nets import (Adam, GaussianPolicy, RunningMeanStd, ValueNet, Victim, clip_grad_norm,
                   collect_grads)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.998
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    lr: float = 5e-4
    max_grad_norm: float = 0.5
    batch: int = 64
    kl_target: float = 0.01
    epochs: int = 10
    rollout: int = 2048
    lr_min: float = 1e-6
    lr_max: float = 1e-2
    hidden: tuple = (128, 128)
    log_std_init: float = -0.5

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        self.hidden = tuple(self.hidden)


def gae(rewards, values, next_values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a flat, time-ordered buffer.

    ``next_values[t]`` is the bootstrap value of the successor state (0 for a true terminal),
    ``dones[t]`` marks that step ``t`` ends a segment (terminal, truncation or rollout cut).
    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise TrainingError("empty trajectory")
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        running = delta + gamma * lam * (0.0 if dones[t] else running)
        adv[t] = running
    return adv, adv + values


@dataclass
class Trajectory:
    """One episode: ``states`` has one more row than ``rewards`` (the final state)."""

    states: np.ndarray
    rewards: np.ndarray
    terminal: bool  # True terminal (bootstrap 0) vs truncation (bootstrap V(s_T))


def compute_gae(traj: Trajectory, gamma: float, lam: float,
                value_fn: Callable[[np.ndarray], np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    rewards = np.asarray(traj.rewards, dtype=np.float64)
    if rewards.size == 0:
        raise TrainingError("empty trajectory")
    v = np.asarray(value_fn(np.asarray(traj.states)), dtype=np.float64)
    next_v = v[1:].copy()
    if traj.terminal:
        next_v[-1] = 0.0
    dones = np.zeros(len(rewards), dtype=bool)
    dones[-1] = True
    return gae(rewards, v[:-1], next_v, dones, gamma, lam)


@dataclass
class RolloutBuffer:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    next_values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def add(self, obs, action, log_prob, reward, value, next_value, done) -> None:
        self.obs.append(obs)
        self.actions.append(action)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.next_values.append(next_value)
        self.dones.append(done)

    def __len__(self) -> int:
        return len(self.rewards)

    def finalize(self, gamma: float, lam: float) -> None:
        self.advantages, self.returns = gae(self.rewards, self.values, self.next_values,
                                            self.dones, gamma, lam)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "obs": np.asarray(self.obs, dtype=np.float64),
            "actions": np.asarray(self.actions, dtype=np.float64),
            "log_probs": np.asarray(self.log_probs, dtype=np.float64),
            "advantages": np.asarray(self.advantages, dtype=np.float64),
            "returns": np.asarray(self.returns, dtype=np.float64),
        }


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    centered = adv - adv.mean()
    return centered / std if std > 0 else centered


def gaussian_kl(mu_old, log_std_old, mu_new, log_std_new) -> np.ndarray:
    """KL(old || new) per row for diagonal Gaussians."""
    var_old, var_new = np.exp(2 * log_std_old), np.exp(2 * log_std_new)
    return np.sum(log_std_new - log_std_old + (var_old + (mu_old - mu_new) ** 2) / (2 * var_new) - 0.5, axis=-1)


@dataclass
class PpoState:
    lr: float
    optimizer: Adam
    lr_history: list = field(default_factory=list)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    kl: float
    lr: float
    surrogate: float = 0.0


def ppo_update(policy: GaussianPolicy, value_net: ValueNet, buffer: RolloutBuffer, config: PpoConfig,
               state: PpoState | None = None, rng: np.random.Generator | None = None) -> UpdateStats:
    """One PPO update over a finalized buffer; mutates ``policy``/``value_net`` in place."""
    if buffer.advantages is None:
        buffer.finalize(config.gamma, config.gae_lambda)
    state = state or PpoState(config.lr, Adam(lr=config.lr))
    rng = rng if rng is not None else np.random.default_rng(0)
    data = buffer.arrays()
    adv = normalize_advantages(data["advantages"])
    n = len(adv)
    try:
        mu_old = policy.mean(data["obs"]).data
    except ad.NonFiniteError as exc:
        raise TrainingError(f"non-finite policy output, update aborted: {exc}") from exc
    log_std_old = policy.log_std().data.copy()
    params = {**{f"pi/{k}": v for k, v in policy.params.items()},
              **{f"v/{k}": v for k, v in value_net.params.items()}}
    pol_losses, val_losses, kls, surrogates = [], [], [], []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            pi_leaves, v_leaves = policy.leaves(), value_net.leaves()
            obs, act = data["obs"][idx], data["actions"][idx]
            try:
                mean_new = policy.mean(obs, pi_leaves)
                log_std_new = policy.log_std(pi_leaves)
                logp = ad.gaussian_log_prob(act, mean_new, log_std_new)
                ratio = ad.exp(ad.sub(logp, data["log_probs"][idx]))
                a = adv[idx]
                surr = ad.minimum(ad.mul(ratio, a), ad.mul(ad.clip(ratio, 1 - config.clip, 1 + config.clip), a))
                policy_loss = ad.neg(ad.mean(surr))
                value_loss = ad.squared_error(value_net.forward(obs, v_leaves), data["returns"][idx])
                loss = ad.add(policy_loss, ad.mul(value_loss, config.value_coef))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"non-finite PPO loss, update aborted: {exc}") from exc
            kl = float(np.mean(gaussian_kl(mu_old[idx], log_std_old, mean_new.data, log_std_new.data)))
            if kl > config.kl_target * 2.0:
                state.lr = max(config.lr_min, state.lr / 1.5)
            elif kl < config.kl_target / 2.0:
                state.lr = min(config.lr_max, state.lr * 1.5)
            state.lr_history.append(state.lr)
            ad.backprop(loss)
            grads = {**{f"pi/{k}": g for k, g in collect_grads(pi_leaves).items()},
                     **{f"v/{k}": g for k, g in collect_grads(v_leaves).items()}}
            clip_grad_norm(grads, config.max_grad_norm)
            state.optimizer.lr = state.lr
            state.optimizer.step(params, grads)
            pol_losses.append(float(policy_loss.data))
            val_losses.append(float(value_loss.data))
            kls.append(kl)
            surrogates.append(float(np.mean(surr.data)))
    return UpdateStats(float(np.mean(pol_losses)), float(np.mean(val_losses)), float(np.mean(kls)),
                       state.lr, float(surrogates[0]) if surrogates else 0.0)


@dataclass
class CurveRow:
    step: int
    mean_reward: float
    mean_vx: float
    fall_rate: float
    episodes: int
    goal_rate: float = float("nan")
    eval_reward: float = float("nan")
    eval_vx: float = float("nan")
    eval_fall_rate: float = float("nan")
    eval_goal_rate: float = float("nan")


CURVE_COLUMNS = ("step", "mean_reward", "mean_vx", "fall_rate", "episodes", "goal_rate",
                 "eval_reward", "eval_vx", "eval_fall_rate", "eval_goal_rate")


def evaluate_policy(env: ContinuousEnv, victim: Victim, episodes: int, seed: int) -> CurveRow:
    """Deterministic (mean-action) episodes; episode ``i`` is seeded ``seed + i``."""
    env = copy.deepcopy(env)
    summaries = []
    for i in range(episodes):
        rng = np.random.default_rng(seed + i)
        obs = env.reset(rng)
        ret = vx = 0.0
        while not env.done:
            res = env.step(victim.act(victim.normalize(obs)), rng)
            ret += res.reward
            vx += res.info["v_x"]
            obs = res.next_state
        summaries.append({"reward": ret / env.t, "vx": vx / env.t, "fell": bool(res.info["fell"]),
                          "steps": env.t, "goal": bool(res.info.get("goal", False))})
    return summarize(0, summaries)


def collect_rollout(env: ContinuousEnv, victim: Victim, value_net: ValueNet, n_steps: int,
                    rng: np.random.Generator, carry: dict, config: PpoConfig,
                    perturb: Callable[[np.ndarray], np.ndarray] | None = None,
                    update_rms: bool = True) -> tuple[RolloutBuffer, list[dict]]:
    """Run ``n_steps`` environment steps with the stochastic policy.

    ``carry`` holds the in-progress episode across calls (``obs`` and per-episode tallies).
    ``perturb`` maps a normalized observation to the one the policy acts on.
    Returns the buffer and a list of completed-episode summaries.
    """
    buf = RolloutBuffer()
    episodes: list[dict] = []
    raw_obs: list[np.ndarray] = []
    if carry.get("obs") is None:
        carry.update(obs=env.reset(rng), ret=0.0, vx=0.0, steps=0)
    for t in range(n_steps):
        raw = carry["obs"]
        raw_obs.append(raw)
        obs = victim.normalize(raw)
        seen = perturb(obs) if perturb is not None else obs
        action, logp = victim.policy.sample(seen, rng)
        value = float(value_net(obs))
        res = env.step(action, rng)
        if not np.isfinite(res.reward):
            raise TrainingError(f"non-finite reward at step {t}")
        carry["ret"] += res.reward
        carry["vx"] += res.info["v_x"]
        carry["steps"] += 1
        episode_over = env.done
        last = t == n_steps - 1
        if res.terminal:
            next_value = 0.0
        else:
            next_value = float(value_net(victim.normalize(res.next_state))) if (episode_over or last) else None
        buf.add(seen, action, logp, res.reward, value, next_value, episode_over or last)
        if episode_over:
            episodes.append({"reward": carry["ret"] / carry["steps"], "vx": carry["vx"] / carry["steps"],
                             "fell": bool(res.info["fell"]), "steps": carry["steps"],
                             "goal": bool(res.info.get("goal", False))})
            carry.update(obs=env.reset(rng), ret=0.0, vx=0.0, steps=0)
        else:
            carry["obs"] = res.next_state
    # in-episode bootstrap values are the next row's value prediction
    for t in range(len(buf) - 1):
        if buf.next_values[t] is None:
            buf.next_values[t] = buf.values[t + 1]
    if update_rms and raw_obs:
        victim.obs_rms.update(np.asarray(raw_obs))
    return buf, episodes


def summarize(step: int, episodes: list[dict]) -> CurveRow:
    if not episodes:
        return CurveRow(step, float("nan"), float("nan"), float("nan"), 0)
    steps = sum(e["steps"] for e in episodes)
    return CurveRow(
        step=step,
        mean_reward=float(np.mean([e["reward"] for e in episodes])),
        mean_vx=float(np.mean([e["vx"] for e in episodes])),
        fall_rate=100.0 * sum(e["fell"] for e in episodes) / steps,
        episodes=len(episodes),
        goal_rate=float(np.mean([e["goal"] for e in episodes])),
    )


def make_victim(env: ContinuousEnv, config: PpoConfig, seed: int) -> tuple[Victim, ValueNet]:
    rng = np.random.default_rng(seed)
    policy = GaussianPolicy(env.obs_dim, env.act_dim, config.hidden, config.log_std_init, rng)
    value = ValueNet(env.obs_dim, config.hidden, rng)
    return Victim(policy, RunningMeanStd(env.obs_dim), value), value


def train_victim(env: ContinuousEnv, config: PpoConfig | None = None, seed: int = 0,
                 total_steps: int = 20_000, victim: Victim | None = None,
                 perturb_factory: Callable[[int], Callable | None] | None = None,
                 update_rms: bool = True, eval_episodes: int = 0,
                 eval_seed: int = 10_000) -> tuple[Victim, list[CurveRow]]:
    """Train (or continue training) a victim with PPO.

    ``perturb_factory(step)`` may return an observation perturbation to apply during the
    rollout that starts at ``step``; adversarial training uses it. With ``eval_episodes > 0``
    every curve row also carries deterministic evaluation on a fixed seed set.
    """
    config = config or PpoConfig()
    if victim is None:
        victim, value = make_victim(env, config, seed)
    else:
        value = victim.value or ValueNet(env.obs_dim, config.hidden, np.random.default_rng(seed))
        victim.value = value
    rng = np.random.default_rng(seed + 1)
    state = PpoState(config.lr, Adam(lr=config.lr))
    curve: list[CurveRow] = []
    carry: dict = {}
    step = 0
    while step < total_steps:
        n = min(config.rollout, total_steps - step)
        perturb = perturb_factory(step) if perturb_factory else None
        buf, episodes = collect_rollout(env, victim, value, n, rng, carry, config, perturb, update_rms)
        step += n
        buf.finalize(config.gamma, config.gae_lambda)
        stats = ppo_update(victim.policy, value, buf, config, state, rng)
        row = summarize(step, episodes)
        if eval_episodes > 0:
            ev = evaluate_policy(env, victim, eval_episodes, eval_seed)
            row.eval_reward, row.eval_vx = ev.mean_reward, ev.mean_vx
            row.eval_fall_rate, row.eval_goal_rate = ev.fall_rate, ev.goal_rate
        curve.append(row)
        if not np.isfinite(stats.policy_loss):
            raise TrainingError(f"diverged at step {step}: {stats}")
        log.info("step %d reward %.4f vx %.3f fall %.3f%% kl %.4f lr %.2e", step, row.mean_reward,
                 row.mean_vx, row.fall_rate, stats.kl, stats.lr)
    return victim, curve
