"""STAR adversary: a learned soft mask scales sign-gradient perturbations per state dimension.

The perturbation is ``eta = epsilon * M_soft(s) * sign(grad J(s + probe, a*))`` where ``a*`` is
the victim's mean action at the clean state and ``M_soft`` interpolates a Bernoulli mask sample
between ``1 - beta`` and ``beta``. The mask network is trained on-policy against the frozen
victim with Monte-Carlo advantages of the adversary reward plus a likelihood regularizer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import PROBE_SCALE, loss_gradient
from .envs import ContinuousEnv, reward_adversary
from .nets import (Adam, ConfigError, MaskNet, ValueNet, Victim, clip_grad_norm, collect_grads,
                   load_checkpoint, save_checkpoint, soft_mask)

log = logging.getLogger(__name__)

ENTROPY_SIGNS = ("min_entropy", "max_entropy")
_LOG_FLOOR = 1e-12


class StarError(RuntimeError):
    pass


@dataclass
class StarConfig:
    epsilon: float = 0.1
    alpha: float = 2e-4
    beta: float = 0.75
    probe_scale: float = PROBE_SCALE
    tau: float = 1.0
    lr: float = 3e-4
    gamma: float = 0.998
    batch: int = 64
    epochs: int = 4
    episodes_per_update: int = 2
    max_grad_norm: float = 0.5
    entropy_sign: str = "min_entropy"
    center_advantages: bool = True
    mask_hidden: tuple = (64, 64, 64)
    value_hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.entropy_sign not in ENTROPY_SIGNS:
            raise ConfigError(f"entropy_sign must be one of {ENTROPY_SIGNS}")
        self.mask_hidden, self.value_hidden = tuple(self.mask_hidden), tuple(self.value_hidden)


class StarAgent:
    def __init__(self, obs_dim: int, config: StarConfig | None = None, seed: int = 0):
        self.config = config or StarConfig()
        rng = np.random.default_rng(seed)
        self.mask_net = MaskNet(obs_dim, self.config.mask_hidden, self.config.tau, rng)
        self.adv_value = ValueNet(obs_dim, self.config.value_hidden, rng)
        self.mask_opt = Adam(lr=self.config.lr)
        self.value_opt = Adam(lr=self.config.lr)
        self.value_warm = False

    def warm_start_value(self, mean_reward: float) -> None:
        """Set the value output bias to the discounted sum of a constant ``mean_reward``."""
        last = f"l{self.adv_value.net.n_layers - 1}.b"
        self.adv_value.params[last][...] = mean_reward / (1.0 - self.config.gamma)
        self.value_warm = True

    @property
    def obs_dim(self) -> int:
        return self.mask_net.obs_dim

    def save(self, path: str | Path) -> Path:
        cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.config).items()}
        return save_checkpoint(path, {"mask_net": self.mask_net, "adv_value": self.adv_value},
                               extra={"star_config": cfg})

    @classmethod
    def load(cls, path: str | Path) -> "StarAgent":
        modules, _, extra = load_checkpoint(path)
        if "mask_net" not in modules or "adv_value" not in modules:
            raise ConfigError(f"{path} is not a STAR checkpoint")
        agent = cls(modules["mask_net"].obs_dim, StarConfig(**extra.get("star_config", {})))
        agent.mask_net, agent.adv_value = modules["mask_net"], modules["adv_value"]
        agent.value_warm = True
        return agent


def mask_log_likelihood(p, b):
    """Factorized Bernoulli log-likelihood ``sum_i b_i log p_i + (1 - b_i) log(1 - p_i)`` (rows)."""
    if isinstance(p, ad.Var):
        lp = ad.log(ad.clip(p, _LOG_FLOOR, 1.0))
        lq = ad.log(ad.clip(ad.sub(1.0, p), _LOG_FLOOR, 1.0))
        return ad.sum(ad.add(ad.mul(lp, b), ad.mul(lq, 1.0 - b)), axis=-1)
    p = np.clip(np.asarray(p, dtype=np.float64), _LOG_FLOOR, 1.0 - _LOG_FLOOR)
    return np.sum(b * np.log(p) + (1.0 - b) * np.log1p(-p), axis=-1)


@dataclass
class StarSample:
    eta: np.ndarray
    log_nu: np.ndarray | float
    mask: np.ndarray
    direction: np.ndarray  # sign of the probe gradient


def star_perturb(agent: StarAgent, victim_policy, s: np.ndarray, rng: np.random.Generator,
                 deterministic: bool = False, probe_noise: np.ndarray | None = None) -> StarSample:
    """Sample a perturbation for state ``s`` (vector or batch of rows).

    Training mode draws a Bernoulli mask via the logistic (Gumbel-sigmoid) trick at
    temperature tau; ``deterministic`` uses the mask probabilities themselves.
    """
    cfg = agent.config
    s = np.asarray(s, dtype=np.float64)
    p = agent.mask_net.probs(s).data
    if deterministic:
        m = p
        b = (p > 0.5).astype(np.float64)
    else:
        logits = agent.mask_net.logits(s).data
        u = rng.uniform(1e-12, 1.0 - 1e-12, s.shape)
        b = (logits + np.log(u) - np.log1p(-u) > 0).astype(np.float64)
        m = b
    z = probe_noise if probe_noise is not None else rng.standard_normal(s.shape)
    g = loss_gradient(victim_policy, s, s + cfg.probe_scale * np.asarray(z, dtype=np.float64), "neglogprob")
    sgn = np.sign(g)
    eta = cfg.epsilon * (soft_mask(m, cfg.beta) * sgn)
    return StarSample(eta, mask_log_likelihood(p, b), b, sgn)


@dataclass
class StarEpisode:
    """One adversary episode; ``returns``/``advantages`` exist only after :func:`star_returns`."""

    states: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    log_nus: list = field(default_factory=list)
    actions: list = field(default_factory=list)  # victim mean action at the clean state
    victim_log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)  # adversary rewards
    final_state: np.ndarray | None = None
    terminal: bool = False
    complete: bool = False
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    values: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def star_returns(episode: StarEpisode, adv_value, gamma: float) -> StarEpisode:
    """Discounted adversary returns bootstrapped at the last state; advantage = return - value."""
    if not episode.complete or len(episode) == 0:
        raise StarError("star_returns needs a complete, non-empty episode")
    values = np.asarray(adv_value(np.asarray(episode.states)), dtype=np.float64)
    tail = 0.0 if episode.terminal else float(adv_value(np.asarray(episode.final_state)))
    rewards = np.asarray(episode.rewards, dtype=np.float64)
    returns = np.empty_like(rewards)
    running = tail
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        returns[t] = running
    episode.values, episode.returns, episode.advantages = values, returns, returns - values
    return episode


@dataclass
class StarBatch:
    states: np.ndarray
    masks: np.ndarray
    directions: np.ndarray
    actions: np.ndarray
    returns: np.ndarray
    advantages: np.ndarray

    @classmethod
    def from_episodes(cls, episodes: list[StarEpisode]) -> "StarBatch":
        if any(e.returns is None for e in episodes):
            raise StarError("episodes must be finalized with star_returns first")
        cat = lambda attr: np.concatenate([np.asarray(getattr(e, attr), dtype=np.float64) for e in episodes])
        return cls(cat("states"), cat("masks"), cat("directions"), cat("actions"), cat("returns"),
                   cat("advantages"))

    def __len__(self) -> int:
        return len(self.returns)

    def subset(self, idx) -> "StarBatch":
        return StarBatch(*(getattr(self, f)[idx] for f in
                           ("states", "masks", "directions", "actions", "returns", "advantages")))


def _step(opt: Adam, module, grads: dict, max_norm: float) -> None:
    clip_grad_norm(grads, max_norm)
    opt.step(module.params, grads)


def star_value_update(agent: StarAgent, batch: StarBatch) -> float:
    """One MSE regression step of the adversary value toward the stored returns; pre-step loss."""
    leaves = agent.adv_value.leaves()
    loss = ad.squared_error(agent.adv_value.forward(batch.states, leaves), batch.returns)
    value = float(loss.data)
    if not np.isfinite(value):
        raise StarError("non-finite value loss")
    ad.backprop(loss)
    _step(agent.value_opt, agent.adv_value, collect_grads(leaves), agent.config.max_grad_norm)
    return value


def scale_advantages(adv: np.ndarray, center: bool = True) -> np.ndarray:
    """Batch normalization of advantages: zero mean (optional) and unit standard deviation."""
    out = adv - np.mean(adv) if center else adv
    std = float(np.std(adv))
    return out / std if std > 1e-12 else out


def mask_objective(agent: StarAgent, victim_policy, batch: StarBatch, params=None) -> ad.Var:
    """Loss minimized by the mask update.

    ``-mean(log nu * A) + c * alpha * mean(log mu(a*|s + eta) + log nu)`` with ``c = -1``
    (likelihood ascent, entropy descent) or ``c = +1`` (``max_entropy``, the opposite reading of the regularizer).
    The victim term is differentiated through eta via the straight-through mask.
    """
    cfg = agent.config
    p = agent.mask_net.probs(batch.states, params)
    log_nu = mask_log_likelihood(p, batch.masks)
    adv = scale_advantages(batch.advantages, cfg.center_advantages)
    pg = ad.neg(ad.mean(ad.mul(log_nu, adv)))
    # straight-through: forward value is the sampled mask, gradient flows through p
    m_st = ad.add(p, ad.stop_gradient(ad.sub(batch.masks, p)))
    eta = ad.mul(soft_mask(m_st, cfg.beta), cfg.epsilon * batch.directions)
    log_mu = ad.gaussian_log_prob(batch.actions, victim_policy.mean(ad.add(eta, batch.states)),
                                  victim_policy.log_std().data)
    sign = -1.0 if cfg.entropy_sign == "min_entropy" else 1.0
    reg = ad.mul(ad.mean(ad.add(log_mu, log_nu)), sign * cfg.alpha)
    return ad.add(pg, reg)


def star_policy_update(agent: StarAgent, victim_policy, batch: StarBatch) -> float:
    """One gradient step of the mask network; returns the pre-step objective."""
    leaves = agent.mask_net.leaves()
    try:
        obj = mask_objective(agent, victim_policy, batch, leaves)
    except ad.NonFiniteError as exc:
        raise StarError(f"non-finite mask objective: {exc}") from exc
    ad.backprop(obj)
    _step(agent.mask_opt, agent.mask_net, collect_grads(leaves), agent.config.max_grad_norm)
    return float(obj.data)


def run_star_episode(agent: StarAgent, victim: Victim, env: ContinuousEnv, rng: np.random.Generator,
                     deterministic: bool = False) -> StarEpisode:
    """Roll out one episode of the victim under STAR; the first perturbation is uniform noise."""
    cfg = agent.config
    ep = StarEpisode()
    obs = env.reset(rng)
    first = True
    while not env.done:
        s = victim.normalize(obs)
        a_clean = victim.policy.act(s)
        if first:
            # uniform prior over the reachable perturbation box for the first step
            eta = rng.uniform(-cfg.beta * cfg.epsilon, cfg.beta * cfg.epsilon, s.shape)
            sample = None
            first = False
        else:
            sample = star_perturb(agent, victim.policy, s, rng, deterministic)
            eta = sample.eta
        res = env.step(victim.act(s + eta), rng)
        if sample is not None:
            ep.states.append(s)
            ep.masks.append(sample.mask)
            ep.directions.append(sample.direction)
            ep.etas.append(eta)
            ep.log_nus.append(float(sample.log_nu))
            ep.actions.append(a_clean)
            ep.victim_log_probs.append(float(victim.policy.log_prob(s + eta, a_clean).data))
            ep.rewards.append(reward_adversary(res.reward))
        obs = res.next_state
    ep.final_state = victim.normalize(obs)
    ep.terminal = bool(res.terminal)
    ep.complete = True
    return ep


@dataclass
class StarCurveRow:
    episode: int
    adv_reward: float
    value_loss: float
    mask_objective: float
    mask_mean: float


STAR_CURVE_COLUMNS = ("episode", "adv_reward", "value_loss", "mask_objective", "mask_mean")


def train_star(agent: StarAgent, victim: Victim, env: ContinuousEnv, episodes: int, seed: int = 0
               ) -> tuple[StarAgent, list[StarCurveRow]]:
    """On-policy training against a frozen victim; returns the agent and a per-episode curve."""
    cfg = agent.config
    rng = np.random.default_rng(seed)
    curve: list[StarCurveRow] = []
    pending: list[StarEpisode] = []
    value_loss = objective = float("nan")
    for i in range(episodes):
        ep = run_star_episode(agent, victim, env, rng)
        if len(ep) == 0:
            continue
        if not agent.value_warm:
            agent.warm_start_value(float(np.mean(ep.rewards)))
        pending.append(star_returns(ep, agent.adv_value, cfg.gamma))
        if len(pending) >= cfg.episodes_per_update or i == episodes - 1:
            batch = StarBatch.from_episodes(pending)
            v_losses, objs = [], []
            for _ in range(cfg.epochs):
                order = rng.permutation(len(batch))
                for start in range(0, len(batch), cfg.batch):
                    mb = batch.subset(order[start:start + cfg.batch])
                    v_losses.append(star_value_update(agent, mb))
                    objs.append(star_policy_update(agent, victim.policy, mb))
            value_loss, objective = float(np.mean(v_losses)), float(np.mean(objs))
            if not (np.isfinite(value_loss) and np.isfinite(objective)):
                raise StarError(f"diverged at episode {i}: value loss {value_loss}, objective {objective}")
            pending = []
        curve.append(StarCurveRow(i, float(np.mean(ep.rewards)), value_loss, objective,
                                  float(np.mean(agent.mask_net.probs(np.asarray(ep.states)).data))))
        log.info("star episode %d adv reward %.4f value loss %.4f", i, curve[-1].adv_reward, value_loss)
    return agent, curve
