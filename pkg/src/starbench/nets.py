"""MLP function approximators: Gaussian victim policy, value nets, STAR mask net.

Parameters live in plain ``dict[str, np.ndarray]``. Forward passes accept an
optional mapping of parameter ``Var`` leaves so the same code path serves
rollouts (no gradient), parameter updates and input-gradient attacks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Var

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class Module:
    kind = "module"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def leaves(self) -> dict[str, Var]:
        return {k: ad.leaf(v, name=k) for k, v in self.params.items()}

    def _p(self, params: Mapping[str, Var] | None, key: str):
        return self.params[key] if params is None else params[key]

    def copy(self):
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def config(self) -> dict:
        return {}


class MLP(Module):
    """Fully-connected tanh network; the output layer is linear."""

    kind = "mlp"

    def __init__(self, sizes: list[int], rng: np.random.Generator | None = None,
                 out_gain: float = 1.0, prefix: str = ""):
        super().__init__()
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.prefix = prefix
        rng = rng if rng is not None else np.random.default_rng(0)
        n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = out_gain if i == n_layers - 1 else 1.0
            self.params[f"{prefix}l{i}.w"] = rng.normal(0.0, gain / math.sqrt(fan_in), (fan_in, fan_out))
            self.params[f"{prefix}l{i}.b"] = np.zeros(fan_out)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x, params: Mapping[str, Var] | None = None) -> Var:
        h = ad.as_var(x)
        for i in range(self.n_layers):
            h = ad.affine(h, self._p(params, f"{self.prefix}l{i}.w"), self._p(params, f"{self.prefix}l{i}.b"))
            if i < self.n_layers - 1:
                h = ad.tanh(h)
        return h

    def config(self) -> dict:
        return {"sizes": self.sizes}


class GaussianPolicy(Module):
    """Diagonal Gaussian policy with a tanh MLP mean and state-independent log-std."""

    kind = "gaussian_policy"

    def __init__(self, obs_dim: int, act_dim: int, hidden: tuple[int, ...] = (128, 128),
                 log_std_init: float = -0.5, rng: np.random.Generator | None = None):
        super().__init__()
        self.obs_dim, self.act_dim, self.hidden = obs_dim, act_dim, tuple(hidden)
        self.net = MLP([obs_dim, *hidden, act_dim], rng, out_gain=0.01)
        self.params = self.net.params
        self.params["log_std"] = np.full(act_dim, float(log_std_init))

    def copy(self):
        clone = super().copy()
        clone.net = self.net.copy()
        clone.net.params = clone.params
        return clone

    def mean(self, s, params: Mapping[str, Var] | None = None) -> Var:
        s = ad.as_var(s)
        if s.shape[-1] != self.obs_dim:
            raise ConfigError(f"state dim {s.shape[-1]} != policy input {self.obs_dim}")
        return self.net.forward(s, params)

    def log_std(self, params: Mapping[str, Var] | None = None) -> Var:
        return ad.clip(self._p(params, "log_std"), LOG_STD_MIN, LOG_STD_MAX)

    def log_prob(self, s, a, params: Mapping[str, Var] | None = None) -> Var:
        return ad.gaussian_log_prob(a, self.mean(s, params), self.log_std(params))

    def act(self, s: np.ndarray) -> np.ndarray:
        """Deterministic (evaluation) action: the mean."""
        return self.mean(s).data

    def sample(self, s: np.ndarray, rng: np.random.Generator,
               deterministic: bool = False) -> tuple[np.ndarray, np.ndarray | float]:
        mu = self.mean(s).data
        log_std = np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        if deterministic:
            a = mu.copy()
        else:
            a = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        logp = ad.gaussian_log_prob(a, mu, log_std).data
        if not np.all(np.isfinite(a)) or not np.all(np.isfinite(logp)):
            raise ad.NonFiniteError("policy_sample", -1)
        return a, (float(logp) if np.ndim(logp) == 0 else logp)

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "hidden": list(self.hidden)}


class ValueNet(Module):
    kind = "value_net"

    def __init__(self, obs_dim: int, hidden: tuple[int, ...] = (128, 128),
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.obs_dim, self.hidden = obs_dim, tuple(hidden)
        self.net = MLP([obs_dim, *hidden, 1], rng)
        self.params = self.net.params

    def copy(self):
        clone = super().copy()
        clone.net = self.net.copy()
        clone.net.params = clone.params
        return clone

    def forward(self, s, params: Mapping[str, Var] | None = None) -> Var:
        out = self.net.forward(s, params)
        return out[..., 0]

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return self.forward(s).data

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "hidden": list(self.hidden)}


class MaskNet(Module):
    """Per-dimension mask probabilities ``sigmoid(logits / tau)``.

    The output layer starts at zero so every dimension begins at 0.5.
    """

    kind = "mask_net"

    def __init__(self, obs_dim: int, hidden: tuple[int, ...] = (64, 64, 64), tau: float = 1.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if tau <= 0:
            raise ConfigError("temperature must be positive")
        self.obs_dim, self.hidden, self.tau = obs_dim, tuple(hidden), float(tau)
        self.net = MLP([obs_dim, *hidden, obs_dim], rng, out_gain=0.0)
        self.params = self.net.params

    def copy(self):
        clone = super().copy()
        clone.net = self.net.copy()
        clone.net.params = clone.params
        return clone

    def logits(self, s, params: Mapping[str, Var] | None = None) -> Var:
        return ad.div(self.net.forward(s, params), self.tau)

    def probs(self, s, params: Mapping[str, Var] | None = None) -> Var:
        return ad.sigmoid(self.logits(s, params))

    def hard(self, s: np.ndarray) -> np.ndarray:
        """Binary export of the mask (threshold 0.5), for analysis only."""
        return (self.probs(s).data > 0.5).astype(np.float64)

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "hidden": list(self.hidden), "tau": self.tau}


def soft_mask(m, beta: float):
    """``beta * m + (1 - beta) * (1 - m)``, written as ``(1 - beta) + (2 beta - 1) m``.

    The affine form makes ``beta = 0.5`` return exactly 0.5. Works on arrays and ``Var``.
    """
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"interpolation factor must lie in (0, 1), got {beta}")
    if isinstance(m, Var):
        return ad.add(ad.mul(m, 2.0 * beta - 1.0), 1.0 - beta)
    return (1.0 - beta) + (2.0 * beta - 1.0) * np.asarray(m, dtype=np.float64)


class RunningMeanStd:
    """Streaming observation statistics (parallel-variance merge)."""

    def __init__(self, dim: int, clip: float = 10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip

    def update(self, x: np.ndarray) -> None:
        x = np.atleast_2d(x)
        b_mean, b_var, b_count = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)

    def state(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "var": self.var, "count": np.array(self.count)}

    @classmethod
    def from_state(cls, state: Mapping[str, np.ndarray], clip: float = 10.0) -> "RunningMeanStd":
        rms = cls(len(state["mean"]), clip)
        rms.mean = np.array(state["mean"], dtype=np.float64)
        rms.var = np.array(state["var"], dtype=np.float64)
        rms.count = float(state["count"])
        return rms


@dataclass
class Victim:
    """A frozen policy plus the observation normalizer it was trained with.

    Attacks perturb the *normalized* observation.
    """

    policy: GaussianPolicy
    obs_rms: RunningMeanStd
    value: ValueNet | None = None

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return self.obs_rms.normalize(obs)

    def act(self, obs_norm: np.ndarray) -> np.ndarray:
        return self.policy.act(obs_norm)


@dataclass
class Adam:
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def collect_grads(leaves: Mapping[str, Var]) -> dict[str, np.ndarray]:
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in leaves.items()}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


# checkpoints
#
# A checkpoint is a numpy ``.npz`` archive:
#   "__meta__"            JSON string: {"format": "starbench-ckpt", "version": 1,
#                          "modules": {name: {"kind": ..., "config": {...}, "shapes": {param: shape}}},
#                          "extra": {...}}
#   "<module>/<param>"    float64 array with the shape recorded in the metadata
#   "rms/mean|var|count"  optional observation normalizer

_KINDS = {"gaussian_policy": GaussianPolicy, "value_net": ValueNet, "mask_net": MaskNet}


def save_checkpoint(path: str | Path, modules: Mapping[str, Module],
                    obs_rms: RunningMeanStd | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "starbench-ckpt", "version": CHECKPOINT_VERSION, "modules": {}, "extra": extra or {}}
    arrays: dict[str, np.ndarray] = {}
    for name, mod in modules.items():
        meta["modules"][name] = {
            "kind": mod.kind,
            "config": mod.config(),
            "shapes": {k: list(v.shape) for k, v in mod.params.items()},
        }
        for k, v in mod.params.items():
            arrays[f"{name}/{k}"] = v
    if obs_rms is not None:
        for k, v in obs_rms.state().items():
            arrays[f"rms/{k}"] = np.asarray(v)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Module], RunningMeanStd | None, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != "starbench-ckpt" or meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint {path}: {meta.get('format')} v{meta.get('version')}")
        modules: dict[str, Module] = {}
        for name, info in meta["modules"].items():
            cls = _KINDS[info["kind"]]
            cfg = dict(info["config"])
            if "hidden" in cfg:
                cfg["hidden"] = tuple(cfg["hidden"])
            mod = cls(**cfg)
            for k, shape in info["shapes"].items():
                arr = np.array(data[f"{name}/{k}"], dtype=np.float64)
                if list(arr.shape) != shape:
                    raise ConfigError(f"{path}: {name}/{k} has shape {arr.shape}, expected {shape}")
                mod.params[k] = arr
            modules[name] = mod
        rms = None
        if "rms/mean" in data.files:
            rms = RunningMeanStd.from_state({k: data[f"rms/{k}"] for k in ("mean", "var", "count")})
    return modules, rms, meta.get("extra", {})


def save_victim(path: str | Path, victim: Victim, extra: dict | None = None) -> Path:
    modules: dict[str, Module] = {"policy": victim.policy}
    if victim.value is not None:
        modules["value"] = victim.value
    return save_checkpoint(path, modules, victim.obs_rms, extra)


def load_victim(path: str | Path) -> Victim:
    modules, rms, _ = load_checkpoint(path)
    if rms is None:
        raise ConfigError(f"{path} has no observation normalizer")
    return Victim(policy=modules["policy"], obs_rms=rms, value=modules.get("value"))
