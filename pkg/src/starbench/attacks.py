"""Baseline state-perturbation attacks: one iterative-gradient engine plus uniform noise.

All gradients are taken with respect to the (normalized) observation. Every gradient
evaluation happens at a probe point ``x + probe_scale * z`` with ``z ~ N(0, I)``: the
default loss (negative log-likelihood of the clean mean action) has an exactly zero
gradient at the clean state, and the small probe keeps the first step informative.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .nets import GaussianPolicy

log = logging.getLogger(__name__)

METHODS = ("random", "fgsm", "di2fgsm", "mifgsm", "nifgsm", "rfgsm", "pgd", "tpgd", "eotpgd")
ITERATIVE = ("di2fgsm", "mifgsm", "nifgsm", "rfgsm", "pgd", "tpgd", "eotpgd")
NORMS = ("linf", "l2")
LOSSES = ("neglogprob", "kl")
PROBE_SCALE = 1e-4
BUDGET_TOL = 1e-9


class AttackConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    method: str
    epsilon: float
    norm: str = "linf"
    steps: int = 1
    step_size: float | None = None  # default epsilon / steps
    init_scale: float | None = None  # default: PROBE_SCALE for pgd-type, epsilon/2 for rfgsm, 0 otherwise
    momentum_decay: float = 1.0
    eot_samples: int = 4
    diversity_prob: float = 0.5
    dropout: float = 0.1
    jitter: float = 0.01
    loss: str | None = None  # default: kl for tpgd, neglogprob otherwise

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttackConfigError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        if self.norm not in NORMS:
            raise AttackConfigError(f"unknown norm {self.norm!r}; choose from {NORMS}")
        if not self.epsilon > 0:
            raise AttackConfigError("epsilon must be > 0")
        if int(self.steps) != self.steps or self.steps < 1:
            raise AttackConfigError("steps must be an integer >= 1")
        if self.method in ("fgsm", "random") and self.steps != 1:
            raise AttackConfigError(f"{self.method} is single-step; got steps={self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackConfigError("step_size must be > 0")
        if self.init_scale is not None and self.init_scale < 0:
            raise AttackConfigError("init_scale must be >= 0")
        if self.eot_samples < 1:
            raise AttackConfigError("eot_samples must be >= 1")
        if not 0.0 <= self.diversity_prob <= 1.0 or not 0.0 <= self.dropout < 1.0:
            raise AttackConfigError("diversity_prob must lie in [0, 1] and dropout in [0, 1)")
        if self.loss is not None and self.loss not in LOSSES:
            raise AttackConfigError(f"unknown loss {self.loss!r}; choose from {LOSSES}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.steps

    @property
    def loss_kind(self) -> str:
        return self.loss or ("kl" if self.method == "tpgd" else "neglogprob")

    @property
    def start_scale(self) -> float:
        if self.init_scale is not None:
            return self.init_scale
        if self.method in ("pgd", "tpgd", "eotpgd"):
            return PROBE_SCALE
        if self.method == "rfgsm":
            return self.epsilon / 2.0
        return 0.0

    @property
    def label(self) -> str:
        names = {"random": "Random", "fgsm": "FGSM", "di2fgsm": "DI2-FGSM", "mifgsm": "MI-FGSM",
                 "nifgsm": "NI-FGSM", "rfgsm": "R+FGSM", "pgd": "PGD", "tpgd": "TPGD", "eotpgd": "EOTPGD"}
        return names[self.method]

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)

    def with_epsilon(self, epsilon: float) -> "AttackSpec":
        return replace(self, epsilon=epsilon)


@dataclass
class Perturbation:
    eta: np.ndarray
    norm_used: np.ndarray | float


def attack_loss(policy: GaussianPolicy, s_clean, s_perturbed, kind: str = "neglogprob") -> ad.Var:
    """Differentiable attack objective, summed over rows of a batch.

    neglogprob: ``-log mu(a* | s')`` with ``a*`` the mean action at the clean state.
    kl: ``KL(mu(.|s) || mu(.|s'))`` for the diagonal Gaussian policy.
    """
    mean_clean = policy.mean(np.asarray(s_clean, dtype=np.float64)).data
    mean_pert = policy.mean(s_perturbed)
    log_std = policy.log_std().data
    if kind == "neglogprob":
        return ad.neg(ad.sum(ad.gaussian_log_prob(mean_clean, mean_pert, log_std)))
    if kind == "kl":
        # state-independent std: only the mean term survives
        diff = ad.sub(mean_pert, mean_clean)
        return ad.sum(ad.mul(ad.square(diff), 0.5 * np.exp(-2.0 * log_std)))
    raise AttackConfigError(f"unknown loss {kind!r}")


def attack_loss_values(policy: GaussianPolicy, s_clean: np.ndarray, s_perturbed: np.ndarray,
                       kind: str = "neglogprob") -> np.ndarray:
    """Per-row loss values (no graph)."""
    s_clean = np.atleast_2d(s_clean)
    s_perturbed = np.atleast_2d(s_perturbed)
    return np.array([float(attack_loss(policy, c, p, kind).data) for c, p in zip(s_clean, s_perturbed)])


def loss_gradient(policy: GaussianPolicy, s_clean: np.ndarray, x: np.ndarray, kind: str) -> np.ndarray:
    """Gradient of ``attack_loss`` with respect to the perturbed input ``x`` (row-wise)."""
    _, (g,) = ad.grad(lambda v: attack_loss(policy, s_clean, v, kind), np.asarray(x, dtype=np.float64))
    if not np.all(np.isfinite(g)):
        log.warning("non-finite attack gradient replaced by zero")
        g = np.where(np.isfinite(g), g, 0.0)
    return g


def _row_norm(x: np.ndarray, ord_: float) -> np.ndarray:
    return np.linalg.norm(x, ord=ord_, axis=-1, keepdims=True)


def direction(g: np.ndarray, norm: str) -> np.ndarray:
    """Steepest-ascent unit direction for the norm: sign for linf, g/||g||_2 for l2."""
    if norm == "linf":
        return np.sign(g)
    n = _row_norm(g, 2)
    return np.divide(g, n, out=np.zeros_like(g), where=n > 0)


def project(eta, norm: str, epsilon: float) -> np.ndarray:
    """Project onto the epsilon-ball of ``norm`` (row-wise for batches).

    >>> project(np.array([3.0, 4.0]), "l2", 1.0)
    array([0.6, 0.8])
    """
    eta = np.asarray(eta, dtype=np.float64)
    if norm == "linf":
        return np.clip(eta, -epsilon, epsilon)
    if norm == "l2":
        n = _row_norm(eta, 2)
        scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
        return eta * scale
    raise AttackConfigError(f"unknown norm {norm!r}")


def norm_of(eta: np.ndarray, norm: str) -> np.ndarray:
    return np.linalg.norm(eta, ord=np.inf if norm == "linf" else 2, axis=-1)


def _uniform_ball(rng: np.random.Generator, shape, norm: str, epsilon: float) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, shape)
    d = shape[-1]
    z = rng.standard_normal(shape)
    z /= np.maximum(_row_norm(z, 2), 1e-300)
    r = rng.uniform(0.0, 1.0, shape[:-1] + (1,)) ** (1.0 / d)
    return epsilon * r * z


class _Probe:
    """Gradient oracle: each evaluation uses fresh probe noise unless one is supplied."""

    def __init__(self, policy, s_clean, kind, rng, scale, first_noise):
        self.policy, self.s_clean, self.kind = policy, s_clean, kind
        self.rng, self.scale, self.pending = rng, scale, first_noise

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.pending is not None:
            z, self.pending = np.asarray(self.pending, dtype=np.float64), None
        elif self.scale > 0:
            z = self.rng.standard_normal(x.shape)
        else:
            z = None
        point = x if z is None or self.scale == 0 else x + self.scale * z
        return loss_gradient(self.policy, self.s_clean, point, self.kind)


def run_attack(spec: AttackSpec, policy: GaussianPolicy, s: np.ndarray, rng: np.random.Generator,
               probe_noise: np.ndarray | None = None, probe_scale: float = PROBE_SCALE) -> Perturbation:
    """Compute a perturbation for state ``s`` (a vector or a batch of row vectors)."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise AttackConfigError("state contains non-finite values")
    eps, norm = spec.epsilon, spec.norm
    if spec.method == "random":
        eta = _uniform_ball(rng, s.shape, norm, eps)
        return Perturbation(project(eta, norm, eps), norm_of(eta, norm))

    grad_at = _Probe(policy, s, spec.loss_kind, rng, probe_scale, probe_noise)
    if spec.method == "fgsm":
        eta = project(eps * direction(grad_at(s), norm), norm, eps)
        return Perturbation(eta, norm_of(eta, norm))

    alpha = spec.alpha
    start = spec.start_scale
    if start > 0:
        z = rng.standard_normal(s.shape)
        eta = start * (np.sign(z) if spec.method == "rfgsm" else z)
        eta = project(eta, norm, eps)
    else:
        eta = np.zeros_like(s)
    momentum = np.zeros_like(s)
    for _ in range(spec.steps):
        if spec.method == "eotpgd":
            g = np.mean([grad_at(s + eta + spec.jitter * rng.standard_normal(s.shape))
                         for _ in range(spec.eot_samples)], axis=0)
        elif spec.method == "di2fgsm":
            if rng.uniform() < spec.diversity_prob:
                keep = (rng.uniform(size=s.shape) >= spec.dropout).astype(np.float64)
                x = keep * (s + eta) + spec.jitter * rng.standard_normal(s.shape)
                g = keep * grad_at(x)  # chain rule through the dropout mask
            else:
                g = grad_at(s + eta)
        elif spec.method == "nifgsm":
            g = grad_at(s + eta + alpha * spec.momentum_decay * momentum)
        else:
            g = grad_at(s + eta)
        if spec.method in ("mifgsm", "nifgsm"):
            l1 = _row_norm(g, 1)
            momentum = spec.momentum_decay * momentum + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            step_dir = direction(momentum, norm)
        else:
            step_dir = direction(g, norm)
        eta = project(eta + alpha * step_dir, norm, eps)
    return Perturbation(eta, norm_of(eta, norm))


def benchmark_specs(epsilon: float, norm: str = "linf", step_counts=(10, 20)) -> list[AttackSpec]:
    """The benchmark's baseline list in table order: Random, FGSM, then iterative x step counts."""
    specs = [AttackSpec("random", epsilon, norm), AttackSpec("fgsm", epsilon, norm)]
    for method in ITERATIVE:
        for n in step_counts:
            specs.append(AttackSpec(method, epsilon, norm, steps=n))
    return specs
