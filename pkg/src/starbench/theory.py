"""Exact tabular checks of the performance-difference bounds and the attack-success conditions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .envs import TabularMDP, hazard_gridworld, random_mdp

TOL = 1e-9
RESIDUAL_TOL = 1e-10


class TheoryError(ValueError):
    pass


@dataclass
class PolicyTable:
    probs: np.ndarray  # [s, a]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise TheoryError("policy table must be 2-D [state, action]")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-12):
            raise TheoryError("policy rows must be distributions (sum to 1 within 1e-12)")

    @classmethod
    def random(cls, rng: np.random.Generator, n_states: int, n_actions: int) -> "PolicyTable":
        p = rng.dirichlet(np.ones(n_actions), size=n_states)
        return cls(p / p.sum(axis=1, keepdims=True))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "PolicyTable":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    def mix(self, other: "PolicyTable", t: float) -> "PolicyTable":
        p = (1.0 - t) * self.probs + t * other.probs
        return PolicyTable(p / p.sum(axis=1, keepdims=True))


def _table(pi) -> np.ndarray:
    return pi.probs if isinstance(pi, PolicyTable) else np.asarray(pi, dtype=np.float64)


def _check(mdp: TabularMDP, pi) -> np.ndarray:
    p = _table(pi)
    if p.shape != mdp.R.shape:
        raise TheoryError(f"policy shape {p.shape} does not match MDP {mdp.R.shape}")
    if not mdp.gamma < 1.0:
        raise TheoryError("discount must be < 1")
    return p


def policy_transition(mdp: TabularMDP, pi) -> np.ndarray:
    return np.einsum("sa,sat->st", _check(mdp, pi), mdp.P)


def policy_reward(mdp: TabularMDP, pi) -> np.ndarray:
    return np.sum(_check(mdp, pi) * mdp.R, axis=1)


def exact_values(mdp: TabularMDP, pi) -> np.ndarray:
    """Solve ``(I - gamma P_pi) V = R_pi``.

    >>> from starbench.envs import TabularMDP
    >>> m = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5, np.ones(1))
    >>> exact_values(m, np.ones((1, 1)))
    array([2.])
    """
    P, r = policy_transition(mdp, pi), policy_reward(mdp, pi)
    A = np.eye(mdp.n_states) - mdp.gamma * P
    try:
        V = np.linalg.solve(A, r)
    except np.linalg.LinAlgError as exc:
        raise TheoryError(f"singular Bellman system: {exc}") from exc
    residual = np.max(np.abs(A @ V - r)) if len(r) else 0.0
    if residual >= RESIDUAL_TOL * max(1.0, np.max(np.abs(V))):
        raise TheoryError(f"Bellman residual {residual:.3e} too large")
    return V


def power_iteration_values(mdp: TabularMDP, pi, max_iter: int = 1_000_000, tol: float = 1e-15) -> np.ndarray:
    """Independent oracle: iterate ``V <- R_pi + gamma P_pi V`` to a fixed point."""
    P, r = policy_transition(mdp, pi), policy_reward(mdp, pi)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        nxt = r + mdp.gamma * (P @ V)
        if np.max(np.abs(nxt - V)) <= tol * max(1.0, np.max(np.abs(nxt))):
            return nxt
        V = nxt
    return V


def performance(mdp: TabularMDP, pi) -> float:
    """Expected discounted return from the start distribution."""
    return float(mdp.s0_dist @ exact_values(mdp, pi))


def visitation(mdp: TabularMDP, pi, start: np.ndarray | None = None) -> np.ndarray:
    """Normalized discounted state visitation ``d = (1 - gamma) (I - gamma P_pi^T)^-1 s0``."""
    s0 = mdp.s0_dist if start is None else np.asarray(start, dtype=np.float64)
    P = policy_transition(mdp, pi)
    d = (1.0 - mdp.gamma) * np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P.T, s0)
    return np.clip(d, 0.0, None) / np.sum(np.clip(d, 0.0, None))


def monte_carlo_visitation(mdp: TabularMDP, pi, n_samples: int, rng: np.random.Generator,
                           start: np.ndarray | None = None) -> np.ndarray:
    """Oracle: run the chain for a Geometric(1 - gamma) number of steps and record where it stops."""
    p = _check(mdp, pi)
    s0 = mdp.s0_dist if start is None else np.asarray(start, dtype=np.float64)
    n = mdp.n_states
    states = rng.choice(n, size=n_samples, p=s0)
    horizon = rng.geometric(1.0 - mdp.gamma, size=n_samples) - 1 if mdp.gamma > 0 else np.zeros(n_samples, int)
    cum_pi = np.cumsum(p, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    for k in range(int(horizon.max(initial=0))):
        alive = horizon > k
        s = states[alive]
        a = np.minimum((rng.uniform(size=s.size)[:, None] > cum_pi[s]).sum(axis=1), p.shape[1] - 1)
        nxt = (rng.uniform(size=s.size)[:, None] > cum_P[s, a]).sum(axis=1)
        states[alive] = np.minimum(nxt, n - 1)
    return np.bincount(states, minlength=n) / n_samples


def tv_per_state(p1, p2) -> np.ndarray:
    """Total variation ``0.5 * sum_a |p1 - p2|`` per state."""
    a, b = _table(p1), _table(p2)
    if a.shape != b.shape:
        raise TheoryError(f"shape mismatch {a.shape} vs {b.shape}")
    return 0.5 * np.sum(np.abs(a - b), axis=1)


@dataclass
class BoundReport:
    lhs: float
    d_minus: float
    d_plus: float
    L: float
    xi: float
    expected_tv: float
    holds: bool
    slack_lower: float
    slack_upper: float


def cpo_bounds(mdp: TabularMDP, pi, pi_prime, f: np.ndarray | None = None, tol: float = TOL) -> BoundReport:
    """Two-sided bound on ``J(pi') - J(pi)`` built from an arbitrary state function ``f``.

    ``L = E_{s~d^pi} sum_a (pi'(a|s) - pi(a|s)) E_{s'}[delta_f]`` (the importance-ratio form
    minus one, written without division), ``xi = max_s |E_{a~pi', s'}[delta_f]|`` and
    ``D+- = L / (1 - gamma) +- 2 gamma xi / (1 - gamma)^2 * E_{d^pi}[TV]``.
    """
    p, q = _check(mdp, pi), _check(mdp, pi_prime)
    g = mdp.gamma
    f = np.zeros(mdp.n_states) if f is None else np.asarray(f, dtype=np.float64)
    exp_delta = mdp.R + g * np.einsum("sat,t->sa", mdp.P, f) - f[:, None]
    d = visitation(mdp, p)
    L = float(d @ np.sum((q - p) * exp_delta, axis=1))
    xi = float(np.max(np.abs(np.sum(q * exp_delta, axis=1))))
    e_tv = float(d @ tv_per_state(p, q))
    penalty = 2.0 * g * xi / (1.0 - g) ** 2 * e_tv
    centre = L / (1.0 - g)
    lhs = float(mdp.s0_dist @ (exact_values(mdp, q) - exact_values(mdp, p)))
    lo, hi = centre - penalty, centre + penalty
    return BoundReport(lhs, lo, hi, L, xi, e_tv, bool(lo - tol <= lhs <= hi + tol), lhs - lo, hi - lhs)


def _r_max_abs(mdp: TabularMDP) -> float:
    return float(np.max(np.abs(mdp.R)))


@dataclass
class Theorem1Report:
    delta_literal: float
    delta_reward_weighted: float
    rhs: float
    performance_drop: float
    attack_succeeded: bool
    condition_holds: bool


def theorem1_check(mdp: TabularMDP, mu, mu_nu, tol: float = TOL) -> Theorem1Report:
    """Necessary condition for attack success.

    ``delta_literal`` sums probability differences and is identically zero; the reward-weighted
    variant ``sum_s d^{mu+nu}(s) sum_a (mu+nu - mu) R / |R|_max`` is compared against
    ``2 gamma / (1 - gamma) * E_{d^{mu+nu}}[TV]``.
    """
    p, q = _check(mdp, mu), _check(mdp, mu_nu)
    g = mdp.gamma
    d = visitation(mdp, q)
    delta_literal = float(d @ (q.sum(axis=1) - p.sum(axis=1)))
    r_max = _r_max_abs(mdp)
    weighted = float(d @ np.sum((q - p) * mdp.R, axis=1))
    delta_rw = weighted / r_max if r_max > 0 else 0.0
    rhs = 2.0 * g / (1.0 - g) * float(d @ tv_per_state(p, q))
    drop = performance(mdp, p) - performance(mdp, q)
    return Theorem1Report(delta_literal, delta_rw, rhs, drop, bool(drop >= 0.0), bool(delta_rw <= rhs + tol))


@dataclass
class Theorem2Report:
    lhs: float
    kappa: float
    max_visitation: float
    tv_sum: float
    rhs: float
    delta_literal: float
    performance_drop: float
    sufficient_predicts: bool
    attack_succeeded: bool


def kappa(gamma: float, r_max_abs: float, r_min: float) -> float:
    """``-2 gamma |R|_max / ((1 - gamma) R_min)``; positive because ``R_min < 0``.

    >>> kappa(0.9, 1.0, -1.0)
    18.000000000000004
    """
    if not r_min < 0:
        raise TheoryError("kappa needs a negative minimum reward")
    return -2.0 * gamma * r_max_abs / ((1.0 - gamma) * r_min)


def theorem2_check(mdp: TabularMDP, mu, mu_nu) -> Theorem2Report:
    """Sufficient condition for attack success (requires some negative reward).

    Fires when ``sum_s d (mu+nu - mu) R / R_min >= kappa * max_s d(s) * sum_s TV(s)``, where ``d``
    is the normalized discounted visitation under attack. Summing TV over states (rather than
    weighting by ``d``) keeps the implication sound: it upper-bounds the ``d``-weighted TV
    divided by ``max_s d(s)``.
    """
    p, q = _check(mdp, mu), _check(mdp, mu_nu)
    r_min = float(np.min(mdp.R))
    if not r_min < 0:
        raise TheoryError("precondition violated: the MDP has no negative reward")
    g = mdp.gamma
    d = visitation(mdp, q)
    k = kappa(g, _r_max_abs(mdp), r_min)
    lhs = float(d @ np.sum((q - p) * mdp.R, axis=1)) / r_min
    max_p = float(np.max(d))
    tv_sum = float(np.sum(tv_per_state(p, q)))
    rhs = k * max_p * tv_sum
    drop = performance(mdp, p) - performance(mdp, q)
    return Theorem2Report(lhs, k, max_p, tv_sum, rhs, float(d @ (q.sum(axis=1) - p.sum(axis=1))), drop,
                          bool(lhs >= rhs), bool(drop >= 0.0))


# attacked tables


def observation_attack(mu, sigma) -> PolicyTable:
    """Attacked policy ``mu(. | sigma(s))`` for an observation map ``sigma``."""
    p = _table(mu)
    return PolicyTable(p[np.asarray(sigma, dtype=int)])


def grid_observation_map(width: int, height: int, radius: int, rng: np.random.Generator | None = None,
                         mdp: TabularMDP | None = None, mu=None) -> np.ndarray:
    """Map each cell to a cell within Chebyshev distance ``radius``.

    With ``mdp`` and ``mu`` the choice is greedy (minimizes the victim's action value under the
    substituted policy); otherwise it is uniformly random.
    """
    n = width * height
    q_values = None
    if mdp is not None and mu is not None:
        V = exact_values(mdp, mu)
        q_values = mdp.R + mdp.gamma * np.einsum("sat,t->sa", mdp.P, V)
    sigma = np.arange(n)
    for s in range(n):
        x, y = s % width, s // width
        cands = [nx + width * ny for ny in range(max(0, y - radius), min(height, y + radius + 1))
                 for nx in range(max(0, x - radius), min(width, x + radius + 1))]
        if q_values is not None:
            scores = [float(_table(mu)[c] @ q_values[s]) for c in cands]
            sigma[s] = cands[int(np.argmin(scores))]
        else:
            sigma[s] = cands[int((rng or np.random.default_rng(0)).integers(len(cands)))]
    return sigma


# fuzz corpora


@dataclass
class Instance:
    mdp: TabularMDP
    pi: PolicyTable
    pi_prime: PolicyTable
    kind: str

    def dump(self) -> dict:
        return {"P": self.mdp.P.tolist(), "R": self.mdp.R.tolist(), "gamma": self.mdp.gamma,
                "s0": self.mdp.s0_dist.tolist(), "pi": self.pi.probs.tolist(),
                "pi_prime": self.pi_prime.probs.tolist(), "kind": self.kind}


def fuzz_instances(n: int, seed: int = 0, max_states: int = 6, max_actions: int = 3,
                   gammas=(0.5, 0.9)) -> Iterator[Instance]:
    """Random MDPs with a base policy and a second policy (a random mixture toward another table)."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        nS = int(rng.integers(1, max_states + 1))
        nA = int(rng.integers(1, max_actions + 1))
        mdp = random_mdp(rng, nS, nA, float(gammas[i % len(gammas)]))
        pi = PolicyTable.random(rng, nS, nA)
        other = PolicyTable.random(rng, nS, nA)
        yield Instance(mdp, pi, pi.mix(other, float(rng.uniform(0.0, 1.0))), "random")


def gridworld_instances(n: int, seed: int = 0, gamma: float = 0.9) -> Iterator[Instance]:
    """Observation-map attacks on a hazard gridworld (greedy and random maps)."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        w, h = int(rng.integers(3, 5)), int(rng.integers(2, 4))
        hazard = (int(rng.integers(1, w)), int(rng.integers(0, h)))
        goal = (w - 1, h - 1) if hazard != (w - 1, h - 1) else (w - 1, 0)
        mdp = hazard_gridworld(w, h, hazards=(hazard,), goal=goal, slip=float(rng.uniform(0.0, 0.3)),
                               gamma=gamma)
        mu = PolicyTable.random(rng, mdp.n_states, mdp.n_actions)
        greedy = i % 2 == 0
        sigma = grid_observation_map(w, h, 1, rng, mdp if greedy else None, mu if greedy else None)
        yield Instance(mdp, mu, observation_attack(mu, sigma), "grid-greedy" if greedy else "grid-random")


@dataclass
class SuiteSummary:
    instances: int = 0
    bound_holds: int = 0
    bound_violated: int = 0
    literal_nonzero: int = 0
    attacks_succeeded: int = 0
    t1_holds_on_success: int = 0
    t1_violations: int = 0
    t2_applicable: int = 0
    t2_fired: int = 0
    t2_fired_but_failed: int = 0


SUMMARY_COLUMNS = tuple(SuiteSummary.__dataclass_fields__)


def run_suite(instances, out_dir: str | Path | None = None) -> tuple[SuiteSummary, list[dict]]:
    """Evaluate every check on each instance; counterexamples are archived under ``out_dir``."""
    summary = SuiteSummary()
    records: list[dict] = []
    counterexamples: list[dict] = []
    for idx, inst in enumerate(instances):
        summary.instances += 1
        rec: dict = {"index": idx, "kind": inst.kind, "n_states": inst.mdp.n_states,
                     "n_actions": inst.mdp.n_actions, "gamma": inst.mdp.gamma}
        b = cpo_bounds(inst.mdp, inst.pi, inst.pi_prime)
        rec["cpo"] = asdict(b)
        summary.bound_holds += b.holds
        summary.bound_violated += not b.holds
        t1 = theorem1_check(inst.mdp, inst.pi, inst.pi_prime)
        rec["theorem1"] = asdict(t1)
        summary.literal_nonzero += abs(t1.delta_literal) > TOL
        if t1.attack_succeeded:
            summary.attacks_succeeded += 1
            summary.t1_holds_on_success += t1.condition_holds
            summary.t1_violations += not t1.condition_holds
        if np.min(inst.mdp.R) < 0:
            t2 = theorem2_check(inst.mdp, inst.pi, inst.pi_prime)
            rec["theorem2"] = asdict(t2)
            summary.t2_applicable += 1
            summary.t2_fired += t2.sufficient_predicts
            failed = t2.sufficient_predicts and not t2.attack_succeeded
            summary.t2_fired_but_failed += failed
        else:
            failed = False
        if not b.holds or (t1.attack_succeeded and not t1.condition_holds) or failed:
            counterexamples.append({"record": rec, "instance": inst.dump()})
        records.append(rec)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "theory_counterexamples.json", "w") as fh:
            json.dump(counterexamples, fh, indent=1, sort_keys=True)
    return summary, records
