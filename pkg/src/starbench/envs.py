"""Desk-scale environments.

* :class:`TabularMDP` - exact finite MDP (plus a random generator and a hazard gridworld)
* :class:`PointGoalEnv` - 2-D point robot that must reach a goal through a gap between hazards
* :class:`BalancerEnv` - linearized inverted-pendulum body driven by four lagged actuators,
  rewarded with the torque-penalty / clamped-forward-velocity form
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TORQUE_COEF = -4e-5
VELOCITY_COEF = 0.3
VELOCITY_CAP = 4.0


class EnvError(RuntimeError):
    pass


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    terminal: bool
    info: dict = field(default_factory=dict)


def reward_victim(torques, v_x: float, zeta: float = TORQUE_COEF, kappa: float = VELOCITY_COEF) -> float:
    torques = np.asarray(torques, dtype=np.float64)
    return float(zeta * np.sum(torques * torques) + kappa * min(v_x, VELOCITY_CAP))


def reward_adversary(r_vic: float) -> float:
    return -r_vic


# tabular


@dataclass
class TabularMDP:
    P: np.ndarray  # [s, a, s']
    R: np.ndarray  # [s, a]
    gamma: float
    s0_dist: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.s0_dist = np.asarray(self.s0_dist, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2] or self.R.shape != self.P.shape[:2]:
            raise EnvError(f"inconsistent shapes P{self.P.shape} R{self.R.shape}")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise EnvError("transition rows must be distributions")
        if abs(self.s0_dist.sum() - 1.0) > 1e-12 or np.any(self.s0_dist < 0):
            raise EnvError("initial-state distribution must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise EnvError("gamma must lie in [0, 1)")
        self.state: int | None = None
        self.done = False

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def reset(self, rng: np.random.Generator) -> int:
        self.state = int(rng.choice(self.n_states, p=self.s0_dist))
        self.done = False
        return self.state

    def step(self, action: int, rng: np.random.Generator) -> StepResult:
        if self.state is None or self.done:
            raise EnvError("step called on a finished or un-reset environment")
        r = float(self.R[self.state, action])
        nxt = int(rng.choice(self.n_states, p=self.P[self.state, action]))
        self.state = nxt
        return StepResult(nxt, r, False, {"fell": False, "v_x": 0.0})


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float = 0.9) -> TabularMDP:
    """Dirichlet(1) transition rows, rewards uniform in [-1, 1], Dirichlet(1) start distribution."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    s0 = rng.dirichlet(np.ones(n_states))
    s0 /= s0.sum()
    return TabularMDP(P, R, gamma, s0)


GRID_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))  # up, right, down, left


def hazard_gridworld(width: int = 4, height: int = 3, hazards=((1, 1),), goal=(3, 2),
                     start=(0, 0), slip: float = 0.1, gamma: float = 0.9,
                     step_cost: float = -0.04, hazard_reward: float = -1.0,
                     goal_reward: float = 1.0) -> TabularMDP:
    """Gridworld with absorbing goal and hazard cells; moves slip to a random neighbor w.p. ``slip``.

    States are indexed ``x + width * y``. Entering a hazard pays ``hazard_reward``; entering the
    goal pays ``goal_reward``; absorbing cells pay 0 forever after.
    """
    n = width * height
    hazards = {tuple(h) for h in hazards}
    goal = tuple(goal)

    def idx(x, y):
        return x + width * y

    def move(x, y, d):
        nx, ny = x + d[0], y + d[1]
        if 0 <= nx < width and 0 <= ny < height:
            return nx, ny
        return x, y

    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    for y in range(height):
        for x in range(width):
            s = idx(x, y)
            if (x, y) in hazards or (x, y) == goal:
                P[s, :, s] = 1.0
                continue
            for a, d in enumerate(GRID_MOVES):
                outcomes = [(1.0 - slip, move(x, y, d))]
                outcomes += [(slip / 4.0, move(x, y, dd)) for dd in GRID_MOVES]
                for p, (nx, ny) in outcomes:
                    P[s, a, idx(nx, ny)] += p
                    if (nx, ny) in hazards:
                        R[s, a] += p * hazard_reward
                    elif (nx, ny) == goal:
                        R[s, a] += p * goal_reward
                    else:
                        R[s, a] += p * step_cost
    s0 = np.zeros(n)
    s0[idx(*start)] = 1.0
    return TabularMDP(P, R, gamma, s0)


# continuous


class ContinuousEnv:
    obs_dim: int
    act_dim: int
    max_steps: int

    def __init__(self):
        self.t = 0
        self.done = True

    def _check_step(self, action) -> np.ndarray:
        if self.done:
            raise EnvError("step called after terminal; call reset first")
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.act_dim,):
            raise EnvError(f"action dim {action.shape} != {self.act_dim}")
        return action


@dataclass
class PointGoalConfig:
    goal_distance: float = 2.0
    hazards: tuple = ((1.0, 0.4), (1.0, -0.4))
    hazard_radius: float = 0.25
    goal_radius: float = 0.2
    dt: float = 0.05
    accel_scale: float = 2.0
    drag: float = 0.5
    max_speed: float = 2.0
    max_steps: int = 400
    jitter: float = 0.01
    progress_coef: float = 1.0
    hazard_penalty: float = -0.5
    goal_bonus: float = 5.0


class PointGoalEnv(ContinuousEnv):
    """Point robot from the origin to a goal on the +x axis through a gap between two hazards.

    Observation: position(2), velocity(2), goal - position(2), hazard_k - position(2 each).
    Action: acceleration in [-1, 1]^2, scaled by ``accel_scale``.
    """

    name = "pointgoal"
    act_dim = 2

    def __init__(self, config: PointGoalConfig | None = None, **overrides):
        super().__init__()
        self.cfg = config or PointGoalConfig(**overrides)
        self.hazards = np.asarray(self.cfg.hazards, dtype=np.float64).reshape(-1, 2)
        self.goal = np.array([self.cfg.goal_distance, 0.0])
        self.obs_dim = 6 + 2 * len(self.hazards)
        self.max_steps = self.cfg.max_steps
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel, self.goal - self.pos, (self.hazards - self.pos).ravel()])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        j = self.cfg.jitter
        self.pos = rng.uniform(-j, j, 2) if j > 0 else np.zeros(2)
        self.vel = np.zeros(2)
        self.t = 0
        self.done = False
        return self._obs()

    def forward_speed(self) -> float:
        d = self.goal - self.pos
        n = np.linalg.norm(d)
        return float(self.vel @ d / n) if n > 0 else 0.0

    def step(self, action, rng: np.random.Generator | None = None) -> StepResult:
        a = np.clip(self._check_step(action), -1.0, 1.0)
        c = self.cfg
        prev = np.linalg.norm(self.goal - self.pos)
        self.vel = self.vel + c.dt * (c.accel_scale * a - c.drag * self.vel)
        speed = np.linalg.norm(self.vel)
        if speed > c.max_speed:
            self.vel = self.vel * (c.max_speed / speed)
        self.pos = self.pos + c.dt * self.vel
        self.t += 1
        dist = np.linalg.norm(self.goal - self.pos)
        reward = c.progress_coef * (prev - dist)
        hit = bool(np.any(np.linalg.norm(self.hazards - self.pos, axis=1) < c.hazard_radius))
        reached = bool(dist < c.goal_radius)
        if hit:
            reward += c.hazard_penalty
        elif reached:
            reward += c.goal_bonus
        terminal = hit or reached
        truncated = (not terminal) and self.t >= self.max_steps
        self.done = terminal or truncated
        info = {"fell": hit, "v_x": self.forward_speed(), "goal": reached and not hit,
                "truncated": truncated}
        return StepResult(self._obs(), float(reward), terminal, info)


@dataclass
class BalancerConfig:
    dt: float = 0.01
    torque_limit: float = 20.0
    action_scale: float = 20.0
    # actuator: inertia * q'' = tau - damping * q' - stiffness * q
    act_inertia: float = 0.05
    act_damping: float = 1.0
    act_stiffness: float = 20.0
    # body: v' = thrust * mean(q) - drag * v
    #       theta'' = (unstable - speed_stabilization * max(v, 0)) * theta - tilt_damping * theta'
    #                 + moment * (front - rear) / 2 - lean * v'
    thrust: float = 6.0
    drag: float = 1.0
    unstable: float = 4.0
    tilt_damping: float = 0.5
    moment: float = 6.0
    lean: float = 0.5
    speed_stabilization: float = 5.0
    max_speed: float = 6.0
    fall_angle: float = 0.8
    max_steps: int = 400
    jitter: float = 0.01


class BalancerEnv(ContinuousEnv):
    """Fall-prone balancing body that is rewarded for forward speed and penalized for torque.

    State (11): tilt, tilt rate, forward velocity, 4 actuator positions, 4 actuator rates.
    Actuators 0-1 are "front", 2-3 "rear": their mean drives forward thrust, their
    front/rear difference produces a tilt moment, and forward acceleration leans the body back.
    Forward speed stabilizes tilt (bicycle-like), so a stalled body topples on its own.
    A fall is ``|tilt| > fall_angle`` and ends the episode.
    """

    name = "balancer"
    obs_dim = 11
    act_dim = 4

    def __init__(self, config: BalancerConfig | None = None, **overrides):
        super().__init__()
        self.cfg = config or BalancerConfig(**overrides)
        self.max_steps = self.cfg.max_steps
        self.x = np.zeros(self.obs_dim)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        j = self.cfg.jitter
        self.x = rng.uniform(-j, j, self.obs_dim) if j > 0 else np.zeros(self.obs_dim)
        self.t = 0
        self.done = False
        return self.x.copy()

    def torques(self, action) -> np.ndarray:
        c = self.cfg
        return np.clip(np.asarray(action, dtype=np.float64) * c.action_scale, -c.torque_limit, c.torque_limit)

    def step(self, action, rng: np.random.Generator | None = None) -> StepResult:
        tau = self.torques(self._check_step(action))
        c = self.cfg
        theta, dtheta, v = self.x[0], self.x[1], self.x[2]
        q, dq = self.x[3:7], self.x[7:11]
        ddq = (tau - c.act_damping * dq - c.act_stiffness * q) / c.act_inertia
        dq = dq + c.dt * ddq
        q = q + c.dt * dq
        accel = c.thrust * q.mean() - c.drag * v
        v_new = float(np.clip(v + c.dt * accel, -c.max_speed, c.max_speed))
        accel = (v_new - v) / c.dt
        gain = c.unstable - c.speed_stabilization * max(v_new, 0.0)
        ddtheta = (gain * theta - c.tilt_damping * dtheta
                   + c.moment * 0.5 * ((q[0] + q[1]) - (q[2] + q[3])) - c.lean * accel)
        dtheta = dtheta + c.dt * ddtheta
        theta = theta + c.dt * dtheta
        self.x = np.concatenate([[theta, dtheta, v_new], q, dq])
        self.t += 1
        fell = bool(abs(theta) > c.fall_angle)
        reward = reward_victim(tau, v_new)
        truncated = (not fell) and self.t >= self.max_steps
        self.done = fell or truncated
        return StepResult(self.x.copy(), reward, fell, {"fell": fell, "v_x": v_new, "truncated": truncated})


ENVS = {"pointgoal": PointGoalEnv, "balancer": BalancerEnv}
ENV_CONFIGS = {"pointgoal": PointGoalConfig, "balancer": BalancerConfig}


def make_env(name: str, **params) -> ContinuousEnv:
    try:
        cls, cfg_cls = ENVS[name], ENV_CONFIGS[name]
    except KeyError:
        raise EnvError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None
    if "hazards" in params:
        params["hazards"] = tuple(tuple(h) for h in params["hazards"])
    return cls(cfg_cls(**params))


def pd_balancer_action(state: np.ndarray, kp: float = 3.0, kd: float = 0.6, push: float = 0.0) -> np.ndarray:
    """Hand-written stabilizer: front/rear differential torque against tilt (sanity floor)."""
    u = -(kp * state[0] + kd * state[1])
    return np.array([push + u, push + u, push - u, push - u])
