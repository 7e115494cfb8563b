"""
Closed-form, delay-free environments and the expert policies that drive them.

Each environment is a small state machine: ``reset(seed)`` draws the initial
state, ``step(state, action)`` applies the closed-form dynamics to the state it
is given. The instance only tracks the step counter (for the horizon) and the
process-noise stream.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from deer.exceptions import EnvConfigError, ExpertNotReadyError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_HORIZON = 200


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if self.horizon <= 0:
            raise EnvConfigError(f"{self.name}: horizon must be positive, got {self.horizon}")
        low, high = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
        if low.shape != (self.action_dim,) or high.shape != (self.action_dim,):
            raise EnvConfigError(f"{self.name}: action bounds must have {self.action_dim} entries")
        if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high)) and np.all(low < high)):
            raise EnvConfigError(f"{self.name}: action bounds must be finite with low < high")

    @property
    def low(self):
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self):
        return np.asarray(self.action_high, dtype=np.float64)

    @property
    def action_center(self):
        return 0.5 * (self.high + self.low)

    @property
    def action_scale(self):
        return 0.5 * (self.high - self.low)

    def clip(self, action):
        return np.clip(action, self.low, self.high)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


class Env:
    """Base class: subclasses provide ``spec``, ``initial_state``, ``dynamics`` and ``reward``."""

    spec: EnvSpec

    def __init__(self, noise_std=0.0):
        if noise_std < 0:
            raise EnvConfigError(f"noise_std must be >= 0, got {noise_std}")
        self.noise_std = float(noise_std)
        self._t = 0
        self._noise_rng = np.random.default_rng(0)

    @property
    def t(self):
        return self._t

    def reset(self, seed):
        init_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
        self._noise_rng = np.random.default_rng(noise_seq)
        self._t = 0
        return self.initial_state(np.random.default_rng(init_seq))

    def step(self, state, action):
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape != (self.spec.action_dim,):
            raise ShapeError(f"{self.spec.name}: action must have {self.spec.action_dim} entries")
        if not np.all(np.isfinite(action)):
            raise NonFiniteError(f"{self.spec.name}: non-finite action {action}")
        state = np.asarray(state, dtype=np.float64)
        action = self.spec.clip(action)
        next_state = self.dynamics(state, action)
        if self.noise_std > 0:
            next_state = next_state + self.noise_std * self._noise_rng.standard_normal(self.spec.state_dim)
        next_state = self.canonical(next_state)
        reward = float(self.reward(state, action, next_state))
        self._t += 1
        return Transition(state.copy(), action, reward, next_state, self._t >= self.spec.horizon)

    def canonical(self, state):
        return state

    def initial_state(self, rng):
        raise NotImplementedError

    def dynamics(self, state, action):
        raise NotImplementedError

    def reward(self, state, action, next_state):
        raise NotImplementedError


def double_integrator(dt):
    """Two decoupled double integrators: state (x, vx, y, vy), action (ax, ay)."""
    block_a = np.array([[1.0, dt], [0.0, 1.0]])
    block_b = np.array([[0.5 * dt * dt], [dt]])
    return np.kron(np.eye(2), block_a), np.kron(np.eye(2), block_b)


class LinearSystemEnv(Env):
    """x' = A x + B u + noise, reward -(e'Qe + u'Ru) with e = x - goal."""

    def __init__(self, A=None, B=None, Q=None, R=None, goal=None, dt=0.1, noise_std=0.0,
                 init_scale=1.0, action_limit=1.0, horizon=DEFAULT_HORIZON):
        super().__init__(noise_std)
        default_a, default_b = double_integrator(dt)
        self.A = np.asarray(default_a if A is None else A, dtype=np.float64)
        self.B = np.asarray(default_b if B is None else B, dtype=np.float64)
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise EnvConfigError(f"A must be {n}x{n}, got {self.A.shape}")
        radius = max(abs(np.linalg.eigvals(self.A)))
        if radius > 1.05:
            raise EnvConfigError(f"spectral radius of A is {radius:.3f} > 1.05")
        self.Q = np.eye(n) if Q is None else np.asarray(Q, dtype=np.float64)
        self.R = 0.1 * np.eye(m) if R is None else np.asarray(R, dtype=np.float64)
        self.goal = np.zeros(n) if goal is None else np.asarray(goal, dtype=np.float64)
        self.init_scale = float(init_scale)
        self.spec = EnvSpec("linear", n, m, (-action_limit,) * m, (action_limit,) * m, horizon)

    def initial_state(self, rng):
        return rng.uniform(-self.init_scale, self.init_scale, size=self.spec.state_dim)

    def dynamics(self, state, action):
        return self.A @ state + self.B @ action

    def reward(self, state, action, next_state):
        error = state - self.goal
        return -(error @ self.Q @ error + action @ self.R @ action)


class PointMassEnv(Env):
    """Planar point mass pushed by a bounded force toward ``goal``; state (px, py, vx, vy)."""

    def __init__(self, mass=1.0, dt=0.05, damping=0.1, goal=(0.0, 0.0), start=(1.0, 1.0),
                 init_spread=0.5, action_limit=1.0, control_cost=0.01, noise_std=0.0,
                 horizon=DEFAULT_HORIZON):
        super().__init__(noise_std)
        if dt <= 0 or mass <= 0:
            raise EnvConfigError("point mass needs dt > 0 and mass > 0")
        self.mass, self.dt, self.damping = float(mass), float(dt), float(damping)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.start = np.asarray(start, dtype=np.float64)
        self.init_spread = float(init_spread)
        self.control_cost = float(control_cost)
        self.spec = EnvSpec("point_mass", 4, 2, (-action_limit,) * 2, (action_limit,) * 2, horizon)

    def initial_state(self, rng):
        position = self.start + rng.uniform(-self.init_spread, self.init_spread, size=2)
        return np.concatenate([position, np.zeros(2)])

    def dynamics(self, state, action):
        position, velocity = state[:2], state[2:]
        acceleration = action / self.mass - self.damping * velocity
        return np.concatenate([position + self.dt * velocity, velocity + self.dt * acceleration])

    def reward(self, state, action, next_state):
        offset = state[:2] - self.goal
        return -(offset @ offset) - self.control_cost * (action @ action)


def wrap_angle(theta):
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


class PendulumEnv(Env):
    """Torque-limited swing-up; theta = 0 is upright. State (theta, theta_dot), explicit Euler."""

    def __init__(self, mass=1.0, length=1.0, gravity=10.0, dt=0.05, max_torque=2.0,
                 max_speed=8.0, init_speed=1.0, noise_std=0.0, horizon=DEFAULT_HORIZON):
        super().__init__(noise_std)
        if dt <= 0:
            raise EnvConfigError("pendulum needs dt > 0")
        self.mass, self.length, self.gravity = float(mass), float(length), float(gravity)
        self.dt, self.max_speed, self.init_speed = float(dt), float(max_speed), float(init_speed)
        self.spec = EnvSpec("pendulum", 2, 1, (-max_torque,), (max_torque,), horizon)

    def initial_state(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-self.init_speed, self.init_speed)])

    def angular_acceleration(self, theta, torque):
        return (3.0 * self.gravity / (2.0 * self.length)) * math.sin(theta) + 3.0 / (
            self.mass * self.length**2
        ) * torque

    def dynamics(self, state, action):
        theta, speed = state
        new_speed = speed + self.dt * self.angular_acceleration(theta, action[0])
        return np.array([theta + self.dt * speed, np.clip(new_speed, -self.max_speed, self.max_speed)])

    def canonical(self, state):
        return np.array([wrap_angle(state[0]), state[1]])

    def reward(self, state, action, next_state):
        theta, speed = state
        return -(wrap_angle(theta) ** 2 + 0.1 * speed**2 + 0.001 * action[0] ** 2)

    def energy(self, state):
        theta, speed = state
        inertia = self.mass * self.length**2 / 3.0
        return 0.5 * inertia * speed**2 + 0.5 * self.mass * self.gravity * self.length * math.cos(theta)


ENVIRONMENTS = {
    "linear": LinearSystemEnv,
    "point_mass": PointMassEnv,
    "pendulum": PendulumEnv,
}


def make_env(name, params=None):
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise EnvConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return factory(**(params or {}))


# -- policies ----------------------------------------------------------------------


class RandomPolicy:
    """Uniform actions inside the action bounds."""

    ready = True

    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng

    def act(self, state):
        return self.rng.uniform(self.spec.low, self.spec.high)


class LqrExpert:
    """Infinite-horizon discrete LQR controller for a LinearSystemEnv."""

    ready = True

    def __init__(self, env):
        self.env = env
        self.cost_to_go = scipy.linalg.solve_discrete_are(env.A, env.B, env.Q, env.R)
        b_t_p = env.B.T @ self.cost_to_go
        self.gain = np.linalg.solve(b_t_p @ env.B + env.R, b_t_p @ env.A)

    def act(self, state):
        return self.env.spec.clip(-self.gain @ (np.asarray(state) - self.env.goal))


def expert_action(policy, state):
    if not getattr(policy, "ready", False):
        raise ExpertNotReadyError(f"{type(policy).__name__} has not been trained")
    return policy.act(state)


def rollout(env, policy, seed):
    """Run one full-horizon episode; returns the list of transitions."""
    state = env.reset(seed)
    transitions = []
    done = False
    while not done:
        transition = env.step(state, expert_action(policy, state))
        transitions.append(transition)
        state, done = transition.next_state, transition.done
    return transitions
