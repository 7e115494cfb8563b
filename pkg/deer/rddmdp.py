"""
Random-dropping delayed MDP wrapper.

Timeline: after ``reset`` the d_I initial actions c_i have been applied blind
and the process sits at t = d_I holding the information state (s_0, c_0..c_{d_I-1}).
Every ``step`` advances the wrapped environment one true step, after which the
observation scheduled for this tick, s_{t-d_I}, either arrives (omega_t = 0) or
is lost for good (omega_t = 1). Rewards follow the state they arrive with: r_k
is the reward of the transition that produced s_k, r_0 = 0.

With mu = 0 the process is the constant-delay MDP.
"""
import json
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from deer.exceptions import DelayConfigError, DelayProcessError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DelayConfig:
    intrinsic_delay: int = 1
    max_extra_delay: int = 0
    drop_prob: float = 0.0
    initial_actions: tuple = None
    random_initial_actions: bool = False
    seed: int = 0

    def __post_init__(self):
        d_i, d_m, mu = self.intrinsic_delay, self.max_extra_delay, self.drop_prob
        if d_i == 0:
            if d_m != 0 or mu != 0:
                raise DelayConfigError("a delay-free process cannot drop observations")
        elif d_i < 0 or d_m < 0:
            raise DelayConfigError(f"need d_I >= 1 and d_M >= 0, got d_I={d_i}, d_M={d_m}")
        if not 0.0 <= mu < 1.0:
            raise DelayConfigError(f"dropping probability must lie in [0, 1), got {mu}")
        if self.initial_actions is not None and len(self.initial_actions) != d_i:
            raise DelayConfigError(f"expected {d_i} initial actions, got {len(self.initial_actions)}")

    @classmethod
    def delay_free(cls):
        return cls(intrinsic_delay=0)

    @classmethod
    def constant(cls, delay, **kwargs):
        if delay == 0:
            return cls.delay_free()
        return cls(intrinsic_delay=delay, **kwargs)

    @property
    def max_delay(self):
        return self.intrinsic_delay + self.max_extra_delay

    @property
    def is_delay_free(self):
        return self.intrinsic_delay == 0

    @property
    def label(self):
        if self.is_delay_free:
            return "delay-free"
        if self.drop_prob == 0 and self.max_extra_delay == 0:
            return f"const-d{self.intrinsic_delay}"
        return f"rand-dI{self.intrinsic_delay}-dM{self.max_extra_delay}-mu{self.drop_prob:g}"

    def check_capacity(self, capacity):
        if self.max_delay > capacity:
            raise DelayConfigError(f"{self.label}: maximum delay {self.max_delay} exceeds capacity D={capacity}")

    def initial_action_block(self, spec, rng):
        if self.initial_actions is not None:
            block = np.asarray(self.initial_actions, dtype=np.float64).reshape(self.intrinsic_delay, spec.action_dim)
            return spec.clip(block)
        if self.random_initial_actions:
            return rng.uniform(spec.low, spec.high, size=(self.intrinsic_delay, spec.action_dim))
        return np.zeros((self.intrinsic_delay, spec.action_dim))


@dataclass(frozen=True, eq=False)
class InformationState:
    """The last delivered state plus every action taken since it was generated (oldest first)."""

    base_state: np.ndarray
    actions: np.ndarray

    @property
    def z(self):
        return len(self.actions)

    def flatten(self, pad_to=None):
        """Augmented-state vector; ``pad_to`` zero-pads the action block to a fixed count."""
        actions = self.actions
        if pad_to is not None:
            if pad_to < self.z:
                raise DelayProcessError(f"cannot pad {self.z} actions down to {pad_to}")
            actions = np.vstack([actions, np.zeros((pad_to - self.z, actions.shape[1]))])
        return np.concatenate([self.base_state, actions.reshape(-1)])

    def same_as(self, other):
        return np.array_equal(self.base_state, other.base_state) and np.array_equal(self.actions, other.actions)

    def as_record(self):
        return {"base_state": self.base_state.tolist(), "actions": self.actions.tolist()}


@dataclass(frozen=True)
class Fresh:
    state: np.ndarray
    z: int


class Dropped:
    def __repr__(self):
        return "DROPPED"


DROPPED = Dropped()


def update_z(z_prev, dropped, config):
    low, high = config.intrinsic_delay, config.max_delay
    if not low <= z_prev <= high:
        raise DelayProcessError(f"z={z_prev} outside [{low}, {high}]")
    if not dropped:
        return low
    return min(z_prev + 1, high)


def build_information_state(prev, a_prev, delivery, config):
    history = np.vstack([prev.actions, np.asarray(a_prev, dtype=np.float64).reshape(1, -1)])
    if isinstance(delivery, Fresh):
        if delivery.z > len(history):
            raise DelayProcessError(f"need {delivery.z} actions of history, only {len(history)} known")
        return InformationState(np.asarray(delivery.state, dtype=np.float64), history[len(history) - delivery.z:])
    if prev.z < config.max_delay:
        return InformationState(prev.base_state, history)
    return InformationState(prev.base_state, history[len(history) - config.max_delay:])


class BernoulliDrops:
    """omega_t ~ Bernoulli(mu) from a dedicated seeded stream."""

    def __init__(self, drop_prob, seed):
        self.drop_prob = drop_prob
        self.rng = np.random.default_rng(seed)

    def __call__(self, t):
        return bool(self.rng.random() < self.drop_prob)


class ScriptedDrops:
    """omega values read from a list; ``omegas[0]`` belongs to time ``start``. Off-script ticks deliver."""

    def __init__(self, omegas, start=0):
        self.omegas = [int(w) for w in omegas]
        self.start = start

    def __call__(self, t):
        index = t - self.start
        return 0 <= index < len(self.omegas) and self.omegas[index] == 1


class DelayProcess:
    def __init__(self, env, config, drops=None):
        if not config.is_delay_free and env.spec.horizon <= config.intrinsic_delay:
            raise DelayConfigError(f"horizon {env.spec.horizon} too short for d_I={config.intrinsic_delay}")
        self.env = env
        self.config = config
        self.drops = drops if drops is not None else BernoulliDrops(config.drop_prob, config.seed)
        self._init_rng = np.random.default_rng([config.seed, 7])
        self._pending = deque()
        self.info = None
        self.done = True
        self.records = []

    def reset(self, seed):
        cfg = self.config
        state = self.env.reset(seed)
        self._states, self._actions, self._rewards = [state], [], [0.0]
        self._pending = deque()
        self._env_done = False
        self.true_return = 0.0
        self.delivered_return = 0.0
        self.delivered_reward = 0.0
        self.records = []

        initial = cfg.initial_action_block(self.env.spec, self._init_rng)
        for t, action in enumerate(initial):
            self.records.append({"t": t, "omega": 0, "z": cfg.intrinsic_delay, "base_state": None,
                                 "actions": None, "delivered_reward": 0.0})
            self._advance_env(action)
        if self._env_done:
            raise DelayConfigError("environment finished during the blind initial actions")

        self.t = cfg.intrinsic_delay
        self.z = cfg.intrinsic_delay
        self.info = InformationState(state, initial)
        self.done = False
        self._record(omega=0)
        return self.info

    def step(self, action):
        if self.done:
            raise DelayProcessError("step called on a finished episode; call reset first")
        action = self.env.spec.clip(np.asarray(action, dtype=np.float64).reshape(-1))
        if not self._env_done:
            self._advance_env(action)
        self.t += 1
        index, state, reward = self._pending.popleft()
        dropped = not self._env_done and self.drops(self.t)
        self.z = update_z(self.z, dropped, self.config)
        delivery = DROPPED if dropped else Fresh(state, self.z)
        if not dropped and index != self.t - self.config.intrinsic_delay:
            raise DelayProcessError(f"delivered s_{index} at t={self.t}")
        self.info = build_information_state(self.info, action, delivery, self.config)
        if not dropped:
            self.delivered_reward = reward
        self.delivered_return += self.delivered_reward
        self.done = self._env_done and not self._pending
        self._record(omega=int(dropped))
        return self.info, self.delivered_reward, self.done

    def _advance_env(self, action):
        transition = self.env.step(self._states[-1], action)
        self._states.append(transition.next_state)
        self._actions.append(transition.action)
        self._rewards.append(transition.reward)
        self._pending.append((len(self._states) - 1, transition.next_state, transition.reward))
        self.true_return += transition.reward
        self._env_done = transition.done

    def _record(self, omega):
        self.records.append({"t": self.t, "omega": omega, "z": self.z, **self.info.as_record(),
                             "delivered_reward": self.delivered_reward})

    def true_trajectory(self):
        """The undelayed episode so far: (states, actions, rewards of each transition)."""
        actions = np.array(self._actions).reshape(len(self._actions), self.env.spec.action_dim)
        return np.array(self._states), actions, np.array(self._rewards[1:])

    def write_trace(self, path):
        with open(path, "w") as fh:
            for record in self.records:
                fh.write(json.dumps(record) + "\n")


def delayed_reset(proc, seed=0):
    return proc.reset(seed)


def delayed_step(proc, action):
    return proc.step(action)
