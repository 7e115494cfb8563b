import math

import numpy as np
from django.test import SimpleTestCase

from deer.envs import (
    EnvSpec,
    LinearSystemEnv,
    LqrExpert,
    PendulumEnv,
    PointMassEnv,
    RandomPolicy,
    expert_action,
    make_env,
    rollout,
)
from deer.exceptions import EnvConfigError, ExpertNotReadyError, NonFiniteError


def riccati_iteration(A, B, Q, R, iterations=10_000):
    P = Q.copy()
    for _ in range(iterations):
        gain = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ gain)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


class EnvSpecTests(SimpleTestCase):
    def test_rejects_inverted_bounds(self):
        with self.assertRaises(EnvConfigError):
            EnvSpec("bad", 2, 1, (1.0,), (-1.0,))

    def test_rejects_non_positive_horizon(self):
        with self.assertRaises(EnvConfigError):
            EnvSpec("bad", 2, 1, (-1.0,), (1.0,), horizon=0)

    def test_unknown_environment(self):
        with self.assertRaises(EnvConfigError):
            make_env("cartpole")


class LinearSystemTests(SimpleTestCase):
    def test_reset_is_deterministic_per_seed(self):
        env = LinearSystemEnv()
        np.testing.assert_array_equal(env.reset(11), env.reset(11))
        self.assertFalse(np.array_equal(env.reset(11), env.reset(12)))

    def test_noiseless_step_is_exactly_linear(self):
        env = LinearSystemEnv()
        x = env.reset(0)
        u = np.array([0.3, -0.6])
        np.testing.assert_array_equal(env.step(x, u).next_state, env.A @ x + env.B @ u)

    def test_actions_are_clipped(self):
        env = LinearSystemEnv(action_limit=0.5)
        transition = env.step(np.zeros(4), np.array([3.0, -3.0]))
        np.testing.assert_array_equal(transition.action, [0.5, -0.5])

    def test_non_finite_action_raises(self):
        env = LinearSystemEnv()
        env.reset(0)
        with self.assertRaises(NonFiniteError):
            env.step(np.zeros(4), np.array([np.nan, 0.0]))

    def test_done_at_horizon(self):
        env = LinearSystemEnv(horizon=5)
        transitions = rollout(env, RandomPolicy(env.spec, np.random.default_rng(0)), seed=0)
        self.assertEqual(len(transitions), 5)
        self.assertEqual([t.done for t in transitions], [False] * 4 + [True])

    def test_unstable_system_is_rejected(self):
        with self.assertRaises(EnvConfigError):
            LinearSystemEnv(A=2.0 * np.eye(2), B=np.eye(2))

    def test_same_seed_and_actions_replay_bit_identically(self):
        env = LinearSystemEnv(noise_std=0.05)
        first = rollout(env, RandomPolicy(env.spec, np.random.default_rng(1)), seed=4)
        second = rollout(env, RandomPolicy(env.spec, np.random.default_rng(1)), seed=4)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.next_state, b.next_state)


class PointMassTests(SimpleTestCase):
    def test_zero_spread_starts_at_the_documented_point(self):
        env = PointMassEnv(init_spread=0.0, start=(1.0, -2.0))
        np.testing.assert_array_equal(env.reset(3), [1.0, -2.0, 0.0, 0.0])

    def test_rest_with_zero_action_stays_put(self):
        env = PointMassEnv()
        state = np.array([0.5, 0.5, 0.0, 0.0])
        np.testing.assert_array_equal(env.step(state, np.zeros(2)).next_state, state)

    def test_reward_penalizes_distance_and_effort(self):
        env = PointMassEnv()
        reward = env.step(np.array([1.0, 2.0, 0.0, 0.0]), np.array([1.0, 0.0])).reward
        self.assertAlmostEqual(reward, -5.0 - 0.01)


class PendulumTests(SimpleTestCase):
    def test_reset_ranges(self):
        env = PendulumEnv()
        for seed in range(20):
            theta, speed = env.reset(seed)
            self.assertTrue(-math.pi <= theta <= math.pi)
            self.assertTrue(-1.0 <= speed <= 1.0)

    def test_zero_torque_energy_matches_explicit_euler(self):
        env = PendulumEnv()
        state = np.array([0.3, 0.2])
        for _ in range(20):
            theta, speed = state
            dt, g, l = 0.05, 10.0, 1.0
            expected = np.array([theta + dt * speed, speed + dt * 3.0 * g / (2.0 * l) * math.sin(theta)])
            state = env.step(state, np.zeros(1)).next_state
            self.assertAlmostEqual(env.energy(state), env.energy(expected), delta=1e-12)

    def test_speed_is_clipped(self):
        env = PendulumEnv(max_speed=8.0)
        self.assertEqual(env.step(np.array([1.5, 7.99]), np.array([2.0])).next_state[1], 8.0)


class ExpertTests(SimpleTestCase):
    def test_lqr_gain_matches_riccati_iteration(self):
        identity = np.eye(2)
        env = LinearSystemEnv(A=identity, B=identity, Q=identity, R=identity)
        np.testing.assert_allclose(LqrExpert(env).gain, riccati_iteration(identity, identity, identity, identity),
                                   atol=1e-8)

    def test_zero_state_gets_zero_action(self):
        env = LinearSystemEnv()
        np.testing.assert_array_equal(expert_action(LqrExpert(env), np.zeros(4)), np.zeros(2))

    def test_untrained_policy_raises(self):
        class Untrained:
            ready = False

            def act(self, state):
                return np.zeros(1)

        with self.assertRaises(ExpertNotReadyError):
            expert_action(Untrained(), np.zeros(2))

    def test_lqr_beats_random_actions(self):
        env = LinearSystemEnv()
        lqr = sum(t.reward for t in rollout(env, LqrExpert(env), seed=5))
        random = sum(t.reward for t in rollout(env, RandomPolicy(env.spec, np.random.default_rng(5)), seed=5))
        self.assertGreater(lqr, random)
