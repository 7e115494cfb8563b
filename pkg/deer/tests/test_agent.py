import os
import tempfile
from unittest import skipUnless

import numpy as np
from django.test import SimpleTestCase, tag
from scipy.stats import norm

from deer.agent import (
    AugmentedStateFeatures,
    ContextFeatures,
    OnlineSettings,
    ReplayBatch,
    RawStateFeatures,
    ReplayBuffer,
    SacConfig,
    SacPolicy,
    act,
    critic_targets,
    evaluate_policy,
    load_policy,
    run_deer,
    run_loop,
    run_online_deer,
    run_sacas,
    sac_update,
    save_policy,
    train_expert,
)
from deer.envs import Env, EnvSpec, LinearSystemEnv
from deer.exceptions import DelayConfigError, EnvConfigError, ShapeError, TrainingDivergedError
from deer.nncore import gradient_check, minimum, reduce_mean, square
from deer.rddmdp import DelayConfig
from deer.seq2seq import Seq2SeqModel

TOLERANCE = 1e-4
SPEC = EnvSpec("toy", 3, 2, (-1.0, 0.0), (1.0, 2.0), 10)
SMALL = SacConfig(hidden=(8, 8), batch_size=4, buffer_size=64, training_threshold=8, lr=1e-3)


class BanditEnv(Env):
    """One decision per episode, reward -a^2."""

    def __init__(self):
        super().__init__()
        self.spec = EnvSpec("bandit", 1, 1, (-1.0,), (1.0,), 1)

    def initial_state(self, rng):
        return np.zeros(1)

    def dynamics(self, state, action):
        return state

    def reward(self, state, action, next_state):
        return -float(action[0] ** 2)


def _batch(policy, size=5, seed=0):
    rng = np.random.default_rng(seed)
    return ReplayBatch(
        h=rng.normal(size=(size, policy.input_dim)),
        actions=rng.uniform(-1, 1, size=(size, 2)) + np.array([0.0, 1.0]),
        rewards=rng.normal(size=size),
        h_next=rng.normal(size=(size, policy.input_dim)),
        done=(rng.random(size) < 0.3).astype(float),
    )


def _frozen_model(D=4):
    model = Seq2SeqModel(4, 2, k1=8, k2=4, D=D, seed=0)
    model.freeze()
    return model


class ActTests(SimpleTestCase):
    def setUp(self):
        self.policy = SacPolicy(3, SPEC, SMALL, seed=0)

    def test_deterministic_action_is_repeatable(self):
        h = np.array([0.2, -0.4, 1.0])
        np.testing.assert_array_equal(act(self.policy, h, deterministic=True), act(self.policy, h, deterministic=True))

    def test_sampled_actions_stay_in_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            action = act(self.policy, rng.normal(scale=5.0, size=3), rng=rng)
            self.assertTrue(np.all(action >= SPEC.low) and np.all(action <= SPEC.high))

    def test_zero_actor_picks_the_action_center(self):
        for param in self.policy.actor.parameters():
            param.data[...] = 0.0
        np.testing.assert_allclose(act(self.policy, np.ones(3), deterministic=True), [0.0, 1.0])

    def test_wrong_input_length(self):
        with self.assertRaises(ShapeError):
            act(self.policy, np.ones(4))

    def test_log_probability_of_the_squashed_gaussian(self):
        h = np.array([[0.3, -0.1, 0.7]])
        _, log_prob = self.policy.sample(h, np.random.default_rng(11))
        mean, log_std = (t.data[0] for t in self.policy.actor(h))
        u = mean + np.exp(log_std) * np.random.default_rng(11).standard_normal((1, 2))[0]
        expected = norm.logpdf(u, mean, np.exp(log_std)).sum() - np.sum(
            np.log(SPEC.action_scale * (1.0 - np.tanh(u) ** 2))
        )
        self.assertAlmostEqual(float(log_prob.data[0]), expected, places=8)


class CriticTargetTests(SimpleTestCase):
    def test_no_discount_gives_the_reward(self):
        policy = SacPolicy(3, SPEC, SacConfig(hidden=(8,), gamma=0.0, batch_size=4, buffer_size=8), seed=1)
        batch = _batch(policy)
        np.testing.assert_allclose(critic_targets(policy, batch, np.random.default_rng(0)), batch.rewards)

    def test_done_stops_bootstrapping(self):
        policy = SacPolicy(3, SPEC, SMALL, seed=1)
        batch = _batch(policy)
        batch.done[:] = 1.0
        np.testing.assert_allclose(critic_targets(policy, batch, np.random.default_rng(0)), batch.rewards)

    def test_full_polyak_step_copies_the_critics(self):
        policy = SacPolicy(3, SPEC, SacConfig(hidden=(8,), tau=1.0, batch_size=4, buffer_size=8), seed=2)
        sac_update(policy, _batch(policy), np.random.default_rng(0))
        for name, value in policy.critic1.state_dict().items():
            np.testing.assert_allclose(policy.target1.state_dict()[name], value)
        for name, value in policy.critic2.state_dict().items():
            np.testing.assert_allclose(policy.target2.state_dict()[name], value)


class SacUpdateTests(SimpleTestCase):
    def setUp(self):
        self.policy = SacPolicy(3, SPEC, SMALL, seed=3)
        self.batch = _batch(self.policy, size=6)

    def test_actor_gradients_match_finite_differences(self):
        policy, h = self.policy, self.batch.h

        def actor_loss():
            actions, log_prob = policy.sample(h, np.random.default_rng(4))
            q = minimum(policy.critic1(h, actions), policy.critic2(h, actions))
            return reduce_mean(log_prob * policy.alpha - q)

        errors = gradient_check(actor_loss, policy.actor.parameters())
        self.assertLess(max(errors.values()), TOLERANCE)

    def test_critic_gradients_match_finite_differences(self):
        policy, batch = self.policy, self.batch
        targets = critic_targets(policy, batch, np.random.default_rng(0))

        def critic_loss():
            q1 = policy.critic1(batch.h, batch.actions)
            q2 = policy.critic2(batch.h, batch.actions)
            return reduce_mean(square(q1 - targets)) + reduce_mean(square(q2 - targets))

        errors = gradient_check(critic_loss, policy.critic1.parameters() + policy.critic2.parameters())
        self.assertLess(max(errors.values()), TOLERANCE)

    def test_update_reports_every_loss(self):
        losses = sac_update(self.policy, self.batch, np.random.default_rng(0))
        self.assertEqual(set(losses), {"critic", "actor", "temperature", "alpha"})
        self.assertEqual(self.policy.updates, 1)

    def test_non_finite_loss_raises(self):
        self.batch.rewards[0] = np.nan
        with self.assertRaises(TrainingDivergedError):
            sac_update(self.policy, self.batch, np.random.default_rng(0))


class ReplayBufferTests(SimpleTestCase):
    def test_oldest_entries_are_overwritten_first(self):
        buffer = ReplayBuffer(3, 1, 1, threshold=2)
        self.assertFalse(buffer.ready)
        for i in range(5):
            buffer.add([i], [0.0], float(i), [i + 1], False)
        self.assertEqual(len(buffer), 3)
        self.assertTrue(buffer.ready)
        self.assertEqual(sorted(buffer.rewards), [2.0, 3.0, 4.0])
        batch = buffer.sample(10, np.random.default_rng(0))
        self.assertTrue(set(batch.rewards) <= {2.0, 3.0, 4.0})

    def test_empty_buffer_cannot_be_sampled(self):
        with self.assertRaises(ValueError):
            ReplayBuffer(3, 1, 1).sample(1, np.random.default_rng(0))


class RunLoopTests(SimpleTestCase):
    def setUp(self):
        self.env = LinearSystemEnv(horizon=10)

    def test_one_encoding_per_information_state(self):
        result = run_deer(self.env, DelayConfig.constant(2), _frozen_model(), SMALL, steps=20, seed=0)
        self.assertIsInstance(result.features, ContextFeatures)
        self.assertEqual(len(result.curve), 2)
        self.assertEqual(result.features.calls, 20 + 2)

    def test_curve_points(self):
        result = run_sacas(self.env, DelayConfig(1, 2, 0.3), SMALL, steps=30, seed=0)
        self.assertEqual([p["step"] for p in result.curve], [10, 20, 30])
        self.assertEqual(set(result.curve[-1]),
                         {"step", "episode", "episode_return_true", "episode_return_delivered", "losses", "alpha"})
        self.assertIn("critic", result.curve[-1]["losses"])

    def test_seeded_runs_are_identical(self):
        first = run_sacas(self.env, DelayConfig(1, 2, 0.3), SMALL, steps=20, seed=7)
        second = run_sacas(self.env, DelayConfig(1, 2, 0.3), SMALL, steps=20, seed=7)
        self.assertEqual(first.curve, second.curve)

    def test_progress_is_logged_every_few_episodes(self):
        config = SacConfig(hidden=(8, 8), batch_size=4, buffer_size=64, training_threshold=8, lr=1e-3, log_every=2)
        with self.assertLogs("deer.agent", level="INFO") as logs:
            run_sacas(self.env, DelayConfig.constant(1), config, steps=50, seed=0)
        progress = [record.getMessage() for record in logs.records if "true return" in record.getMessage()]
        self.assertEqual(len(progress), 2)
        self.assertIn("episode 2 ", progress[0])
        self.assertIn("episode 4 ", progress[1])

    def test_log_cadence_must_be_positive(self):
        with self.assertRaises(ValueError):
            SacConfig(log_every=0)

    def test_augmented_input_width(self):
        features = AugmentedStateFeatures(self.env.spec, max_delay=6)
        self.assertEqual(features.input_dim, 4 + 6 * 2)

    def test_delay_free_cell_runs_on_raw_states(self):
        result = run_deer(self.env, DelayConfig.delay_free(), None, SMALL, steps=10, seed=0)
        self.assertEqual(result.features.name, "raw")
        self.assertEqual(result.policy.input_dim, 4)

    def test_encoder_must_be_frozen(self):
        model = Seq2SeqModel(4, 2, k1=8, k2=4, D=4)
        with self.assertRaises(DelayConfigError):
            run_deer(self.env, DelayConfig.constant(2), model, SMALL, steps=5, seed=0)

    def test_encoder_capacity_and_dimensions(self):
        with self.assertRaises(DelayConfigError):
            run_deer(self.env, DelayConfig(2, 3, 0.2), _frozen_model(D=4), SMALL, steps=5, seed=0)
        with self.assertRaises(EnvConfigError):
            run_deer(LinearSystemEnv(A=np.eye(2), B=np.eye(2), horizon=10), DelayConfig.constant(1),
                     _frozen_model(), SMALL, steps=5, seed=0)

    def test_online_encoder_is_retrained(self):
        settings = OnlineSettings(k1=8, k2=4, D=2, retrain_period=10, epochs=1, batch_size=8)
        result = run_online_deer(self.env, DelayConfig.constant(2), SMALL, settings, steps=20, seed=0)
        self.assertTrue(result.features.model.trained)
        self.assertTrue(result.features.model.frozen)


class EvaluationTests(SimpleTestCase):
    def test_evaluation_and_policy_files(self):
        env = LinearSystemEnv(horizon=10)
        result = run_sacas(env, DelayConfig.constant(1), SMALL, steps=10, seed=0)
        rows = evaluate_policy(env, DelayConfig.constant(1), result.features, result.policy, episodes=2, seed=1)
        self.assertEqual([r["episode"] for r in rows], [1, 2])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "policy.npz")
            save_policy(path, result.policy, {"mode": "sacas"})
            loaded, header = load_policy(path)
        self.assertEqual(header["mode"], "sacas")
        h = np.linspace(-1, 1, result.policy.input_dim)
        np.testing.assert_array_equal(act(loaded, h, deterministic=True), act(result.policy, h, deterministic=True))

    def test_weak_expert_is_reported(self):
        env = LinearSystemEnv(horizon=10)
        with self.assertLogs("deer.agent", level="WARNING"):
            expert = train_expert(env, SMALL, steps=10, seed=0, return_threshold=1e9, eval_episodes=1)
        self.assertTrue(expert.ready)


@tag("slow")
@skipUnless(os.environ.get("DEER_SLOW_TESTS"), "set DEER_SLOW_TESTS=1 to run")
class BanditTests(SimpleTestCase):
    def test_policy_mean_moves_to_the_best_action(self):
        config = SacConfig(hidden=(32, 32), gamma=0.0, batch_size=64, buffer_size=5000,
                           training_threshold=64, lr=3e-3)
        env = BanditEnv()
        result = run_loop(env, DelayConfig.delay_free(), RawStateFeatures(env.spec), config, steps=3000, seed=0)
        action = act(result.policy, np.zeros(1), deterministic=True)
        self.assertLess(abs(action[0]), 0.05)
