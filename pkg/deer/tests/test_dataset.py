import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from deer.envs import EnvSpec, LinearSystemEnv, LqrExpert
from deer.exceptions import DatasetError
from deer.dataset import (
    PRESETS,
    SampleBatch,
    Trajectory,
    TrajectoryStore,
    collate,
    collect,
    collect_mix,
    load_dataset,
    make_samples,
    save_dataset,
    split,
)


def _toy_store():
    spec = EnvSpec("linear", 2, 1, (-1.0,), (1.0,), 3)
    states = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    actions = np.array([[0.1], [0.2], [0.3]])
    return TrajectoryStore(spec, [Trajectory(states, actions, np.array([-1.0, -2.0, -3.0]), "random")])


class TrajectoryTests(SimpleTestCase):
    def test_lengths_must_line_up(self):
        with self.assertRaises(DatasetError):
            Trajectory(np.zeros((3, 2)), np.zeros((3, 1)), np.zeros(3), "random")

    def test_unknown_provenance(self):
        with self.assertRaises(DatasetError):
            Trajectory(np.zeros((2, 2)), np.zeros((1, 1)), np.zeros(1), "human")

    def test_store_bookkeeping(self):
        store = _toy_store()
        self.assertEqual(store.counts(), {"random": 1, "expert": 0, "online": 0})
        self.assertEqual(store.mean_return("random"), -6.0)
        self.assertTrue(np.isnan(store.mean_return("expert")))


class MakeSamplesTests(SimpleTestCase):
    def test_enumerates_every_anchor_and_delay(self):
        samples = make_samples(_toy_store(), D=2, delay_set=[1, 2])
        self.assertEqual([(s.position, s.d) for s in samples], [(0, 1), (0, 2), (1, 1), (1, 2), (2, 1)])

    def test_short_sample_is_zero_padded(self):
        last = make_samples(_toy_store(), D=2, delay_set=[1, 2])[-1]
        np.testing.assert_array_equal(last.anchor_state, [2.0, 2.0])
        np.testing.assert_array_equal(last.actions, [[0.3], [0.0]])
        np.testing.assert_array_equal(last.labels, [[3.0, 3.0], [0.0, 0.0]])
        np.testing.assert_array_equal(last.mask, [1.0, 0.0])

    def test_full_sample(self):
        sample = make_samples(_toy_store(), D=2, delay_set=[2])[0]
        np.testing.assert_array_equal(sample.actions, [[0.1], [0.2]])
        np.testing.assert_array_equal(sample.labels, [[1.0, 1.0], [2.0, 2.0]])
        info = sample.information_state()
        self.assertEqual(info.z, 2)
        np.testing.assert_array_equal(info.base_state, [0.0, 0.0])

    def test_stride_skips_anchors(self):
        samples = make_samples(_toy_store(), D=2, delay_set=[1], stride=2)
        self.assertEqual([s.position for s in samples], [0, 2])

    def test_delay_set_must_fit_the_capacity(self):
        with self.assertRaises(DatasetError):
            make_samples(_toy_store(), D=2, delay_set=[3])
        with self.assertRaises(DatasetError):
            make_samples(_toy_store(), D=2, delay_set=[])

    def test_labels_replay_through_the_noise_free_environment(self):
        env = LinearSystemEnv(horizon=20)
        store = collect(env, "random", 2, seed=4)
        for sample in make_samples(store, D=4, delay_set=[1, 2, 3, 4], stride=3):
            state = sample.anchor_state
            for action, label in zip(sample.real_actions, sample.labels):
                state = env.step(state, action).next_state
                np.testing.assert_allclose(state, label, atol=1e-12)

    def test_collate(self):
        batch = collate(make_samples(_toy_store(), D=2, delay_set=[1, 2]))
        self.assertIsInstance(batch, SampleBatch)
        self.assertEqual(len(batch), 5)
        self.assertEqual(batch.actions.shape, (5, 2, 1))
        self.assertEqual(batch.labels.shape, (5, 2, 2))
        with self.assertRaises(DatasetError):
            collate([])


class SplitTests(SimpleTestCase):
    def setUp(self):
        store = collect(LinearSystemEnv(horizon=30), "random", 1, seed=0)
        self.samples = make_samples(store, D=4, delay_set=[1, 2, 3, 4])
        self.samples = self.samples[:100]

    def test_ninety_ten(self):
        train, test = split(self.samples, 0.9, seed=1)
        self.assertEqual((len(train), len(test)), (90, 10))
        keys = {(s.position, s.d) for s in train} | {(s.position, s.d) for s in test}
        self.assertEqual(len(keys), 100)

    def test_ratio_bounds(self):
        for ratio in (0.0, 1.0):
            with self.assertRaises(DatasetError):
                split(self.samples, ratio, seed=0)


class CollectTests(SimpleTestCase):
    def setUp(self):
        self.env = LinearSystemEnv(horizon=15)

    def test_zero_trajectories_gives_an_empty_store(self):
        store = collect(self.env, "random", 0, seed=0)
        self.assertEqual(len(store), 0)
        self.assertEqual(make_samples(store, D=2, delay_set=[1]), [])

    def test_expert_collection_needs_an_expert(self):
        with self.assertRaises(DatasetError):
            collect(self.env, "expert", 2, seed=0)

    def test_full_horizon_and_seeded(self):
        first = collect(self.env, "random", 3, seed=9)
        second = collect(self.env, "random", 3, seed=9)
        self.assertTrue(all(len(t) == 15 for t in first))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.actions, b.actions)

    def test_mix_and_presets(self):
        store = collect_mix(self.env, 4, 2, seed=0, expert=LqrExpert(self.env))
        self.assertEqual(store.counts(), {"random": 4, "expert": 2, "online": 0})
        self.assertGreater(store.mean_return("expert"), store.mean_return("random"))
        self.assertEqual(PRESETS["mimic"](500, 10), (500, 10))
        self.assertEqual(PRESETS["random"](500, 10), (510, 0))
        self.assertEqual(PRESETS["expert"](500, 10), (0, 510))


class PersistenceTests(SimpleTestCase):
    def test_save_and_load(self):
        env = LinearSystemEnv(horizon=10)
        store = collect_mix(env, 2, 1, seed=3, expert=LqrExpert(env))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "mimic.npz")
            saved_hash = save_dataset(path, store, {"preset": "mimic", "config_hash": "ab" * 32})
            loaded, header, loaded_hash = load_dataset(path)
        self.assertEqual(saved_hash, loaded_hash)
        self.assertEqual(header["preset"], "mimic")
        self.assertEqual(loaded.spec, store.spec)
        self.assertEqual(loaded.counts(), store.counts())
        np.testing.assert_array_equal(loaded[2].states, store[2].states)

    def test_refuses_an_empty_store(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetError):
                save_dataset(os.path.join(tmp, "empty.npz"), TrajectoryStore(LinearSystemEnv().spec), {})
