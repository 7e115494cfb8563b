"""
Delay-free trajectory collection and conversion into zero-padded supervised samples.

A sample anchored at s_t with delay d carries the actions a_t..a_{t+d-1}
zero-padded to length D, the labels s_{t+1}..s_{t+d} (zero tail) and a mask
with d ones. Samples point into the trajectory store instead of copying it.
"""
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from deer.envs import EnvSpec, RandomPolicy, rollout
from deer.exceptions import DatasetError
from deer.nncore import content_hash
from deer.rddmdp import InformationState

logger = logging.getLogger(__name__)

PROVENANCE = ("random", "expert", "online")
DATASET_FORMAT = "deer-dataset"

# Dataset composition cases: (random, expert) counts from the configured M and N.
PRESETS = {
    "mimic": lambda m, n: (m, n),
    "random": lambda m, n: (m + n, 0),
    "expert": lambda m, n: (0, m + n),
}


def preset_counts(preset, random, expert):
    """(random, expert) counts of a named variant; its own counts override the section-wide M and N."""
    m = random if preset.get("random") is None else preset["random"]
    n = expert if preset.get("expert") is None else preset["expert"]
    return PRESETS[preset["kind"]](m, n)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    provenance: str

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise DatasetError("trajectory needs len(states) == len(actions) + 1 == len(rewards) + 1")
        if self.provenance not in PROVENANCE:
            raise DatasetError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def from_transitions(cls, transitions, provenance):
        states = [transitions[0].state] + [tr.next_state for tr in transitions]
        return cls(
            np.array(states),
            np.array([tr.action for tr in transitions]),
            np.array([tr.reward for tr in transitions]),
            provenance,
        )

    def __len__(self):
        return len(self.actions)

    @property
    def total_reward(self):
        return float(self.rewards.sum())


@dataclass
class TrajectoryStore:
    spec: EnvSpec
    trajectories: list = field(default_factory=list)

    def __len__(self):
        return len(self.trajectories)

    def __getitem__(self, index):
        return self.trajectories[index]

    def extend(self, other):
        self.trajectories.extend(other.trajectories)
        return self

    def counts(self):
        return {tag: sum(t.provenance == tag for t in self.trajectories) for tag in PROVENANCE}

    def mean_return(self, provenance=None):
        returns = [t.total_reward for t in self.trajectories if provenance in (None, t.provenance)]
        return float(np.mean(returns)) if returns else float("nan")

    def state_statistics(self):
        """Mean and standard deviation over every stored state (std floored at 1e-6)."""
        if not self.trajectories:
            dim = self.spec.state_dim
            return np.zeros(dim), np.ones(dim)
        states = np.concatenate([t.states for t in self.trajectories])
        return states.mean(axis=0), np.maximum(states.std(axis=0), 1e-6)


def collect(env, policy, n_trajectories, seed, expert=None):
    """Roll out ``n_trajectories`` full-horizon episodes; ``policy`` is "random" or "expert"."""
    if policy not in PROVENANCE:
        raise DatasetError(f"policy must be one of {PROVENANCE}, got {policy!r}")
    if policy == "expert" and expert is None and n_trajectories > 0:
        raise DatasetError("expert collection needs an expert policy")
    store = TrajectoryStore(env.spec)
    for child in np.random.SeedSequence(seed).spawn(n_trajectories):
        env_seed = int(child.generate_state(1)[0])
        actor = RandomPolicy(env.spec, np.random.default_rng(child)) if policy == "random" else expert
        store.trajectories.append(Trajectory.from_transitions(rollout(env, actor, env_seed), policy))
    logger.info("collected %d %s trajectories on %s", n_trajectories, policy, env.spec.name)
    return store


def collect_mix(env, n_random, n_expert, seed, expert=None):
    random_seed, expert_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    store = collect(env, "random", n_random, random_seed, expert)
    return store.extend(collect(env, "expert", n_expert, expert_seed, expert))


@dataclass(frozen=True)
class TrainingSample:
    store: TrajectoryStore = field(repr=False)
    trajectory: int
    position: int
    d: int
    D: int

    @property
    def _trajectory(self):
        return self.store[self.trajectory]

    @property
    def provenance(self):
        return self._trajectory.provenance

    @property
    def anchor_state(self):
        return self._trajectory.states[self.position]

    @property
    def real_actions(self):
        return self._trajectory.actions[self.position:self.position + self.d]

    @property
    def actions(self):
        block = np.zeros((self.D, self.store.spec.action_dim))
        block[:self.d] = self.real_actions
        return block

    @property
    def labels(self):
        block = np.zeros((self.D, self.store.spec.state_dim))
        block[:self.d] = self._trajectory.states[self.position + 1:self.position + 1 + self.d]
        return block

    @property
    def mask(self):
        mask = np.zeros(self.D)
        mask[:self.d] = 1.0
        return mask

    def information_state(self):
        return InformationState(self.anchor_state, self.real_actions)


def make_samples(store, D, delay_set, stride=1):
    if D < 1:
        raise DatasetError(f"D must be >= 1, got {D}")
    delays = sorted(set(delay_set))
    if not delays or delays[0] < 1 or delays[-1] > D:
        raise DatasetError(f"delay set {delays} must be a non-empty subset of [1, {D}]")
    samples = []
    for index, trajectory in enumerate(store.trajectories):
        for position in range(0, len(trajectory), stride):
            for d in delays:
                if position + d <= len(trajectory):
                    samples.append(TrainingSample(store, index, position, d, D))
    logger.info("built %d samples from %d trajectories (D=%d, delays=%s)", len(samples), len(store), D, delays)
    return samples


@dataclass
class SampleBatch:
    anchors: np.ndarray
    actions: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    delays: np.ndarray

    def __len__(self):
        return len(self.delays)


def collate(samples):
    if not samples:
        raise DatasetError("cannot collate an empty batch")
    return SampleBatch(
        anchors=np.stack([s.anchor_state for s in samples]),
        actions=np.stack([s.actions for s in samples]),
        labels=np.stack([s.labels for s in samples]),
        mask=np.stack([s.mask for s in samples]),
        delays=np.array([s.d for s in samples]),
    )


def split(samples, ratio, seed):
    if not 0.0 < ratio < 1.0:
        raise DatasetError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = int(math.floor(ratio * len(samples) + 0.5))
    return [samples[i] for i in order[:cut]], [samples[i] for i in order[cut:]]


def _spec_fields(spec):
    return {
        "name": spec.name,
        "state_dim": spec.state_dim,
        "action_dim": spec.action_dim,
        "action_low": list(spec.action_low),
        "action_high": list(spec.action_high),
        "horizon": spec.horizon,
    }


def save_dataset(path, store, meta):
    """Write the store as stacked arrays plus JSON metadata; returns the content hash."""
    if not len(store):
        raise DatasetError("refusing to save an empty trajectory store")
    arrays = {
        "states": np.stack([t.states for t in store.trajectories]),
        "actions": np.stack([t.actions for t in store.trajectories]),
        "rewards": np.stack([t.rewards for t in store.trajectories]),
        "provenance": np.array([PROVENANCE.index(t.provenance) for t in store.trajectories], dtype=np.float64),
    }
    header = {"format": DATASET_FORMAT, "spec": _spec_fields(store.spec), **meta}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, __meta__=blob, **arrays)
    return content_hash(arrays, header)


def load_dataset(path):
    """Returns (store, metadata, content hash)."""
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(archive["__meta__"].tobytes().decode())
        arrays = {name: archive[name] for name in ("states", "actions", "rewards", "provenance")}
    if header.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path} is not a dataset file")
    fields = header["spec"]
    spec = EnvSpec(fields["name"], fields["state_dim"], fields["action_dim"],
                   tuple(fields["action_low"]), tuple(fields["action_high"]), fields["horizon"])
    store = TrajectoryStore(spec)
    for states, actions, rewards, tag in zip(arrays["states"], arrays["actions"], arrays["rewards"], arrays["provenance"]):
        store.trajectories.append(Trajectory(states, actions, rewards, PROVENANCE[int(tag)]))
    return store, header, content_hash(arrays, header)
