"""
Soft actor-critic on top of the delayed process, with one input featurizer per method.

DEER feeds SAC the frozen encoder's context representation of the current
information state. SACAS feeds the flattened augmented state, DOLPS the last
state predicted by the decoder and the delay-free baseline the raw state.
Online DEER retrains its encoder from interaction data every few steps without
recomputing the representations already stored in the replay buffer.
"""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from deer.dataset import Trajectory, TrajectoryStore, make_samples, split
from deer.envs import EnvSpec
from deer.exceptions import DelayConfigError, EnvConfigError, ShapeError, TrainingDivergedError
from deer.nncore import (
    Adam,
    DenseLayer,
    Mlp,
    Module,
    Parameter,
    backward,
    clip,
    concat,
    exp,
    load_parameters,
    minimum,
    no_grad,
    reduce_mean,
    reduce_sum,
    save_parameters,
    softplus,
    square,
    tanh,
)
from deer.rddmdp import DelayConfig, DelayProcess
from deer.seq2seq import Seq2SeqModel, encode, predict_states, pretrain

logger = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SacConfig:
    hidden: tuple = (256, 256)
    lr: float = 3e-4
    batch_size: int = 256
    tau: float = 0.005
    gamma: float = 0.99
    init_alpha: float = 1.0
    target_entropy: float = None
    buffer_size: int = 100_000
    training_threshold: int = 1000
    updates_per_step: int = 1
    # Episodes only end on the horizon, which the agent cannot observe.
    bootstrap_at_horizon: bool = True
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_size")
        if self.init_alpha <= 0:
            raise ValueError("the initial temperature must be positive")
        if self.log_every < 1:
            raise ValueError(f"log_every must be positive, got {self.log_every}")


# -- networks ----------------------------------------------------------------------


class Actor(Module):
    """Gaussian policy head: relu trunk, then separate mean and log-std layers."""

    def __init__(self, in_dim, action_dim, hidden, rng):
        dims = [in_dim, *hidden]
        self.trunk = [DenseLayer(dims[i], dims[i + 1], "relu", rng=rng) for i in range(len(hidden))]
        self.mean_head = DenseLayer(dims[-1], action_dim, rng=rng)
        self.log_std_head = DenseLayer(dims[-1], action_dim, rng=rng)

    def __call__(self, h):
        for layer in self.trunk:
            h = layer(h)
        return self.mean_head(h), clip(self.log_std_head(h), LOG_STD_MIN, LOG_STD_MAX)


class Critic(Module):
    def __init__(self, in_dim, action_dim, hidden, rng):
        self.net = Mlp(in_dim + action_dim, hidden, 1, "relu", rng=rng)

    def __call__(self, h, action):
        return self.net(concat([h, action]))[:, 0]


class SacPolicy:
    def __init__(self, input_dim, spec, config=None, seed=0):
        config = config or SacConfig()
        init_rng = np.random.default_rng(seed)
        self.input_dim, self.spec, self.config = input_dim, spec, config
        self.actor = Actor(input_dim, spec.action_dim, config.hidden, init_rng)
        self.critic1 = Critic(input_dim, spec.action_dim, config.hidden, init_rng)
        self.critic2 = Critic(input_dim, spec.action_dim, config.hidden, init_rng)
        self.target1 = Critic(input_dim, spec.action_dim, config.hidden, init_rng)
        self.target2 = Critic(input_dim, spec.action_dim, config.hidden, init_rng)
        self.target1.load_state_dict(self.critic1.state_dict())
        self.target2.load_state_dict(self.critic2.state_dict())
        self.log_alpha = Parameter(np.array([math.log(config.init_alpha)]), name="log_alpha")
        self.target_entropy = (
            -float(spec.action_dim) if config.target_entropy is None else float(config.target_entropy)
        )
        self.actor_optimizer = Adam(self.actor.parameters(), lr=config.lr)
        self.critic_optimizer = Adam(self.critic1.parameters() + self.critic2.parameters(), lr=config.lr)
        self.alpha_optimizer = Adam([self.log_alpha], lr=config.lr)
        self.rng = np.random.default_rng([seed, 1])
        self.updates = 0

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha.data[0]))

    def squash(self, u):
        return tanh(u) * self.spec.action_scale + self.spec.action_center

    def sample(self, h, rng=None):
        """Reparameterized tanh-Gaussian sample: (actions in env units, log-probabilities)."""
        rng = rng or self.rng
        mean, log_std = self.actor(h)
        noise = rng.standard_normal(mean.shape)
        u = mean + exp(log_std) * noise
        gaussian = reduce_sum(-0.5 * noise**2 - _HALF_LOG_2PI - log_std, axis=-1)
        # log(1 - tanh(u)^2) written with softplus for stability
        correction = reduce_sum((math.log(2.0) - u - softplus(-2.0 * u)) * 2.0, axis=-1)
        log_prob = gaussian - correction - float(np.sum(np.log(self.spec.action_scale)))
        return self.squash(u), log_prob

    def state_dict(self):
        arrays = {}
        for prefix in ("actor", "critic1", "critic2", "target1", "target2"):
            for name, value in getattr(self, prefix).state_dict().items():
                arrays[f"{prefix}.{name}"] = value
        arrays["log_alpha"] = self.log_alpha.data.copy()
        return arrays

    def load_state_dict(self, arrays):
        for prefix in ("actor", "critic1", "critic2", "target1", "target2"):
            marker = f"{prefix}."
            getattr(self, prefix).load_state_dict(
                {k[len(marker):]: v for k, v in arrays.items() if k.startswith(marker)}
            )
        self.log_alpha.data[...] = arrays["log_alpha"]


def act(policy, h, deterministic=False, rng=None):
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.shape != (policy.input_dim,):
        raise ShapeError(f"policy expects inputs of length {policy.input_dim}, got {h.shape}")
    with no_grad():
        if deterministic:
            mean, _ = policy.actor(h[None])
            action = policy.squash(mean)
        else:
            action, _ = policy.sample(h[None], rng)
    return policy.spec.clip(action.data[0])


# -- replay ------------------------------------------------------------------------


@dataclass
class ReplayBatch:
    h: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    h_next: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity ring of (h, a, r, h', done); the oldest entry is overwritten first."""

    def __init__(self, capacity, input_dim, action_dim, threshold=1):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity, self.threshold = capacity, threshold
        self.h = np.zeros((capacity, input_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.h_next = np.zeros((capacity, input_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    @property
    def ready(self):
        return self.size >= self.threshold

    def add(self, h, action, reward, h_next, done):
        i = self.cursor
        self.h[i], self.actions[i], self.rewards[i] = h, action, reward
        self.h_next[i], self.done[i] = h_next, float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return ReplayBatch(self.h[idx], self.actions[idx], self.rewards[idx], self.h_next[idx], self.done[idx])


# -- updates -----------------------------------------------------------------------


def critic_targets(policy, batch, rng=None):
    """y = r + gamma (1 - done) (min target Q(h', a') - alpha log pi(a'|h'))."""
    with no_grad():
        next_actions, next_log_prob = policy.sample(batch.h_next, rng)
        next_q = minimum(policy.target1(batch.h_next, next_actions), policy.target2(batch.h_next, next_actions))
        soft_value = next_q.data - policy.alpha * next_log_prob.data
    return batch.rewards + policy.config.gamma * (1.0 - batch.done) * soft_value


def _checked(stage, step, loss):
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDivergedError(stage, step, value)
    return value


def sac_update(policy, batch, rng=None):
    """One gradient step on both critics, the actor and the temperature, then Polyak targets."""
    config = policy.config
    step = policy.updates
    targets = critic_targets(policy, batch, rng)

    q1 = policy.critic1(batch.h, batch.actions)
    q2 = policy.critic2(batch.h, batch.actions)
    critic_loss = reduce_mean(square(q1 - targets)) + reduce_mean(square(q2 - targets))
    critic_value = _checked("critic", step, critic_loss)
    policy.critic_optimizer.step(backward(critic_loss))

    actions, log_prob = policy.sample(batch.h, rng)
    q_pi = minimum(policy.critic1(batch.h, actions), policy.critic2(batch.h, actions))
    actor_loss = reduce_mean(log_prob * policy.alpha - q_pi)
    actor_value = _checked("actor", step, actor_loss)
    policy.actor_optimizer.step(backward(actor_loss))

    alpha_loss = -reduce_mean(policy.log_alpha * (log_prob.data + policy.target_entropy))
    alpha_value = _checked("temperature", step, alpha_loss)
    policy.alpha_optimizer.step(backward(alpha_loss))

    policy.target1.soft_update_from(policy.critic1, config.tau)
    policy.target2.soft_update_from(policy.critic2, config.tau)
    policy.updates += 1
    return {"critic": critic_value, "actor": actor_value, "temperature": alpha_value, "alpha": policy.alpha}


# -- featurizers -------------------------------------------------------------------


class RawStateFeatures:
    """Delay-free baseline: the information state is just the current state."""

    name = "raw"

    def __init__(self, spec):
        self.input_dim = spec.state_dim

    def __call__(self, info):
        return np.asarray(info.base_state, dtype=np.float64)


class AugmentedStateFeatures:
    """SACAS input: s followed by the action block zero-padded to the worst-case delay."""

    name = "augmented"

    def __init__(self, spec, max_delay):
        self.max_delay = max_delay
        self.input_dim = spec.state_dim + max_delay * spec.action_dim

    def __call__(self, info):
        return info.flatten(pad_to=self.max_delay)


class ContextFeatures:
    """DEER input: the encoder's context representation."""

    name = "context"

    def __init__(self, model):
        self.model = model
        self.input_dim = model.k1
        self.calls = 0

    def __call__(self, info):
        self.calls += 1
        return encode(self.model, info).vector


class PredictedStateFeatures:
    """DOLPS input: the decoder's estimate of the current state."""

    name = "predicted"

    def __init__(self, model):
        self.model = model
        self.input_dim = model.state_dim

    def __call__(self, info):
        return predict_states(self.model, info)[-1]


# -- training loops ----------------------------------------------------------------


@dataclass
class RunResult:
    policy: SacPolicy
    features: object
    curve: list = field(default_factory=list)


def _mean_losses(history):
    if not history:
        return {}
    return {key: float(np.mean([h[key] for h in history])) for key in history[0]}


def run_loop(env, delay_config, features, sac_config, steps, seed, callbacks=(), drops=None):
    """
    Interact for ``steps`` agent decisions, updating SAC once the buffer holds
    ``training_threshold`` entries. Each finished episode appends one curve point.
    """
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    policy_seq, episode_seq, drop_seq, update_seq = np.random.SeedSequence(seed).spawn(4)
    drop_seed = int(drop_seq.generate_state(1)[0])
    process = DelayProcess(env, replace(delay_config, seed=drop_seed), drops=drops)
    policy = SacPolicy(features.input_dim, env.spec, sac_config, seed=int(policy_seq.generate_state(1)[0]))
    buffer = ReplayBuffer(sac_config.buffer_size, features.input_dim, env.spec.action_dim,
                          sac_config.training_threshold)
    episode_rng = np.random.default_rng(episode_seq)
    update_rng = np.random.default_rng(update_seq)

    curve, history = [], []
    h = features(process.reset(int(episode_rng.integers(2**31))))
    for step in range(1, steps + 1):
        action = act(policy, h)
        info, reward, done = process.step(action)
        h_next = features(info)
        terminal = done and not sac_config.bootstrap_at_horizon
        buffer.add(h, action, reward, h_next, terminal)
        if buffer.ready:
            for _ in range(sac_config.updates_per_step):
                history.append(sac_update(policy, buffer.sample(sac_config.batch_size, update_rng), update_rng))
        h = h_next
        if done:
            point = {
                "step": step,
                "episode": len(curve) + 1,
                "episode_return_true": process.true_return,
                "episode_return_delivered": process.delivered_return,
                "losses": _mean_losses(history),
                "alpha": policy.alpha,
            }
            curve.append(point)
            if point["episode"] % sac_config.log_every == 0:
                logger.info("step %d/%d: episode %d true return %.3f alpha %.4f", step, steps, point["episode"],
                            process.true_return, policy.alpha)
            else:
                logger.debug("step %d: episode %d true return %.3f", step, point["episode"], process.true_return)
            for callback in callbacks:
                callback.episode_end(process)
            history = []
        for callback in callbacks:
            callback.step_end(step)
        if done and step < steps:
            h = features(process.reset(int(episode_rng.integers(2**31))))
    return RunResult(policy, features, curve)


def _check_model(model, spec, delay_config):
    if model.state_dim != spec.state_dim or model.action_dim != spec.action_dim:
        raise EnvConfigError(
            f"encoder was trained for dims ({model.state_dim}, {model.action_dim}), "
            f"environment has ({spec.state_dim}, {spec.action_dim})"
        )
    delay_config.check_capacity(model.D)


def run_deer(env, delay_config, model, sac_config, steps, seed, drops=None):
    if delay_config.is_delay_free:
        return run_loop(env, delay_config, RawStateFeatures(env.spec), sac_config, steps, seed, drops=drops)
    _check_model(model, env.spec, delay_config)
    if not model.frozen:
        raise DelayConfigError("DEER needs a pretrained, frozen encoder")
    return run_loop(env, delay_config, ContextFeatures(model), sac_config, steps, seed, drops=drops)


def run_sacas(env, delay_config, sac_config, steps, seed, drops=None):
    features = AugmentedStateFeatures(env.spec, delay_config.max_delay)
    return run_loop(env, delay_config, features, sac_config, steps, seed, drops=drops)


def run_dolps(env, delay_config, model, sac_config, steps, seed, drops=None):
    if delay_config.is_delay_free:
        return run_loop(env, delay_config, RawStateFeatures(env.spec), sac_config, steps, seed, drops=drops)
    _check_model(model, env.spec, delay_config)
    return run_loop(env, delay_config, PredictedStateFeatures(model), sac_config, steps, seed, drops=drops)


@dataclass(frozen=True)
class OnlineSettings:
    k1: int = 256
    k2: int = 64
    D: int = 4
    teacher_forcing: float = 0.5
    retrain_period: int = 20_000
    epochs: int = 1
    batch_size: int = 256
    lr: float = 1e-3
    test_ratio: float = 0.1
    clip_norm: float = None


class OnlineRetrainer:
    """Collects the undelayed episodes seen during interaction and retrains the encoder on them."""

    def __init__(self, model, spec, settings, seed):
        self.model = model
        self.settings = settings
        self.store = TrajectoryStore(spec)
        self.seed = seed
        self.retrains = 0

    def episode_end(self, process):
        states, actions, rewards = process.true_trajectory()
        self.store.trajectories.append(Trajectory(states, actions, rewards, "online"))

    def step_end(self, step):
        period = self.settings.retrain_period
        if not period or step % period or not len(self.store):
            return
        samples = make_samples(self.store, self.settings.D, range(1, self.settings.D + 1))
        if len(samples) < 2:
            return
        train, test = split(samples, 1.0 - self.settings.test_ratio, self.seed + self.retrains)
        if not test:
            train, test = train[:-1], train[-1:]
        self.model.unfreeze()
        self.model.set_normalization(*self.store.state_statistics())
        pretrain(self.model, train, test, self.settings.epochs, self.settings.batch_size,
                 self.settings.lr, self.seed + self.retrains, clip_norm=self.settings.clip_norm)
        self.retrains += 1
        logger.info("retrained the online encoder at step %d on %d episodes", step, len(self.store))


def run_online_deer(env, delay_config, sac_config, settings, steps, seed, drops=None):
    """DEER without offline pretraining; representations drift as the encoder is retrained."""
    model = Seq2SeqModel(env.spec.state_dim, env.spec.action_dim, k1=settings.k1, k2=settings.k2,
                         D=settings.D, teacher_forcing=settings.teacher_forcing, seed=seed)
    _check_model(model, env.spec, delay_config)
    model.freeze()
    retrainer = OnlineRetrainer(model, env.spec, settings, seed)
    result = run_loop(env, delay_config, ContextFeatures(model), sac_config, steps, seed,
                      callbacks=[retrainer], drops=drops)
    logger.info("online encoder retrained %d times", retrainer.retrains)
    return result


# -- evaluation and experts --------------------------------------------------------


def evaluate_policy(env, delay_config, features, policy, episodes, seed, drops=None):
    """Deterministic rollouts; returns one {episode, true_return, delivered_return} per episode."""
    episode_seq, drop_seq = np.random.SeedSequence(seed).spawn(2)
    process = DelayProcess(env, replace(delay_config, seed=int(drop_seq.generate_state(1)[0])), drops=drops)
    rng = np.random.default_rng(episode_seq)
    results = []
    for episode in range(1, episodes + 1):
        info, done = process.reset(int(rng.integers(2**31))), False
        while not done:
            info, _, done = process.step(act(policy, features(info), deterministic=True))
        results.append({"episode": episode, "true_return": process.true_return,
                        "delivered_return": process.delivered_return})
    return results


class SacExpert:
    """A SAC policy trained without delays, usable as the expert data collector."""

    def __init__(self, policy=None, achieved_return=float("nan")):
        self.policy = policy
        self.achieved_return = achieved_return

    @property
    def ready(self):
        return self.policy is not None

    def act(self, state):
        return act(self.policy, state, deterministic=True)


def train_expert(env, sac_config, steps, seed, return_threshold=None, eval_episodes=5):
    result = run_loop(env, DelayConfig.delay_free(), RawStateFeatures(env.spec), sac_config, steps, seed)
    returns = evaluate_policy(env, DelayConfig.delay_free(), result.features, result.policy, eval_episodes, seed)
    achieved = float(np.mean([r["true_return"] for r in returns]))
    if return_threshold is not None and achieved < return_threshold:
        logger.warning("expert reached mean return %.3f, below the threshold %.3f", achieved, return_threshold)
    else:
        logger.info("expert reached mean return %.3f", achieved)
    return SacExpert(result.policy, achieved)


def save_policy(path, policy, meta=None):
    header = {
        "input_dim": policy.input_dim,
        "hidden": list(policy.config.hidden),
        "spec": {
            "name": policy.spec.name,
            "state_dim": policy.spec.state_dim,
            "action_dim": policy.spec.action_dim,
            "action_low": list(policy.spec.action_low),
            "action_high": list(policy.spec.action_high),
            "horizon": policy.spec.horizon,
        },
        **(meta or {}),
    }
    return save_parameters(path, policy.state_dict(), header)


def load_policy(path):
    """Returns (policy, metadata)."""
    arrays, header = load_parameters(path)
    fields = header["spec"]
    spec = EnvSpec(fields["name"], fields["state_dim"], fields["action_dim"],
                   tuple(fields["action_low"]), tuple(fields["action_high"]), fields["horizon"])
    policy = SacPolicy(header["input_dim"], spec, SacConfig(hidden=tuple(header["hidden"])))
    policy.load_state_dict(arrays)
    return policy, header
