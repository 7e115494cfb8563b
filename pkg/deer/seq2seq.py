"""
GRU encoder-decoder with attention and teacher forcing.

The encoder reads an information state (s, a_1..a_z) and its hidden state
after the last real action is the context representation (length K1 for any z).
The decoder exists for pretraining: it reconstructs s_{t+1}..s_{t+z} from the
encoder states. States are standardized with the dataset statistics stored on
the model; predictions come back in raw units.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from deer.dataset import TrainingSample, collate
from deer.exceptions import DatasetError, ModelFrozenError, ShapeError, TrainingDivergedError
from deer.nncore import (
    Adam,
    DenseLayer,
    GruCell,
    Module,
    Tensor,
    attention,
    backward,
    concat,
    content_hash,
    load_parameters,
    no_grad,
    reduce_sum,
    save_parameters,
    stack,
)

logger = logging.getLogger(__name__)

DEFAULT_K1 = 256
DEFAULT_K2 = 64
DEFAULT_TEACHER_FORCING = 0.5


@dataclass(frozen=True)
class ContextRepresentation:
    vector: np.ndarray
    d: int

    def __len__(self):
        return len(self.vector)


class Seq2SeqModel(Module):
    def __init__(self, state_dim, action_dim, k1=DEFAULT_K1, k2=DEFAULT_K2, D=4,
                 teacher_forcing=DEFAULT_TEACHER_FORCING, seed=0):
        if not 0.0 <= teacher_forcing <= 1.0:
            raise ValueError(f"teacher forcing ratio must lie in [0, 1], got {teacher_forcing}")
        rng = np.random.default_rng(seed)
        self.mlp_s1 = DenseLayer(state_dim, k2, "tanh", rng=rng)
        self.mlp_a = DenseLayer(action_dim, k2, "tanh", rng=rng)
        self.gru_en = GruCell(k2, k1, rng=rng)
        self.mlp_s2 = DenseLayer(state_dim, k2, "tanh", rng=rng)
        self.gru_de = GruCell(k1 + k2, k1, rng=rng)
        self.mlp_s3 = DenseLayer(2 * k1, state_dim, "identity", rng=rng)
        self.state_dim, self.action_dim = state_dim, action_dim
        self.k1, self.k2, self.D = k1, k2, D
        self.teacher_forcing = teacher_forcing
        self.state_mean = np.zeros(state_dim)
        self.state_std = np.ones(state_dim)
        self.trained = False
        self.frozen = False

    def hyperparameters(self):
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "k1": self.k1,
            "k2": self.k2,
            "D": self.D,
            "teacher_forcing": self.teacher_forcing,
        }

    def set_normalization(self, mean, std):
        self.state_mean = np.asarray(mean, dtype=np.float64)
        self.state_std = np.asarray(std, dtype=np.float64)

    def normalize(self, states):
        return (np.asarray(states) - self.state_mean) / self.state_std

    def denormalize(self, states):
        return np.asarray(states) * self.state_std + self.state_mean

    def freeze(self):
        self.frozen = True

    def unfreeze(self):
        self.frozen = False


def encode_sequence(model, anchors, actions, delays):
    """
    Batched encoder pass. ``actions`` is (B, L, action_dim) and only the first
    ``delays[b]`` rows of sample b influence its representation.

    Returns (context (B, K1), encoder states (B, max_d + 1, K1), valid-position mask).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    delays = np.asarray(delays, dtype=int)
    if anchors.shape[-1] != model.state_dim or actions.shape[-1] != model.action_dim:
        raise ShapeError(f"expected state dim {model.state_dim} and action dim {model.action_dim}")
    if np.any(delays < 1) or np.any(delays > actions.shape[1]):
        raise ShapeError(f"delays {delays.tolist()} must lie in [1, {actions.shape[1]}]")
    batch = len(anchors)
    steps = int(delays.max())

    hidden = model.gru_en(model.mlp_s1(model.normalize(anchors)), np.zeros((batch, model.k1)))
    hiddens = [hidden]
    for i in range(steps):
        hidden = model.gru_en(model.mlp_a(actions[:, i]), hidden)
        hiddens.append(hidden)
    states = stack(hiddens, axis=1)
    context = states[np.arange(batch), delays]
    mask = np.arange(steps + 1)[None, :] <= delays[:, None]
    return context, states, mask


def encode(model, info):
    if info.z < 1:
        raise ShapeError("cannot encode an information state without actions")
    with no_grad():
        context, _, _ = encode_sequence(model, info.base_state[None], info.actions[None], [info.z])
    return ContextRepresentation(context.data[0].copy(), info.z)


def _decode(model, context, states, mask, labels, steps, teacher_forcing, rng):
    """Run the decoder for ``steps`` steps; returns normalized predictions (B, steps, state_dim)."""
    batch = context.shape[0]
    h_bar = context
    c, _ = attention(states, h_bar, mask)
    step_input = model.mlp_s2(np.zeros((batch, model.state_dim)))
    predictions = []
    for i in range(1, steps + 1):
        if i >= 2:
            use_own = (rng.random(batch) < teacher_forcing).astype(np.float64)[:, None]
            fed = predictions[-1] * use_own + Tensor(labels[:, i - 2] * (1.0 - use_own))
            step_input = model.mlp_s2(fed)
            c, _ = attention(states, h_bar, mask)
        h_bar = model.gru_de(concat([step_input, c]), h_bar)
        predictions.append(model.mlp_s3(concat([h_bar, c])))
    return stack(predictions, axis=1)


def decode_train(model, batch, rng, teacher_forcing=None):
    """
    Teacher-forced reconstruction of the state sequence.

    ``batch`` is a SampleBatch or a single TrainingSample. Returns
    (predicted states in raw units (B, max_d, state_dim), masked MSE tensor in
    normalized units).
    """
    if isinstance(batch, TrainingSample):
        batch = collate([batch])
    p = model.teacher_forcing if teacher_forcing is None else teacher_forcing
    context, states, mask = encode_sequence(model, batch.anchors, batch.actions, batch.delays)
    steps = int(batch.delays.max())
    labels = model.normalize(batch.labels[:, :steps])
    predicted = _decode(model, context, states, mask, labels, steps, p, rng)
    weights = batch.mask[:, :steps, None]
    error = (predicted - labels) * weights
    loss = reduce_sum(error * error) * (1.0 / (weights.sum() * model.state_dim))
    return model.denormalize(predicted.data), loss


def predict_states(model, info):
    """Fully autoregressive decode of the z missing states; the last one estimates the current state."""
    if not model.trained:
        logger.warning("predicting with a seq2seq model that was never trained")
    if info.z < 1:
        raise ShapeError("cannot decode an information state without actions")
    with no_grad():
        context, states, mask = encode_sequence(model, info.base_state[None], info.actions[None], [info.z])
        labels = np.zeros((1, info.z, model.state_dim))
        predicted = _decode(model, context, states, mask, labels, info.z, 1.0, np.random.default_rng(0))
    return list(model.denormalize(predicted.data[0]))


def evaluate(model, samples, batch_size=256):
    """Autoregressive masked MSE per state dimension, in raw units."""
    if not samples:
        raise DatasetError("cannot evaluate on an empty sample set")
    rng = np.random.default_rng(0)
    total, count = 0.0, 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = collate(samples[start:start + batch_size])
            predicted, _ = decode_train(model, batch, rng, teacher_forcing=1.0)
            steps = predicted.shape[1]
            error = (predicted - batch.labels[:, :steps]) * batch.mask[:, :steps, None]
            total += float(np.sum(error * error))
            count += float(batch.mask.sum()) * model.state_dim
    return total / count


def cosine_lr(step, total_steps, lr, lr_min):
    """Cosine decay from ``lr`` at step 0 to ``lr_min`` at ``total_steps``."""
    if lr_min is None or total_steps <= 0:
        return lr
    progress = min(step, total_steps) / total_steps
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * progress))


def pretrain(model, train, test, epochs, batch_size, lr, seed, lr_min=None, clip_norm=None):
    """
    Mini-batch Adam on the masked MSE; returns (model, per-epoch autoregressive test MSE).

    With ``lr_min`` the step size follows a per-batch cosine decay down to it.
    With ``clip_norm`` each batch gradient is rescaled to at most that global norm.
    """
    if model.frozen:
        raise ModelFrozenError("the encoder is frozen; call unfreeze() to retrain it")
    curve = []
    if epochs == 0:
        model.freeze()
        return model, curve
    if not train or not test:
        raise DatasetError("pretraining needs non-empty train and test sets")
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parameters(), lr=lr)
    step, total_steps = 0, epochs * math.ceil(len(train) / batch_size)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = collate([train[i] for i in order[start:start + batch_size]])
            _, loss = decode_train(model, batch, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError("pretrain", step, value)
            grads = backward(loss)
            if clip_norm is not None:
                grads.clip_to_norm(clip_norm)
            optimizer.state.lr = cosine_lr(step, total_steps - 1, lr, lr_min)
            optimizer.step(grads)
            losses.append(value)
            step += 1
        test_mse = evaluate(model, test, batch_size)
        curve.append(test_mse)
        logger.info("pretrain epoch %d/%d: train loss %.6f, test mse %.6f, lr %.2e", epoch + 1, epochs,
                    np.mean(losses), test_mse, optimizer.state.lr)
    model.trained = True
    model.freeze()
    return model, curve


def save_model(path, model, meta=None):
    arrays = model.state_dict()
    arrays["norm.mean"] = model.state_mean
    arrays["norm.std"] = model.state_std
    header = {**model.hyperparameters(), "trained": model.trained, **(meta or {})}
    return save_parameters(path, arrays, header)


def load_model(path):
    """Returns (frozen model, metadata, content hash)."""
    arrays, header = load_parameters(path)
    model = Seq2SeqModel(header["state_dim"], header["action_dim"], k1=header["k1"], k2=header["k2"],
                         D=header["D"], teacher_forcing=header["teacher_forcing"])
    model.set_normalization(arrays.pop("norm.mean"), arrays.pop("norm.std"))
    model.load_state_dict(arrays)
    model.trained = header.get("trained", False)
    model.freeze()
    arrays["norm.mean"], arrays["norm.std"] = model.state_mean, model.state_std
    return model, header, content_hash(arrays, header)
