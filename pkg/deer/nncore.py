"""
Differentiable neural primitives on numpy float64 arrays.

A ``Tensor`` records the operation that produced it; ``backward`` walks that
record in reverse topological order and returns exact analytic gradients for
every ``Parameter`` reachable from a scalar loss. Layers (dense, GRU cell),
scaled dot-product attention and Adam are built on top of it.
"""
import contextvars
import hashlib
import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from deer.exceptions import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
CHECKPOINT_FORMAT = "deer-params"

_recording = contextvars.ContextVar("deer_grad_recording", default=True)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Parameter(Tensor):
    """A leaf tensor that training updates in place."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


@contextmanager
def no_grad():
    """Evaluate forward passes without recording the graph (frozen-model inference)."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _node(data, parents, backward_fn):
    parents = tuple(parents)
    if not _recording.get() or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _node(a.data / b.data, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    return _node(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def square(a):
    return mul(a, a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul supports vectors and matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _node(a.data @ b.data, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        if _is_basic_index(index):
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), backward)


def split_last(a, sizes):
    """Split along the last axis into consecutive blocks of the given sizes."""
    a = as_tensor(a)
    parts, start = [], 0
    lead = (slice(None),) * (a.ndim - 1)
    for size in sizes:
        parts.append(getitem(a, lead + (slice(start, start + size),)))
        start += size
    return parts


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("cannot stack an empty list")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    a = as_tensor(a)
    y = expit(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a):
    a = as_tensor(a)
    active = a.data > 0
    return _node(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def identity(a):
    return as_tensor(a)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def softplus(a):
    a = as_tensor(a)
    return _node(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def clip(a, low, high):
    """Clamp values; the gradient passes only where the input is inside the range."""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)
    return _node(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _node(np.where(take_a, a.data, b.data), (a, b), backward)


def softmax(a, axis=-1, mask=None):
    a = as_tensor(a)
    scores = a.data
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (a,), backward)


ACTIVATIONS = {"identity": identity, "tanh": tanh, "relu": relu}


# -- reverse pass ------------------------------------------------------------


@dataclass
class Gradients:
    """Gradient arrays keyed by the Parameter objects they belong to."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, param):
        grad = self.values.get(param)
        return np.zeros_like(param.data) if grad is None else grad

    def __contains__(self, param):
        return param in self.values

    def __len__(self):
        return len(self.values)

    def global_norm(self):
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.values.values()))

    def clip_to_norm(self, max_norm):
        """Rescales in place so the global norm is at most ``max_norm``; returns the norm before clipping."""
        norm = self.global_norm()
        if norm > max_norm:
            scale = max_norm / norm
            self.values = {param: grad * scale for param, grad in self.values.items()}
        return norm


def _topological_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Return the gradient of a scalar loss with respect to every reachable Parameter."""
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {float(loss.data.reshape(-1)[0])!r}")
    if not loss.requires_grad:
        return Gradients()

    pending = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if not node._parents:
            leaves[node] = grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if not parent.requires_grad or parent_grad is None:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return Gradients(leaves)


# -- layers --------------------------------------------------------------------


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix=""):
        named = {}
        for attr, value in vars(self).items():
            key = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                named[key] = value
            elif isinstance(value, Module):
                named.update(value.named_parameters(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        named.update(item.named_parameters(prefix=f"{key}.{i}."))
        return named

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, arrays):
        for name, param in self.named_parameters().items():
            if name not in arrays:
                raise ShapeError(f"missing parameter block {name!r}")
            value = np.asarray(arrays[name], dtype=DTYPE)
            if value.shape != param.shape:
                raise ShapeError(f"{name}: expected {param.shape}, got {value.shape}")
            param.data[...] = value

    def soft_update_from(self, source, tau):
        """Polyak averaging: self <- (1 - tau) * self + tau * source."""
        theirs = source.named_parameters()
        for name, param in self.named_parameters().items():
            param.data[...] = (1.0 - tau) * param.data + tau * theirs[name].data


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseLayer(Module):
    def __init__(self, in_dim, out_dim, activation="identity", rng=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, in_dim, (out_dim, in_dim)))
        self.bias = Parameter(_uniform(rng, in_dim, (out_dim,)))
        self.activation = activation

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return dense_forward(self, x)


def dense_forward(layer, x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] != layer.in_dim:
        raise ShapeError(f"dense layer expects input dim {layer.in_dim}, got shape {x.shape}")
    return ACTIVATIONS[layer.activation](x @ layer.weight.T + layer.bias)


class Mlp(Module):
    """Stack of dense layers; hidden layers share one activation, the head is linear."""

    def __init__(self, in_dim, hidden, out_dim, activation="relu", rng=None):
        dims = [in_dim, *hidden, out_dim]
        self.layers = [
            DenseLayer(dims[i], dims[i + 1], activation if i < len(hidden) else "identity", rng=rng)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for layer in self.layers:
            x = dense_forward(layer, x)
        return x


class GruCell(Module):
    """Single GRU cell. Gate blocks are stacked in the order (reset, update, candidate)."""

    def __init__(self, in_dim, hidden_dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight_ih = Parameter(_uniform(rng, in_dim, (3 * hidden_dim, in_dim)))
        self.weight_hh = Parameter(_uniform(rng, hidden_dim, (3 * hidden_dim, hidden_dim)))
        self.bias = Parameter(_uniform(rng, hidden_dim, (3 * hidden_dim,)))

    @property
    def in_dim(self):
        return self.weight_ih.shape[1]

    @property
    def hidden_dim(self):
        return self.weight_hh.shape[1]

    def __call__(self, x, h_prev):
        return gru_step(self, x, h_prev)


def gru_step(cell, x, h_prev):
    x, h_prev = as_tensor(x), as_tensor(h_prev)
    size = cell.hidden_dim
    if x.shape[-1] != cell.in_dim:
        raise ShapeError(f"GRU expects input dim {cell.in_dim}, got shape {x.shape}")
    if h_prev.shape[-1] != size:
        raise ShapeError(f"GRU expects hidden dim {size}, got shape {h_prev.shape}")

    gi_r, gi_z, gi_n = split_last(x @ cell.weight_ih.T + cell.bias, (size, size, size))
    gh_r, gh_z, gh_n = split_last(h_prev @ cell.weight_hh.T, (size, size, size))
    reset = sigmoid(gi_r + gh_r)
    update = sigmoid(gi_z + gh_z)
    candidate = tanh(gi_n + reset * gh_n)
    return candidate + update * (h_prev - candidate)


def attention(encoder_states, query, mask=None, scaled=True):
    """
    Dot-product attention of ``query`` over ``encoder_states``.

    ``encoder_states`` is a non-empty list of vectors (or of batch rows) or an
    already stacked tensor shaped (T, K) / (B, T, K). ``mask`` marks the valid
    positions with True. Returns (context, weights).
    """
    if isinstance(encoder_states, (list, tuple)):
        if not encoder_states:
            raise ShapeError("attention needs at least one encoder state")
        states = stack(encoder_states, axis=-2)
    else:
        states = as_tensor(encoder_states)
    query = as_tensor(query)
    width = states.shape[-1]
    if query.shape[-1] != width:
        raise ShapeError(f"query dim {query.shape[-1]} != encoder state dim {width}")
    if states.shape[-2] == 0:
        raise ShapeError("attention needs at least one encoder state")

    expanded = reshape(query, query.shape[:-1] + (1, width))
    scores = reduce_sum(states * expanded, axis=-1)
    if scaled:
        scores = scores * (1.0 / math.sqrt(width))
    weights = softmax(scores, axis=-1, mask=mask)
    context = reduce_sum(states * reshape(weights, weights.shape + (1,)), axis=-2)
    return context, weights


# -- optimisation --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_update(params, grads, state):
    """Apply one bias-corrected Adam step in place and return the advanced state."""
    for param in params:
        grad = grads[param]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param in params:
        grad = grads[param]
        m = state.first_moment.get(param)
        v = state.second_moment.get(param)
        m = (1.0 - state.beta1) * grad if m is None else state.beta1 * m + (1.0 - state.beta1) * grad
        v = (1.0 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[param] = m
        state.second_moment[param] = v
        param.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads):
        adam_update(self.params, grads, self.state)


# -- verification ----------------------------------------------------------------


def gradient_check(loss_fn, params, eps=1e-5):
    """
    Compare analytic gradients with central finite differences.

    ``loss_fn`` is called with no arguments and must rebuild the loss from the
    current parameter values. Returns {param name or index: relative error}.
    """
    analytic = backward(loss_fn())
    errors = {}
    for index, param in enumerate(params):
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            upper = loss_fn().data.item()
            flat[i] = saved - eps
            lower = loss_fn().data.item()
            flat[i] = saved
            flat_numeric[i] = (upper - lower) / (2.0 * eps)
        exact = analytic[param]
        scale = max(np.linalg.norm(exact) + np.linalg.norm(numeric), 1e-8)
        errors[param.name or index] = float(np.linalg.norm(exact - numeric) / scale)
    return errors


# -- checkpoints -----------------------------------------------------------------


def content_hash(arrays, meta):
    digest = hashlib.sha256()
    digest.update(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(arrays):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arrays[name], dtype=DTYPE).tobytes())
    return digest.hexdigest()


def save_parameters(path, arrays, meta, version=1):
    """Write parameter blocks plus JSON metadata to an .npz file."""
    header = {"format": CHECKPOINT_FORMAT, "version": version, **meta}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **{name: np.asarray(a, dtype=DTYPE) for name, a in arrays.items()})
    logger.debug("saved %d parameter blocks to %s", len(arrays), path)
    return content_hash(arrays, meta)


def load_parameters(path, version=1):
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(archive["__meta__"].tobytes().decode())
        arrays = {name: archive[name] for name in archive.files if name != "__meta__"}
    if header.pop("format", None) != CHECKPOINT_FORMAT:
        raise ShapeError(f"{path} is not a parameter checkpoint")
    found = header.pop("version", None)
    if found != version:
        raise ShapeError(f"{path}: checkpoint version {found}, expected {version}")
    return arrays, header
