"""Small dense policies with hand-written backpropagation.

Two heads share the same tanh MLP body:

* ``categorical``: the last layer emits logits over the 8 phases;
* ``dirichlet``: the last layer emits ``z`` and the concentrations are
  ``softplus(z) + 1e-3``, a distribution over simplex weight vectors.

Parameters live in one flat float64 vector, layer by layer, each layer
stored as its ``(in, out)`` weight matrix (row-major) followed by its bias.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import digamma, expit, gammaln

CATEGORICAL = "categorical"
DIRICHLET = "dirichlet"
HEADS = (CATEGORICAL, DIRICHLET)
ALPHA_FLOOR = 1e-3
W_FLOOR = 1e-12

MAGIC = b"DRTSCPOL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def logsumexp(z: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    # scipy's version carries ~100us of dispatch overhead per call
    m = z.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


@dataclass
class DensePolicy:
    layer_shapes: list[tuple[int, int]]
    params: np.ndarray
    head: str = CATEGORICAL
    activation: str = field(default="tanh")

    def __post_init__(self):
        self.layer_shapes = [tuple(map(int, s)) for s in self.layer_shapes]
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        for (_, o), (i, _) in zip(self.layer_shapes, self.layer_shapes[1:]):
            if o != i:
                raise ValueError(f"layer shapes do not chain: {self.layer_shapes}")
        self.params = np.asarray(self.params, dtype=np.float64)
        n = n_params(self.layer_shapes)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} params, got {self.params.shape}")

    @property
    def in_dim(self) -> int:
        return self.layer_shapes[0][0]

    @property
    def out_dim(self) -> int:
        return self.layer_shapes[-1][1]

    def layers(self):
        """(W, b) views into ``params``."""
        out, k = [], 0
        for i, o in self.layer_shapes:
            W = self.params[k : k + i * o].reshape(i, o)
            k += i * o
            b = self.params[k : k + o]
            k += o
            out.append((W, b))
        return out

    def copy(self) -> "DensePolicy":
        return DensePolicy(list(self.layer_shapes), self.params.copy(), self.head)


def n_params(layer_shapes) -> int:
    return sum(i * o + o for i, o in layer_shapes)


def init_policy(sizes, head=CATEGORICAL, rng=None, scale=1.0) -> DensePolicy:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    ``scale`` shrinks the output layer (1.0 keeps the plain rule).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    shapes = list(zip(sizes[:-1], sizes[1:]))
    chunks = []
    for k, (i, o) in enumerate(shapes):
        bound = 1.0 / np.sqrt(i)
        if k == len(shapes) - 1:
            bound *= scale
        chunks.append(rng.uniform(-bound, bound, i * o + o))
    return DensePolicy(shapes, np.concatenate(chunks), head)


def phase_policy(rng=None, hidden=(64, 64), obs_dim=79, n_actions=8, scale=1.0):
    return init_policy([obs_dim, *hidden, n_actions], CATEGORICAL, rng, scale)


def mixture_policy(rng=None, hidden=(64,), obs_dim=18, k=8, scale=1.0):
    return init_policy([obs_dim, *hidden, k], DIRICHLET, rng, scale)


# --------------------------------------------------------------------------
# forward / backward


def _forward(policy: DensePolicy, x: np.ndarray):
    acts = [x]
    layers = policy.layers()
    h = x
    for W, b in layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return acts, h @ W + b


def _check_input(policy, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != policy.in_dim:
        raise ValueError(f"input has {x.shape[-1]} features, policy expects {policy.in_dim}")
    return x


def forward(policy: DensePolicy, x) -> np.ndarray:
    """Logits (categorical) or concentrations (dirichlet); batched on axis 0."""
    x = _check_input(policy, x)
    _, z = _forward(policy, x)
    if policy.head == DIRICHLET:
        return np.logaddexp(0.0, z) + ALPHA_FLOOR
    return z


def _backward(policy: DensePolicy, acts, dz: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dz * z_out)`` w.r.t. params, for batched ``dz``."""
    layers = policy.layers()
    grads = [None] * len(layers)
    delta = dz
    for k in reversed(range(len(layers))):
        W, _ = layers[k]
        a = acts[k]
        grads[k] = np.concatenate([(a.T @ delta).ravel(), delta.sum(axis=0)])
        if k:
            delta = (delta @ W.T) * (1.0 - a * a)
    return np.concatenate(grads)


def categorical_logprob(logits: np.ndarray, actions) -> np.ndarray:
    logits = np.atleast_2d(logits)
    actions = np.atleast_1d(actions)
    return logits[np.arange(len(actions)), actions] - logsumexp(logits, axis=1)


def dirichlet_logprob(alpha: np.ndarray, w: np.ndarray) -> np.ndarray:
    alpha, w = np.atleast_2d(alpha), np.atleast_2d(w)
    return (gammaln(alpha.sum(axis=1)) - gammaln(alpha).sum(axis=1)
            + ((alpha - 1.0) * np.log(w)).sum(axis=1))


def logprob(policy: DensePolicy, obs, target) -> np.ndarray:
    """Log-density of actions (categorical) or weight vectors (dirichlet)."""
    out = forward(policy, np.atleast_2d(obs))
    if policy.head == CATEGORICAL:
        return categorical_logprob(out, np.asarray(target, dtype=np.int64))
    return dirichlet_logprob(out, np.asarray(target, dtype=np.float64))


def weighted_grad_logprob(policy: DensePolicy, obs, target, coef) -> np.ndarray:
    """``sum_j coef_j * grad log pi(target_j | obs_j)`` over a batch."""
    obs = _check_input(policy, np.atleast_2d(obs))
    coef = np.asarray(coef, dtype=np.float64).reshape(-1)
    acts, z = _forward(policy, obs)
    if policy.head == CATEGORICAL:
        target = np.atleast_1d(np.asarray(target, dtype=np.int64))
        p = np.exp(z - logsumexp(z, axis=1, keepdims=True))
        dz = -p
        dz[np.arange(len(target)), target] += 1.0
    else:
        w = np.atleast_2d(np.asarray(target, dtype=np.float64))
        alpha = np.logaddexp(0.0, z) + ALPHA_FLOOR
        dalpha = digamma(alpha.sum(axis=1, keepdims=True)) - digamma(alpha) + np.log(w)
        dz = dalpha * expit(z)
    if dz.shape[0] != coef.shape[0]:
        raise ValueError("coefficient count does not match the batch")
    return _backward(policy, acts, dz * coef[:, None])


def entropy_grad(policy: DensePolicy, obs) -> tuple[float, np.ndarray]:
    """Mean categorical entropy over a batch and its gradient."""
    if policy.head != CATEGORICAL:
        raise ValueError("entropy_grad needs a categorical policy")
    obs = _check_input(policy, np.atleast_2d(obs))
    acts, z = _forward(policy, obs)
    logp = z - logsumexp(z, axis=1, keepdims=True)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1, keepdims=True)
    dz = -p * (logp + h) / len(z)
    return float(h.mean()), _backward(policy, acts, dz)


def grad_logprob(policy: DensePolicy, obs, target) -> np.ndarray:
    """Exact gradient of ``log pi(target | obs)`` for a single sample."""
    return weighted_grad_logprob(policy, np.atleast_2d(obs), [target], [1.0])


# --------------------------------------------------------------------------
# sampling


def sample_phase(policy: DensePolicy, obs, rng: np.random.Generator):
    """Sample phases for one observation or a batch; returns (action, logprob)."""
    if policy.head != CATEGORICAL:
        raise ValueError("sample_phase needs a categorical policy")
    single = np.ndim(obs) == 1
    logits = forward(policy, np.atleast_2d(obs))
    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((logits.shape[0], 1)) * cdf[:, -1:]
    actions = np.minimum((cdf <= u).sum(axis=1), logits.shape[1] - 1)
    lp = logp[np.arange(len(actions)), actions]
    if single:
        return int(actions[0]), float(lp[0])
    return actions, lp


def greedy_phase(policy: DensePolicy, obs) -> np.ndarray:
    return np.argmax(forward(policy, np.atleast_2d(obs)), axis=1)


def sample_weights(policy: DensePolicy, obs, rng: np.random.Generator):
    """Draw ``w ~ Dirichlet(alpha(obs))``; returns (w, logprob)."""
    if policy.head != DIRICHLET:
        raise ValueError("sample_weights needs a dirichlet policy")
    alpha = forward(policy, np.atleast_2d(obs))[0]
    w = rng.dirichlet(alpha)
    # tiny concentrations can underflow to exact zeros
    w = np.maximum(w, W_FLOOR)
    w /= w.sum()
    return w, float(dirichlet_logprob(alpha, w)[0])


# --------------------------------------------------------------------------
# updates


def apply_update(policy: DensePolicy, gradient, learning_rate: float) -> DensePolicy:
    """Plain gradient ascent: ``params + learning_rate * gradient``."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != policy.params.shape:
        raise ValueError(f"gradient shape {gradient.shape} != params {policy.params.shape}")
    return DensePolicy(list(policy.layer_shapes), policy.params + learning_rate * gradient,
                       policy.head)


class Adam:
    """Adaptive-moment ascent on a policy's flat parameters."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = learning_rate, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, policy: DensePolicy, gradient) -> DensePolicy:
        g = np.asarray(gradient, dtype=np.float64)
        if g.shape != policy.params.shape:
            raise ValueError("gradient shape does not match params")
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        step = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return DensePolicy(list(policy.layer_shapes), policy.params + step, policy.head)


class SGD:
    def __init__(self, learning_rate=1e-2):
        self.lr = learning_rate

    def step(self, policy: DensePolicy, gradient) -> DensePolicy:
        return apply_update(policy, gradient, self.lr)


def make_optimizer(name: str, learning_rate: float):
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate)
    raise ValueError(f"unknown optimizer {name!r}")


def normalize_rewards(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    return (r - r.mean()) / (r.std() + 1e-8)


def clipped_surrogate_grad(policy: DensePolicy, obs, target, advantage, old_logp,
                           clip: float = 0.2) -> np.ndarray:
    """Gradient of the mean clipped-ratio surrogate.

    Samples whose ratio has left ``[1 - clip, 1 + clip]`` in the direction
    the advantage favours contribute nothing.
    """
    new_logp = logprob(policy, obs, target)
    ratio = np.exp(new_logp - old_logp)
    adv = np.asarray(advantage, dtype=np.float64)
    active = np.where(adv >= 0, ratio < 1 + clip, ratio > 1 - clip)
    coef = np.where(active, adv * ratio, 0.0) / len(adv)
    return weighted_grad_logprob(policy, obs, target, coef)


# --------------------------------------------------------------------------
# checkpoints: magic, u16 version, u8 head, u16 n_layers, (u32 in, u32 out)*,
# then little-endian float64 params


def save_policy(policy: DensePolicy, path) -> None:
    header = MAGIC + struct.pack("<HBH", VERSION, HEADS.index(policy.head),
                                 len(policy.layer_shapes))
    for i, o in policy.layer_shapes:
        header += struct.pack("<II", i, o)
    Path(path).write_bytes(header + policy.params.astype("<f8").tobytes())


def load_policy(path) -> DensePolicy:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a policy checkpoint")
    k = len(MAGIC)
    try:
        version, head, n_layers = struct.unpack_from("<HBH", blob, k)
        k += 5
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", blob, k))
            k += 8
        params = np.frombuffer(blob, dtype="<f8", offset=k).astype(np.float64)
        return DensePolicy(shapes, params, HEADS[head])
    except (struct.error, IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
