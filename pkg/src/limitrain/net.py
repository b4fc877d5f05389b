"""Small feedforward network engine on numpy.

Layers compute ``act(W @ a + b)``; batches are row-major ``(batch, features)``.
Gradients are exact reverse-mode and include the gradient with respect to the
network input, so errors can be pushed through a frozen downstream network
into an upstream one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "relu", "leaky_relu")


class NumericalError(RuntimeError):
    """Non-finite loss or state encountered during training or simulation."""


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "identity"
    alpha: float = 0.01

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.biases = np.array(self.biases, dtype=float).ravel()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.alpha < 1.0:
            raise ValueError("leaky_relu alpha must lie in (0, 1)")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal weight rows")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def activate(z: np.ndarray, activation: str, alpha: float = 0.01) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "leaky_relu":
        return np.where(z >= 0.0, z, alpha * z)
    return z


def activation_grad(z: np.ndarray, activation: str, alpha: float = 0.01) -> np.ndarray:
    # the relu subgradient at 0 is taken as 0
    if activation == "relu":
        return (z > 0.0).astype(float)
    if activation == "leaky_relu":
        return np.where(z >= 0.0, 1.0, alpha)
    return np.ones_like(z)


class Mlp:
    """Layered feedforward network.

    ``frozen`` marks a network whose parameters must not be updated (an
    imitator used during controller training). ``version`` increments on every
    parameter update and invalidates cached forward passes.
    """

    def __init__(self, layers: list[Layer], frozen: bool = False):
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.shape[0] != nxt.shape[1]:
                raise ValueError(f"layer dimensions do not chain: {prev.shape} -> {nxt.shape}")
        self.layers = layers
        self.frozen = frozen
        self.version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.shape[0] for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self, frozen: bool | None = None) -> "Mlp":
        layers = [Layer(l.weights.copy(), l.biases.copy(), l.activation, l.alpha) for l in self.layers]
        return Mlp(layers, frozen=self.frozen if frozen is None else frozen)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            entry = {"rows": l.shape[0], "cols": l.shape[1], "activation": l.activation}
            if l.activation == "leaky_relu":
                entry["alpha"] = l.alpha
            entry["weights"] = [float(v) for v in l.weights.ravel()]
            entry["biases"] = [float(v) for v in l.biases]
            layers.append(entry)
        return {"input_dim": self.input_dim, "layers": layers}

    @classmethod
    def from_dict(cls, data: dict) -> "Mlp":
        layers = []
        for entry in data["layers"]:
            w = np.array(entry["weights"], dtype=float).reshape(entry["rows"], entry["cols"])
            layers.append(Layer(w, entry["biases"], entry["activation"], entry.get("alpha", 0.01)))
        net = cls(layers)
        if net.input_dim != data["input_dim"]:
            raise ValueError("input_dim does not match first layer")
        return net

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_mlp(dims: list[int], activations: list[str], rng: np.random.Generator, alpha: float = 0.01) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act, alpha))
    return Mlp(layers)


@dataclass
class ForwardCache:
    net_id: int
    version: int
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]
    squeeze: bool


def forward(net: Mlp, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != net.input_dim:
        raise ValueError(f"expected input of width {net.input_dim}, got {a.shape[1]}")
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.biases
        preacts.append(z)
        a = activate(z, layer.activation, layer.alpha)
    cache = ForwardCache(id(net), net.version, inputs, preacts, squeeze)
    return (a[0] if squeeze else a), cache


def backward(net: Mlp, cache: ForwardCache, grad_out, param_grads: bool = True):
    """Reverse pass.

    Returns ``(grads, grad_input)`` where ``grads`` lists ``dW, db`` per layer
    in the order of :meth:`Mlp.params` (``None`` when ``param_grads`` is
    False). Gradients are summed over the batch.
    """
    if cache.net_id != id(net) or cache.version != net.version:
        raise ValueError("stale forward cache: network changed since the forward pass")
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    grads: list[np.ndarray] = []
    for layer, a_in, z in zip(reversed(net.layers), reversed(cache.inputs), reversed(cache.preacts)):
        g = g * activation_grad(z, layer.activation, layer.alpha)
        if param_grads:
            grads.append(g.sum(axis=0))
            grads.append(g.T @ a_in)
        g = g @ layer.weights
    if param_grads:
        grads.reverse()
    g_in = g[0] if cache.squeeze else g
    return (grads if param_grads else None), g_in


@dataclass
class LossValue:
    value: float
    residuals: np.ndarray


def mse_loss(predicted, target) -> LossValue:
    predicted = np.asarray(predicted, dtype=float)
    target = np.asarray(target, dtype=float)
    if predicted.size == 0:
        raise ValueError("mse_loss of empty vectors")
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    res = predicted - target
    return LossValue(float(np.mean(res**2)), res)


def mse_grad(loss: LossValue) -> np.ndarray:
    return 2.0 * loss.residuals / loss.residuals.size


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_update(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """Bias-corrected Adam step, applied in place to ``params``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def apply_update(net: Mlp, state: AdamState, grads: list[np.ndarray]) -> None:
    if net.frozen:
        raise ValueError("refusing to update a frozen network")
    adam_update(state, net.params(), grads)
    net.version += 1


def clip_by_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if not max_norm:
        return grads
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


def evaluate_mse(net: Mlp, inputs, targets) -> float:
    return mse_loss(forward(net, inputs)[0], np.atleast_2d(targets)).value


def train_epochs(
    net: Mlp,
    inputs,
    targets,
    batch_size: int = 32,
    epochs: int = 100,
    adam: AdamState | None = None,
    loss_target: float = 0.0,
    seed: int = 0,
    clip_norm: float | None = None,
    lr_decay: float = 1.0,
) -> list[float]:
    """Mini-batch Adam on MSE. Returns the epoch-mean loss history.

    Training stops after ``epochs`` or as soon as the epoch-mean MSE is at or
    below ``loss_target``. A network that already meets the target before the
    first epoch is left untouched (empty history). ``lr_decay`` multiplies the
    Adam step size after every epoch.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("inputs and targets differ in length")
    adam = adam if adam is not None else AdamState()
    rng = np.random.default_rng(seed)
    if evaluate_mse(net, x, y) <= loss_target:
        return []
    history = []
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred, cache = forward(net, x[idx])
            loss = mse_loss(pred, y[idx])
            if not np.isfinite(loss.value):
                raise NumericalError(f"non-finite loss in epoch {epoch}")
            grads, _ = backward(net, cache, mse_grad(loss))
            apply_update(net, adam, clip_by_norm(grads, clip_norm))
            total += loss.value * len(idx)
        history.append(total / n)
        if history[-1] <= loss_target:
            break
        adam.lr *= lr_decay
    return history
