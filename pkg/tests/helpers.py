"""Shared oracles for the test suite."""

import numpy as np

from limitrain.net import backward, evaluate_mse, forward, init_mlp, mse_grad, mse_loss

ARCHITECTURES = [
    ([3, 5, 2], ["relu", "identity"]),
    ([2, 4, 4, 1], ["leaky_relu", "relu", "identity"]),
    ([4, 6, 3, 1], ["leaky_relu", "leaky_relu", "identity"]),
    ([5, 4, 12, 4], ["identity", "relu", "identity"]),
    ([2, 1], ["identity"]),
]


def random_net(rng, kink_margin=1e-3):
    """Random architecture, parameters, inputs and targets, with every
    pre-activation at least ``kink_margin`` away from a ReLU kink.
    """
    dims, acts = ARCHITECTURES[rng.integers(len(ARCHITECTURES))]
    net = init_mlp(dims, acts, rng, alpha=0.1)
    for layer in net.layers:
        layer.biases = rng.normal(scale=0.3, size=layer.biases.shape)
    x = rng.normal(size=(4, dims[0]))
    y = rng.normal(size=(4, dims[-1]))
    for _ in range(50):
        _, cache = forward(net, x)
        close = [np.any(np.abs(z) < kink_margin) for z, l in zip(cache.preacts, net.layers) if l.activation != "identity"]
        if not any(close):
            break
        x = x + rng.normal(scale=1e-2, size=x.shape)
    return net, x, y


def fd_relative_errors(net, x, y, h=1e-5):
    """Per-tensor ``|g - g_fd| / max(|g_fd|, 1e-8)`` (2-norms) against
    central differences of the MSE.
    """
    out, cache = forward(net, x)
    grads, _ = backward(net, cache, mse_grad(mse_loss(out, y)))
    errors = []
    for p, g in zip(net.params(), grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = evaluate_mse(net, x, y)
            p[idx] = orig - h
            down = evaluate_mse(net, x, y)
            p[idx] = orig
            num[idx] = (up - down) / (2 * h)
        errors.append(float(np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-8)))
    return errors
