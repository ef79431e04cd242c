"""Small feedforward networks with hand-written reverse-mode gradients and an
adaptive-moment optimizer.  Hidden layers use a leaky elementwise
nonlinearity; the output layer is linear."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Mlp:
    weights: list[np.ndarray]  # each (fan_out, fan_in)
    biases: list[np.ndarray]
    slope: float

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def params(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)


def init_mlp(widths: tuple[int, ...], slope: float, rng: np.random.Generator) -> Mlp:
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = np.sqrt(2.0 / max(1, fan_in))
        weights.append(scale * rng.standard_normal((fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases, slope=slope)


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Returns the output and a cache of (layer input, pre-activation)."""
    cache = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        pre = x @ w.T + b
        cache.append((x, pre))
        x = pre if i == last else np.where(pre >= 0, pre, net.slope * pre)
    return x, cache


def mlp_backward(net: Mlp, cache: list, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of every parameter plus the gradient w.r.t. the input;
    parameter order matches ``Mlp.params()``."""
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    grad = grad_out
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        x_in, pre = cache[i]
        if i != last:
            grad = grad * np.where(pre >= 0, 1.0, net.slope)
        grads_w[i] = grad.T @ x_in
        grads_b[i] = grad.sum(axis=0)
        grad = grad @ net.weights[i]
    return grads_w + grads_b, grad


def flatten(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.empty(0)


def unflatten(flat: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    out, offset = [], 0
    for a in like:
        out.append(flat[offset:offset + a.size].reshape(a.shape))
        offset += a.size
    return out


class Adam:
    def __init__(self, params: list[np.ndarray], step_size: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)
