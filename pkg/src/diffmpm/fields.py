"""Initial-velocity generators.

Every generator maps initial particle positions to velocities and can pull a
velocity cotangent back onto its own parameters, which is how gradients of a
trajectory loss reach the initial condition.  The vertical axis is the last
coordinate; generated velocities point along axis 0.
"""
from __future__ import annotations

import math

import numpy as np


class VelocityField:
    """Base class; subclasses without trainable parameters return empty arrays."""

    def __call__(self, x0: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def get_params(self) -> np.ndarray:
        return np.zeros(0)

    def set_params(self, flat: np.ndarray) -> None:
        if len(flat):
            raise ValueError(f"{type(self).__name__} has no trainable parameters")

    def vjp(self, x0: np.ndarray, vbar: np.ndarray) -> np.ndarray:
        return np.zeros(0)


class ConstantVelocity(VelocityField):
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def __call__(self, x0):
        return np.broadcast_to(self.value, x0.shape).copy()


class LinearProfile(VelocityField):
    """``v_x = alpha * (H0 - (y - y0))``; ``alpha`` is trainable."""

    def __init__(self, alpha, H0, y0=0.0):
        self.alpha = float(alpha)
        self.H0 = float(H0)
        self.y0 = float(y0)

    def _shape(self, x0):
        return self.H0 - (x0[:, -1] - self.y0)

    def __call__(self, x0):
        v = np.zeros_like(x0)
        v[:, 0] = self.alpha * self._shape(x0)
        return v

    def get_params(self):
        return np.array([self.alpha])

    def set_params(self, flat):
        self.alpha = float(flat[0])

    def vjp(self, x0, vbar):
        return np.array([np.dot(vbar[:, 0], self._shape(x0))])


class ParabolicSine(VelocityField):
    """Reference field ``A (1 - (y/H0)^2) + B sin(4 pi y / H0)``."""

    def __init__(self, H0, amplitude=2.0, perturbation=0.2, y0=0.0):
        self.H0 = float(H0)
        self.amplitude = float(amplitude)
        self.perturbation = float(perturbation)
        self.y0 = float(y0)

    def profile(self, y):
        s = (np.asarray(y) - self.y0) / self.H0
        return self.amplitude * (1.0 - s**2) + self.perturbation * np.sin(4.0 * math.pi * s)

    def __call__(self, x0):
        v = np.zeros_like(x0)
        v[:, 0] = self.profile(x0[:, -1])
        return v


def mlp_param_count(layers) -> int:
    return sum(layers[i] * layers[i + 1] + layers[i + 1] for i in range(len(layers) - 1))


def _unpack(theta, layers):
    out = []
    k = 0
    for i in range(len(layers) - 1):
        n_in, n_out = layers[i], layers[i + 1]
        W = theta[k : k + n_in * n_out].reshape(n_out, n_in)
        k += n_in * n_out
        b = theta[k : k + n_out]
        k += n_out
        out.append((W, b))
    return out


def mlp_forward(theta, y, layers=(1, 30, 30, 30, 1), return_cache=False):
    """Feed-forward ReLU network on inputs ``y`` of shape ``(N, layers[0])`` or ``(N,)``.

    Hidden layers use a rectifier, the last layer is affine.  Output has shape
    ``(N,)`` when the last layer is scalar.
    """
    h = np.asarray(y, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    params = _unpack(np.asarray(theta, dtype=float), layers)
    cache = [h]
    for i, (W, b) in enumerate(params):
        z = h @ W.T + b
        if i < len(params) - 1:
            h = np.maximum(z, 0.0)
        else:
            h = z
        cache.append(z)
    out = h[:, 0] if h.shape[1] == 1 else h
    if return_cache:
        return out, cache
    return out


def mlp_vjp(theta, y, out_bar, layers=(1, 30, 30, 30, 1)):
    """Gradient of ``sum(out_bar * mlp_forward(theta, y))`` w.r.t. ``theta``."""
    _, cache = mlp_forward(theta, y, layers, return_cache=True)
    params = _unpack(np.asarray(theta, dtype=float), layers)
    g = np.asarray(out_bar, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    grads = []
    n = len(params)
    for i in range(n - 1, -1, -1):
        W, _ = params[i]
        z_prev = cache[i]  # pre-activation of the previous layer (or the input)
        h_prev = z_prev if i == 0 else np.maximum(z_prev, 0.0)
        grads.append((g.T @ h_prev, g.sum(axis=0)))
        if i > 0:
            g = (g @ W) * (z_prev > 0.0)
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return np.concatenate(flat)


def mlp_init(layers, seed=0):
    """Fan-in scaled uniform initialisation."""
    rng = np.random.default_rng(seed)
    parts = []
    for i in range(len(layers) - 1):
        bound = 1.0 / math.sqrt(layers[i])
        parts.append(rng.uniform(-bound, bound, size=layers[i] * layers[i + 1]))
        parts.append(rng.uniform(-bound, bound, size=layers[i + 1]))
    return np.concatenate(parts)


class MLPProfile(VelocityField):
    """``v_x = offset + scale * N_theta((y - y0) / H0)``."""

    def __init__(self, H0, layers=(1, 30, 30, 30, 1), theta=None, seed=0, y0=0.0,
                 out_offset=1.5, out_scale=1.5):
        self.H0 = float(H0)
        self.layers = tuple(int(n) for n in layers)
        self.y0 = float(y0)
        self.out_offset = float(out_offset)
        self.out_scale = float(out_scale)
        if theta is None:
            theta = mlp_init(self.layers, seed)
        self.theta = np.asarray(theta, dtype=float).copy()
        if self.theta.size != mlp_param_count(self.layers):
            raise ValueError("theta size does not match layer sizes")

    def inputs(self, x0):
        return (x0[:, -1] - self.y0) / self.H0

    def profile(self, y):
        s = (np.asarray(y, dtype=float) - self.y0) / self.H0
        return self.out_offset + self.out_scale * mlp_forward(self.theta, s, self.layers)

    def __call__(self, x0):
        v = np.zeros_like(x0)
        v[:, 0] = self.out_offset + self.out_scale * mlp_forward(self.theta, self.inputs(x0), self.layers)
        return v

    def get_params(self):
        return self.theta.copy()

    def set_params(self, flat):
        self.theta = np.asarray(flat, dtype=float).copy()

    def vjp(self, x0, vbar):
        return mlp_vjp(self.theta, self.inputs(x0), self.out_scale * vbar[:, 0], self.layers)
