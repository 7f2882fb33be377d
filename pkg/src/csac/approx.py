"""Multilayer perceptrons with hand-derived backward passes, normalization
layers and Adam.

Every network stores all of its parameters in a single flat float64 vector.
Weight and bias arrays are views into that vector, so optimizer steps and
Polyak averaging operate on one array per network.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

NORM_MODES = ("none", "layer_norm", "pnorm")


class DimensionError(ValueError):
    """Input or gradient shapes do not match the network."""


class DegenerateInputError(ValueError):
    """Normalization requested on an input it is undefined for."""


class NumericError(FloatingPointError):
    """A non-finite value reached an update."""


@lru_cache(maxsize=None)
def _layout(sizes: tuple[int, ...], norm: str, ln_affine: bool):
    """Offsets of each (W, b) pair and optional layer-norm gain/shift."""
    offset = 0
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = (offset, offset + n_in * n_out, (n_in, n_out))
        offset += n_in * n_out
        b = (offset, offset + n_out, (n_out,))
        offset += n_out
        layers.append((w, b))
    affine = []
    if norm == "layer_norm" and ln_affine:
        for width in sizes[1:-1]:
            g = (offset, offset + width, (width,))
            offset += width
            s = (offset, offset + width, (width,))
            offset += width
            affine.append((g, s))
    return tuple(layers), tuple(affine), offset


def num_params(sizes, norm="none", ln_affine=False) -> int:
    return _layout(tuple(sizes), norm, ln_affine)[2]


@dataclass
class MlpParams:
    """ReLU network ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``.

    ``norm`` selects layer norm on every hidden pre-activation or pnorm on the
    last hidden activation. The output layer is always linear.
    """

    sizes: tuple[int, ...]
    flat: np.ndarray
    norm: str = "none"
    ln_eps: float = 1e-5
    ln_affine: bool = False
    _views: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.norm not in NORM_MODES:
            raise ValueError(f"unknown norm mode {self.norm!r}")
        if len(self.sizes) < 2:
            raise DimensionError("an MLP needs at least input and output sizes")
        expected = num_params(self.sizes, self.norm, self.ln_affine)
        if self.flat.shape != (expected,):
            raise DimensionError(
                f"flat parameter vector has shape {self.flat.shape}, expected ({expected},)"
            )

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def _build_views(self):
        layers, affine, _ = _layout(self.sizes, self.norm, self.ln_affine)
        f = self.flat
        lw = [(f[w0:w1].reshape(ws), f[b0:b1]) for (w0, w1, ws), (b0, b1, _) in layers]
        la = [(f[g0:g1], f[s0:s1]) for (g0, g1, _), (s0, s1, _) in affine]
        self._views = (lw, la)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if self._views is None:
            self._build_views()
        return self._views[0]

    @property
    def affine(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if self._views is None:
            self._build_views()
        return self._views[1]

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        return replace(self, flat=flat)

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat.copy())


def init_mlp(sizes, rng: np.random.Generator, norm="none", ln_eps=1e-5, ln_affine=False) -> MlpParams:
    """Uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    sizes = tuple(int(s) for s in sizes)
    p = MlpParams(sizes, np.zeros(num_params(sizes, norm, ln_affine)), norm, ln_eps, ln_affine)
    for w, b in p.layers:
        bound = 1.0 / np.sqrt(w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    for g, _ in p.affine:
        g[...] = 1.0
    return p


def zeros_like_mlp(params: MlpParams) -> MlpParams:
    return params.with_flat(np.zeros_like(params.flat))


# -- normalization layers ----------------------------------------------------


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean and unit variance."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise DegenerateInputError("layer norm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    return d / np.sqrt(var + eps)


def _layer_norm_cache(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    return d * inv, inv


def _layer_norm_backward(xhat, inv, dy):
    n = xhat.shape[-1]
    return inv * (dy - dy.sum(axis=-1, keepdims=True) / n
                  - xhat * (dy * xhat).sum(axis=-1, keepdims=True) / n)


def row_norm(x: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, scaled by the row max so tiny rows do not underflow."""
    m = np.abs(x).max(axis=-1, keepdims=True)
    u = np.divide(x, m, out=np.zeros_like(x), where=m > 0)
    return m * np.sqrt((u * u).sum(axis=-1, keepdims=True))


def pnorm(x: np.ndarray) -> np.ndarray:
    """Project each row onto the unit sphere; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    n = row_norm(x)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def _pnorm_backward(y, n, dy):
    g = dy - y * (y * dy).sum(axis=-1, keepdims=True)
    return np.divide(g, n, out=np.zeros_like(g), where=n > 0)


# -- forward / backward --------------------------------------------------------


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.sizes[0]:
        raise DimensionError(f"input has {x.shape[-1]} features, network expects {params.sizes[0]}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single vector or a batch of row vectors."""
    x = _check_input(params, x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    layers = params.layers
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i == last:
            h = z
            break
        if params.norm == "layer_norm":
            z = layer_norm(z, params.ln_eps)
            if params.ln_affine:
                g, s = params.affine[i]
                z = z * g + s
        h = np.maximum(z, 0.0)
        if params.norm == "pnorm" and i == last - 1:
            h = pnorm(h)
    return h[0] if single else h


def forward_cache(params: MlpParams, x: np.ndarray):
    """Batched forward pass that keeps what :func:`mlp_backward` needs."""
    x = _check_input(params, x)
    if x.ndim != 2:
        raise DimensionError("forward_cache expects a 2-D batch")
    layers = params.layers
    last = len(layers) - 1
    ln = params.norm == "layer_norm"
    cache = []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w
        z += b
        if i == last:
            cache.append((h, None, None, None))
            h = z
            break
        entry_ln = None
        if ln:
            xhat, inv = _layer_norm_cache(z, params.ln_eps)
            entry_ln = (xhat, inv)
            if params.ln_affine:
                g, s = params.affine[i]
                z = xhat * g + s
            else:
                z = xhat
        a = np.maximum(z, 0.0)
        entry_pn = None
        if params.norm == "pnorm" and i == last - 1:
            n = row_norm(a)
            a = np.divide(a, n, out=np.zeros_like(a), where=n > 0)
            entry_pn = (a, n)
        cache.append((h, z > 0, entry_ln, entry_pn))
        h = a
    return h, cache


def mlp_backward(params: MlpParams, cache, dout: np.ndarray, input_grad: bool = False):
    """Reverse pass. Returns ``(flat_grad, d_input or None)``."""
    grad = np.zeros_like(params.flat)
    g = params.with_flat(grad)
    g_layers, g_affine = g.layers, g.affine
    layers = params.layers
    dh = dout
    for i in range(len(layers) - 1, -1, -1):
        h_in, mask, entry_ln, entry_pn = cache[i]
        if i != len(layers) - 1:
            if entry_pn is not None:
                y, n = entry_pn
                dh = _pnorm_backward(y, n, dh)
            dz = dh * mask
            if entry_ln is not None:
                xhat, inv = entry_ln
                if params.ln_affine:
                    gain = params.affine[i][0]
                    g_affine[i][0][...] = (dz * xhat).sum(axis=0)
                    g_affine[i][1][...] = dz.sum(axis=0)
                    dz = dz * gain
                dz = _layer_norm_backward(xhat, inv, dz)
        else:
            dz = dh
        w = layers[i][0]
        np.matmul(h_in.T, dz, out=g_layers[i][0])
        g_layers[i][1][...] = dz.sum(axis=0)
        if i > 0 or input_grad:
            dh = dz @ w.T
    return grad, (dh if input_grad else None)


# -- optimization --------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(theta, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    theta = theta.flat if isinstance(theta, MlpParams) else np.asarray(theta, dtype=np.float64)
    return AdamState(np.zeros_like(theta), np.zeros_like(theta), 0, beta1, beta2, eps)


def adam_update(theta: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """Bias-corrected Adam descent step on a flat array."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match parameters {theta.shape}")
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient rejected")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * (grad * grad)
    # eps is applied to the bias-corrected second moment, as in Kingma & Ba.
    denom = np.sqrt(v / (1.0 - b2**t)) + state.eps
    new_theta = theta - (lr / (1.0 - b1**t)) * m / denom
    return new_theta, replace(state, m=m, v=v, step=t)


def adam_step(params: MlpParams, grads: np.ndarray, state: AdamState, lr: float):
    flat, state = adam_update(params.flat, grads, state, lr)
    return params.with_flat(flat), state


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    """``(1 - tau) * target + tau * online``, elementwise."""
    if target.flat.shape != online.flat.shape:
        raise DimensionError("target and online networks differ in shape")
    return target.with_flat((1.0 - tau) * target.flat + tau * online.flat)


# -- gradient verification -----------------------------------------------------


@dataclass
class GradReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.analytic - self.numeric), initial=0.0))


def grad_check(
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    h: float = 1e-5,
    floor: float = 1e-6,
) -> GradReport:
    """Compare ``loss``'s analytic gradient with central differences.

    ``loss(theta)`` returns ``(value, gradient)``. The relative error of each
    coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    theta = np.array(theta, dtype=np.float64)
    scalar = theta.ndim == 0
    theta = theta.reshape(-1)
    _, analytic = loss(theta.reshape(()) if scalar else theta)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        fp = loss(theta.reshape(()) if scalar else theta)[0]
        theta[i] = orig - h
        fm = loss(theta.reshape(()) if scalar else theta)[0]
        theta[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradReport(analytic, numeric, float(rel.max(initial=0.0)))
