"""Dense networks with hand-written reverse-mode gradients, Adam and a gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import Prng, as_tensor

ACTIVATIONS = ("identity", "tanh", "relu", "leaky_relu", "sigmoid")
LEAKY_SLOPE = 0.2
# activations with a derivative jump at zero
KINKED = ("relu", "leaky_relu")


def activate(name, z):
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    if name == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise UsageError(f"unknown activation {name!r}")


def activation_grad(name, z, a):
    """Derivative of the activation, given pre-activation ``z`` and output ``a``."""
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    if name == "sigmoid":
        return a * (1.0 - a)
    raise UsageError(f"unknown activation {name!r}")


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = as_tensor(self.weight, ndim=2, name="weight")
        self.bias = as_tensor(self.bias, ndim=1, name="bias")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError("bias length must equal the weight row count")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


@dataclass
class Mlp:
    """Stack of dense layers; ``params()`` lists ``[W0, b0, W1, b1, ...]``."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise UsageError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @classmethod
    def create(cls, sizes, rng, hidden_activation="leaky_relu", output_activation="identity"):
        """Glorot-uniform weights, zero biases.

        ``sizes`` is ``[in_dim, hidden..., out_dim]``.
        """
        if len(sizes) < 2:
            raise UsageError("sizes needs at least an input and an output width")
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weight = (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * bound
            act = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(Dense(weight, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self):
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def spec(self):
        return [{"in": l.in_dim, "out": l.out_dim, "activation": l.activation} for l in self.layers]

    def copy(self):
        return Mlp([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def zeros_like_params(self):
        return [np.zeros_like(p) for p in self.params()]


def forward(net, x, return_cache=False):
    """Batched forward pass, ``x`` of shape ``(batch, in_dim)``.

    With ``return_cache`` the per-layer ``(input, pre-activation, output)``
    triples are returned as well, for :func:`backward`.
    """
    x = as_tensor(x, name="x")
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"expected input of shape (batch, {net.in_dim}), got {x.shape}")
    cache = []
    a = x
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        out = activate(layer.activation, z)
        cache.append((a, z, out))
        a = out
    return (a, cache) if return_cache else a


def backward(net, x, upstream, cache=None):
    """Vector-Jacobian product of :func:`forward` at ``x``.

    Returns ``(grads, input_grad)``; ``grads`` follows ``net.params()`` order.
    """
    if cache is None:
        out, cache = forward(net, x, return_cache=True)
    else:
        out = cache[-1][2]
    upstream = as_tensor(upstream, name="upstream")
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match output {out.shape}")
    grads = [None] * (2 * len(net.layers))
    g = upstream
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        a_in, z, a_out = cache[k]
        gz = g * activation_grad(layer.activation, z, a_out)
        grads[2 * k] = gz.T @ a_in
        grads[2 * k + 1] = gz.sum(axis=0)
        g = gz @ layer.weight
    return grads, g


def preactivations(net, x):
    """Pre-activations of every layer with a kinked activation, flattened."""
    _, cache = forward(net, x, return_cache=True)
    parts = [z.ravel() for layer, (_, z, _) in zip(net.layers, cache) if layer.activation in KINKED]
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = None
    v: list = None


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Each parameter is updated from its own moments only, so the result does
    not depend on traversal order.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads, max_norm):
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    # rescale by the largest entry first so huge but finite gradients do not overflow
    big = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    if big == 0.0 or not math.isfinite(big):
        return big
    norm = big * math.sqrt(sum(float(np.sum((g / big) ** 2)) for g in grads))
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def gradcheck(loss_fn, params, seed=0, **kwargs):
    """Largest relative error between analytic and central-difference gradients.

    See :func:`gradcheck_detail` for the arguments.
    """
    return gradcheck_detail(loss_fn, params, seed, **kwargs).max_rel_error


def gradcheck_detail(loss_fn, params, seed=0, n_coords=200, step=1e-5, kink_fn=None, kink_tol=1e-4, floor=1e-6):
    """Compare analytic gradients against central differences coordinate by coordinate.

    ``loss_fn()`` evaluates the loss at the current contents of ``params``
    (which are perturbed in place and restored) and returns
    ``(loss, grads)``. A random subset of ``n_coords`` coordinates is
    checked; all of them when there are fewer.

    ``kink_fn()``, when given, returns the flattened pre-activations of the
    kinked units. Coordinates whose perturbation moves one of those within
    ``kink_tol`` of zero are skipped: the loss is not differentiable there.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, grads = loss_fn()
    grads = [np.array(g, copy=True) for g in grads]
    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = Prng(seed)
    picks = np.sort(rng.permutation(total)[: min(total, n_coords)])
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    checked = skipped = 0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[which])
        target = params[which].reshape(-1)
        orig = target[local]
        target[local] = orig + step
        plus = loss_fn()[0]
        kp = kink_fn() if kink_fn else None
        target[local] = orig - step
        minus = loss_fn()[0]
        km = kink_fn() if kink_fn else None
        target[local] = orig
        if kink_fn is not None and kp.size:
            moved = kp != km
            near = (np.minimum(np.abs(kp), np.abs(km)) < kink_tol) | (np.sign(kp) != np.sign(km))
            if np.any(moved & near):
                skipped += 1
                continue
        numeric = (plus - minus) / (2.0 * step)
        analytic = grads[which].reshape(-1)[local]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    return GradcheckResult(worst, checked, skipped)
