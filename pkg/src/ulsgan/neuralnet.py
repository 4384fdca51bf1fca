"""Dense multilayer perceptrons with hand-written backpropagation and Adam.

Everything runs in float64.  Inputs are either a single vector ``(in,)`` or
a batch ``(batch, in)``; outputs follow the same convention.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError, UsageError

LEAKY_SLOPE = 0.2


class Activation(str, enum.Enum):
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: Activation

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


_network_ids = itertools.count()


@dataclass
class MlpNetwork:
    layers: list[DenseLayer]
    input_dim: int
    # bumped on every in-place parameter update; forward caches record it
    version: int = 0
    uid: int = field(default_factory=lambda: next(_network_ids))

    def __post_init__(self):
        dim = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != dim:
                raise ParameterError(f"layer {i} expects {layer.in_dim} inputs, previous layer gives {dim}")
            if layer.biases.shape != (layer.out_dim,):
                raise ParameterError(f"layer {i} bias shape {layer.biases.shape}")
            dim = layer.out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[Activation]:
        return [layer.activation for layer in self.layers]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...]; the arrays are the live parameters."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.biases))
        return out

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MlpNetwork":
        layers = [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers]
        return MlpNetwork(layers, self.input_dim)


def init_network(layer_dims: Sequence[int], activations: Sequence[Activation | str], seed: int) -> MlpNetwork:
    """Xavier-uniform weights, zero biases."""
    if len(layer_dims) < 2:
        raise ParameterError("need at least an input and an output dimension")
    if len(activations) != len(layer_dims) - 1:
        raise ParameterError(
            f"{len(layer_dims) - 1} layers but {len(activations)} activations"
        )
    if any(int(d) < 1 for d in layer_dims):
        raise ParameterError("layer dimensions must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out, act in zip(layer_dims[:-1], layer_dims[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), Activation(act)))
    return MlpNetwork(layers, int(layer_dims[0]))


def _activate(z: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.SOFTMAX:
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return z


def _activation_backward(z: np.ndarray, a: np.ndarray, grad_a: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.LEAKY_RELU:
        return np.where(z > 0, grad_a, LEAKY_SLOPE * grad_a)
    if act is Activation.TANH:
        return grad_a * (1.0 - a * a)
    if act is Activation.SOFTMAX:
        return a * (grad_a - np.sum(grad_a * a, axis=-1, keepdims=True))
    return grad_a


@dataclass
class ForwardCache:
    net_uid: int
    net_version: int
    single: bool
    inputs: list  # input of each layer
    pre: list  # pre-activations
    post: list  # activations


def forward(net: MlpNetwork, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ParameterError(f"input shape {x.shape} does not match network input dim {net.input_dim}")
    inputs, pre, post = [], [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weights.T + layer.biases
        a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
    cache = ForwardCache(net.uid, net.version, single, inputs, pre, post)
    return (a[0] if single else a), cache


def predict(net: MlpNetwork, x) -> np.ndarray:
    return forward(net, x)[0]


def backward(
    net: MlpNetwork, cache: ForwardCache, output_gradient, wrt_logits: bool = False
) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode gradients.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is aligned
    with ``net.parameters()``.  Batch gradients are summed over rows.  With
    ``wrt_logits`` the supplied gradient is taken with respect to the last
    layer's pre-activation (e.g. ``p - onehot`` for softmax cross-entropy).
    """
    if cache.net_uid != net.uid or cache.net_version != net.version or len(cache.pre) != len(net.layers):
        raise UsageError("forward cache does not belong to this network state; rerun forward")
    g = np.asarray(output_gradient, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ParameterError(f"output gradient shape {g.shape} != output shape {cache.post[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if wrt_logits and i == len(net.layers) - 1:
            gz = g
        else:
            gz = _activation_backward(cache.pre[i], cache.post[i], g, layer.activation)
        grads[2 * i] = gz.T @ cache.inputs[i]
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ layer.weights
    return grads, (g[0] if cache.single else g)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0,
                   lr, beta1, beta2, eps)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v], self.step,
                         self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ParameterError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ParameterError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def optimizer_step(net: MlpNetwork, grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Adam step on a network's parameters; invalidates outstanding caches."""
    adam_step(net.parameters(), grads, state)
    net.version += 1
    return state


def grad_check(
    net: MlpNetwork,
    loss: Callable[[np.ndarray], float],
    x,
    eps: float = 1e-5,
    loss_grad: Callable[[np.ndarray], np.ndarray] | None = None,
    grads: Sequence[np.ndarray] | None = None,
) -> float:
    """Worst relative error between backprop and central differences.

    ``loss`` maps the network output to a scalar.  Its gradient with respect
    to the output is ``loss_grad`` when given, else central differences of
    ``loss``.  ``grads`` overrides the backprop gradients (for mutation tests).
    Relative error per parameter is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not eps > 0:
        raise ParameterError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    out, cache = forward(net, x)
    if grads is None:
        if loss_grad is not None:
            gout = np.asarray(loss_grad(out), dtype=np.float64)
        else:
            gout = np.zeros_like(out)
            flat_out = out.reshape(-1)
            flat_g = gout.reshape(-1)
            for i in range(flat_out.size):
                orig = flat_out[i]
                flat_out[i] = orig + eps
                lp = loss(out)
                flat_out[i] = orig - eps
                lm = loss(out)
                flat_out[i] = orig
                flat_g[i] = (lp - lm) / (2 * eps)
        grads, _ = backward(net, cache, gout)

    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss(predict(net, x))
            flat[i] = orig - eps
            lm = loss(predict(net, x))
            flat[i] = orig
            numeric = (lp - lm) / (2 * eps)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
