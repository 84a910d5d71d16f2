"""Dense feed-forward networks with exact reverse-mode gradients and Adam.

Weights are stored as (out, in) matrices and every layer computes
``act(x @ W.T + b)``. Inputs may be a single vector or a batch of row
vectors; parameter gradients are summed over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatchError, InvalidArgumentError

ACTIVATIONS = ("relu", "elu", "identity", "exp")


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "elu":
        return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))
    if kind == "exp":
        return np.exp(a)
    return a


def _activation_grad(kind: str, a: np.ndarray, out: np.ndarray) -> np.ndarray | None:
    """d act / d a, or None for the identity."""
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "elu":
        # elu'(0) = 1 from both sides with alpha = 1
        return np.where(a >= 0, 1.0, out + 1.0)
    if kind == "exp":
        return out
    return None


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatchError("layer weight must be (out, in) with a matching bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgumentError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatchError(f"layer output {prev.out_dim} does not feed input {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        """Parameter arrays (by reference) in [W0, b0, W1, b1, ...] order."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def with_output_activation(self, activation: str) -> "Mlp":
        """Same parameters (shared, not copied) with a different final activation."""
        last = self.layers[-1]
        return Mlp(self.layers[:-1] + [Layer(last.weight, last.bias, activation)])

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def init_mlp(sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> Mlp:
    """He-normal weights for relu layers, N(0, 1/fan_in) otherwise; zero biases."""
    if len(activations) != len(sizes) - 1:
        raise InvalidArgumentError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        scale = np.sqrt((2.0 if act == "relu" else 1.0) / fan_in)
        layers.append(Layer(rng.normal(0.0, scale, size=(fan_out, fan_in)), np.zeros(fan_out), act))
    return Mlp(layers)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.input_dim:
        raise DimensionMismatchError(f"expected input of length {mlp.input_dim}, got {x.shape[-1]}")
    cache = ForwardCache()
    h = x
    for layer in mlp.layers:
        cache.inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, a)
        cache.preacts.append(a)
        cache.outputs.append(h)
    return h, cache


def backward(mlp: Mlp, cache: ForwardCache, grad_output: np.ndarray, need_params: bool = True):
    """Gradients of <grad_output, forward(x)> w.r.t. parameters and input.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` follows the
    order of :meth:`Mlp.params` (or is None when ``need_params`` is False).
    """
    g = np.asarray(grad_output, dtype=np.float64)
    if g.shape != cache.outputs[-1].shape:
        raise DimensionMismatchError(f"grad_output shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads: list[np.ndarray] = []
    for idx in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[idx]
        d_act = _activation_grad(layer.activation, cache.preacts[idx], cache.outputs[idx])
        if d_act is not None:
            g = g * d_act
        if need_params:
            h_in = cache.inputs[idx]
            if g.ndim == 1:
                dW = np.outer(g, h_in)
                db = g.copy()
            else:
                g2 = g.reshape(-1, g.shape[-1])
                dW = g2.T @ h_in.reshape(-1, h_in.shape[-1])
                db = g2.sum(axis=0)
            grads.extend((db, dW))
        g = g @ layer.weight
    if need_params:
        grads.reverse()
        # reversed list is [W0, b0, ...] since each layer appended (db, dW)
        return grads, g
    return None, g


def grad_wrt_input(mlp: Mlp, x: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Vector-Jacobian product closure v -> J(x)^T v at a fixed input."""
    _, cache = forward(mlp, x)

    def vjp(v: np.ndarray) -> np.ndarray:
        return backward(mlp, cache, v, need_params=False)[1]

    return vjp


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam descent step, updating ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatchError("params, grads and optimizer state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionMismatchError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
