"""Univariate shape-function networks with a fixed random Fourier input layer.

A net maps a scalar x to ``h(W_L ... g(W_1 gamma(x) + b_1) ... + b_L)`` where
``gamma(x) = [sin(v x), cos(v x)]`` uses frequencies ``v ~ N(0, sigma_v)``
that are drawn once and never trained. Hidden activation is ReLU, the output
activation is tanh so every shape function lives on the same (-1, 1) scale.

With ``M = 0`` the Fourier layer is replaced by an identity passthrough of the
raw inputs (the "vanilla" MLP used as a control, possibly multivariate).

Everything is plain numpy; inputs are batched as 1-D arrays of scalars
(or ``(N, n_inputs)`` for passthrough nets).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidConfig(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class ShapeFnNet:
    frequencies: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    sigma_v: float = 1.0
    seed: int | None = None
    n_inputs: int = 1
    output_activation: str = "tanh"

    @property
    def M(self) -> int:
        return int(self.frequencies.size)

    @property
    def input_width(self) -> int:
        return 2 * self.M if self.M else self.n_inputs

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "ShapeFnNet":
        return ShapeFnNet(
            self.frequencies.copy(),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.sigma_v,
            self.seed,
            self.n_inputs,
            self.output_activation,
        )

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "sigma_v": self.sigma_v,
            "frequencies": self.frequencies.tolist(),
            "layers": [
                {"rows": int(W.shape[0]), "cols": int(W.shape[1]), "W": W.ravel().tolist(), "b": b.tolist()}
                for W, b in zip(self.weights, self.biases)
            ],
            "seed": self.seed,
            "n_inputs": self.n_inputs,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeFnNet":
        weights = [np.asarray(L["W"], dtype=float).reshape(L["rows"], L["cols"]) for L in d["layers"]]
        biases = [np.asarray(L["b"], dtype=float) for L in d["layers"]]
        return cls(
            np.asarray(d["frequencies"], dtype=float),
            weights,
            biases,
            float(d["sigma_v"]),
            d.get("seed"),
            int(d.get("n_inputs", 1)),
            d.get("output_activation", "tanh"),
        )


def init_shapefn(
    M: int,
    sigma_v: float,
    hidden_sizes,
    rng_seed: int,
    *,
    n_inputs: int = 1,
    output_activation: str = "tanh",
) -> ShapeFnNet:
    """Build a net with seeded Fourier frequencies and fan-in uniform weights.

    ``M = 0`` gives a passthrough input layer of width ``n_inputs``.
    """
    hidden_sizes = list(hidden_sizes)
    if M < 0 or (M == 0 and n_inputs < 1):
        raise InvalidConfig("need M >= 1 Fourier units, or M = 0 with n_inputs >= 1")
    if not hidden_sizes or any(h < 1 for h in hidden_sizes):
        raise InvalidConfig("hidden_sizes must be non-empty and positive")
    if sigma_v <= 0:
        raise InvalidConfig("sigma_v must be positive")
    if output_activation not in ("tanh", "linear"):
        raise InvalidConfig(f"unknown output activation {output_activation!r}")
    rng = np.random.default_rng(rng_seed)
    freqs = rng.normal(0.0, sigma_v, size=M)
    widths = [2 * M if M else n_inputs, *hidden_sizes, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ShapeFnNet(freqs, weights, biases, float(sigma_v), rng_seed, n_inputs, output_activation)


def _encode(net: ShapeFnNet, x: np.ndarray) -> np.ndarray:
    if net.M == 0:
        return x.reshape(x.shape[0], -1)
    vx = np.outer(x, net.frequencies)
    return np.concatenate([np.sin(vx), np.cos(vx)], axis=1)


@dataclass
class ForwardCache:
    x: np.ndarray
    activations: list[np.ndarray]  # input encoding, then each layer output
    output: np.ndarray


def forward_batch(net: ShapeFnNet, x) -> ForwardCache:
    """Batched forward pass; keeps intermediate activations for backward."""
    x = np.asarray(x, dtype=float)
    a = _encode(net, x if net.M else x.reshape(x.shape[0], -1))
    acts = [a]
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + b
        if k < last:
            a = np.maximum(z, 0.0)
        elif net.output_activation == "tanh":
            a = np.tanh(z)
        else:
            a = z
        acts.append(a)
    return ForwardCache(x, acts, acts[-1][:, 0])


def forward(net: ShapeFnNet, x: float) -> float:
    return float(forward_batch(net, np.array([x], dtype=float)).output[0])


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dx: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


def backward_from_cache(net: ShapeFnNet, cache: ForwardCache, upstream) -> Gradients:
    """Reverse-mode sweep. ``upstream`` is dL/d(output) per sample.

    Parameter gradients are summed over the batch; ``dx`` is per sample.
    ReLU uses derivative 0 at the kink.
    """
    up = np.asarray(upstream, dtype=float).reshape(-1)
    acts = cache.activations
    n_layers = len(net.weights)
    gW: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    out = acts[-1]
    if net.output_activation == "tanh":
        delta = (up * (1.0 - out[:, 0] ** 2))[:, None]
    else:
        delta = up[:, None]
    for k in range(n_layers - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k]
        if k > 0:
            delta = delta * (acts[k] > 0.0)
    if net.M:
        vx = np.outer(cache.x, net.frequencies)
        M = net.M
        dx =(delta[:, :M] * np.cos(vx) - delta[:, M:] * np.sin(vx)) @ net.frequencies
    else:
        dx = delta if net.n_inputs > 1 else delta[:, 0]
    return Gradients(gW, gb, dx)


def backward(net: ShapeFnNet, x, upstream) -> Gradients:
    """Gradients of ``sum(upstream * f(x))`` w.r.t. every W, b, and per-sample x."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    up = np.broadcast_to(np.asarray(upstream, dtype=float), x_arr.shape[:1])
    return backward_from_cache(net, forward_batch(net, x_arr), up)


def derivative(net: ShapeFnNet, x) -> np.ndarray:
    """df/dx at each input (univariate nets)."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    return backward(net, x_arr, np.ones(x_arr.shape[0])).dx


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("parameter, gradient and moment lists differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def train_network(
    net: ShapeFnNet,
    X,
    y,
    epochs: int,
    lr: float = 0.005,
) -> list[float]:
    """Full-batch MSE fit of a standalone net. Returns the per-epoch loss."""
    y = np.asarray(y, dtype=float)
    state = AdamState.for_params(net.params(), lr=lr)
    history = []
    n = y.shape[0]
    for _ in range(epochs):
        cache = forward_batch(net, X)
        r = cache.output - y
        history.append(float(np.mean(r * r)))
        g = backward_from_cache(net, cache, 2.0 * r / n)
        adam_step(net.params(), g.params(), state)
    return history
