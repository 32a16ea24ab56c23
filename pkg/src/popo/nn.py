"""Minimal dense-network engine: forward, manual backprop, Adam.

Weights live in plain numpy arrays (float32 by default, any float dtype
supported so tests can run the same math in float64). Everything is
deterministic given the caller's RNG stream; there is no hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from popo.container import read_container, write_container
from popo.errors import NonFiniteError, SchemaError, ShapeError, TruncatedFileError

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    # z is owned by the caller's forward pass; activate in place
    if kind == "relu":
        return np.maximum(z, 0.0, out=z)
    if kind == "tanh":
        return np.tanh(z, out=z)
    return z


def _act_grad(kind: str, out: np.ndarray) -> np.ndarray:
    # derivative w.r.t. pre-activation, recovered from the activation output
    if kind == "relu":
        return (out > 0.0).astype(out.dtype)  # subgradient at 0 is 0
    if kind == "tanh":
        return 1.0 - out * out
    return np.ones_like(out)


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("layer weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )


class DenseNet:
    """A stack of dense layers. ``dims=[4, 256, 2]`` means 4 -> 256 -> 2."""

    def __init__(self, layers: list[Layer]):
        for k in range(1, len(layers)):
            if layers[k].weight.shape[1] != layers[k - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {k} expects input of {layers[k].weight.shape[1]}, "
                    f"but layer {k - 1} outputs {layers[k - 1].weight.shape[0]}"
                )
        self.layers = layers

    # -- construction -------------------------------------------------------

    @classmethod
    def create(
        cls,
        dims: list[int],
        activations: list[str],
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> "DenseNet":
        """Initialize weights and biases uniformly in ±1/sqrt(fan_in)."""
        if len(activations) != len(dims) - 1:
            raise ShapeError(f"{len(dims)} dims need {len(dims) - 1} activations")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
            b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self) -> list[np.ndarray]:
        """Flat view [W0, b0, W1, b1, ...]; arrays are the live parameters."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        for tgt, src in zip(self.params(), params):
            if tgt.shape != src.shape:
                raise ShapeError(f"parameter shape {src.shape} != expected {tgt.shape}")
            tgt[...] = src

    def copy(self) -> "DenseNet":
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def astype(self, dtype) -> "DenseNet":
        return DenseNet(
            [
                Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation)
                for l in self.layers
            ]
        )

    # -- compute ------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"layer 0 expects input dimension {self.in_dim}, got {x.shape[-1]}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Map [in] -> [out] or [B, in] -> [B, out]."""
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        h = x
        for layer in self.layers:
            z = h @ layer.weight.T
            z += layer.bias
            h = _act(layer.activation, z)
        return h

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer (input, output) for backward."""
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        cache = []
        h = x
        for layer in self.layers:
            z = h @ layer.weight.T
            z += layer.bias
            out = _act(layer.activation, z)
            cache.append((h, out))
            h = out
        return h, cache

    def backward_cached(self, cache, upstream: np.ndarray):
        """Gradients of <upstream, output> given a forward_cached cache.

        Returns (param_grads, input_grad) with param_grads ordered like params().
        """
        if upstream.shape != cache[-1][1].shape:
            raise ShapeError(
                f"upstream gradient shape {upstream.shape} != output shape {cache[-1][1].shape}"
            )
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        delta = np.asarray(upstream, dtype=self.dtype)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h_in, out = cache[k]
            delta = delta * _act_grad(layer.activation, out)
            if delta.ndim == 1:
                grads[2 * k] = np.outer(delta, h_in)
                grads[2 * k + 1] = delta.copy()
            else:
                grads[2 * k] = delta.T @ h_in
                grads[2 * k + 1] = delta.sum(axis=0)
            delta = delta @ layer.weight
        return grads, delta

    def input_grad_cached(self, cache, upstream: np.ndarray) -> np.ndarray:
        """Like backward_cached but skips the parameter-gradient GEMMs."""
        delta = np.asarray(upstream, dtype=self.dtype)
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            _, out = cache[k]
            delta = delta * _act_grad(layer.activation, out)
            delta = delta @ layer.weight
        return delta

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        """Container file: JSON header {dims, activations} + LE f32 blob.

        Blob holds each layer's row-major weight then bias, in layer order.
        """
        blob = b"".join(
            np.ascontiguousarray(p, dtype="<f4").tobytes() for p in self.params()
        )
        write_container(path, {"kind": "network", "dims": self.dims, "activations": self.activations}, blob)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "DenseNet":
        header, blob = read_container(path)
        for key in ("dims", "activations"):
            if key not in header:
                raise SchemaError(f"{path}: network header missing field {key!r}")
        dims = [int(d) for d in header["dims"]]
        acts = list(header["activations"])
        if len(acts) != len(dims) - 1:
            raise SchemaError(f"{path}: {len(dims)} dims need {len(dims) - 1} activations")
        n_params = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
        if len(blob) != 4 * n_params:
            raise TruncatedFileError(
                f"{path}: parameter blob has {len(blob)} bytes, expected {4 * n_params}"
            )
        flat = np.frombuffer(blob, dtype="<f4").astype(dtype)
        layers, offset = [], 0
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], acts):
            w = flat[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in).copy()
            offset += fan_in * fan_out
            b = flat[offset:offset + fan_out].copy()
            offset += fan_out
            layers.append(Layer(w, b, act))
        return cls(layers)


# -- module-level operation surface ------------------------------------------


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def backward(net: DenseNet, x: np.ndarray, upstream_grad: np.ndarray):
    """Exact reverse-mode gradients of <upstream_grad, forward(net, x)>."""
    _, cache = net.forward_cached(x)
    return net.backward_cached(cache, np.asarray(upstream_grad, dtype=net.dtype))


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus hyperparameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 3e-4) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step got {len(params)} params, {len(grads)} grads, {len(state.m)} moments"
        )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    inv_sqrt_bc2 = 1.0 / np.sqrt(1.0 - state.beta2**t)
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {i}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"param {i}: non-finite gradient in adam_step (step {t})")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps), with one scratch array
        denom = np.sqrt(v)
        denom *= inv_sqrt_bc2
        denom += state.eps
        np.divide(m, denom, out=denom)
        denom *= state.lr / bc1
        p -= denom
    return state


def grad_check(
    net: DenseNet,
    x: np.ndarray,
    eps: float = 1e-5,
    upstream: np.ndarray | None = None,
) -> float:
    """Worst relative error of backward() vs central differences, all parameters.

    Runs in float64 regardless of the net's dtype: the check probes the math,
    and float32 noise at eps=1e-5 would swamp it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    net64 = net.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    if upstream is None:
        up = np.ones(net64.forward(x64).shape, dtype=np.float64)
    else:
        up = np.asarray(upstream, dtype=np.float64)

    analytic, _ = backward(net64, x64, up)

    def scalar_loss() -> float:
        return float(np.sum(net64.forward(x64) * up))

    worst = 0.0
    for p, g in zip(net64.params(), analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + eps
            hi = scalar_loss()
            flat_p[j] = orig - eps
            lo = scalar_loss()
            flat_p[j] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(flat_g[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_g[j] - numeric) / denom)
    return worst


def soft_update(target: DenseNet, online: DenseNet, eta: float) -> None:
    """target <- eta * online + (1 - eta) * target, per parameter tensor."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must be in (0, 1], got {eta}")
    for tp, op in zip(target.params(), online.params()):
        tp *= 1.0 - eta
        tp += eta * op
