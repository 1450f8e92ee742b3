"""Minimal dense feedforward networks with explicit tapes and Adam.

Everything is float64 and deterministic given a seed. backward() is exact
reverse-mode over the recorded forward pass and returns gradients both for the
parameters and for the network input, which the rest of the package relies on
(latent-space descent differentiates a decoder with respect to its input).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .validation import as_float_array

_ACTIVATIONS = ("tanh", "identity")

_MAGIC = b"TLNN"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ForwardTape:
    """Per-layer records of a forward pass: layer inputs and activation outputs."""

    inputs: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    squeezed: bool = False  # input arrived 1-D

    @property
    def output(self) -> np.ndarray:
        out = self.activations[-1]
        return out[0] if self.squeezed else out


@dataclass
class ParamGrads:
    weights: list
    biases: list

    def as_list(self) -> list:
        return list(self.weights) + list(self.biases)


class FeedForwardNet:
    """Fully connected stack; weights uniform in ±1/sqrt(fan_in), biases zero."""

    def __init__(self, specs, seed: int = 0):
        specs = tuple(specs)
        if not specs:
            raise ValueError("need at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(
                    f"layer chain mismatch: {a.out_dim} -> {b.in_dim}")
        self.specs = specs
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for spec in specs:
            limit = 1.0 / np.sqrt(spec.in_dim)
            self.weights.append(
                rng.uniform(-limit, limit, size=(spec.out_dim, spec.in_dim)))
            self.biases.append(np.zeros(spec.out_dim))

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def params(self) -> list:
        """Live parameter arrays (weights then biases); mutated by optimizers."""
        return list(self.weights) + list(self.biases)

    def forward(self, x) -> tuple[np.ndarray, ForwardTape]:
        x = as_float_array(x, "input")
        squeezed = x.ndim == 1
        if squeezed:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape}")
        tape = ForwardTape(squeezed=squeezed)
        for spec, w, b in zip(self.specs, self.weights, self.biases):
            tape.inputs.append(x)
            s = x @ w.T + b
            x = np.tanh(s) if spec.activation == "tanh" else s
            tape.activations.append(x)
        return (x[0] if squeezed else x), tape

    def backward(self, tape: ForwardTape, grad_out) -> tuple[ParamGrads, np.ndarray]:
        """Reverse-mode pass; sums over batch rows (no averaging here)."""
        grad = np.asarray(grad_out, dtype=np.float64)
        if grad.ndim == 1:
            grad = grad[None, :]
        if grad.shape != tape.activations[-1].shape:
            raise ValueError(
                f"grad shape {grad.shape} does not match forward output "
                f"{tape.activations[-1].shape}")
        g_weights = [None] * len(self.specs)
        g_biases = [None] * len(self.specs)
        for k in range(len(self.specs) - 1, -1, -1):
            if self.specs[k].activation == "tanh":
                grad = grad * (1.0 - tape.activations[k] ** 2)
            g_weights[k] = grad.T @ tape.inputs[k]
            g_biases[k] = grad.sum(axis=0)
            grad = grad @ self.weights[k]
        grad_in = grad[0] if tape.squeezed else grad
        return ParamGrads(g_weights, g_biases), grad_in

    def copy(self) -> "FeedForwardNet":
        clone = object.__new__(FeedForwardNet)
        clone.specs = self.specs
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    # --- serialization: magic header, json spec block, raw row-major float64 ---

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_serialize_net(self))

    @classmethod
    def load(cls, path) -> "FeedForwardNet":
        with open(path, "rb") as fh:
            blob = fh.read()
        net, rest = _deserialize_net(blob)
        if rest:
            raise ValueError("trailing bytes in network file")
        return net


def _serialize_net(net: FeedForwardNet) -> bytes:
    header = {
        "version": _FORMAT_VERSION,
        "specs": [[s.in_dim, s.out_dim, s.activation] for s in net.specs],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a).tobytes()
                    for a in net.weights + net.biases)
    return _MAGIC + len(head).to_bytes(4, "little") + head + body


def _deserialize_net(blob: bytes) -> tuple[FeedForwardNet, bytes]:
    if blob[:4] != _MAGIC:
        raise ValueError("not a network parameter file (bad magic header)")
    n = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8:8 + n].decode())
    if header["version"] != _FORMAT_VERSION:
        raise ValueError(f"unsupported format version {header['version']}")
    specs = [LayerSpec(a, b, act) for a, b, act in header["specs"]]
    net = FeedForwardNet(specs, seed=0)
    offset = 8 + n
    arrays = []
    for shape in [w.shape for w in net.weights] + [b.shape for b in net.biases]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(
            blob, dtype=np.float64, count=count, offset=offset).reshape(shape).copy())
        offset += count * 8
    k = len(net.weights)
    net.weights = arrays[:k]
    net.biases = arrays[k:]
    return net, blob[offset:]


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ValueError("gradient list length mismatch")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ValueError("gradient shape mismatch")
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite gradient")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
