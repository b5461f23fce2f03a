"""Small dense networks with hand-written backpropagation (numpy only)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LEAK = 0.01
CHECKPOINT_FORMAT = "vecoffload-mlp"
CHECKPOINT_VERSION = 1


def leaky_relu(z):
    return np.where(z > 0, z, LEAK * z)


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class StaleTapeError(RuntimeError):
    pass


@dataclass
class GradientTape:
    inputs: list  # activation entering each layer
    pre: list  # pre-activation of each layer
    output: np.ndarray
    version: int
    used: bool = False


@dataclass
class Mlp:
    sizes: tuple
    weights: list
    biases: list
    head: str = "identity"
    version: int = field(default=0, compare=False)

    @classmethod
    def init(cls, sizes, head: str = "identity", seed: int = 0) -> "Mlp":
        if head not in ("identity", "sigmoid"):
            raise ValueError(f"unknown head {head!r}")
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            bs.append(rng.uniform(-bound, bound, fan_out))
        return cls(tuple(int(s) for s in sizes), ws, bs, head)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.head)

    def forward(self, x, tape: bool = False):
        """Forward pass on a vector or a ``(batch, in)`` matrix.

        With ``tape=True`` returns ``(output, GradientTape)``.
        """
        a = np.asarray(x, dtype=float)
        single = a.ndim == 1
        if single:
            a = a[None, :]
        if a.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input dimension {self.sizes[0]}, got {a.shape[1]}")
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w + b
            pre.append(z)
            if i < last:
                a = leaky_relu(z)
            else:
                a = sigmoid(z) if self.head == "sigmoid" else z
        out = a[0] if single else a
        if tape:
            return out, GradientTape(inputs, pre, a, self.version)
        return out

    __call__ = forward

    def backward(self, tape: GradientTape, grad_out) -> list:
        """Gradients ``[dW0, db0, dW1, db1, ...]`` of ``sum(grad_out * output)``."""
        if tape.used or tape.version != self.version:
            raise StaleTapeError("tape does not belong to the current parameters")
        tape.used = True
        g = np.asarray(grad_out, dtype=float).reshape(tape.output.shape)
        if self.head == "sigmoid":
            g = g * tape.output * (1.0 - tape.output)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = tape.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
                g = g * np.where(tape.pre[i - 1] > 0, 1.0, LEAK)
        return grads

    def apply(self, deltas) -> None:
        for p, d in zip(self.params(), deltas):
            p += d
        self.version += 1

    # --- checkpoints ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "sizes": list(self.sizes),
            "head": self.head,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not a version-1 network checkpoint")
        sizes = tuple(d["sizes"])
        ws = [np.array(w, dtype=float).reshape(i, o)
              for w, i, o in zip(d["weights"], sizes[:-1], sizes[1:])]
        bs = [np.array(b, dtype=float) for b in d["biases"]]
        return cls(sizes, ws, bs, d["head"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Mlp":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sgd_step(net: Mlp, grads, lr: float, ascent: bool = False) -> Mlp:
    sign = 1.0 if ascent else -1.0
    net.apply([sign * lr * g for g in grads])
    return net


class Adam:
    def __init__(self, net: Mlp, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in net.params()]
        self.v = [np.zeros_like(p) for p in net.params()]
        self.t = 0

    def step(self, net: Mlp, grads, ascent: bool = False) -> Mlp:
        self.t += 1
        sign = 1.0 if ascent else -1.0
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        deltas = []
        for m, v, g in zip(self.m, self.v, grads):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            deltas.append(sign * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        net.apply(deltas)
        return net


class Sgd:
    def __init__(self, net: Mlp, lr: float):
        self.lr = lr

    def step(self, net: Mlp, grads, ascent: bool = False) -> Mlp:
        return sgd_step(net, grads, self.lr, ascent)


def make_optimizer(kind: str, net: Mlp, lr: float):
    if kind == "adam":
        return Adam(net, lr)
    if kind == "sgd":
        return Sgd(net, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
