"""Dense networks and first-order optimizers on top of :mod:`bisimlab.autograd`."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, linear
from .errors import DimensionMismatch

_ACTIVATIONS = {
    "elu": (lambda t: t.elu(), lambda x: np.where(x < 0, np.expm1(np.minimum(x, 0.0)), x)),
    "relu": (lambda t: t.relu(), lambda x: np.maximum(x, 0.0)),
    "tanh": (lambda t: t.tanh(), np.tanh),
    "identity": (lambda t: t, lambda x: x),
}


class MLP:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    Hidden layers use ``activation``; the output layer uses
    ``out_activation`` (identity by default). Weights start uniform in
    +-1/sqrt(fan_in), biases at zero.
    """

    def __init__(self, widths, rng=None, activation: str = "elu", out_activation: str = "identity"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        rng = np.random.default_rng(rng)
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.out_activation = out_activation
        self.params: list[Tensor] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
            self.params.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def _check(self, x_shape) -> None:
        if x_shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected input width {self.in_dim}, got {x_shape[-1]}")

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        self._check(x.shape)
        n_layers = len(self.params) // 2
        act = _ACTIVATIONS[self.activation][0]
        for k in range(n_layers):
            x = linear(x, self.params[2 * k], self.params[2 * k + 1])
            x = act(x) if k < n_layers - 1 else _ACTIVATIONS[self.out_activation][0](x)
        return x

    def predict(self, x) -> np.ndarray:
        """Graph-free forward pass."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        self._check(x.shape)
        n_layers = len(self.params) // 2
        act = _ACTIVATIONS[self.activation][1]
        for k in range(n_layers):
            x = x @ self.params[2 * k].data + self.params[2 * k + 1].data
            x = act(x) if k < n_layers - 1 else _ACTIVATIONS[self.out_activation][1](x)
        return x

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activation": self.activation,
            "out_activation": self.out_activation,
            "layers": [
                {"shape": list(self.params[k].shape), "weight": self.params[k].data.ravel().tolist(),
                 "bias": self.params[k + 1].data.tolist()}
                for k in range(0, len(self.params), 2)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MLP:
        net = cls(doc["widths"], rng=0, activation=doc["activation"], out_activation=doc["out_activation"])
        for k, layer in enumerate(doc["layers"]):
            net.params[2 * k].data = np.asarray(layer["weight"], dtype=float).reshape(layer["shape"])
            net.params[2 * k + 1].data = np.asarray(layer["bias"], dtype=float)
        return net

    def copy(self) -> MLP:
        return MLP.from_dict(self.to_dict())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr != 0.0:
                p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class SGD:
    params: list
    lr: float = 1e-3

    def step(self) -> None:
        if self.lr == 0.0:
            return
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def make_optimizer(kind: str, params, lr: float):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
