"""Feature extractor, classifier and discriminator MLPs plus momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

HEADS = ("none", "softmax", "sigmoid")


class ConfigError(ValueError):
    pass


@dataclass
class LinearLayer:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


@dataclass
class Mlp:
    layers: list[LinearLayer]
    head: str = "none"

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"network expects input width {self.in_dim}, got {x.shape[1]} (input shape {x.shape})")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        if self.head == "softmax":
            h = ad.softmax_rows(h)
        elif self.head == "sigmoid":
            h = ad.sigmoid(h)
        return h


def init_network(sizes: Sequence[int], seed: int | np.random.Generator, head: str = "none") -> Mlp:
    """Glorot-uniform weights, zero biases."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ConfigError(f"network spec needs at least input and output sizes, got {sizes}")
    if any(int(s) < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be >= 1, got {sizes}")
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(LinearLayer(Tensor(w, requires_grad=True),
                                  Tensor(np.zeros((1, fan_out)), requires_grad=True)))
    return Mlp(layers, head)


def forward_g(g: Mlp, x: Tensor) -> Tensor:
    return g(x)


def forward_f(f_net: Mlp, feats: Tensor) -> Tensor:
    if f_net.head != "softmax":
        raise ConfigError("classifier must use a softmax head")
    return f_net(feats)


def forward_d(d_net: Mlp, conditioned: Tensor) -> Tensor:
    if conditioned.shape[1] != d_net.in_dim:
        raise ShapeError(
            f"discriminator expects conditioned input width {d_net.in_dim}, got {conditioned.shape[1]}")
    return d_net(conditioned)


def set_parameters(net: Mlp, arrays: Iterable[np.ndarray]) -> None:
    """Replace parameter values in place (fresh leaf tensors, grads cleared)."""
    arrays = list(arrays)
    if len(arrays) != 2 * len(net.layers):
        raise ShapeError(f"expected {2 * len(net.layers)} arrays, got {len(arrays)}")
    for layer, w, b in zip(net.layers, arrays[0::2], arrays[1::2]):
        if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
            raise ShapeError(f"parameter shape mismatch: {w.shape}/{b.shape} vs "
                             f"{layer.weight.shape}/{layer.bias.shape}")
        layer.weight = Tensor(w, requires_grad=True)
        layer.bias = Tensor(b, requires_grad=True)


def inverse_decay(lr0: float, progress: float, alpha: float = 10.0, beta: float = 0.75) -> float:
    progress = min(max(progress, 0.0), 1.0)
    return lr0 / (1.0 + alpha * progress) ** beta


@dataclass
class SgdMomentum:
    """v <- mu*v + g ; theta <- theta - lr*v, with one learning rate per group."""

    lrs: dict[str, float]
    momentum: float = 0.9
    velocity: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def step(self, group: str, net: Mlp, grads: list[np.ndarray] | None = None, lr: float | None = None) -> None:
        lr = self.lrs[group] if lr is None else lr
        params = net.parameters()
        if grads is None:
            missing = [i for i, p in enumerate(params) if p.grad is None]
            if missing:
                raise RuntimeError(f"group {group!r}: parameters {missing} have no gradient; call backward first")
            grads = [p.grad for p in params]
        if group not in self.velocity:
            self.velocity[group] = [np.zeros(p.shape) for p in params]
        vel = self.velocity[group]
        new = []
        for p, g, v in zip(params, grads, vel):
            v *= self.momentum
            v += g
            new.append(p.values - lr * v)
        set_parameters(net, new)
