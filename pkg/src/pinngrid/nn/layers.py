"""Dense layers, LeakyReLU, residual blocks and the MLP container."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor


class Module:
    def parameters(self) -> list:
        return []

    def __call__(self, x):
        return self.forward(as_tensor(x))


class Dense(Module):
    """``x @ W + b`` with uniform fan-in initialisation."""

    def __init__(self, n_in, n_out, rng=None, name="dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True, name=f"{name}.W")
        self.bias = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True, name=f"{name}.b")
        self.n_in, self.n_out = n_in, n_out

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.weight.name}: expected width {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class LeakyReLU(Module):
    def __init__(self, alpha=0.01):
        self.alpha = alpha

    def forward(self, x):
        return x.leaky_relu(self.alpha)


class ResidualBlock(Module):
    """x + Dense(LeakyReLU(Dense(x))), widths preserved."""

    def __init__(self, width, alpha=0.01, rng=None, name="res"):
        self.inner = Dense(width, width, rng, name=f"{name}.0")
        self.outer = Dense(width, width, rng, name=f"{name}.1")
        self.alpha = alpha

    def forward(self, x):
        return x + self.outer(self.inner(x).leaky_relu(self.alpha))

    def parameters(self):
        return self.inner.parameters() + self.outer.parameters()


@dataclass(frozen=True)
class MlpSpec:
    """``layer_widths = [in, hidden..., out]``; residual blocks follow the last hidden layer.

    ``input_skip`` adds a linear shortcut from the input straight to the output.
    """

    layer_widths: tuple
    alpha: float = 0.01
    residual_blocks: int = 1
    input_skip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ValueError("need at least input and output widths, all >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("LeakyReLU slope must be in (0, 1)")
        if self.residual_blocks and len(self.layer_widths) < 3:
            raise ValueError("residual blocks need a hidden layer")

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "alpha": self.alpha,
                "residual_blocks": self.residual_blocks, "input_skip": self.input_skip}


class Mlp(Module):
    def __init__(self, spec: MlpSpec, rng=None, name="mlp"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        w = spec.layer_widths
        self.hidden = [Dense(w[k], w[k + 1], rng, name=f"{name}.h{k}") for k in range(len(w) - 2)]
        self.blocks = [ResidualBlock(w[-2], spec.alpha, rng, name=f"{name}.r{k}")
                       for k in range(spec.residual_blocks)]
        self.head = Dense(w[-2], w[-1], rng, name=f"{name}.out")
        self.skip = None
        if spec.input_skip:
            self.skip = Dense(w[0], w[-1], rng, name=f"{name}.skip")
            self.skip.weight.data[:] = 0.0
            self.skip.bias.data[:] = 0.0

    def forward(self, x):
        h = x
        for layer in self.hidden:
            h = layer(h).leaky_relu(self.spec.alpha)
        for block in self.blocks:
            h = block(h)
        out = self.head(h)
        return out + self.skip(x) if self.skip is not None else out

    def parameters(self):
        params = []
        for layer in self.hidden:
            params += layer.parameters()
        for block in self.blocks:
            params += block.parameters()
        params += self.head.parameters()
        return params + self.skip.parameters() if self.skip is not None else params


def flat_parameters(params) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)


def set_flat_parameters(params, flat):
    flat = np.asarray(flat, dtype=float)
    total = sum(p.data.size for p in params)
    if flat.size != total:
        raise ValueError(f"expected {total} parameters, got {flat.size}")
    pos = 0
    for p in params:
        p.data = flat[pos:pos + p.data.size].reshape(p.data.shape).copy()
        pos += p.data.size
