"""Small parameterized building blocks on top of :mod:`circuitgcl.autodiff`."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

NORMS = ("layer", "none")


class Linear:
    def __init__(self, params: ParamSet, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.W = params.add(f"{name}.W", rng.uniform(-bound, bound, (d_in, d_out)))
        self.b = params.add(f"{name}.b", rng.uniform(-bound, bound, (1, d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)


class Norm:
    """Row layer-norm with learnable gain/bias, or identity."""

    def __init__(self, params: ParamSet, name: str, dim: int, kind: str = "layer"):
        if kind not in NORMS:
            raise ValueError(f"unknown norm {kind!r}")
        self.kind = kind
        if kind == "layer":
            self.gain = params.add(f"{name}.gain", np.ones((1, dim)))
            self.bias = params.add(f"{name}.bias", np.zeros((1, dim)))

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "none":
            return x
        return ad.add(ad.mul(ad.layer_norm_rows(x), self.gain), self.bias)


class MLP:
    """linear -> norm -> GELU -> dropout -> linear"""

    def __init__(self, params: ParamSet, name: str, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, dropout: float = 0.0, norm: str = "layer"):
        self.fc1 = Linear(params, f"{name}.fc1", d_in, d_hidden, rng)
        self.norm = Norm(params, f"{name}.norm", d_hidden, norm)
        self.fc2 = Linear(params, f"{name}.fc2", d_hidden, d_out, rng)
        self.p = dropout

    def __call__(self, x: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = ad.gelu(self.norm(self.fc1(x)))
        h = ad.dropout(h, self.p, train, rng)
        return self.fc2(h)
