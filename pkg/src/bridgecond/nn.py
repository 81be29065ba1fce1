"""Parameter containers and the layers shared by every model component."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Owns Parameters and sub-Modules as attributes; names follow attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{attr}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.standard_normal(shape) * std


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None, zero: bool = False):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.w = Parameter(np.zeros((d_in, d_out)) if zero else normal(rng, (d_in, d_out), std))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class LoRA(Module):
    def __init__(self, d_in: int, d_out: int, rank: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(d_in)
        self.A = Parameter(rng.uniform(-bound, bound, (rank, d_in)))
        self.B = Parameter(np.zeros((d_out, rank)))


class LoRALinear(Module):
    """Frozen base projection plus a trainable low-rank update (B starts at zero)."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator, lora_rng: np.random.Generator):
        self.base = Parameter(normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in)), frozen=True)
        self.lora = LoRA(d_in, d_out, rank, lora_rng)
        self.alpha = alpha

    def __call__(self, x: Tensor) -> Tensor:
        return T.lora_linear(x, self.base, self.lora.A, self.lora.B, self.alpha)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = T.LN_EPS):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., t, d) -> (..., h, t, d/h)."""
    *lead, t, d = x.shape
    x = T.reshape(x, (*lead, t, n_heads, d // n_heads))
    nl = len(lead)
    return T.permute(x, (*range(nl), nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, t, dh) -> (..., t, h*dh)."""
    *lead, h, t, dh = x.shape
    nl = len(lead)
    x = T.permute(x, (*range(nl), nl + 1, nl, nl + 2))
    return T.reshape(x, (*lead, t, h * dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    if n_heads == 1:
        return T.scaled_dot_attention(q, k, v, mask)
    out = T.scaled_dot_attention(split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads), mask)
    return merge_heads(out)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
