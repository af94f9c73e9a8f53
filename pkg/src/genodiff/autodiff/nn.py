"""Parameter containers and the small set of layers the backbones need."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=T.DTYPE, copy=True), requires_grad=True)


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class; parameters and sub-modules are discovered from attributes in definition order."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x @ W + b over the last axis; W has shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class PositionwiseLinear(Module):
    """Independent linear map per sequence position: (B, L, n_in) -> (B, L, n_out)."""

    def __init__(self, length: int, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        shape = (length, n_in, n_out)
        w = np.zeros(shape) if zero else glorot_uniform(rng, shape, n_in, n_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros((length, n_out)))

    def forward(self, x):
        b, length, n_in = x.shape
        y = T.matmul(T.reshape(x, (b, length, 1, n_in)), self.weight)
        return T.reshape(y, (b, length, -1)) + self.bias


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, zero: bool = False):
        shape = (c_out, c_in, kernel)
        w = np.zeros(shape) if zero else glorot_uniform(rng, shape, c_in * kernel, c_out * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x):
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups:
            raise T.ShapeError(f"GroupNorm: {channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.weight = Parameter(glorot_uniform(rng, (n, dim), n, dim))

    def forward(self, idx):
        return T.embedding(self.weight, idx)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise T.ShapeError(f"MultiHeadAttention: {heads} heads do not divide feature size {dim}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's logits uniformly, which softmax ignores
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x):
        h = T.multi_head_attention(self.q(x), self.k(x), self.v(x), self.heads)
        return self.out(h)


def sinusoidal_features(t: np.ndarray, dim: int, max_freq: float = 50.0) -> np.ndarray:
    """Sine/cosine features of t in [0, 1] at log-spaced angular frequencies 1..max_freq.

    The band stops well short of one cycle per diffusion step so the learned
    functions of t stay smooth on small training sets.
    """
    t = np.asarray(t, dtype=T.DTYPE).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))
    args = t * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)
