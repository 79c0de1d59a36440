"""Small module system: parameter containers and standard layers."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data: np.ndarray, name: str = "") -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Module:
    """Base class; parameters are discovered from attributes recursively."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key in sorted(vars(self)):
            value = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        bound = 0.0 if zero else 1.0 / np.sqrt(fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = kernel * kernel * cin
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(kernel, kernel, cin, cout)))
        self.bias = parameter(np.zeros(cout))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GRUCell(Module):
    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = parameter(rng.uniform(-bound, bound, size=(input_dim, 3 * hidden)))
        self.w_hh = parameter(rng.uniform(-bound, bound, size=(hidden, 3 * hidden)))
        self.b_ih = parameter(np.zeros(3 * hidden))
        self.b_hh = parameter(np.zeros(3 * hidden))

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        return T.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class MLP(Module):
    """Stack of Linear layers with an activation between them."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation: str = "relu",
                 zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        act = T.relu if self.activation == "relu" else T.gelu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class MultiHeadAttention(Module):
    """Multi-head attention; keys/values carry no positional information."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(kv_dim, dim, rng)
        self.wv = Linear(kv_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        q = self._split(self.wq(x))
        k = self._split(self.wk(context))
        v = self._split(self.wv(context))
        out = T.scaled_dot_product_attention(q, k, v)
        b, h, n, dh = out.shape
        return self.wo(out.transpose(0, 2, 1, 3).reshape(b, n, h * dh))
